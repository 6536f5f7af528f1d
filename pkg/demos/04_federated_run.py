"""A tiny federated run: FedST against FedAvg and local training.

Three small sites train for a few rounds on the in-process transport. The
script prints per-round Dice, the traffic, and the SERQ steps the server
took on the synthetic set. Expect small numbers at this scale; the desk
config in configs/ is the one that separates the methods.

    python demos/04_federated_run.py
"""
import numpy as np

from fedst import model as M
from fedst.federation import (SerqConfig, SiteData, TrainConfig, plain_config, run_fedavg,
                              run_federation, run_local_only)
from fedst.synthdata import SceneSpec, gen_site_dataset, gen_synth_dataset, site_text

cfg = M.ModelConfig(h0=28, w0=28, channels=8, window=7, pools=(7, 2, 1, 1), hidden=16, d_ind=8)
tc = TrainConfig(lr=6e-3, rounds=4, local_steps=5, batch=2, pretrain_steps=20, seed=0)
serq = SerqConfig(enabled=True, batches_per_round=3)

sites = []
for i, (name, family, surgery) in enumerate([("A", "A", "nephrectomy"), ("B", "B", "nephrectomy"),
                                             ("C", "C", "prostatectomy")]):
    text = site_text(name, surgery)
    ds = gen_site_dataset(SceneSpec(site_id=i, family=family, text=text, n_clips=16, h0=28, w0=28, seed=0))
    idx = np.arange(len(ds))
    sites.append(SiteData(i, name, text, ds.subset(idx[:8]), ds.subset(idx[8:])))
synth = gen_synth_dataset(SceneSpec(site_id=1000, family="SYN", n_clips=16, h0=28, w0=28, seed=0))

fedst = run_federation(cfg, sites, synth, tc, serq,
                       on_round=lambda t, rep: print(f"  round {t}: mean dice {rep.mean():.3f}") if rep else None)
print(f"FedST    {fedst.messages} messages, {fedst.transport_bytes} bytes, "
      f"server steps {fedst.server.steps if fedst.server else 0}")
plain = plain_config(cfg)
avg = run_fedavg(plain, sites, synth, tc)
local = run_local_only(plain, sites, synth, tc)
for name, res in (("FedST", fedst), ("FedAvg", avg), ("local", local)):
    rep = res.final_report
    per_site = {s: round(rep.site_mean(s), 3) for s in rep.sites}
    print(f"{name:>7}  mean dice {rep.mean():.3f}  {per_site}")
