"""The segmentation model, its private parameters and what goes on the wire.

Query projections of the encoder attention and the channel-selection block
stay on the site. The wire encoder refuses a message that carries any of
them, so a leak is an error rather than a silent transfer.

    python demos/03_model_privacy.py
"""
import numpy as np

from fedst import model as M
from fedst.errors import ProtocolError
from fedst.federation import Direction, RoundMessage, decode_message, encode_message, payload_equal
from fedst.synthdata import SceneSpec, gen_site_dataset, site_text

cfg = M.ModelConfig(h0=28, w0=28, channels=8, window=7, pools=(7, 2, 1, 1), hidden=16, d_ind=8)
tree = M.init_params(cfg, seed=0)
n_private = sum(tree[p].data.size for p in tree.private)
n_total = sum(t.data.size for _, t in tree.items())
print(f"{len(tree)} tensors, {n_total} parameters, {len(tree.private)} private tensors ({n_private} values)")
for path in sorted(tree.private):
    print("  private:", path, tree[path].shape)

ds = gen_site_dataset(SceneSpec(site_id=0, family="A", n_clips=8, h0=28, w0=28, seed=0))
ind = M.build_indicator("text", site_text("A", "nephrectomy"), 0, 0, cfg.d_ind)
out = M.forward(ds.frames[:2], tree, cfg, ind)
print("logits", out.logits.shape, "selected feature", out.feature.shape)

shared = tree.shared_paths
msg = RoundMessage(Direction.SITE_TO_SERVER, 1, 0, tree.shared(), sample_count=len(ds))
wire = encode_message(msg, shared=shared)
back = decode_message(wire, shared=shared)
print(f"message {len(wire)} bytes, round trip exact: {payload_equal(msg.payload, back.payload)}")

leaky = RoundMessage(Direction.SITE_TO_SERVER, 1, 0, tree.state(), sample_count=len(ds))
try:
    encode_message(leaky, shared=shared)
except ProtocolError as err:
    print("refused:", err)
