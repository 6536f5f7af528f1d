"""Benchmark plumbing shared by the CLI, the demos and the acceptance tests.

A run directory holds::

    config.ini        resolved config snapshot (re-runnable)
    seeds.json        every seed the run derived
    metrics.csv       per-round, per-site, per-class scores
    outfed.csv        global model on the out-of-federation site
    traffic.csv       cumulative message bytes after each round
    curves.svg        mean Dice per site over rounds
    checkpoints/      site_<name>.npz and global.npz
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import model as M
from .config import RunConfig, dump_config
from .errors import ConfigError, DataError
from .federation import (RunResult, SiteData, evaluate, plain_config, run_federation, run_fedavg,
                         run_local_only)
from .metrics import MetricReport, write_csv
from .tensor import Tensor
from .synthdata import (Dataset, SceneSpec, gen_out_of_fed_site, gen_site_dataset, gen_synth_dataset,
                        load_dataset, save_dataset)

logger = logging.getLogger(__name__)

METHODS = ("fedst", "fedavg", "local")
TOGGLES = ("ts", "prompt", "cs", "serq")
SYNTH_SITE_ID = 1000
VIDEO_LENGTH = SceneSpec.video_length


# ================================================================ datasets

def dataset_paths(cfg: RunConfig) -> dict[str, Path]:
    paths = {s.name: cfg.data.dir / f"site_{s.name}.fstd" for s in cfg.sites}
    paths["@synth"] = cfg.data.dir / "synth.fstd"
    paths["@outfed"] = cfg.data.dir / f"outfed_{cfg.data.outfed_name}.fstd"
    return paths


def outfed_site_id(cfg: RunConfig) -> int:
    return max(s.id for s in cfg.sites) + 1


def _scene(cfg: RunConfig, **kw) -> SceneSpec:
    m = cfg.model
    return SceneSpec(h0=m.h0, w0=m.w0, frames=m.frames, **kw)


def generate(cfg: RunConfig, force: bool = False) -> dict[str, Path]:
    """Write K site files, the synthetic set and the out-of-fed site; refuses to overwrite."""
    paths = dataset_paths(cfg)
    existing = [p for p in paths.values() if p.exists()]
    if existing and not force:
        raise DataError(f"refusing to overwrite {len(existing)} dataset file(s) without --force, "
                        f"e.g. {existing[0]}")
    cfg.data.dir.mkdir(parents=True, exist_ok=True)
    test = cfg.data.test_clips
    for s in cfg.sites:
        if s.clips % VIDEO_LENGTH:
            raise ConfigError(f"site {s.name}: clips={s.clips} must be a multiple of the "
                              f"video length {VIDEO_LENGTH} so no video straddles the split")
        ds = gen_site_dataset(_scene(cfg, site_id=s.id, family=s.family, text=s.text,
                                     n_clips=s.clips + test, seed=s.seed))
        ds.meta["train_clips"] = s.clips
        ds.meta["name"] = s.name
        save_dataset(ds, paths[s.name])
    synth = gen_synth_dataset(_scene(cfg, site_id=SYNTH_SITE_ID, family="SYN", text="synthetic",
                                     n_clips=cfg.data.synth_clips, seed=cfg.data.synth_seed))
    synth.meta["name"] = "synth"
    save_dataset(synth, paths["@synth"])
    d = cfg.data
    oof = gen_out_of_fed_site(_scene(cfg, site_id=outfed_site_id(cfg), family=d.outfed_family,
                                     text=d.outfed_text, n_clips=d.outfed_clips, seed=d.outfed_seed))
    oof.meta["name"] = d.outfed_name
    save_dataset(oof, paths["@outfed"])
    return paths


def train_test(ds: Dataset) -> tuple[Dataset, Dataset]:
    """Split a site file into its training clips and the held-out videos after them."""
    n_train = int(ds.meta.get("train_clips", len(ds)))
    if not 0 < n_train <= len(ds):
        raise DataError(f"train_clips={n_train} does not fit a file of {len(ds)} clips")
    idx = np.arange(len(ds))
    return ds.subset(idx[:n_train]), ds.subset(idx[n_train:])


def _load(path: Path) -> Dataset:
    if not path.is_file():
        raise DataError(f"dataset file missing: {path} (run `fedst gen` first)")
    return load_dataset(path)


@dataclass
class Benchmark:
    sites: list[SiteData]
    synth: Dataset
    outfed: Dataset


def _check_dims(cfg: RunConfig, ds: Dataset, path: Path) -> None:
    m = cfg.model
    if ds.frames.shape[2:4] != (m.h0, m.w0):
        raise DataError(f"{path}: frames are {ds.frames.shape[2:4]}, config wants {(m.h0, m.w0)}")


def load_benchmark(cfg: RunConfig) -> Benchmark:
    paths = dataset_paths(cfg)
    sites = []
    for s in cfg.sites:
        ds = _load(paths[s.name])
        _check_dims(cfg, ds, paths[s.name])
        if int(ds.meta.get("site_id", s.id)) != s.id:
            raise DataError(f"{paths[s.name]} belongs to site {ds.meta.get('site_id')}, not {s.id}")
        tr, te = train_test(ds)
        if len(te) == 0:
            raise DataError(f"{paths[s.name]} has no test clips")
        sites.append(SiteData(s.id, s.name, s.text, tr, te))
    synth = _load(paths["@synth"])
    outfed = _load(paths["@outfed"])
    _check_dims(cfg, outfed, paths["@outfed"])
    return Benchmark(sites, synth, outfed)


# ================================================================== methods

def apply_toggles(cfg: RunConfig, toggles: Sequence[str]) -> RunConfig:
    """Switch components off: ts (temporal block), prompt, cs (channel selection), serq."""
    model, serq = cfg.model, cfg.serq
    for t in toggles:
        if t == "ts":
            model = model.with_(temporal=False)
        elif t == "prompt":
            model = model.with_(prompt=False)
        elif t == "cs":
            model = model.with_(channel_select=False)
        elif t == "serq":
            serq = replace(serq, enabled=False)
        else:
            raise ConfigError(f"unknown toggle {t!r}; choose from {TOGGLES}")
    return replace(cfg, model=model, serq=serq)


def method_model(cfg: RunConfig, method: str) -> M.ModelConfig:
    if method == "fedst":
        return cfg.model
    if method in ("fedavg", "local"):
        return plain_config(cfg.model)
    raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")


def run_method(cfg: RunConfig, method: str, bench: Benchmark, capture: bool = False) -> RunResult:
    model = method_model(cfg, method)
    tc = replace(cfg.train)
    if method == "fedst":
        return run_federation(model, bench.sites, bench.synth, tc, cfg.serq,
                              indicator_kind=cfg.indicator, transport_mode=cfg.transport_mode,
                              port=cfg.port, capture=capture, method=method)
    if method == "fedavg":
        return run_fedavg(model, bench.sites, bench.synth, tc, transport_mode=cfg.transport_mode,
                          port=cfg.port, capture=capture)
    return run_local_only(model, bench.sites, bench.synth, tc, indicator_kind=cfg.indicator)


def outfed_indicator(cfg: RunConfig, model: M.ModelConfig) -> M.Indicator | None:
    if not model.prompt:
        return None
    return M.build_indicator(cfg.indicator, cfg.data.outfed_text, outfed_site_id(cfg),
                             cfg.train.seed, model.d_ind)


def evaluate_outfed(cfg: RunConfig, model: M.ModelConfig, tree: M.ParamTree, outfed: Dataset,
                    round_idx: int = 0) -> MetricReport:
    report = MetricReport(round=round_idx)
    evaluate(tree, model, outfed, outfed_indicator(cfg, model), report, cfg.data.outfed_name)
    return report


# ============================================================== checkpoints

def save_checkpoint(path: Path, tree: M.ParamTree, model: M.ModelConfig,
                    indicator: M.Indicator | None, name: str, indicator_kind: str = "text",
                    seed: int = 0) -> Path:
    """Full tree, private path set, model config and the frozen indicator (if any).

    A checkpoint without an indicator still records the kind and seed needed to
    build one for whatever site it is evaluated on.
    """
    arrays = {f"param/{k}": t.data for k, t in tree.items()}
    arrays["private"] = np.array(sorted(tree.private), dtype=str)
    arrays["config"] = np.array(json.dumps(asdict(model)))
    arrays["name"] = np.array(name)
    arrays["indicator_kind"] = np.array(M.IndicatorKind(indicator.kind if indicator else indicator_kind).value)
    arrays["seed"] = np.array(seed, dtype=np.int64)
    if indicator is not None:
        arrays["indicator_xi"] = indicator.xi
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


@dataclass
class Checkpoint:
    tree: M.ParamTree
    model: M.ModelConfig
    indicator: M.Indicator | None
    name: str
    indicator_kind: M.IndicatorKind
    seed: int


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            params = {k[len("param/"):]: Tensor(z[k], requires_grad=True) for k in z.files
                      if k.startswith("param/")}
            private = frozenset(str(p) for p in z["private"])
            cfg = json.loads(str(z["config"]))
            name = str(z["name"])
            kind = M.IndicatorKind(str(z["indicator_kind"]))
            seed = int(z["seed"])
            indicator = None
            if "indicator_xi" in z.files:
                indicator = M.Indicator(z["indicator_xi"].copy(), kind)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from None
    model = M.ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
    return Checkpoint(M.ParamTree(params, private), model, indicator, name, kind, seed)


# ================================================================ artifacts

def run_dir(cfg: RunConfig, label: str) -> Path:
    return cfg.output_dir / cfg.run_name / label


def seed_record(cfg: RunConfig, method: str) -> dict:
    t = cfg.train.seed
    return {
        "method": method,
        "train_seed": t,
        "init_seed": t,
        "pretrain_stream": [t, 3],
        "site_streams": {s.name: [t, 1, s.id] for s in cfg.sites},
        "server_synth_stream": [t, 2],
        "descriptor_init": [t, 7],
        "site_data_seeds": {s.name: s.seed for s in cfg.sites},
        "synth_data_seed": cfg.data.synth_seed,
        "outfed_data_seed": cfg.data.outfed_seed,
    }


def write_traffic(path: Path, traffic: list[dict]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("round", "messages", "bytes_up", "bytes_down"))
        for row in traffic:
            w.writerow((row["round"], row["messages"], row["bytes_up"], row["bytes_down"]))
    return path


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def curves_svg(reports: Sequence[MetricReport], title: str = "", width: int = 480, height: int = 300) -> str:
    """Polyline of mean Dice per site over rounds, written as plain SVG."""
    left, right, top, bottom = 48, 90, 28, 36
    pw, ph = width - left - right, height - top - bottom
    sites = list(reports[0].sites) if reports else []
    max_round = max((r.round for r in reports), default=1) or 1

    def xy(rnd, val):
        return left + pw * rnd / max_round, top + ph * (1.0 - val)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{left}" y="{top - 10}">{escape(title)}</text>',
           f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">round</text>',
           f'<text x="12" y="{top + ph / 2:.1f}" transform="rotate(-90 12 {top + ph / 2:.1f})" '
           f'text-anchor="middle">mean Dice</text>']
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        _, y = xy(0, v)
        out.append(f'<line x1="{left}" x2="{left + pw}" y1="{y:.1f}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.2f}</text>')
    for i, site in enumerate(sites):
        colour = _PALETTE[i % len(_PALETTE)]
        pts = " ".join("%.1f,%.1f" % xy(r.round, r.site_mean(site, "dice")) for r in reports)
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 14 * (i + 1)
        out.append(f'<line x1="{left + pw + 10}" x2="{left + pw + 26}" y1="{ly}" y2="{ly}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 30}" y="{ly + 4}">{escape(site)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


@dataclass
class RunSummary:
    label: str
    directory: Path
    result: RunResult
    outfed: MetricReport
    model: M.ModelConfig

    def row(self) -> dict:
        final = self.result.final_report
        row = {"config": self.label, "mean_dice": final.mean("dice") if final else None}
        if final:
            for s in final.sites:
                row[s] = final.site_mean(s, "dice")
        row["outfed_dice"] = self.outfed.mean("dice")
        row["server_steps"] = self.result.server.steps if self.result.server else 0
        row["bytes"] = self.result.transport_bytes
        return row


def execute(cfg: RunConfig, method: str, label: str | None = None, bench: Benchmark | None = None,
            force: bool = False) -> RunSummary:
    """Run one method end to end and write its run directory."""
    label = label or method
    directory = run_dir(cfg, label)
    if (directory / "metrics.csv").exists() and not force:
        raise DataError(f"run directory {directory} already holds results; pass --force to replace")
    bench = bench or load_benchmark(cfg)
    model = method_model(cfg, method)
    result = run_method(cfg, method, bench)
    outfed = evaluate_outfed(cfg, model, result.global_model, bench.outfed,
                             round_idx=cfg.train.rounds)

    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.ini").write_text(dump_config(cfg))
    (directory / "seeds.json").write_text(json.dumps(seed_record(cfg, method), indent=2) + "\n")
    run_id = f"{cfg.run_name}/{label}"
    write_csv(directory / "metrics.csv", [row for r in result.reports for row in r.rows(run_id)])
    write_csv(directory / "outfed.csv", list(outfed.rows(run_id)))
    write_traffic(directory / "traffic.csv", result.traffic)
    (directory / "curves.svg").write_text(curves_svg(result.reports, title=run_id))
    ckpt = directory / "checkpoints"
    for s in bench.sites:
        save_checkpoint(ckpt / f"site_{s.name}.npz", result.site_models[s.name], model,
                        result.indicators[s.name], s.name, cfg.indicator, cfg.train.seed)
    save_checkpoint(ckpt / "global.npz", result.global_model, model, None, "global",
                    cfg.indicator, cfg.train.seed)
    if result.server is not None:
        (directory / "server.json").write_text(json.dumps(
            {"steps": result.server.steps, "rounds": result.server.log}, indent=2) + "\n")
    return RunSummary(label, directory, result, outfed, model)


def ablate(cfg: RunConfig, toggles: Sequence[str], force: bool = False,
           bench: Benchmark | None = None) -> list[RunSummary]:
    """Full model plus one run per toggle, each with that single component switched off."""
    bench = bench or load_benchmark(cfg)
    rows = [execute(cfg, "fedst", label="ablate-full", bench=bench, force=force)]
    for t in toggles:
        rows.append(execute(apply_toggles(cfg, [t]), "fedst", label=f"ablate-no-{t}", bench=bench,
                            force=force))
    return rows


# =============================================================== comparisons

VARIANTS = ("fedst", "fedavg", "local", "no-ts", "no-serq")


@dataclass
class Outcome:
    """Headline numbers of one method or ablation variant."""

    variant: str
    mean_dice: float
    site_dice: dict[str, float]
    outfed_dice: float
    seconds: float


def reseed(cfg: RunConfig, seed: int) -> RunConfig:
    """Same benchmark shape with every data and training seed derived from ``seed``."""
    sites = [replace(s, seed=seed) for s in cfg.sites]
    data = replace(cfg.data, synth_seed=seed, outfed_seed=100 + seed)
    return replace(cfg, sites=sites, data=data, train=replace(cfg.train, seed=seed))


def run_variant(cfg: RunConfig, variant: str, bench: Benchmark) -> Outcome:
    """Train one variant (a method, or FedST with one component off) and score it."""
    start = time.perf_counter()
    if variant.startswith("no-"):
        cfg, method = apply_toggles(cfg, [variant[3:]]), "fedst"
    else:
        method = variant
    result = run_method(cfg, method, bench)
    final = result.final_report
    outfed = evaluate_outfed(cfg, method_model(cfg, method), result.global_model, bench.outfed)
    return Outcome(variant, final.mean("dice"), {s: final.site_mean(s, "dice") for s in final.sites},
                   outfed.mean("dice"), time.perf_counter() - start)


def compare(cfg: RunConfig, variants: Sequence[str] = VARIANTS, bench: Benchmark | None = None
            ) -> dict[str, Outcome]:
    bench = bench or load_benchmark(cfg)
    return {v: run_variant(cfg, v, bench) for v in variants}


def format_table(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]

    def cell(v):
        if v is None:
            return "-"
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    table = [[k for k in keys]] + [[cell(r.get(k)) for k in keys] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(keys))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_table(path: Path, rows: Sequence[dict]) -> Path:
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else repr(r[k]) if isinstance(r.get(k), float) else r[k])
                        for k in keys})
    return path


# =============================================================== evaluation

def eval_checkpoint(ckpt_path, dataset_path, split: str = "auto",
                    indicator_text: str | None = None) -> MetricReport:
    """Score a checkpoint on a dataset file; one forward pass per clip.

    ``split`` is ``test`` (held-out videos of a site file), ``all``, or ``auto``
    (test when the file records a training prefix). A global checkpoint carries
    no indicator, so one is built from ``indicator_text`` or the file's own text.
    """
    ck = load_checkpoint(ckpt_path)
    ds = _load(Path(dataset_path))
    if ds.frames.shape[2:4] != (ck.model.h0, ck.model.w0):
        raise DataError(f"dataset frames {ds.frames.shape[2:4]} do not match the checkpoint")
    if split == "auto":
        split = "test" if "train_clips" in ds.meta else "all"
    if split == "test":
        _, ds = train_test(ds)
    elif split != "all":
        raise ConfigError(f"unknown split {split!r}")
    indicator = ck.indicator
    if indicator is None and ck.model.prompt:
        text = indicator_text or ds.meta.get("text", "")
        indicator = M.build_indicator(ck.indicator_kind, text, int(ds.meta.get("site_id", 0)), ck.seed,
                                      ck.model.d_ind)
    report = MetricReport(round=0)
    evaluate(ck.tree, ck.model, ds, indicator, report, str(ds.meta.get("name", ck.name)))
    return report
