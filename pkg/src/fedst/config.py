"""Run configuration: an INI file with nested sections, read with configparser.

Layout::

    [run]        output_dir, run_name
    [data]       dir, test_clips, synth_clips, outfed_*
    [model]      h0, w0, c, s, p, m, hidden, d_ind, temporal, prompt, channel_select
    [train]      lr, batch, E, T, lambda1, lambda2, lambda3, mu, seed, ...
    [serq]       enabled, batches_per_round, lr
    [indicator]  kind
    [transport]  mode, port
    [site.<name>] id, text, clips, seed, family

Relative paths are resolved against the directory holding the config file.
The only environment override is ``FEDST_OUTPUT_DIR`` for ``output_dir``.
"""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .federation import SerqConfig, TrainConfig, TransportMode
from .model import IndicatorKind, ModelConfig

OUTPUT_ENV = "FEDST_OUTPUT_DIR"

# config key -> TrainConfig field
_TRAIN_KEYS = {
    "lr": "lr", "weight_decay": "weight_decay", "batch": "batch", "E": "local_steps", "T": "rounds",
    "lambda1": "lambda1", "lambda2": "lambda2", "lambda3": "lambda3", "mu": "mu", "seed": "seed",
    "pretrain_steps": "pretrain_steps", "pretrain_lr": "pretrain_lr", "workers": "workers",
    "eval_every": "eval_every", "weighted_aggregation": "weighted_aggregation",
    "lr_schedule": "lr_schedule",
}
# config key -> ModelConfig field
_MODEL_KEYS = {
    "h0": "h0", "w0": "w0", "c": "channels", "s": "window", "p": "pools", "hidden": "hidden",
    "d_ind": "d_ind", "classes": "classes", "temporal": "temporal", "prompt": "prompt",
    "channel_select": "channel_select",
}


@dataclass
class SiteSpec:
    name: str
    id: int
    text: str
    clips: int
    seed: int
    family: str


@dataclass
class DataSpec:
    dir: Path
    test_clips: int = 32
    synth_clips: int = 200
    synth_seed: int = 0
    outfed_name: str = "E"
    outfed_text: str = "This is the Local site E model and the surgery type is lobectomy"
    outfed_clips: int = 32
    outfed_seed: int = 0
    outfed_family: str = "E"


@dataclass
class RunConfig:
    output_dir: Path
    run_name: str
    data: DataSpec
    model: ModelConfig
    train: TrainConfig
    serq: SerqConfig
    indicator: IndicatorKind
    transport_mode: TransportMode
    port: int
    sites: list[SiteSpec] = field(default_factory=list)
    source: Path | None = None

    def validate(self) -> None:
        self.train.validate()
        if self.model.frames < 1:
            raise ConfigError("m must be >= 0")
        if not self.sites:
            raise ConfigError("at least one [site.<name>] section is required")
        ids = [s.id for s in self.sites]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate site ids {ids}")
        names = [s.name for s in self.sites]
        if self.data.outfed_name in names:
            raise ConfigError(f"out-of-fed site name {self.data.outfed_name!r} clashes with a site")
        for s in self.sites:
            if s.clips < 1:
                raise ConfigError(f"site {s.name}: clips must be >= 1")
        if self.data.test_clips < 1 or self.data.synth_clips < 1 or self.data.outfed_clips < 1:
            raise ConfigError("test_clips, synth_clips and outfed_clips must be >= 1")
        if self.serq.batches_per_round < 0 or self.serq.lr <= 0:
            raise ConfigError("serq batches_per_round must be >= 0 and lr > 0")


def _get(sec: configparser.SectionProxy, key: str, kind, default=None):
    if key not in sec:
        if default is None:
            raise ConfigError(f"[{sec.name}] missing key {key!r}")
        return default
    raw = sec[key]
    try:
        if kind is bool:
            return sec.getboolean(key)
        if kind is tuple:
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {key} = {raw!r}: {exc}") from None


def _section(cp: configparser.ConfigParser, name: str) -> configparser.SectionProxy:
    if not cp.has_section(name):
        cp.add_section(name)
    return cp[name]


def _typed(cls, field_name: str):
    default = next(f.default for f in fields(cls) if f.name == field_name)
    return type(default) if not isinstance(default, tuple) else tuple


def _join(base: Path, rel: str) -> Path:
    # lexical normalisation only, so "configs/../runs" prints as "runs"
    return Path(os.path.normpath(base / rel))


def parse_config(text: str, base_dir: Path | str = ".", source: Path | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep E and T upper case
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    base = Path(base_dir)

    run = _section(cp, "run")
    out = os.environ.get(OUTPUT_ENV) or _get(run, "output_dir", str, "runs")
    run_name = _get(run, "run_name", str, "run")

    d = _section(cp, "data")
    data = DataSpec(dir=_join(base, _get(d, "dir", str, "data")))
    for f in fields(DataSpec):
        if f.name != "dir" and f.name in d:
            setattr(data, f.name, _get(d, f.name, type(f.default)))

    m = _section(cp, "model")
    model_kw = {}
    for key, attr in _MODEL_KEYS.items():
        if key in m:
            model_kw[attr] = _get(m, key, _typed(ModelConfig, attr))
    if "m" in m:
        model_kw["frames"] = _get(m, "m", int) + 1
    try:
        model = ModelConfig(**model_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

    t = _section(cp, "train")
    train_kw = {attr: _get(t, key, _typed(TrainConfig, attr)) for key, attr in _TRAIN_KEYS.items() if key in t}
    train = TrainConfig(**train_kw)
    unknown = set(t) - set(_TRAIN_KEYS)
    unknown |= set(m) - set(_MODEL_KEYS) - {"m"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    s = _section(cp, "serq")
    serq = SerqConfig(enabled=_get(s, "enabled", bool, True),
                      batches_per_round=_get(s, "batches_per_round", int, 10),
                      lr=_get(s, "lr", float, 1e-3))

    try:
        indicator = IndicatorKind(_get(_section(cp, "indicator"), "kind", str, "text"))
        tr = _section(cp, "transport")
        mode = TransportMode(_get(tr, "mode", str, "queue"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    port = _get(tr, "port", int, 0)

    sites = []
    for name in cp.sections():
        if not name.startswith("site."):
            continue
        sec = cp[name]
        label = name.split(".", 1)[1]
        sites.append(SiteSpec(name=label, id=_get(sec, "id", int), text=_get(sec, "text", str),
                              clips=_get(sec, "clips", int), seed=_get(sec, "seed", int, 0),
                              family=_get(sec, "family", str, label)))
    sites.sort(key=lambda site: site.id)

    cfg = RunConfig(output_dir=_join(base, out), run_name=run_name, data=data, model=model, train=train,
                    serq=serq, indicator=indicator, transport_mode=mode, port=port, sites=sites,
                    source=source)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), base_dir=path.parent, source=path)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v.value if hasattr(v, "value") else v)


def dump_config(cfg: RunConfig, base_dir: Path | str | None = None) -> str:
    """Fully resolved config text; paths are written absolute unless ``base_dir`` is given."""
    def rel(p: Path) -> str:
        p = Path(p).resolve()
        if base_dir is None:
            return str(p)
        return os.path.relpath(p, Path(base_dir).resolve())

    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {"output_dir": rel(cfg.output_dir), "run_name": cfg.run_name}
    data = {k: _fmt(v) for k, v in asdict(cfg.data).items() if k != "dir"}
    cp["data"] = {"dir": rel(cfg.data.dir), **data}
    model = {key: _fmt(getattr(cfg.model, attr)) for key, attr in _MODEL_KEYS.items()}
    model["m"] = str(cfg.model.frames - 1)
    cp["model"] = model
    cp["train"] = {key: _fmt(getattr(cfg.train, attr)) for key, attr in _TRAIN_KEYS.items()}
    cp["serq"] = {k: _fmt(v) for k, v in asdict(cfg.serq).items()}
    cp["indicator"] = {"kind": _fmt(cfg.indicator)}
    cp["transport"] = {"mode": _fmt(cfg.transport_mode), "port": str(cfg.port)}
    for s in cfg.sites:
        cp[f"site.{s.name}"] = {"id": str(s.id), "text": s.text, "clips": str(s.clips),
                                "seed": str(s.seed), "family": s.family}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
