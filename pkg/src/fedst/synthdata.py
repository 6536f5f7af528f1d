"""Procedural multi-site "surgical" video clips.

Every site draws its instruments from one shared distribution (shaft bar,
wrist disc, two jaw wedges, constant-velocity drift plus rotation), while its
background is a band-limited random texture whose colour, frequency band and
contrast come from a site-specific range. Ranges of different families never
overlap. The synthetic "simulator" set renders the same instruments flat-shaded
on an almost featureless background, one frame per clip.

Clips are cut from short videos: the clip at time ``ts`` holds frames
``ts-m .. ts``; slots before the start of the video repeat the current frame.
"""
from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError

BACKGROUND, SHAFT, WRIST, JAW = 0, 1, 2, 3
N_CLASSES = 4

# per-family background ranges; (lo, hi) pairs never overlap between families
BACKGROUND_FAMILIES = {
    "A": dict(hue=(0.00, 0.06), freq=(1.0, 2.0), contrast=(0.10, 0.14)),
    "B": dict(hue=(0.08, 0.14), freq=(2.2, 3.2), contrast=(0.15, 0.19)),
    "C": dict(hue=(0.88, 0.94), freq=(3.4, 4.4), contrast=(0.20, 0.24)),
    "D": dict(hue=(0.80, 0.86), freq=(4.6, 5.6), contrast=(0.25, 0.29)),
    # out-of-federation family: unseen hue, band and contrast
    "E": dict(hue=(0.16, 0.22), freq=(5.8, 7.0), contrast=(0.30, 0.34)),
    # simulator: no texture to speak of
    "SYN": dict(hue=(0.60, 0.66), freq=(0.5, 0.8), contrast=(0.00, 0.01)),
}

# shared instrument distribution, identical for every site
INSTRUMENT_RANGES = dict(
    shaft_width=(3.0, 8.0),
    wrist_radius=(3.0, 5.5),
    jaw_length=(5.0, 11.0),
    jaw_open=(math.radians(12), math.radians(30)),
    jaw_halfwidth=math.radians(11),
    speed=(1.0, 2.5),
    spin=(-math.radians(4), math.radians(4)),
    shade=dict(shaft=(0.40, 0.70), wrist=(0.20, 0.40), jaw=(0.62, 0.90)),
)


def site_text(name: str, surgery: str) -> str:
    return f"This is the Local site {name} model and the surgery type is {surgery}"


@dataclass
class SceneSpec:
    site_id: int
    family: str
    text: str = ""
    n_clips: int = 32
    h0: int = 56
    w0: int = 56
    frames: int = 4
    video_length: int = 8
    max_instruments: int = 2
    flat: bool = False
    noise: float = 0.02
    decoys: tuple[int, int] = (1, 3)   # static instrument-like clutter per video, inclusive range
    seed: int = 0
    divisor: int = 1  # h0, w0 must be multiples of this (lcm of patch*window/pool sizes)

    def validate(self) -> None:
        if self.family not in BACKGROUND_FAMILIES:
            raise ConfigError(f"unknown background family {self.family!r}")
        if self.divisor < 1 or self.h0 % self.divisor or self.w0 % self.divisor:
            raise ConfigError(f"frame {self.h0}x{self.w0} not divisible by {self.divisor}")
        if self.frames < 1 or self.n_clips < 1 or self.video_length < 1:
            raise ConfigError("frames, n_clips and video_length must be positive")
        if not 1 <= self.max_instruments <= 2:
            raise ConfigError("1 or 2 instruments per video")
        lo, hi = self.decoys
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad decoy range {self.decoys}")


# ================================================================ geometry

@dataclass
class Instrument:
    """Instrument pose at a single frame plus its fixed shape parameters."""

    tip: np.ndarray          # wrist centre (row, col)
    angle: float             # direction the instrument points, radians
    shaft_width: float
    wrist_radius: float
    jaw_length: float
    jaw_open: float
    shades: tuple[float, float, float]

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.sin(self.angle), math.cos(self.angle)])


def _grid(h0: int, w0: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.mgrid[0:h0, 0:w0].astype(np.float64)
    return rows + 0.5, cols + 0.5


def part_regions(inst: Instrument, h0: int, w0: int) -> dict[int, np.ndarray]:
    """Boolean membership of each pixel centre in the analytic part shapes."""
    r, c = _grid(h0, w0)
    d = inst.direction
    dr, dc = r - inst.tip[0], c - inst.tip[1]
    along = dr * d[0] + dc * d[1]
    across = np.abs(-dr * d[1] + dc * d[0])
    shaft = (along <= 0.0) & (across <= inst.shaft_width / 2)
    wrist = dr ** 2 + dc ** 2 <= inst.wrist_radius ** 2
    base = inst.tip + d * inst.wrist_radius * 0.6
    br, bc = r - base[0], c - base[1]
    rad = np.hypot(br, bc)
    ang = np.arctan2(br, bc)
    jaw = np.zeros_like(shaft)
    for sign in (-1.0, 1.0):
        axis = inst.angle + sign * inst.jaw_open
        delta = np.angle(np.exp(1j * (ang - axis)))
        jaw |= (rad <= inst.jaw_length) & (np.abs(delta) <= INSTRUMENT_RANGES["jaw_halfwidth"])
    return {SHAFT: shaft, WRIST: wrist, JAW: jaw}


def render_instrument(image: np.ndarray, mask: np.ndarray, inst: Instrument, flat: bool) -> None:
    """Paint shaft, then jaws, then wrist (later parts win) into image and mask in place."""
    h0, w0 = mask.shape
    regions = part_regions(inst, h0, w0)
    r, c = _grid(h0, w0)
    d = inst.direction
    across = np.abs(-(r - inst.tip[0]) * d[1] + (c - inst.tip[1]) * d[0])
    for label, shade in zip((SHAFT, JAW, WRIST), (inst.shades[0], inst.shades[2], inst.shades[1])):
        region = regions[label]
        if flat:
            value = np.full(region.sum(), shade)
        elif label == SHAFT:
            # cylinder highlight along the shaft axis
            value = shade + 0.12 * (1.0 - (2 * across[region] / inst.shaft_width) ** 2)
        else:
            value = np.full(region.sum(), shade)
        image[region] = value[:, None] * np.array([1.0, 1.0, 1.02])
        mask[region] = label


def _sample_instrument_params(rng: np.random.Generator, h0: int, w0: int) -> dict:
    R = INSTRUMENT_RANGES
    tip = np.array([rng.uniform(0.3, 0.7) * h0, rng.uniform(0.3, 0.7) * w0])
    heading = rng.uniform(0, 2 * math.pi)
    return dict(
        tip=tip,
        angle=rng.uniform(0, 2 * math.pi),
        velocity=rng.uniform(*R["speed"]) * np.array([math.sin(heading), math.cos(heading)]),
        spin=rng.uniform(*R["spin"]),
        shaft_width=rng.uniform(*R["shaft_width"]),
        wrist_radius=rng.uniform(*R["wrist_radius"]),
        jaw_length=rng.uniform(*R["jaw_length"]),
        jaw_open=rng.uniform(*R["jaw_open"]),
        shades=(rng.uniform(*R["shade"]["shaft"]), rng.uniform(*R["shade"]["wrist"]),
                rng.uniform(*R["shade"]["jaw"])),
    )


def instrument_track(params: dict, n_frames: int, h0: int, w0: int) -> list[Instrument]:
    """Constant-velocity drift and spin, reflecting off a margin so the tip stays in view."""
    tip = params["tip"].astype(np.float64).copy()
    vel = params["velocity"].astype(np.float64).copy()
    angle = params["angle"]
    lo = np.array([0.15 * h0, 0.15 * w0])
    hi = np.array([0.85 * h0, 0.85 * w0])
    out = []
    for _ in range(n_frames):
        out.append(Instrument(tip=tip.copy(), angle=angle, shaft_width=params["shaft_width"],
                              wrist_radius=params["wrist_radius"], jaw_length=params["jaw_length"],
                              jaw_open=params["jaw_open"], shades=params["shades"]))
        tip = tip + vel
        for ax in range(2):
            if tip[ax] < lo[ax] or tip[ax] > hi[ax]:
                vel[ax] = -vel[ax]
                tip[ax] = np.clip(tip[ax], lo[ax], hi[ax])
        angle += params["spin"]
    return out


# ================================================================= clutter

def sample_decoys(rng: np.random.Generator, h0: int, w0: int, n: int) -> list[dict]:
    """Static background objects shaded like instrument parts: short capped bars and discs."""
    R = INSTRUMENT_RANGES
    out = []
    for _ in range(n):
        centre = np.array([rng.uniform(0.1, 0.9) * h0, rng.uniform(0.1, 0.9) * w0])
        if rng.random() < 0.6:
            out.append(dict(kind="bar", centre=centre, angle=rng.uniform(0, math.pi),
                            length=rng.uniform(8.0, 18.0), width=rng.uniform(*R["shaft_width"]),
                            shade=rng.uniform(*R["shade"]["shaft"])))
        else:
            part = "jaw" if rng.random() < 0.5 else "wrist"
            out.append(dict(kind="disc", centre=centre, radius=rng.uniform(*R["wrist_radius"]),
                            shade=rng.uniform(*R["shade"][part])))
    return out


def render_decoys(image: np.ndarray, decoys: list[dict]) -> None:
    """Paint decoys into a background in place; they stay background in the mask."""
    h0, w0 = image.shape[:2]
    r, c = _grid(h0, w0)
    for d in decoys:
        dr, dc = r - d["centre"][0], c - d["centre"][1]
        if d["kind"] == "bar":
            u = np.array([math.sin(d["angle"]), math.cos(d["angle"])])
            along = dr * u[0] + dc * u[1]
            across = np.abs(-dr * u[1] + dc * u[0])
            region = (np.abs(along) <= d["length"] / 2) & (across <= d["width"] / 2)
            value = d["shade"] + 0.12 * (1.0 - (2 * across[region] / d["width"]) ** 2)
        else:
            region = dr ** 2 + dc ** 2 <= d["radius"] ** 2
            value = np.full(region.sum(), d["shade"])
        image[region] = value[:, None] * np.array([1.0, 1.0, 1.02])


# ============================================================== background

def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - math.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def sample_background_params(rng: np.random.Generator, family: str) -> dict:
    fam = BACKGROUND_FAMILIES[family]
    n_waves = 6
    return dict(
        hue=rng.uniform(*fam["hue"]),
        contrast=rng.uniform(*fam["contrast"]),
        freqs=rng.uniform(*fam["freq"], size=n_waves),
        thetas=rng.uniform(0, math.pi, size=n_waves),
        phases=rng.uniform(0, 2 * math.pi, size=n_waves),
        tint=rng.uniform(-1, 1, size=(n_waves, 3)),
    )


def render_background(params: dict, h0: int, w0: int) -> np.ndarray:
    r, c = _grid(h0, w0)
    base = _hsv_to_rgb(params["hue"], 0.55, 0.62)
    img = np.broadcast_to(base, (h0, w0, 3)).copy()
    n = len(params["freqs"])
    for f, th, ph, tint in zip(params["freqs"], params["thetas"], params["phases"], params["tint"]):
        wave = np.sin(2 * math.pi * f * (r * math.sin(th) / h0 + c * math.cos(th) / w0) + ph)
        img += params["contrast"] / math.sqrt(n) * wave[..., None] * (0.6 + 0.4 * tint)
    return img


def gradient_energy(image: np.ndarray) -> float:
    """Mean squared finite-difference gradient, averaged over channels."""
    gr = np.diff(image, axis=0)
    gc = np.diff(image, axis=1)
    return float((gr ** 2).mean() + (gc ** 2).mean())


def background_energy(image: np.ndarray, mask: np.ndarray) -> float:
    """Gradient energy over neighbouring pixel pairs that are both background."""
    bg = np.asarray(mask) == BACKGROUND
    rows = bg[1:] & bg[:-1]
    cols = bg[:, 1:] & bg[:, :-1]
    gr = (np.diff(image, axis=0) ** 2).mean(axis=-1)[rows]
    gc = (np.diff(image, axis=1) ** 2).mean(axis=-1)[cols]
    return float(gr.mean() + gc.mean())


# ================================================================= dataset

@dataclass
class Dataset:
    """Clips in memory: frames (N, m+1, h0, w0, 3) float64, masks (N, m+1, h0, w0) uint8."""

    frames: np.ndarray
    masks: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def video_ids(self) -> np.ndarray:
        return np.asarray(self.meta.get("video_ids", np.zeros(len(self), dtype=int)))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        meta = dict(self.meta)
        if "video_ids" in meta:
            meta["video_ids"] = [int(v) for v in np.asarray(meta["video_ids"])[idx]]
        return Dataset(self.frames[idx], self.masks[idx], meta)

    def split(self, test_fraction: float = 0.25) -> tuple["Dataset", "Dataset"]:
        """Train/test split along video boundaries; the last videos go to test."""
        vids = self.video_ids
        uniq = np.unique(vids)
        n_test = max(1, int(round(len(uniq) * test_fraction))) if len(uniq) > 1 else 0
        test_videos = set(uniq[len(uniq) - n_test:].tolist())
        is_test = np.array([v in test_videos for v in vids], dtype=bool)
        return self.subset(np.flatnonzero(~is_test)), self.subset(np.flatnonzero(is_test))

    def current_masks(self) -> np.ndarray:
        return self.masks[:, -1]


def _video_clips(frames: list[np.ndarray], masks: list[np.ndarray], m1: int):
    for ts in range(len(frames)):
        idx = [k if k >= 0 else ts for k in range(ts - m1 + 1, ts + 1)]
        yield np.stack([frames[k] for k in idx]), np.stack([masks[k] for k in idx])


def _render_video(spec: SceneSpec, rng: np.random.Generator):
    h0, w0 = spec.h0, spec.w0
    bg_params = sample_background_params(rng, spec.family)
    background = render_background(bg_params, h0, w0)
    n_inst = int(rng.integers(1, spec.max_instruments + 1))
    inst_params = [_sample_instrument_params(rng, h0, w0) for _ in range(n_inst)]
    tracks = [instrument_track(p, spec.video_length, h0, w0) for p in inst_params]
    decoys = sample_decoys(rng, h0, w0, int(rng.integers(spec.decoys[0], spec.decoys[1] + 1)))
    render_decoys(background, decoys)
    frames, masks = [], []
    for t in range(spec.video_length):
        img = background.copy()
        mask = np.zeros((h0, w0), dtype=np.uint8)
        for track in tracks:
            render_instrument(img, mask, track[t], spec.flat)
        if spec.noise:
            img = img + rng.normal(0.0, spec.noise, img.shape)
        frames.append(img)
        masks.append(mask)
    return frames, masks, bg_params, inst_params


def _video(spec: SceneSpec, v: int):
    # one independent stream per video so videos can be generated in any order
    rng = np.random.default_rng([spec.seed, spec.site_id, v])
    return _render_video(spec, rng)


def _generate(spec: SceneSpec, workers: int = 1) -> Dataset:
    spec.validate()
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    n_videos = math.ceil(spec.n_clips / spec.video_length)
    if workers == 1 or n_videos == 1:
        videos = [_video(spec, v) for v in range(n_videos)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            videos = list(pool.map(_video, [spec] * n_videos, range(n_videos)))
    all_frames, all_masks, vids = [], [], []
    bg_log, inst_log = [], []
    for v, (frames, masks, bg, insts) in enumerate(videos):
        bg_log.append({k: float(bg[k]) for k in ("hue", "contrast")} | {"freq_mean": float(np.mean(bg["freqs"]))})
        inst_log.extend({k: float(p[k]) for k in ("shaft_width", "wrist_radius", "jaw_length", "jaw_open")}
                        for p in insts)
        for clip_f, clip_m in _video_clips(frames, masks, spec.frames):
            all_frames.append(clip_f)
            all_masks.append(clip_m)
            vids.append(v)
    n = spec.n_clips
    meta = dict(site_id=spec.site_id, family=spec.family, text=spec.text, spec=asdict(spec),
                video_ids=vids[:n], background=bg_log, instruments=inst_log)
    return Dataset(np.stack(all_frames[:n]), np.stack(all_masks[:n]), meta)


def gen_site_dataset(spec: SceneSpec, workers: int = 1) -> Dataset:
    """Clips of one federated site; ``workers > 1`` renders videos in a process pool."""
    return _generate(spec, workers)


def gen_synth_dataset(spec: SceneSpec, workers: int = 1) -> Dataset:
    """Flat-shaded single-frame clips on the simulator background family."""
    spec = SceneSpec(**{**asdict(spec), "family": "SYN", "frames": 1, "flat": True, "noise": 0.0,
                        "video_length": 1, "decoys": (0, 0)})
    return _generate(spec, workers)


def gen_out_of_fed_site(spec: SceneSpec, workers: int = 1) -> Dataset:
    """Site with the shared instrument distribution over the unseen background family."""
    spec = SceneSpec(**{**asdict(spec), "family": "E"})
    return _generate(spec, workers)


# ============================================================== file format

MAGIC = b"FSTD"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIIIII")


def encode_dataset(ds: Dataset) -> bytes:
    n, m1, h0, w0, ch = ds.frames.shape
    meta = json.dumps(ds.meta, sort_keys=True).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, VERSION, n, m1, h0, w0, ch, N_CLASSES, len(meta)), meta]
    frames = np.ascontiguousarray(ds.frames, dtype="<f8")
    masks = np.ascontiguousarray(ds.masks, dtype=np.uint8)
    for i in range(n):
        parts.append(frames[i].tobytes())
        parts.append(masks[i].tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise DataError("dataset file truncated")
    magic, version, n, m1, h0, w0, ch, classes, meta_len = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"unsupported dataset version {version}")
    off = _HEADER.size
    meta = json.loads(buf[off:off + meta_len].decode("utf-8"))
    off += meta_len
    fsize = m1 * h0 * w0 * ch * 8
    msize = m1 * h0 * w0
    if len(buf) != off + n * (fsize + msize):
        raise DataError("dataset payload size does not match header")
    frames = np.empty((n, m1, h0, w0, ch))
    masks = np.empty((n, m1, h0, w0), dtype=np.uint8)
    for i in range(n):
        frames[i] = np.frombuffer(buf, "<f8", m1 * h0 * w0 * ch, off).reshape(m1, h0, w0, ch)
        off += fsize
        masks[i] = np.frombuffer(buf, np.uint8, msize, off).reshape(m1, h0, w0)
        off += msize
    if masks.size and masks.max() >= classes:
        raise DataError("mask label exceeds class count")
    return Dataset(frames, masks, meta)


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_dataset(ds))
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file {path} not found")
    return decode_dataset(path.read_bytes())


def iterate_batches(ds: Dataset, batch_size: int, shuffle_seed: int | None = None,
                    drop_last: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of ``(frames, current-frame masks)`` batches."""
    order = np.arange(len(ds))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(ds))
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        yield ds.frames[idx], ds.masks[idx, -1]


class BatchStream:
    """Endless reshuffled batches; epoch ``e`` uses permutation seed ``(*seed, e)``."""

    def __init__(self, ds: Dataset, batch_size: int, seed: int | tuple[int, ...]):
        if len(ds) == 0:
            raise DataError("cannot stream batches from an empty dataset")
        self.ds = ds
        self.batch_size = min(batch_size, len(ds))
        self.seed = tuple(np.atleast_1d(seed).tolist())
        self.epoch = 0
        self._order = np.empty(0, dtype=np.intp)

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self._order) < self.batch_size:
            perm = np.random.default_rng([*self.seed, self.epoch]).permutation(len(self.ds))
            self.epoch += 1
            self._order = np.concatenate([self._order, perm])
        idx, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return self.ds.frames[idx], self.ds.masks[idx, -1]
