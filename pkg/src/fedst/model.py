"""Toy spatio-temporal segmentation network with private/shared parameter split.

Pipeline for one clip of ``frames`` images (oldest first, current frame last)::

    encode        per-frame patch embedding + windowed self-attention
    partition     each frame pooled by its own size p and refined by an FC
    rsc_temporal  windowed cross-attention from the current frame to the
                  co-located partition tokens of all frames, plus residual
    channel_select  indicator-guided channel gating with residual
    decode        per-token MLP + pixel-shuffle back to full resolution

All tensors are channels-last; batched tensors carry a leading batch axis.
"""
from __future__ import annotations

import hashlib
import math
import re
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor

CLASS_NAMES = ("background", "shaft", "wrist", "jaw")

PRIVATE = "private"
SHARED = "shared"

# encoder query projection, channel-selection FC and the indicator fusion
_DEFAULT_PRIVATE = re.compile(r"^(enc\.attn\.q\.|cs\.)")


@dataclass(frozen=True)
class ModelConfig:
    h0: int = 56
    w0: int = 56
    ch_in: int = 3
    patch: int = 2
    channels: int = 16
    window: int = 7
    pools: tuple[int, ...] = (7, 4, 2, 1)
    # listed for completeness; per-frame pooling already sets the receptive field
    receptive: tuple[int, ...] = (49, 20, 6, 7)
    frames: int = 4
    classes: int = 4
    hidden: int = 32
    d_ind: int = 16
    lambda1: float = 0.3
    temporal: bool = True
    prompt: bool = True
    channel_select: bool = True

    def __post_init__(self):
        object.__setattr__(self, "pools", tuple(int(p) for p in self.pools))
        object.__setattr__(self, "receptive", tuple(int(r) for r in self.receptive))
        self.validate()

    @property
    def h(self) -> int:
        return self.h0 // self.patch

    @property
    def w(self) -> int:
        return self.w0 // self.patch

    def validate(self) -> None:
        if self.h0 % self.patch or self.w0 % self.patch:
            raise ConfigError(f"frame {self.h0}x{self.w0} not divisible by patch {self.patch}")
        if len(self.pools) != self.frames:
            raise ConfigError(f"need one pooling size per frame ({self.frames}), got {self.pools}")
        for k in (self.window, *self.pools):
            if k < 1 or self.h % k or self.w % k:
                raise ConfigError(f"feature map {self.h}x{self.w} not divisible by {k}")
        if self.channels < 1 or self.classes < 2:
            raise ConfigError("channels must be >= 1 and classes >= 2")

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


# ====================================================================== params

class ParamTree:
    """Named trainable tensors, each labelled PRIVATE or SHARED."""

    def __init__(self, params: Mapping[str, Tensor], private: set[str] | frozenset[str] = frozenset()):
        self.params: dict[str, Tensor] = dict(params)
        unknown = set(private) - set(self.params)
        if unknown:
            raise ConfigError(f"private paths not in tree: {sorted(unknown)}")
        self.private = frozenset(private)

    def __getitem__(self, path: str) -> Tensor:
        return self.params[path]

    def __contains__(self, path: str) -> bool:
        return path in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def label(self, path: str) -> str:
        if path not in self.params:
            raise KeyError(path)
        return PRIVATE if path in self.private else SHARED

    @property
    def shared_paths(self) -> frozenset[str]:
        return frozenset(self.params) - self.private

    def shared(self) -> dict[str, np.ndarray]:
        """Detached copy of the shared (gamma) parameters."""
        return {k: self.params[k].data.copy() for k in self.params if k not in self.private}

    def personal(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data.copy() for k in self.private}

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load(self, values: Mapping[str, np.ndarray], strict_paths: frozenset[str] | None = None) -> None:
        """Overwrite parameter values in place (optimizer state stays valid)."""
        if strict_paths is not None and set(values) != set(strict_paths):
            raise ConfigError("loaded path set does not match the expected set")
        for k, v in values.items():
            target = self.params[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != target.shape:
                raise DimensionError(f"{k}: shape {v.shape} != {target.shape}")
            target.data[...] = v

    def copy(self, private: frozenset[str] | None = None) -> "ParamTree":
        return ParamTree({k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.params.items()},
                         self.private if private is None else private)

    def subset(self, paths) -> dict[str, Tensor]:
        return {k: self.params[k] for k in paths}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def default_private_paths(paths) -> frozenset[str]:
    return frozenset(p for p in paths if _DEFAULT_PRIVATE.match(p))


def assemble(shared: Mapping[str, np.ndarray], personal: Mapping[str, np.ndarray],
             private: frozenset[str] | None = None) -> ParamTree:
    """Join gamma and rho into a complete tree; every path must appear exactly once."""
    overlap = set(shared) & set(personal)
    if overlap:
        raise ConfigError(f"paths in both shared and private parts: {sorted(overlap)}")
    params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
              for k, v in {**shared, **personal}.items()}
    return ParamTree(params, frozenset(personal) if private is None else private)


def _path_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per parameter so toggling a component leaves the others' init unchanged
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def _linear(seed, params, name, n_in, n_out, scale=None, zero=False):
    rng = _path_rng(seed, name)
    if zero:
        w = np.zeros((n_in, n_out))
    else:
        w = rng.standard_normal((n_in, n_out)) * (scale if scale is not None else 1.0 / math.sqrt(n_in))
    params[f"{name}.weight"] = w
    params[f"{name}.bias"] = np.zeros(n_out)


def init_params(cfg: ModelConfig, seed: int = 0, private: frozenset[str] | None = None) -> ParamTree:
    """Build a fresh tree for ``cfg``; only parameters the config actually uses are created."""
    c, s = cfg.channels, cfg.window
    raw: dict[str, np.ndarray] = {}
    _linear(seed, raw, "enc.embed", cfg.patch ** 2 * cfg.ch_in, c)
    for proj in ("q", "k", "v", "o"):
        _linear(seed, raw, f"enc.attn.{proj}", c, c)
    raw["enc.attn.pos"] = np.zeros((s * s, s * s))
    _linear(seed, raw, "enc.mlp.fc1", c, 2 * c)
    _linear(seed, raw, "enc.mlp.fc2", 2 * c, c)
    if cfg.temporal:
        for j, p in enumerate(cfg.pools):
            # start as plain average pooling of the patch plus a little noise
            w = np.tile(np.eye(c), (p * p, 1)) / (p * p)
            raw[f"rsc.part{j}.weight"] = w + 0.01 * _path_rng(seed, f"rsc.part{j}").standard_normal(w.shape)
            raw[f"rsc.part{j}.bias"] = np.zeros(c)
        _linear(seed, raw, "rsc.q", c, c)
        _linear(seed, raw, "rsc.k", c, c)
        # zero value path: the temporal block starts as the identity map
        _linear(seed, raw, "rsc.v", c, c, zero=True)
        raw["rsc.pos"] = np.zeros((s * s, context_length(cfg)))
    if cfg.channel_select:
        n_in = c + (cfg.d_ind if cfg.prompt else 0)
        _linear(seed, raw, "cs.fc", n_in, c, scale=0.1 / math.sqrt(n_in))
    elif cfg.prompt:
        raw["cs.prompt.weight"] = 0.01 * _path_rng(seed, "cs.prompt").standard_normal((cfg.d_ind, c))
    _linear(seed, raw, "dec.fc1", c, cfg.hidden)
    _linear(seed, raw, "dec.head", cfg.hidden, cfg.patch ** 2 * cfg.classes)
    params = {k: Tensor(v, requires_grad=True) for k, v in raw.items()}
    if private is None:
        private = default_private_paths(params)
    return ParamTree(params, private)


def spatial_paths(tree: ParamTree) -> list[str]:
    """Paths used by the single-frame path that skips the temporal block."""
    return [k for k in tree if not k.startswith("rsc.")]


# =================================================================== indicator

class IndicatorKind(str, Enum):
    TEXT_HASH = "text"
    RANDOM = "random"
    GAUSSIAN = "gaussian"
    ONE_HOT = "onehot"


@dataclass(frozen=True)
class Indicator:
    xi: np.ndarray
    kind: IndicatorKind

    def tensor(self) -> Tensor:
        # a fresh non-trainable leaf per forward; the stored vector is never touched
        return Tensor(self.xi.copy())


def _stable_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def text_embedding(text: str, dim: int) -> np.ndarray:
    """Deterministic bag-of-words projection of ``text`` onto the unit sphere.

    Each lower-cased word maps to a fixed Gaussian direction seeded by its hash,
    so descriptions sharing words point in related directions.
    """
    words = re.findall(r"[a-z0-9]+", text.lower())
    vec = np.zeros(dim)
    for word in words:
        vec += np.random.default_rng(_stable_seed(word)).standard_normal(dim)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def build_indicator(kind, site_text: str = "", site_id: int = 0, seed: int = 0,
                    dim: int = 16, sigma: float = 0.1) -> Indicator:
    kind = IndicatorKind(kind)
    if kind is IndicatorKind.TEXT_HASH:
        xi = text_embedding(site_text, dim)
    elif kind is IndicatorKind.RANDOM:
        xi = np.random.default_rng([seed, site_id]).standard_normal(dim)
    elif kind is IndicatorKind.GAUSSIAN:
        x = np.arange(dim, dtype=np.float64)
        xi = np.exp(-((x - site_id) ** 2) / (2.0 * sigma ** 2))
    else:
        if not 0 <= site_id < dim:
            raise ConfigError(f"one-hot indicator needs 0 <= site_id < {dim}")
        xi = np.zeros(dim)
        xi[site_id] = 1.0
    xi.setflags(write=False)
    return Indicator(xi=xi, kind=kind)


# ================================================================== layers

def _fc(x, params: ParamTree, name: str) -> Tensor:
    return T.fully_connected(x, params[f"{name}.weight"], params[f"{name}.bias"])


def space_to_depth(x, k: int) -> Tensor:
    """(N, H, W, C) -> (N, H/k, W/k, k*k*C)."""
    n, h, w, ch = x.shape
    if h % k or w % k:
        raise DimensionError(f"{(h, w)} not divisible by {k}")
    x = T.reshape(x, (n, h // k, k, w // k, k, ch))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n, h // k, w // k, k * k * ch))


def depth_to_space(x, k: int) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    n, h, w, d = x.shape
    ch = d // (k * k)
    x = T.reshape(x, (n, h, w, k, k, ch))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n, h * k, w * k, ch))


def window_split(F, s: int) -> Tensor:
    """(..., h, w, c) -> (..., h/s, w/s, s, s, c)."""
    F = T.as_tensor(F)
    *lead, h, w, c = F.shape
    if s < 1 or h % s or w % s:
        raise DimensionError(f"window {s} does not divide {(h, w)}")
    lead = tuple(lead)
    nl = len(lead)
    x = T.reshape(F, lead + (h // s, s, w // s, s, c))
    axes = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return T.transpose(x, axes)


def window_merge(W) -> Tensor:
    """(..., nh, nw, s, s, c) -> (..., nh*s, nw*s, c)."""
    W = T.as_tensor(W)
    *lead, nh, nw, s, s2, c = W.shape
    lead = tuple(lead)
    nl = len(lead)
    axes = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    x = T.transpose(W, axes)
    return T.reshape(x, lead + (nh * s, nw * s2, c))


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def window_attention(E, params: ParamTree, s: int) -> Tensor:
    """Self-attention inside non-overlapping s x s windows of (N, h, w, c)."""
    n, h, w, c = E.shape
    win = T.reshape(window_split(E, s), (n, (h // s) * (w // s), s * s, c))
    q = _fc(win, params, "enc.attn.q")
    k = _fc(win, params, "enc.attn.k")
    v = _fc(win, params, "enc.attn.v")
    logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(c)) + params["enc.attn.pos"]
    out = T.matmul(T.softmax_lastdim(logits), v)
    out = _fc(out, params, "enc.attn.o")
    out = T.reshape(out, (n, h // s, w // s, s, s, c))
    return window_merge(out)


def encode(frames, params: ParamTree, cfg: ModelConfig) -> Tensor:
    """Per-frame features: (N, h0, w0, ch_in) -> (N, h, w, c). Frames never interact."""
    x = T.as_tensor(frames)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[1:] != (cfg.h0, cfg.w0, cfg.ch_in):
        raise DimensionError(f"frame shape {x.shape[1:]} != {(cfg.h0, cfg.w0, cfg.ch_in)}")
    E = _fc(space_to_depth(x, cfg.patch), params, "enc.embed")
    E = E + window_attention(E, params, cfg.window)
    hidden = T.gelu(_fc(E, params, "enc.mlp.fc1"))
    return E + _fc(hidden, params, "enc.mlp.fc2")


def partition_past(F, p: int, weight, bias) -> Tensor:
    """Pool p x p patches by flattening them to p*p*c and projecting back to c."""
    F = T.as_tensor(F)
    F, single = _batched(F)
    n, h, w, c = F.shape
    if p < 1 or h % p or w % p:
        raise DimensionError(f"pool size {p} does not divide {(h, w)}")
    x = T.reshape(F, (n, h // p, p, w // p, p, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (n, h // p, w // p, p * p * c))
    out = T.fully_connected(x, weight, bias)
    return T.reshape(out, out.shape[1:]) if single else out


@lru_cache(maxsize=None)
def _colocated(h: int, w: int, s: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """For every s x s window, the flat indices of p-pooled tokens overlapping it.

    Returns ``(index, valid)`` of shape (n_windows, L) padded to the largest
    count; padded slots point at token 0 and are marked invalid.
    """
    gw = w // p
    per_window = []
    for wi in range(h // s):
        rows = range((wi * s) // p, (wi * s + s - 1) // p + 1)
        for wj in range(w // s):
            cols = range((wj * s) // p, (wj * s + s - 1) // p + 1)
            per_window.append([r * gw + cc for r in rows for cc in cols])
    L = max(len(x) for x in per_window)
    index = np.zeros((len(per_window), L), dtype=np.intp)
    valid = np.zeros((len(per_window), L), dtype=bool)
    for i, toks in enumerate(per_window):
        index[i, :len(toks)] = toks
        valid[i, :len(toks)] = True
    index.setflags(write=False)
    valid.setflags(write=False)
    return index, valid


def context_layout(cfg: ModelConfig):
    """Per-frame co-location tables ``(frame, index, valid)``, current frame first."""
    return [(j, *_colocated(cfg.h, cfg.w, cfg.window, cfg.pools[j]))
            for j in range(cfg.frames - 1, -1, -1)]


def context_length(cfg: ModelConfig) -> int:
    return sum(idx.shape[1] for _, idx, _ in context_layout(cfg))


_MASKED = -1e9  # exp underflows to exactly 0 after the max shift


def rsc_temporal(F_ts, parts, params: ParamTree, s: int, return_attention: bool = False):
    """Windowed cross-attention from the current frame to partitioned frame tokens.

    ``parts`` holds one partitioned map per frame, oldest first (current last).
    The context of a window is the current frame's co-located tokens followed by
    the co-located tokens of each older frame.
    """
    F_ts = T.as_tensor(F_ts)
    F_ts, single = _batched(F_ts)
    parts = [_batched(T.as_tensor(P))[0] for P in parts]
    n, h, w, c = F_ts.shape
    if h % s or w % s:
        raise DimensionError(f"window {s} does not divide {(h, w)}")
    n_win = (h // s) * (w // s)

    ctx, valid = [], []
    for j in range(len(parts) - 1, -1, -1):
        P = parts[j]
        p = h // P.shape[1] if P.ndim == 4 and P.shape[1] else 0
        if (P.ndim != 4 or P.shape[0] != n or P.shape[-1] != c or p == 0
                or P.shape[1] * p != h or P.shape[2] * p != w):
            raise DimensionError(f"partition {j} has shape {P.shape}, incompatible with {F_ts.shape}")
        index, ok = _colocated(h, w, s, p)
        flat = T.reshape(P, (n, P.shape[1] * P.shape[2], c))
        ctx.append(T.take(flat, index, axis=1))
        valid.append(ok)
    c_hat = T.concat(ctx, axis=2)
    valid = np.concatenate(valid, axis=1)
    L = valid.shape[1]

    bias = params["rsc.pos"]
    if bias.shape != (s * s, L):
        raise DimensionError(f"position bias {bias.shape} does not match context ({s * s}, {L})")

    win = T.reshape(window_split(F_ts, s), (n, n_win, s * s, c))
    q = _fc(win, params, "rsc.q")
    k = _fc(c_hat, params, "rsc.k")
    v = _fc(c_hat, params, "rsc.v")
    mask = np.where(valid, 0.0, _MASKED)[:, None, :]
    logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(c)) + bias + mask
    attn = T.softmax_lastdim(logits)
    out = T.matmul(attn, v)
    out = window_merge(T.reshape(out, (n, h // s, w // s, s, s, c)))
    out = out + F_ts
    if single:
        out = T.reshape(out, out.shape[1:])
    return (out, attn) if return_attention else out


def channel_select(F_star, indicator: Indicator | None, params: ParamTree, cfg: ModelConfig,
                   return_gate: bool = False):
    """F' = F* + F* * gate with a per-channel gate from pooled features and the indicator."""
    F_star = T.as_tensor(F_star)
    F_star, single = _batched(F_star)
    n, _, _, c = F_star.shape
    gate = None
    if cfg.channel_select:
        pooled = T.mean(F_star, axis=(1, 2))
        if cfg.prompt:
            if indicator is None:
                raise ConfigError("channel selection with prompt needs an indicator")
            xi = np.broadcast_to(indicator.xi, (n, indicator.xi.shape[0]))
            pooled = T.concat([pooled, Tensor(xi)], axis=-1)
        gate = T.sigmoid(_fc(pooled, params, "cs.fc"))
        out = F_star + F_star * T.reshape(gate, (n, 1, 1, c))
    elif cfg.prompt:
        if indicator is None:
            raise ConfigError("prompt fusion needs an indicator")
        shift = T.matmul(Tensor(indicator.xi.reshape(1, -1)), params["cs.prompt.weight"])
        out = F_star + T.reshape(shift, (1, 1, 1, c))
    else:
        out = F_star
    if single:
        out = T.reshape(out, out.shape[1:])
    return (out, gate) if return_gate else out


def decode(F_prime, params: ParamTree, cfg: ModelConfig) -> Tensor:
    """(N, h, w, c) -> logits (N, h0, w0, classes)."""
    F_prime = T.as_tensor(F_prime)
    F_prime, single = _batched(F_prime)
    hidden = T.gelu(_fc(F_prime, params, "dec.fc1"))
    logits = depth_to_space(_fc(hidden, params, "dec.head"), cfg.patch)
    return T.reshape(logits, logits.shape[1:]) if single else logits


# ==================================================================== loss

def seg_loss(logits, mask: np.ndarray, lambda1: float = 0.3, eps: float = 1e-5) -> Tensor:
    """Cross-entropy plus ``lambda1`` times the class-averaged soft Dice loss."""
    logits = T.as_tensor(logits)
    mask = np.asarray(mask)
    K = logits.shape[-1]
    if mask.shape != logits.shape[:-1]:
        raise DimensionError(f"mask shape {mask.shape} != logits {logits.shape[:-1]}")
    if mask.size and (mask.min() < 0 or mask.max() >= K):
        raise DataError(f"labels must lie in [0, {K})")
    onehot = np.eye(K)[mask.astype(np.intp)]
    logp = T.log_softmax_lastdim(logits)
    n_pix = mask.size
    ce = -T.tsum(logp * onehot) * (1.0 / n_pix)
    if lambda1 == 0:
        return ce
    probs = T.exp(logp)
    axes = tuple(range(mask.ndim))
    inter = T.tsum(probs * onehot, axis=axes)
    denom = T.tsum(probs, axis=axes) + onehot.sum(axis=axes)
    dice = (inter * 2.0 + eps) / (denom + eps)
    return ce + lambda1 * (1.0 - T.mean(dice))


# ================================================================= forward

@dataclass
class ForwardOutput:
    logits: Tensor
    feature: Tensor  # post-selection feature of the current frame
    extras: dict = field(default_factory=dict)


def _clip_batch(frames) -> Tensor:
    x = T.as_tensor(frames)
    if x.ndim == 4:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 5:
        raise DimensionError(f"clip batch must be (B, frames, h0, w0, ch), got {x.shape}")
    return x


def forward(frames, params: ParamTree, cfg: ModelConfig, indicator: Indicator | None = None,
            spatial_only: bool = False) -> ForwardOutput:
    """Full model on a clip batch (B, frames, h0, w0, ch).

    ``spatial_only`` runs the current frame alone and skips the temporal block,
    as does ``cfg.temporal = False``.
    """
    x = _clip_batch(frames)
    B, m1 = x.shape[:2]
    use_temporal = cfg.temporal and not spatial_only
    if use_temporal:
        if m1 != cfg.frames:
            raise DimensionError(f"clip has {m1} frames, config expects {cfg.frames}")
        feats = encode(T.reshape(x, (B * m1,) + x.shape[2:]), params, cfg)
        feats = T.reshape(feats, (B, m1) + feats.shape[1:])
        per_frame = [feats[:, j] for j in range(m1)]
        parts = [partition_past(per_frame[j], p, params[f"rsc.part{j}.weight"], params[f"rsc.part{j}.bias"])
                 for j, p in enumerate(cfg.pools)]
        F_ts = per_frame[-1]
        F_star = rsc_temporal(F_ts, parts, params, cfg.window)
    else:
        F_star = encode(x[:, -1], params, cfg)
    F_prime = channel_select(F_star, indicator, params, cfg)
    logits = decode(F_prime, params, cfg)
    return ForwardOutput(logits=logits, feature=F_prime)


def used_paths(tree: ParamTree, cfg: ModelConfig, spatial_only: bool = False) -> list[str]:
    if cfg.temporal and not spatial_only:
        return list(tree)
    return spatial_paths(tree)


def predict(frames, params: ParamTree, cfg: ModelConfig, indicator: Indicator | None = None,
            spatial_only: bool = False, batch_size: int = 8) -> np.ndarray:
    """Arg-max label maps (B, h0, w0) without building a graph."""
    frames = np.asarray(frames)
    if frames.ndim == 4:
        frames = frames[None]
    frozen = ParamTree({k: Tensor(t.data) for k, t in params.items()}, params.private)
    out = []
    for i in range(0, len(frames), batch_size):
        logits = forward(frames[i:i + batch_size], frozen, cfg, indicator, spatial_only).logits
        out.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(out, axis=0)
