"""Site training, server aggregation, synthetic-data quantification and the round loop."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .. import model as M
from .. import tensor as T
from ..errors import ConfigError, ContractError, FedSTError, ProtocolError
from ..metrics import MetricReport
from ..synthdata import BatchStream, Dataset
from ..tensor import AdamW, Tensor
from .protocol import Direction, RoundMessage, decode_message, encode_message
from .transport import Transport, TransportMode

logger = logging.getLogger(__name__)

SERVER_TEXT = "This is the global server model and the surgery type is synthetic"


class SiteFailure(FedSTError, RuntimeError):
    """A site raised during its local round; the round is aborted."""


@dataclass
class TrainConfig:
    lr: float = 3e-3
    weight_decay: float = 1e-4
    batch: int = 2
    local_steps: int = 20
    rounds: int = 10
    lambda1: float = 0.3
    lambda2: float = 0.3
    lambda3: float = 0.3
    mu: float = 0.5
    seed: int = 0
    pretrain_steps: int = 200
    pretrain_lr: float = 3e-3
    workers: int = 1
    eval_every: int = 1
    weighted_aggregation: bool = False
    lr_schedule: str = "constant"   # or "cosine", stepped once per round

    def round_lr(self, t: int) -> float:
        """Site learning rate for round ``t`` (0-based)."""
        if self.lr_schedule == "constant" or self.rounds <= 1:
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * t / self.rounds))

    def validate(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3", "mu"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if self.rounds < 0 or self.local_steps < 0 or self.pretrain_steps < 0:
            raise ConfigError("rounds, local_steps and pretrain_steps must be >= 0")
        if self.batch < 1 or self.workers < 1 or self.eval_every < 1:
            raise ConfigError("batch, workers and eval_every must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class SerqConfig:
    enabled: bool = True
    batches_per_round: int = 10
    lr: float = 1e-3


# ================================================================= helpers

def pad_history(frames: np.ndarray, n_frames: int) -> np.ndarray:
    """Fill missing history slots by repeating the current (last) frame."""
    frames = np.asarray(frames)
    have = frames.shape[1]
    if have == n_frames:
        return frames
    if have > n_frames:
        return frames[:, have - n_frames:]
    current = frames[:, -1:]
    return np.concatenate([np.repeat(current, n_frames - have, axis=1), frames], axis=1)


def make_optimizer(params: Mapping[str, Tensor], lr: float, weight_decay: float = 0.0) -> AdamW:
    return AdamW(params, lr=lr, weight_decay=weight_decay)


def average_trees(trees: Sequence[Mapping[str, np.ndarray]], weights: Sequence[float] | None = None
                  ) -> dict[str, np.ndarray]:
    """Per-path (weighted) mean with exactly rounded sums, independent of input order."""
    if not trees:
        raise ProtocolError("nothing to average")
    paths = set(trees[0])
    for t in trees[1:]:
        if set(t) != paths:
            raise ProtocolError("trees disagree on their path sets")
    K = len(trees)
    if weights is None:
        scale = None
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (K,) or (w < 0).any() or w.sum() <= 0:
            raise ProtocolError("invalid aggregation weights")
        scale = w / math.fsum(w)
    out = {}
    for path in sorted(paths):
        arrs = [np.asarray(t[path], dtype=np.float64) for t in trees]
        shape = arrs[0].shape
        if any(a.shape != shape for a in arrs):
            raise ProtocolError(f"{path}: shape mismatch across sites")
        stacked = np.stack([a.reshape(-1) for a in arrs])
        if scale is not None:
            stacked = stacked * scale[:, None]
        sums = np.fromiter((math.fsum(col) for col in stacked.T), dtype=np.float64, count=stacked.shape[1])
        out[path] = (sums if scale is not None else sums / K).reshape(shape)
    return out


# =================================================================== sites

@dataclass
class SiteState:
    site_id: int
    name: str
    cfg: M.ModelConfig
    params: M.ParamTree
    optimizer: AdamW
    stream: BatchStream
    indicator: M.Indicator | None
    local_steps: int
    lambda1: float = 0.3
    train_size: int = 0
    iterations: int = 0
    losses: list[float] = field(default_factory=list)


def make_site(site_id: int, name: str, cfg: M.ModelConfig, init: M.ParamTree, train: Dataset,
              indicator: M.Indicator | None, tc: TrainConfig, private: frozenset[str] | None = None
              ) -> SiteState:
    params = init.copy(private=private)
    return SiteState(site_id=site_id, name=name, cfg=cfg, params=params,
                     optimizer=make_optimizer(params.params, tc.lr, tc.weight_decay),
                     stream=BatchStream(train, tc.batch, seed=(tc.seed, 1, site_id)),
                     indicator=indicator, local_steps=tc.local_steps, lambda1=tc.lambda1,
                     train_size=len(train))


def local_step(site: SiteState) -> float:
    frames, masks = site.stream.next()
    site.params.zero_grad()
    out = M.forward(pad_history(frames, site.cfg.frames), site.params, site.cfg, site.indicator)
    loss = M.seg_loss(out.logits, masks, site.lambda1)
    loss.backward()
    site.optimizer.step()
    site.iterations += 1
    value = loss.item()
    site.losses.append(value)
    return value


def local_round(site: SiteState, gamma_in: Mapping[str, np.ndarray], round_idx: int = 0) -> RoundMessage:
    """Load the global shared parameters, run E local steps, report the new shared parameters."""
    if set(gamma_in) != site.params.shared_paths:
        raise ProtocolError(f"site {site.site_id}: incoming path set does not match its shared set")
    site.params.load(gamma_in)
    for _ in range(site.local_steps):
        local_step(site)
    return RoundMessage(Direction.SITE_TO_SERVER, round_idx, site.site_id,
                        site.params.shared(), sample_count=site.train_size)


def aggregate(messages: Sequence[RoundMessage], round_idx: int | None = None,
              expected_sites: Sequence[int] | None = None, weighted: bool = False
              ) -> dict[str, np.ndarray]:
    """Mean of the shared parameters reported by every site for one round."""
    if not messages:
        raise ProtocolError("no messages to aggregate")
    ids = [m.site_id for m in messages]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate site messages: {ids}")
    if expected_sites is not None and set(ids) != set(expected_sites):
        raise ProtocolError(f"expected sites {sorted(expected_sites)}, got {sorted(ids)}")
    rounds = {m.round for m in messages}
    if len(rounds) != 1 or (round_idx is not None and rounds != {round_idx}):
        raise ProtocolError(f"round skew in messages: {sorted(rounds)}")
    if any(m.direction is not Direction.SITE_TO_SERVER for m in messages):
        raise ProtocolError("aggregate only accepts site-to-server messages")
    weights = [m.sample_count for m in messages] if weighted else None
    return average_trees([m.payload for m in messages], weights)


def assemble_global(gamma: Mapping[str, np.ndarray], rho: Mapping[str, np.ndarray]) -> M.ParamTree:
    return M.assemble(gamma, rho)


def ema_update(f_hat: np.ndarray | None, f_new: np.ndarray, mu: float) -> np.ndarray:
    """(1 - mu) * f_hat + mu * f_new; an empty average starts at ``f_new``."""
    f_new = np.asarray(f_new, dtype=np.float64)
    if f_hat is None:
        return f_new.copy()
    f_hat = np.asarray(f_hat, dtype=np.float64)
    if f_hat.shape != f_new.shape:
        raise ContractError(f"EMA feature shape {f_hat.shape} != {f_new.shape}")
    return (1.0 - mu) * f_hat + mu * f_new


# ================================================================== server

def quantification_loss(f_sy, descriptor, f_hat) -> Tensor:
    """(1/N_e) ||F_sy - D_sy - F_hat||^2."""
    return T.mse_mean(T.sub(f_sy, descriptor), f_hat)


def sync_loss(f_g, instrument) -> Tensor:
    """(1/N_e) ||F_g - I_sy||^2 with I_sy = F_sy - D_sy held fixed."""
    return T.mse_mean(f_g, instrument)


@dataclass
class ServerState:
    cfg: M.ModelConfig
    global_params: M.ParamTree
    pre_params: M.ParamTree
    descriptor: Tensor
    synth: BatchStream
    indicator: M.Indicator | None
    serq: SerqConfig
    mu: float = 0.5
    lambda1: float = 0.3
    lambda2: float = 0.3
    lambda3: float = 0.3
    seg_weight: float = 1.0
    ema_feature: np.ndarray | None = None
    opt_pre: AdamW | None = None
    opt_global: AdamW | None = None
    rounds: int = 0
    steps: int = 0
    log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.opt_pre is None:
            pre = self.pre_params.subset(M.spatial_paths(self.pre_params))
            pre["@descriptor"] = self.descriptor
            self.opt_pre = make_optimizer(pre, self.serq.lr)
        if self.opt_global is None:
            shared = sorted(self.global_params.shared_paths)
            self.opt_global = make_optimizer(self.global_params.subset(shared), self.serq.lr)

    @property
    def private_global(self) -> dict[str, np.ndarray]:
        return self.global_params.personal()

    def instrument_representation(self, frames) -> np.ndarray:
        """I_sy = F_sy - D_sy for a synthetic batch, from the current pre-trained model."""
        return _batch_feature(self.pre_params, self.cfg, frames, self.indicator, spatial=True) - self.descriptor.data


def make_server(cfg: M.ModelConfig, pretrained: M.ParamTree, synth: Dataset, serq: SerqConfig,
                tc: TrainConfig, indicator: M.Indicator | None, private: frozenset[str] | None = None
                ) -> ServerState:
    rng = np.random.default_rng([tc.seed, 7])
    descriptor = Tensor(0.01 * rng.standard_normal((cfg.h, cfg.w, cfg.channels)), requires_grad=True)
    return ServerState(cfg=cfg, global_params=pretrained.copy(private=private),
                       pre_params=pretrained.copy(), descriptor=descriptor,
                       synth=BatchStream(synth, tc.batch, seed=(tc.seed, 2)),
                       indicator=indicator, serq=serq, mu=tc.mu, lambda1=tc.lambda1,
                       lambda2=tc.lambda2, lambda3=tc.lambda3)


def _frozen(tree: M.ParamTree) -> M.ParamTree:
    return M.ParamTree({k: Tensor(t.data) for k, t in tree.items()}, tree.private)


def _forward(tree, cfg, frames, indicator, spatial: bool):
    frames = frames if spatial else pad_history(frames, cfg.frames)
    return M.forward(frames, tree, cfg, indicator, spatial_only=spatial)


def _batch_feature(tree, cfg, frames, indicator, spatial: bool) -> np.ndarray:
    out = _forward(_frozen(tree), cfg, frames, indicator, spatial)
    return out.feature.data.mean(axis=0)


def refresh_ema(server: ServerState, batches) -> np.ndarray:
    """Fold the global model's batch-averaged synthetic feature into the moving average."""
    feats = [_batch_feature(server.global_params, server.cfg, f, server.indicator, spatial=False)
             for f, _ in batches]
    server.ema_feature = ema_update(server.ema_feature, np.mean(feats, axis=0), server.mu)
    return server.ema_feature


def serq_eq(server: ServerState, batches) -> list[float]:
    """Update the pre-trained model and the domain descriptor with the global model frozen."""
    if server.ema_feature is None:
        raise ContractError("serq_eq needs a refreshed EMA feature")
    if server.ema_feature.shape != server.descriptor.shape:
        raise ContractError(f"EMA feature shape {server.ema_feature.shape} drifted from "
                            f"descriptor {server.descriptor.shape}")
    f_hat = Tensor(server.ema_feature)
    losses = []
    for frames, masks in batches:
        server.pre_params.zero_grad()
        server.descriptor.grad = None
        out = _forward(server.pre_params, server.cfg, frames, server.indicator, spatial=True)
        f_sy = T.mean(out.feature, axis=0)
        loss = server.lambda2 * quantification_loss(f_sy, server.descriptor, f_hat)
        if server.seg_weight:
            loss = server.seg_weight * M.seg_loss(out.logits, masks, server.lambda1) + loss
        loss.backward()
        server.opt_pre.step()
        server.steps += 1
        losses.append(loss.item())
    return losses


def serq_sc(server: ServerState, batches) -> list[float]:
    """Pull the global model's features toward the synthetic instrument representation."""
    losses = []
    for frames, masks in batches:
        target = Tensor(server.instrument_representation(frames))
        server.global_params.zero_grad()
        out = _forward(server.global_params, server.cfg, frames, server.indicator, spatial=False)
        f_g = T.mean(out.feature, axis=0)
        loss = server.lambda3 * sync_loss(f_g, target)
        if server.seg_weight:
            loss = server.seg_weight * M.seg_loss(out.logits, masks, server.lambda1) + loss
        loss.backward()
        server.opt_global.step()
        server.steps += 1
        losses.append(loss.item())
    server.global_params.zero_grad()
    return losses


def serq_round(server: ServerState) -> dict:
    batches = [server.synth.next() for _ in range(server.serq.batches_per_round)]
    refresh_ema(server, batches)
    eq = serq_eq(server, batches)
    sc = serq_sc(server, batches)
    server.rounds += 1
    entry = {"round": server.rounds, "eq_loss": float(np.mean(eq)) if eq else None,
             "sc_loss": float(np.mean(sc)) if sc else None}
    server.log.append(entry)
    return entry


# ============================================================= pretraining

def pretrain(cfg: M.ModelConfig, synth: Dataset, tc: TrainConfig, indicator: M.Indicator | None,
             seed: int | None = None) -> M.ParamTree:
    """Train the single-frame path on synthetic clips; temporal weights keep their init."""
    seed = tc.seed if seed is None else seed
    tree = M.init_params(cfg, seed=seed)
    if tc.pretrain_steps == 0:
        return tree
    opt = make_optimizer(tree.subset(M.spatial_paths(tree)), tc.pretrain_lr, tc.weight_decay)
    stream = BatchStream(synth, tc.batch, seed=(seed, 3))
    for _ in range(tc.pretrain_steps):
        frames, masks = stream.next()
        tree.zero_grad()
        out = M.forward(frames, tree, cfg, indicator, spatial_only=True)
        M.seg_loss(out.logits, masks, tc.lambda1).backward()
        opt.step()
    tree.zero_grad()
    return tree


# =============================================================== evaluation

def evaluate(tree: M.ParamTree, cfg: M.ModelConfig, ds: Dataset, indicator: M.Indicator | None,
             report: MetricReport, site: str) -> None:
    preds = M.predict(pad_history(ds.frames, cfg.frames), tree, cfg, indicator)
    report.add(site, preds, ds.masks[:, -1])


# =================================================================== runs

@dataclass
class SiteData:
    site_id: int
    name: str
    text: str
    train: Dataset
    test: Dataset


@dataclass
class RunResult:
    method: str
    site_models: dict[str, M.ParamTree]
    global_model: M.ParamTree | None
    indicators: dict[str, M.Indicator | None]
    reports: list[MetricReport]
    server: ServerState | None = None
    transport_bytes: int = 0
    messages: int = 0
    capture: list = field(default_factory=list)
    losses: dict[str, list[float]] = field(default_factory=dict)
    traffic: list[dict] = field(default_factory=list)   # cumulative bytes after each round

    @property
    def final_report(self) -> MetricReport | None:
        return self.reports[-1] if self.reports else None


def site_indicators(sites: Sequence[SiteData], cfg: M.ModelConfig, kind, seed: int
                    ) -> dict[str, M.Indicator | None]:
    if not cfg.prompt:
        return {s.name: None for s in sites}
    return {s.name: M.build_indicator(kind, s.text, s.site_id, seed, cfg.d_ind) for s in sites}


def _server_indicator(cfg: M.ModelConfig, kind, seed: int, n_sites: int) -> M.Indicator | None:
    if not cfg.prompt:
        return None
    kind = M.IndicatorKind(kind)
    site_id = min(n_sites, cfg.d_ind - 1)
    return M.build_indicator(kind, SERVER_TEXT, site_id, seed, cfg.d_ind)


def personalized_average(result: RunResult, sites: Sequence[SiteData]) -> M.ParamTree:
    """Sample-weighted average of every personalized model's full tree."""
    trees = [result.site_models[s.name].state() for s in sites]
    weights = [len(s.train) for s in sites]
    avg = average_trees(trees, weights)
    return M.assemble(avg, {}, private=frozenset())


def run_federation(cfg: M.ModelConfig, sites: Sequence[SiteData], synth: Dataset | None,
                   tc: TrainConfig, serq: SerqConfig, indicator_kind="text",
                   private: frozenset[str] | None = None, transport_mode=TransportMode.IN_PROCESS_QUEUE,
                   port: int = 0, capture: bool = False, pretrained: M.ParamTree | None = None,
                   method: str = "fedst",
                   on_round: Callable[[int, MetricReport | None], None] | None = None) -> RunResult:
    """Personalized federated training: local rounds, aggregation, optional SERQ, redistribution."""
    tc.validate()
    if serq.enabled and synth is None:
        raise ConfigError("SERQ needs a synthetic dataset")
    n_sites = len(sites)
    server_ind = _server_indicator(cfg, indicator_kind, tc.seed, n_sites)
    if pretrained is None:
        if synth is None and tc.pretrain_steps:
            raise ConfigError("pre-training needs a synthetic dataset")
        pretrained = pretrain(cfg, synth, tc, server_ind)
    if private is None:
        private = M.default_private_paths(pretrained)
    indicators = site_indicators(sites, cfg, indicator_kind, tc.seed)
    states = [make_site(s.site_id, s.name, cfg, pretrained, s.train, indicators[s.name], tc, private)
              for s in sites]
    shared = frozenset(pretrained.params) - private
    server = None
    if serq.enabled:
        server = make_server(cfg, pretrained, synth, serq, tc, server_ind, private)
    gamma_g = {k: pretrained[k].data.copy() for k in sorted(shared)}
    ids = [s.site_id for s in states]
    by_id = {s.site_id: s for s in states}
    reports: list[MetricReport] = []
    traffic: list[dict] = []

    def snapshot(label) -> None:
        traffic.append({"round": label, "messages": transport.messages,
                        "bytes_up": transport.bytes_up, "bytes_down": transport.bytes_down})

    def site_work(state: SiteState, t: int) -> None:
        msg = decode_message(transport.recv_at_site(state.site_id), shared=shared)
        if msg.direction is not Direction.SERVER_TO_SITE or msg.round != t:
            raise ProtocolError(f"site {state.site_id}: unexpected message for round {msg.round}")
        try:
            out = local_round(state, msg.payload, t)
        except FedSTError:
            raise
        except Exception as exc:  # noqa: BLE001 - reported as a site failure
            raise SiteFailure(f"site {state.site_id} failed in round {t}: {exc}") from exc
        transport.send_to_server(state.site_id, encode_message(out, shared=shared))

    with Transport(ids, transport_mode, port=port, capture=capture) as transport:
        for t in range(tc.rounds):
            for state in states:
                state.optimizer.lr = tc.round_lr(t)
            for k in ids:
                transport.send_to_site(k, encode_message(
                    RoundMessage(Direction.SERVER_TO_SITE, t, k, gamma_g), shared=shared))
            if tc.workers > 1:
                with ThreadPoolExecutor(max_workers=tc.workers) as pool:
                    for fut in [pool.submit(site_work, by_id[k], t) for k in ids]:
                        fut.result()
            else:
                for k in ids:
                    site_work(by_id[k], t)
            msgs = [decode_message(transport.recv_at_server(k), shared=shared) for k in ids]
            gamma_g = aggregate(msgs, t, ids, weighted=tc.weighted_aggregation)
            if server is not None:
                server.global_params.load(gamma_g)
                serq_round(server)
                gamma_g = {k: server.global_params[k].data.copy() for k in sorted(shared)}
            snapshot(t + 1)
            report = None
            if (t + 1) % tc.eval_every == 0 or t + 1 == tc.rounds:
                report = MetricReport(round=t + 1)
                for s, state in zip(sites, states):
                    tree = state.params.copy()
                    tree.load(gamma_g)
                    evaluate(tree, cfg, s.test, state.indicator, report, s.name)
                reports.append(report)
                logger.info("%s round %d mean dice %.4f", method, t + 1, report.mean("dice"))
            if on_round:
                on_round(t + 1, report)
        # final merge v_k := gamma_g^T  U  rho_k^T, delivered over the wire
        for k in ids:
            transport.send_to_site(k, encode_message(
                RoundMessage(Direction.SERVER_TO_SITE, tc.rounds, k, gamma_g), shared=shared))
        for state in states:
            msg = decode_message(transport.recv_at_site(state.site_id), shared=shared)
            state.params.load(msg.payload)
        snapshot("final")
        result = RunResult(method=method, site_models={s.name: st.params for s, st in zip(sites, states)},
                           global_model=None, indicators=indicators, reports=reports, server=server,
                           transport_bytes=transport.total_bytes, messages=transport.messages,
                           capture=list(transport.capture), traffic=traffic,
                           losses={s.name: st.losses for s, st in zip(sites, states)})
    result.global_model = personalized_average(result, sites)
    return result


def plain_config(cfg: M.ModelConfig) -> M.ModelConfig:
    """Architecture used by the FedAvg and local-only baselines: no temporal block, no prompt, no gating."""
    return cfg.with_(temporal=False, prompt=False, channel_select=False)


def run_fedavg(cfg: M.ModelConfig, sites: Sequence[SiteData], synth: Dataset | None, tc: TrainConfig,
               pretrained: M.ParamTree | None = None, **kwargs) -> RunResult:
    """Plain federated averaging: every parameter shared, no server-side synthetic step."""
    return run_federation(cfg, sites, synth, tc, SerqConfig(enabled=False), private=frozenset(),
                          pretrained=pretrained, method="fedavg", **kwargs)


def run_local_only(cfg: M.ModelConfig, sites: Sequence[SiteData], synth: Dataset | None,
                   tc: TrainConfig, indicator_kind="text", pretrained: M.ParamTree | None = None,
                   private: frozenset[str] | None = None,
                   on_round: Callable[[int, MetricReport | None], None] | None = None) -> RunResult:
    """Each site trains alone for rounds * local_steps iterations; nothing is communicated."""
    tc.validate()
    if pretrained is None:
        server_ind = _server_indicator(cfg, indicator_kind, tc.seed, len(sites))
        pretrained = pretrain(cfg, synth, tc, server_ind)
    indicators = site_indicators(sites, cfg, indicator_kind, tc.seed)
    private = frozenset() if private is None else private
    states = [make_site(s.site_id, s.name, cfg, pretrained, s.train, indicators[s.name], tc, private)
              for s in sites]
    reports = []
    for t in range(tc.rounds):
        for state in states:
            state.optimizer.lr = tc.round_lr(t)
            for _ in range(state.local_steps):
                local_step(state)
        report = None
        if (t + 1) % tc.eval_every == 0 or t + 1 == tc.rounds:
            report = MetricReport(round=t + 1)
            for s, state in zip(sites, states):
                evaluate(state.params, cfg, s.test, state.indicator, report, s.name)
            reports.append(report)
        if on_round:
            on_round(t + 1, report)
    result = RunResult(method="local", site_models={s.name: st.params for s, st in zip(sites, states)},
                       global_model=None, indicators=indicators, reports=reports,
                       losses={s.name: st.losses for s, st in zip(sites, states)})
    result.global_model = personalized_average(result, sites)
    return result
