"""Federated protocol engine: cloud/edge state machines, strategies, metering.

One communication round is a full barrier-synchronized cycle: broadcast the
global weights (optionally int8-compressed), let every gated client train E
local epochs from that exact broadcast, collect per-strategy uplink payloads
(stochastically quantized deltas, raw deltas, or raw weights, all metered at
their exact serialized size), aggregate, then evaluate on the held-out test
set. Two runs with the same config and seed produce identical metrics.

Strategy matrix (resolved by :func:`resolve_strategy`):

    mfed      adaptive lr decay + quantized deltas up + int8 broadcast down
    mfed_q    mfed without any quantization (raw deltas, raw broadcast)
    mfed_lrd  mfed without lr decay (constant lr)
    fedavg    raw weights up, raw broadcast, weighted averaging, constant lr
    fedpaq    partial participation + quantized deltas, constant lr
    lrdecay   fedavg + adaptive lr decay

Every tensor that crosses the simulated network does so through its wire
representation, so what the receiver aggregates is exactly what traveled
(float32 for raw payloads, dequantized codes otherwise).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .compress import (
    Int8Tensor,
    QsgdPayload,
    int8_dequantize,
    int8_quantize,
    payload_bytes,
    qsgd_dequantize,
    qsgd_quantize,
)
from .errors import ConfigError, InputError, ProtocolError
from .numcore import ModelParams, RngStream, Tensor

__all__ = [
    "FederationConfig",
    "StrategyTraits",
    "EdgeState",
    "CloudState",
    "LocalUpdate",
    "RoundMetrics",
    "STRATEGIES",
    "SCHEDULES",
    "resolve_strategy",
    "decayed_lr",
    "threshold_gate",
    "local_train",
    "aggregate_delta_uniform",
    "aggregate_weighted",
    "run_round",
    "run_experiment",
    "run_federation",
]

STRATEGIES = ("mfed", "mfed_q", "mfed_lrd", "fedavg", "fedpaq", "lrdecay")
SCHEDULES = ("adalr", "harmonic", "constant")
AGGREGATIONS = ("delta_uniform", "weighted")

# Simulated link speed used for the wall_ms metric: 10 MB/s = 1e4 bytes/ms.
BYTES_PER_MS = 1e4


@dataclass
class FederationConfig:
    """Knobs of one federated run (K clients, R rounds, E local epochs)."""

    n_clients: int = 3
    rounds: int = 50
    local_epochs: int = 10
    local_batch: int = 16
    gamma0: float = 0.1
    delta: float = 0.5
    zeta: int = 1
    lr_schedule: str = "adalr"
    strategy: str = "mfed"
    participation_fraction: float = 1.0
    new_data_threshold: int = 100
    qsgd_s: int = 127
    aggregation: str = "delta_uniform"
    seed: int = 0
    uplink_int8_requant: bool = False  # literal double-compression mode

    def __post_init__(self):
        checks = [
            (self.n_clients >= 1, "n_clients must be >= 1"),
            (self.rounds >= 1, "rounds must be >= 1"),
            (self.local_epochs >= 1, "local_epochs must be >= 1"),
            (self.local_batch >= 1, "local_batch must be >= 1"),
            (self.gamma0 > 0, "gamma0 must be positive"),
            (0 < self.delta <= 1, "delta must be in (0, 1]"),
            (self.zeta >= 1, "zeta must be >= 1"),
            (self.lr_schedule in SCHEDULES, f"lr_schedule must be one of {SCHEDULES}"),
            (self.strategy in STRATEGIES, f"strategy must be one of {STRATEGIES}"),
            (
                0 < self.participation_fraction <= 1,
                "participation_fraction must be in (0, 1]",
            ),
            (self.new_data_threshold >= 0, "new_data_threshold must be >= 0"),
            (self.qsgd_s >= 1, "qsgd_s must be >= 1"),
            (self.aggregation in AGGREGATIONS, f"aggregation must be one of {AGGREGATIONS}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


@dataclass(frozen=True)
class StrategyTraits:
    schedule: str
    uplink: str  # qsgd_delta | raw_delta | raw_weights
    downlink_int8: bool
    aggregation: str
    partial: bool


_STRATEGY_TABLE = {
    "mfed": StrategyTraits("adalr", "qsgd_delta", True, "delta_uniform", False),
    "mfed_q": StrategyTraits("adalr", "raw_delta", False, "delta_uniform", False),
    "mfed_lrd": StrategyTraits("constant", "qsgd_delta", True, "delta_uniform", False),
    "fedavg": StrategyTraits("constant", "raw_weights", False, "weighted", False),
    "fedpaq": StrategyTraits("constant", "qsgd_delta", False, "delta_uniform", True),
    "lrdecay": StrategyTraits("adalr", "raw_weights", False, "weighted", False),
}


def resolve_strategy(cfg: FederationConfig) -> tuple[FederationConfig, StrategyTraits]:
    """Effective config (schedule/aggregation pinned by the strategy) + traits."""
    if cfg.strategy not in _STRATEGY_TABLE:
        raise ConfigError(f"unknown strategy {cfg.strategy!r}")
    traits = _STRATEGY_TABLE[cfg.strategy]
    return replace(cfg, lr_schedule=traits.schedule, aggregation=traits.aggregation), traits


@dataclass
class EdgeState:
    client_id: int
    records: list
    rng: RngStream
    params: ModelParams | None = None
    new_samples: int = 0


@dataclass
class CloudState:
    params: ModelParams
    model: object  # protocol: init_params / loss_and_grads / evaluate
    round: int = 0


@dataclass
class LocalUpdate:
    client_id: int
    kind: str
    payload: dict[str, QsgdPayload | Int8Tensor | Tensor]
    num_samples: int
    uplink_bytes: int


@dataclass
class RoundMetrics:
    round: int
    lr: float
    test_accuracy: float
    test_loss: float
    uplink_bytes: int
    downlink_bytes: int
    cumulative_bytes: int

    @property
    def wall_ms(self) -> float:
        """Simulated transfer time of the round at the nominal link speed."""
        return (self.uplink_bytes + self.downlink_bytes) / BYTES_PER_MS


# ---------------------------------------------------------------------------
# Schedule and gate
# ---------------------------------------------------------------------------


def decayed_lr(cfg: FederationConfig, round_index: int) -> float:
    """Learning rate for a 0-based global round per the configured schedule."""
    if round_index < 0:
        raise ConfigError(f"round index must be >= 0, got {round_index}")
    if cfg.lr_schedule == "adalr":
        return cfg.gamma0 * cfg.delta ** (round_index // cfg.zeta)
    if cfg.lr_schedule == "harmonic":
        return cfg.gamma0 / (round_index + 1)
    return cfg.gamma0


def threshold_gate(new_samples: int, threshold: int) -> bool:
    """A client trains only when its new-sample count *surpasses* the bar."""
    if new_samples < 0 or threshold < 0:
        raise InputError("counts must be non-negative")
    return new_samples > threshold


# ---------------------------------------------------------------------------
# Wire helpers
# ---------------------------------------------------------------------------


def _f32(t: Tensor) -> Tensor:
    """What a raw float32 wire trip leaves of a tensor."""
    return Tensor(t.shape, t.data.astype(np.float32).astype(np.float64), _check=False)


def _encode_params(params: ModelParams, kind: str, cfg: FederationConfig, rng: RngStream):
    """Per-tensor payload dict + exact byte total for one logical transfer."""
    payload: dict[str, object] = {}
    total = 0
    for name, t in params.items():
        if kind == "qsgd":
            p = qsgd_quantize(t, cfg.qsgd_s, rng)
            if cfg.uplink_int8_requant:
                p = int8_quantize(qsgd_dequantize(p))
        elif kind == "int8":
            p = int8_quantize(t)
        elif kind == "raw":
            p = _f32(t)
        else:
            raise ProtocolError(f"unknown payload kind {kind!r}")
        payload[name] = p
        total += payload_bytes(p)
    return payload, total


def _decode_params(payload: dict[str, object]) -> ModelParams:
    out = {}
    for name, p in payload.items():
        if isinstance(p, QsgdPayload):
            out[name] = qsgd_dequantize(p)
        elif isinstance(p, Int8Tensor):
            out[name] = int8_dequantize(p)
        elif isinstance(p, Tensor):
            out[name] = p
        else:
            raise ProtocolError(f"cannot decode payload of type {type(p).__name__}")
    return ModelParams(out)


# ---------------------------------------------------------------------------
# Local training and aggregation
# ---------------------------------------------------------------------------


def local_train(
    edge: EdgeState,
    broadcast: ModelParams,
    model,
    cfg: FederationConfig,
    traits: StrategyTraits,
    lr: float,
    epochs: int | None = None,
) -> LocalUpdate | None:
    """Replace the local model with the broadcast, run E epochs, build payload.

    `epochs` overrides cfg.local_epochs (e.g. 0 for a no-training probe).
    Returns None (a skip, not an error) when the edge has no data.
    """
    n = len(edge.records)
    if n == 0:
        return None
    params = broadcast.copy()
    for _ in range(cfg.local_epochs if epochs is None else epochs):
        order = edge.rng.permutation(n)
        for start in range(0, n, cfg.local_batch):
            batch = [edge.records[i] for i in order[start : start + cfg.local_batch]]
            _, grads = model.loss_and_grads(params, batch)
            params = params.sub(grads.scale(lr))
    edge.params = params
    if traits.uplink == "raw_weights":
        payload, size = _encode_params(params, "raw", cfg, edge.rng)
        kind = "raw_weights"
    else:
        delta = params.sub(broadcast)
        wire = "qsgd" if traits.uplink == "qsgd_delta" else "raw"
        payload, size = _encode_params(delta, wire, cfg, edge.rng)
        kind = traits.uplink
    return LocalUpdate(edge.client_id, kind, payload, n, size)


def aggregate_delta_uniform(prev: ModelParams, updates: list[LocalUpdate]) -> ModelParams:
    """prev + unweighted mean of the (decoded) deltas."""
    if not updates:
        raise ProtocolError("cannot aggregate zero updates")
    acc: ModelParams | None = None
    for u in updates:
        if u.kind == "raw_weights":
            raise ProtocolError("delta aggregation got a raw-weights payload")
        delta = _decode_params(u.payload)
        acc = delta if acc is None else acc.add(delta)
    return prev.add(acc.scale(1.0 / len(updates)))


def aggregate_weighted(updates: list[tuple[ModelParams, int]]) -> ModelParams:
    """Sample-count-weighted average of full parameter sets."""
    if not updates:
        raise ProtocolError("cannot aggregate zero updates")
    total = sum(d for _, d in updates)
    if total <= 0:
        raise InputError("total sample count must be positive")
    acc: ModelParams | None = None
    for params, d in updates:
        term = params.scale(d / total)
        acc = term if acc is None else acc.add(term)
    return acc


# ---------------------------------------------------------------------------
# Round and experiment drivers
# ---------------------------------------------------------------------------


def run_round(
    cloud: CloudState,
    edges: list[EdgeState],
    cfg: FederationConfig,
    traits: StrategyTraits,
    test_records,
    select_rng: RngStream,
    prev: RoundMetrics | None = None,
) -> RoundMetrics:
    """One barrier-synchronized communication round; see the module docstring."""
    rnd = cloud.round
    lr = decayed_lr(cfg, rnd)
    prev_cum = prev.cumulative_bytes if prev else 0

    # broadcast representation: what every participating client receives
    down_payload, down_bytes_per_client = _encode_params(
        cloud.params, "int8" if traits.downlink_int8 else "raw", cfg, select_rng
    )
    broadcast = _decode_params(down_payload)

    # Static desk-scale data: each round an edge re-observes its full slice.
    for e in edges:
        e.new_samples = len(e.records)
    gated = [e for e in edges if threshold_gate(e.new_samples, cfg.new_data_threshold)]
    if traits.partial and gated:
        m = max(1, int(round(cfg.participation_fraction * len(gated))))
        picks = select_rng.permutation(len(gated))[:m]
        gated = sorted((gated[i] for i in picks), key=lambda e: e.client_id)

    updates: list[LocalUpdate] = []
    for e in gated:
        upd = local_train(e, broadcast, cloud.model, cfg, traits, lr)
        if upd is not None:
            updates.append(upd)
            e.new_samples = 0

    if not updates:
        cloud.round += 1
        return RoundMetrics(
            rnd,
            lr,
            prev.test_accuracy if prev else 0.0,
            prev.test_loss if prev else 0.0,
            0,
            0,
            prev_cum,
        )

    if cfg.aggregation == "delta_uniform":
        new_global = aggregate_delta_uniform(broadcast, updates)
    else:
        weighted = [(_decode_params(u.payload), u.num_samples) for u in updates]
        new_global = aggregate_weighted(weighted)

    up_bytes = sum(u.uplink_bytes for u in updates)
    down_bytes = down_bytes_per_client * len(updates)
    cloud.params = new_global
    cloud.round += 1
    acc, loss = cloud.model.evaluate(new_global, test_records)
    return RoundMetrics(
        rnd, lr, acc, loss, up_bytes, down_bytes, prev_cum + up_bytes + down_bytes
    )


def run_federation(
    cfg: FederationConfig, model, train_records, plan, test_records
) -> tuple[list[RoundMetrics], CloudState]:
    """R rounds of the configured strategy; returns metrics + final cloud state."""
    eff, traits = resolve_strategy(cfg)
    root = RngStream(eff.seed, 9000)
    cloud = CloudState(params=model.init_params(root.spawn(1)), model=model)
    edges = [
        EdgeState(
            client_id=cid,
            records=[train_records[i] for i in plan.client_indices(cid)],
            rng=root.spawn(2, cid),
        )
        for cid in sorted(plan.assignments)
    ]
    metrics: list[RoundMetrics] = []
    prev = None
    for rnd in range(eff.rounds):
        prev = run_round(cloud, edges, eff, traits, test_records, root.spawn(3, rnd), prev)
        metrics.append(prev)
    return metrics, cloud


def run_experiment(
    cfg: FederationConfig, model, train_records, plan, test_records
) -> list[RoundMetrics]:
    """R rounds of the configured strategy over a partitioned dataset."""
    return run_federation(cfg, model, train_records, plan, test_records)[0]
