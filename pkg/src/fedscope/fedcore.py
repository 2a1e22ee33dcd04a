"""Federated round engine: client training and server aggregation."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import AggregationError, ConfigurationError, DimensionError, ValidationError
from .seeding import derive_seed
from .telemetry import COMMUNICATION, COMPUTE, Event, train_step_flops

BYTES_PER_PARAM = 4  # parameters travel as float32

KINDS = ("fedavg", "fedprox", "fedavgm")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "fedavg"
    mu: float = 0.01
    server_lr: float = 0.3
    momentum: float = 0.3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"strategy kind must be one of {KINDS}, got {self.kind!r}")
        if self.mu < 0:
            raise ValidationError("mu must be >= 0")
        if self.server_lr <= 0:
            raise ValidationError("server_lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must be in [0, 1)")

    @property
    def label(self) -> str:
        return self.kind

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "fedprox":
            d["mu"] = self.mu
        if self.kind == "fedavgm":
            d.update(server_lr=self.server_lr, momentum=self.momentum)
        return d

    @classmethod
    def from_dict(cls, d) -> "StrategyConfig":
        if isinstance(d, str):
            return cls(kind=d)
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    smoothing: float = 0.1
    hyper: nx.AdamHyper = field(default_factory=nx.AdamHyper)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("local epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: nx.ParamSet
    n_samples: int
    losses: tuple[float, ...]
    flops: int = 0
    wall_s: float = 0.0


@dataclass(frozen=True)
class ServerState:
    params: nx.ParamSet
    momentum: nx.ParamSet | None = None
    round: int = 0

    @classmethod
    def init(cls, params: nx.ParamSet, strategy: StrategyConfig) -> "ServerState":
        mom = nx.ParamSet.zeros_like(params) if strategy.kind == "fedavgm" else None
        return cls(params, mom, 0)


def client_seed(session_seed: int, round_index: int, client_id: int) -> int:
    return derive_seed(session_seed, "local-train", round_index, client_id)


def train_epochs(params: nx.ParamSet, x, y, cfg: TrainConfig, seed: int, prox=None):
    """Plain minibatch Adam from a fresh optimizer state.

    Returns ``(params, per-epoch mean losses, flops)``.
    """
    rng = np.random.default_rng(seed)
    state = nx.AdamState.init(params, cfg.hyper)
    n = y.size
    fwd = sum(2 * a * b for a, b in params.signature)
    losses, flops = [], 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = nx.loss_and_gradient(params, x[idx], y[idx], cfg.smoothing,
                                           prox=prox)
            params, state = nx.adam_step(state, params, g)
            total += loss * idx.size
            flops += train_step_flops(fwd, idx.size)
        losses.append(total / n)
    return params, losses, flops


def local_train(client_id: int, x, y, global_params: nx.ParamSet, strategy: StrategyConfig,
                cfg: TrainConfig, seed: int) -> ClientUpdate:
    """Train one client from the broadcast global model.

    Under fedprox every gradient carries ``mu * (w - w_global)``.
    """
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise ConfigurationError(f"client {client_id} has an empty shard")
    prox = (strategy.mu, global_params) if strategy.kind == "fedprox" else None
    t0 = time.perf_counter()
    params, losses, flops = train_epochs(global_params, x, y, cfg, seed, prox)
    wall = time.perf_counter() - t0
    if not params.is_finite():
        raise ValidationError(f"client {client_id} produced non-finite parameters")
    return ClientUpdate(client_id, params, int(y.size), tuple(losses), flops, wall)


def _ordered(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise AggregationError("aggregation needs at least one client update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    sig = ordered[0].params.signature
    for u in ordered:
        if u.params.signature != sig:
            raise AggregationError(f"client {u.client_id} sent shapes {u.params.signature}, expected {sig}")
    return ordered


def aggregate_fedavg(updates: Sequence[ClientUpdate]) -> nx.ParamSet:
    """Sample-count weighted mean, reduced in ascending client id order."""
    ordered = _ordered(updates)
    return nx.weighted_average([u.params for u in ordered], [u.n_samples for u in ordered])


def aggregate_fedavgm(updates: Sequence[ClientUpdate], server: ServerState,
                      server_lr: float, momentum: float) -> ServerState:
    """Heavy-ball server momentum on the pseudo-gradient ``w_global - avg``."""
    avg = aggregate_fedavg(updates)
    try:
        delta = server.params - avg
    except DimensionError as exc:
        raise AggregationError(str(exc)) from exc
    v_old = server.momentum if server.momentum is not None else nx.ParamSet.zeros_like(server.params)
    v = v_old.scale(momentum) + delta
    # w - lr*(beta*v_old + w - avg), arranged so lr=1, beta=0 yields avg exactly.
    new = server.params.scale(1.0 - server_lr) + avg.scale(server_lr) - v_old.scale(server_lr * momentum)
    return ServerState(new, v, server.round + 1)


@dataclass
class RoundResult:
    state: ServerState
    updates: list[ClientUpdate]
    events: list[Event]
    train_loss: float


def run_round(server: ServerState, shards: Sequence[tuple[int, np.ndarray, np.ndarray]],
              strategy: StrategyConfig, cfg: TrainConfig, round_index: int, session_seed: int,
              session: str = "", workers: int = 1) -> RoundResult:
    """Broadcast, train every participating client, aggregate.

    ``shards`` holds ``(client_id, x, y)`` triples; empty shards are skipped.
    Client work may run on a thread pool but results are always reduced in
    client id order.
    """
    active = sorted((s for s in shards if len(s[2]) > 0), key=lambda s: s[0])
    if not active:
        raise ConfigurationError(f"session {session!r} round {round_index}: no client has data")
    glob = server.params

    def work(shard):
        cid, x, y = shard
        return local_train(cid, x, y, glob, strategy, cfg, client_seed(session_seed, round_index, cid))

    if workers > 1 and len(active) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            updates = list(pool.map(work, active))
    else:
        updates = [work(s) for s in active]

    if strategy.kind == "fedavgm":
        state = aggregate_fedavgm(updates, server, strategy.server_lr, strategy.momentum)
    else:
        state = ServerState(aggregate_fedavg(updates), server.momentum, server.round + 1)

    n_bytes = glob.n_params() * BYTES_PER_PARAM
    events = []
    for u in updates:
        actor = f"client{u.client_id}"
        events.append(Event(session, round_index, actor, COMMUNICATION, 0.0, n_bytes, 0))
        events.append(Event(session, round_index, actor, COMPUTE, u.wall_s, 0, u.flops))
        events.append(Event(session, round_index, actor, COMMUNICATION, 0.0, n_bytes, 0))
    events.append(Event(session, round_index, "server", COMPUTE, 0.0, 0, 2 * glob.n_params() * len(updates)))

    n_tot = sum(u.n_samples for u in updates)
    train_loss = math.fsum(u.losses[-1] * u.n_samples for u in updates) / n_tot
    return RoundResult(state, updates, events, train_loss)


def with_lr(cfg: TrainConfig, lr: float) -> TrainConfig:
    return replace(cfg, hyper=replace(cfg.hyper, lr=lr))
