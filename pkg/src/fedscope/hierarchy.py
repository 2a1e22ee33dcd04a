"""Router + per-group specialist decomposition, each trained as its own
federated session."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, StorageError, ValidationError
from .fedcore import ServerState, StrategyConfig, TrainConfig, run_round
from .seeding import derive_seed, rng_for
from .synthdata import ClientShard, Dataset
from .telemetry import EnergyLedger, PowerModel, energy_total

ROUTER = "router"
# Pixels live in [0, 1]; models see them shifted to be roughly zero-mean so a
# global intensity offset is not collinear with the bias terms.
INPUT_CENTER = 0.5
SessionId = Union[str, int]


@dataclass(frozen=True)
class HierarchyConfig:
    rounds: int = 30
    router_hidden: tuple[int, ...] = (32,)
    specialist_hidden: tuple[int, ...] = (32,)

    def __post_init__(self):
        object.__setattr__(self, "router_hidden", tuple(self.router_hidden))
        object.__setattr__(self, "specialist_hidden", tuple(self.specialist_hidden))
        if self.rounds < 0:
            raise ValidationError("rounds must be >= 0")


@dataclass(frozen=True)
class SessionPlan:
    session: SessionId
    client_ids: tuple[int, ...]
    shards: tuple[tuple[int, np.ndarray, np.ndarray], ...] = field(repr=False)
    spec: nx.ModelSpec
    rounds: int

    @property
    def name(self) -> str:
        return session_name(self.session)


def session_name(session: SessionId) -> str:
    return ROUTER if session == ROUTER else f"group{session}"


def model_input(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float64) - INPUT_CENTER


def plan_sessions(train: Dataset, shards: Sequence[ClientShard], cfg: HierarchyConfig) -> list[SessionPlan]:
    """One router plan over all non-empty clients, then one plan per group.

    A client joins group g's session only if its shard holds a sample of g;
    group-session labels are disease indices within the group.
    """
    spec = train.spec
    plans = []
    router_shards = []
    for s in sorted(shards, key=lambda s: s.client_id):
        if len(s):
            router_shards.append((s.client_id, model_input(train.images[s.indices]), train.groups[s.indices]))
    if not router_shards:
        raise ConfigurationError("no client holds any training data")
    plans.append(SessionPlan(ROUTER, tuple(c for c, _, _ in router_shards), tuple(router_shards),
                             nx.ModelSpec(spec.n_pixels, cfg.router_hidden, max(spec.n_groups, 2)), cfg.rounds))
    for g, n_d in enumerate(spec.diseases):
        group_shards = []
        for s in sorted(shards, key=lambda s: s.client_id):
            idx = s.indices[train.groups[s.indices] == g]
            if idx.size:
                group_shards.append((s.client_id, model_input(train.images[idx]), train.diseases[idx]))
        if not group_shards:
            raise ConfigurationError(f"group {g} has no training samples on any client")
        plans.append(SessionPlan(g, tuple(c for c, _, _ in group_shards), tuple(group_shards),
                                 nx.ModelSpec(spec.n_pixels, cfg.specialist_hidden, max(n_d, 2)), cfg.rounds))
    return plans


@dataclass(frozen=True)
class HierarchicalModel:
    router: nx.ParamSet
    router_spec: nx.ModelSpec
    specialists: tuple[nx.ParamSet, ...]
    specialist_specs: tuple[nx.ModelSpec, ...]
    diseases: tuple[int, ...]

    @property
    def n_groups(self) -> int:
        return len(self.diseases)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.diseases)[:-1]]).astype(np.int64)

    def equals(self, other: "HierarchicalModel") -> bool:
        return (self.diseases == other.diseases and self.router.equals(other.router)
                and all(a.equals(b) for a, b in zip(self.specialists, other.specialists)))


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first maximal index.
    return np.argmax(logits, axis=1)


def predict_batch(model: HierarchicalModel, images: np.ndarray, groups=None):
    """Route then classify; returns ``(group, disease)`` arrays.

    Passing ``groups`` substitutes an oracle router.
    """
    images = model_input(np.atleast_2d(images))
    if groups is None:
        # Specialists for single-disease groups are padded to two outputs.
        g_pred = argmax_lowest(nx.forward(model.router, images)[:, :model.n_groups])
    else:
        g_pred = np.asarray(groups, dtype=np.int64)
    d_pred = np.zeros_like(g_pred)
    for g in range(model.n_groups):
        sel = g_pred == g
        if sel.any():
            logits = nx.forward(model.specialists[g], images[sel])[:, :model.diseases[g]]
            d_pred[sel] = argmax_lowest(logits)
    return g_pred, d_pred


def predict(model: HierarchicalModel, image: np.ndarray) -> tuple[int, int]:
    g, d = predict_batch(model, np.asarray(image)[None, :])
    return int(g[0]), int(d[0])


def _session_val(plan: SessionPlan, val: Dataset | None):
    if val is None or len(val) == 0:
        return None
    if plan.session == ROUTER:
        return model_input(val.images), val.groups
    sel = val.groups == plan.session
    if not sel.any():
        return None
    return model_input(val.images[sel]), val.diseases[sel]


@dataclass
class TrainingResult:
    model: HierarchicalModel
    ledger: EnergyLedger
    round_log: list[dict]


def train_hierarchy(plans: Sequence[SessionPlan], strategy: StrategyConfig, train_cfg: TrainConfig,
                    seed: int, val: Dataset | None = None, power: PowerModel | None = None,
                    workers: int = 1, diseases: Sequence[int] | None = None) -> TrainingResult:
    """Run every session to completion, router first then groups ascending.

    All sessions share one experiment-level ledger; ``round_log`` carries
    one row per (session, round) with cumulative energy and time.
    """
    power = power or PowerModel()
    ledger = EnergyLedger()
    log = []
    trained = {}
    ordered = sorted(plans, key=lambda p: (p.session != ROUTER, p.session if p.session != ROUTER else -1))
    for plan in ordered:
        sseed = derive_seed(seed, "session", plan.name)
        params = nx.init_params(plan.spec, rng_for(sseed, "init"))
        state = ServerState.init(params, strategy)
        vdata = _session_val(plan, val)
        for r in range(plan.rounds):
            res = run_round(state, plan.shards, strategy, train_cfg, r, sseed, plan.name, workers)
            state = res.state
            ledger.extend(res.events)
            e_wh, t_s = energy_total(ledger, power)
            row = {"session": plan.name, "round": r + 1, "participants": len(res.updates),
                   "train_loss": res.train_loss, "val_loss": float("nan"), "val_acc": float("nan"),
                   "cum_energy_wh": e_wh, "cum_time_s": t_s}
            if vdata is not None:
                logits = nx.forward(state.params, vdata[0])
                row["val_loss"] = nx.loss_smoothed_ce(logits, vdata[1], train_cfg.smoothing)
                row["val_acc"] = float(np.mean(argmax_lowest(logits) == vdata[1]))
            log.append(row)
        trained[plan.session] = (state.params, plan.spec)
    if ROUTER not in trained:
        raise ConfigurationError("router session missing from plans")
    groups = sorted(k for k in trained if k != ROUTER)
    if diseases is None:
        diseases = tuple(trained[g][1].n_classes for g in groups)
    model = HierarchicalModel(trained[ROUTER][0], trained[ROUTER][1],
                              tuple(trained[g][0] for g in groups), tuple(trained[g][1] for g in groups),
                              tuple(int(d) for d in diseases))
    return TrainingResult(model, ledger, log)


# Binary container, little-endian:
#   b"FSHM" | u32 version | u32 n_models (router first, then groups)
#   per model: u32 n_layers, per layer u32 fan_in, u32 fan_out, f64 W (row-major), f64 b
HM_MAGIC = b"FSHM"
HM_VERSION = 1


def _write_params(buf: io.BytesIO, p: nx.ParamSet):
    buf.write(struct.pack("<I", len(p.layers)))
    for w, b in p.layers:
        buf.write(struct.pack("<II", *w.shape))
        buf.write(w.astype("<f8").tobytes())
        buf.write(b.astype("<f8").tobytes())


def model_to_bytes(model: HierarchicalModel) -> bytes:
    buf = io.BytesIO()
    buf.write(HM_MAGIC + struct.pack("<II", HM_VERSION, 1 + model.n_groups))
    for p in (model.router, *model.specialists):
        _write_params(buf, p)
    return buf.getvalue()


def _read_params(raw: bytes, pos: int):
    (n_layers,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    layers = []
    for _ in range(n_layers):
        fi, fo = struct.unpack_from("<II", raw, pos)
        pos += 8
        w = np.frombuffer(raw, "<f8", fi * fo, pos).reshape(fi, fo).astype(np.float64)
        pos += 8 * fi * fo
        b = np.frombuffer(raw, "<f8", fo, pos).astype(np.float64)
        pos += 8 * fo
        layers.append((w, b))
    return nx.ParamSet(layers), pos


def save_model(model: HierarchicalModel, path, metadata: dict | None = None) -> None:
    path = Path(path)
    meta = {
        "format": "FSHM",
        "version": HM_VERSION,
        "diseases": list(model.diseases),
        "router_spec": model.router_spec.to_dict(),
        "specialist_specs": [s.to_dict() for s in model.specialist_specs],
        **(metadata or {}),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(model_to_bytes(model))
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write model to {path}: {exc}") from exc


def load_model(path) -> HierarchicalModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    except OSError as exc:
        raise StorageError(f"cannot read model {path}: {exc}") from exc
    if raw[:4] != HM_MAGIC:
        raise ValidationError(f"{path} is not an FSHM file")
    version, n_models = struct.unpack_from("<II", raw, 4)
    if version != HM_VERSION:
        raise ValidationError(f"unsupported FSHM version {version}")
    pos = 12
    params = []
    for _ in range(n_models):
        p, pos = _read_params(raw, pos)
        params.append(p)
    return HierarchicalModel(params[0], nx.ModelSpec.from_dict(meta["router_spec"]), tuple(params[1:]),
                             tuple(nx.ModelSpec.from_dict(s) for s in meta["specialist_specs"]),
                             tuple(meta["diseases"]))
