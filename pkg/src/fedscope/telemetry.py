"""Classification metrics and the time/energy ledger."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

COMPUTE = "compute"
COMMUNICATION = "communication"

ROUND_LOG_HEADER = ("session", "round", "participants", "train_loss", "val_loss", "val_acc",
                    "cum_energy_wh", "cum_time_s")
REPORT_HEADER = ("model", "aggregator", "accuracy", "recall", "precision", "f1",
                 "total_energy_wh", "total_time_s", "eta")


def confusion_matrix(truth, pred, n_classes: int) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> dict:
    """Accuracy plus macro precision/recall/F1 over all K classes.

    Rows are truth, columns predictions. Zero denominators count as 0, so a
    class that is neither present nor predicted still pulls the macro mean
    down.
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    tp = np.diag(cm)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_pos > 0, tp / pred_pos, 0.0)
        recall = np.where(true_pos > 0, tp / true_pos, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return {
        "accuracy": float(tp.sum() / total) if total else 0.0,
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "f1": float(f1.mean()),
    }


@dataclass(frozen=True)
class Event:
    session: str
    round: int
    actor: str
    kind: str
    duration_s: float = 0.0
    bytes: int = 0
    flops: int = 0


@dataclass
class EnergyLedger:
    """Append-only log of compute and communication events.

    ``duration_s`` is the measured wall time; flop-proxy accounting ignores
    it and derives time from the flop and byte counts instead.
    """

    events: list[Event] = field(default_factory=list)

    def append(self, event: Event) -> None:
        if event.duration_s < 0 or event.bytes < 0 or event.flops < 0:
            raise ValidationError(f"event quantities must be >= 0: {event}")
        if event.kind not in (COMPUTE, COMMUNICATION):
            raise ValidationError(f"unknown event kind {event.kind!r}")
        self.events.append(event)

    def extend(self, events) -> None:
        for e in events:
            self.append(e)

    def __len__(self):
        return len(self.events)

    def __add__(self, other: "EnergyLedger") -> "EnergyLedger":
        return EnergyLedger(self.events + other.events)

    def total_bytes(self) -> int:
        return sum(e.bytes for e in self.events)

    def total_flops(self) -> int:
        return sum(e.flops for e in self.events)


@dataclass(frozen=True)
class PowerModel:
    mode: str = "flop-proxy"
    active_watts: float = 300.0
    idle_watts: float = 0.0
    joules_per_flop: float = 1e-10
    joules_per_byte: float = 1e-7
    flops_per_second: float = 1e10
    bytes_per_second: float = 1.25e7

    def __post_init__(self):
        if self.mode not in ("flop-proxy", "wallclock"):
            raise ValidationError(f"power model mode must be 'flop-proxy' or 'wallclock', got {self.mode!r}")
        for name in ("active_watts", "idle_watts", "joules_per_flop", "joules_per_byte"):
            if getattr(self, name) < 0:
                raise ValidationError(f"power model coefficient {name} must be >= 0")
        for name in ("flops_per_second", "bytes_per_second"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"power model rate {name} must be > 0")

    @property
    def reproducible(self) -> bool:
        return self.mode == "flop-proxy"

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "PowerModel":
        return cls(**d)


def event_duration(event: Event, model: PowerModel) -> float:
    if model.mode == "wallclock":
        return event.duration_s
    return event.flops / model.flops_per_second + event.bytes / model.bytes_per_second


def energy_total(ledger: EnergyLedger, model: PowerModel, idle_gaps_s: float = 0.0):
    """Return ``(energy_wh, time_s)`` for the ledger under ``model``.

    Events lie on one sequential timeline, so time is the plain sum of
    durations. ``idle_gaps_s`` adds idle draw in wallclock mode.
    """
    if model.mode == "wallclock":
        t = float(sum(e.duration_s for e in ledger.events))
        joules = model.active_watts * t + model.idle_watts * idle_gaps_s
        return joules / 3600.0, t
    flops = sum(e.flops for e in ledger.events)
    nbytes = sum(e.bytes for e in ledger.events)
    joules = flops * model.joules_per_flop + nbytes * model.joules_per_byte
    t = flops / model.flops_per_second + nbytes / model.bytes_per_second
    return joules / 3600.0, t


def train_step_flops(forward_flops_per_sample: int, batch: int, backward_factor: float = 2.0) -> int:
    """Forward plus backward flops for one optimizer step."""
    return int(round(forward_flops_per_sample * batch * (1.0 + backward_factor)))


def fmt(x) -> str:
    """Full-precision, platform-stable number formatting for CSV output."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def evaluate(model, dataset, use_case: str | None = None, seed: int = 0, oracle_router: bool = False):
    """Metrics and flat-label confusion matrix of ``model`` on ``dataset``.

    ``use_case`` corrupts the images first (UC1..UC5).
    """
    from .hierarchy import predict_batch
    from .synthdata import corrupt_dataset

    if len(dataset) == 0:
        raise ValidationError("evaluation split is empty")
    if use_case is not None:
        dataset = corrupt_dataset(dataset, use_case, seed)
    g, d = predict_batch(model, dataset.images, dataset.groups if oracle_router else None)
    offsets = dataset.offsets
    pred = offsets[g] + d
    cm = confusion_matrix(dataset.classes, pred, dataset.spec.n_classes)
    return metrics_from_confusion(cm), cm
