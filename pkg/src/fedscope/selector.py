"""Configuration selection over measured run records.

Energy, time and F1 are min-max normalized over the candidate set and
combined into a weighted loss; alternatively F1 is maximized under energy
and time budgets. Energy efficiency is F1 per watt-hour.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InfeasibleError, StorageError, ValidationError
from .telemetry import REPORT_HEADER, fmt

# Rank keys round the (weight-normalized) loss so float noise from
# rescaling weights or metric columns cannot flip exact ties.
_RANK_DIGITS = 9


@dataclass(frozen=True)
class RunRecord:
    model: str
    aggregator: str
    accuracy: float
    recall: float
    precision: float
    f1: float
    energy_wh: float
    time_s: float

    def __post_init__(self):
        for name in ("accuracy", "recall", "precision", "f1"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{self.label}: {name} must lie in [0, 1], got {v}")
        if not self.energy_wh > 0 or not math.isfinite(self.energy_wh):
            raise ValidationError(f"{self.label}: energy must be > 0, got {self.energy_wh}")
        if not self.time_s > 0 or not math.isfinite(self.time_s):
            raise ValidationError(f"{self.label}: time must be > 0, got {self.time_s}")

    @property
    def label(self) -> str:
        return f"{self.model},{self.aggregator}"


@dataclass(frozen=True)
class LambdaWeights:
    energy: float = 1 / 3
    time: float = 1 / 3
    performance: float = 1 / 3

    def __post_init__(self):
        vals = (self.energy, self.time, self.performance)
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ValidationError(f"lambda weights must be finite and >= 0, got {vals}")
        if not any(v > 0 for v in vals):
            raise ValidationError("at least one lambda weight must be > 0")

    @property
    def total(self) -> float:
        return self.energy + self.time + self.performance

    def as_tuple(self):
        return (self.energy, self.time, self.performance)


@dataclass(frozen=True)
class NormalizedRecord:
    energy: float
    time: float
    f1: float
    record: RunRecord


def _minmax(values: Sequence[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.0] * len(values)
    span = hi - lo
    return [min(1.0, max(0.0, (v - lo) / span)) for v in values]


def normalize(records: Sequence[RunRecord]) -> list[NormalizedRecord]:
    """Min-max normalize energy, time and F1 over exactly ``records``.

    A metric that is constant across the set maps to 0 for every record.
    """
    records = list(records)
    if not records:
        raise ValidationError("cannot normalize an empty record set")
    e = _minmax([r.energy_wh for r in records])
    t = _minmax([r.time_s for r in records])
    f = _minmax([r.f1 for r in records])
    return [NormalizedRecord(a, b, c, r) for a, b, c, r in zip(e, t, f, records)]


def objective(norm: NormalizedRecord, lam: LambdaWeights) -> float:
    return lam.energy * norm.energy + lam.time * norm.time + lam.performance * (1.0 - norm.f1)


def _tiebreak(r: RunRecord):
    return (-r.f1, r.energy_wh, r.time_s, r.label)


@dataclass(frozen=True)
class Ranked:
    rank: int
    record: RunRecord
    norm: NormalizedRecord
    score: float


def select_weighted(records: Sequence[RunRecord], lam: LambdaWeights):
    """Argmin of the weighted loss; returns ``(best, ranking)``.

    Ties fall through to higher F1, lower energy, lower time, then label.
    """
    norms = normalize(records)
    scored = [(objective(n, lam), n) for n in norms]
    scored.sort(key=lambda sn: (round(sn[0] / lam.total, _RANK_DIGITS), *_tiebreak(sn[1].record)))
    ranking = [Ranked(i + 1, n.record, n, s) for i, (s, n) in enumerate(scored)]
    return ranking[0].record, ranking


def select_constrained(records: Sequence[RunRecord], e_max: float = math.inf, t_max: float = math.inf):
    """Highest-F1 record with ``E <= e_max`` and ``T <= t_max``.

    Returns ``(best, feasible records in rank order)``.
    """
    if not e_max > 0 or not t_max > 0:
        raise ValidationError("energy and time budgets must be > 0")
    records = list(records)
    if not records:
        raise ValidationError("no records to select from")
    feasible = [r for r in records if r.energy_wh <= e_max and r.time_s <= t_max]
    if not feasible:
        binding = []
        if not any(r.energy_wh <= e_max for r in records):
            binding.append("energy")
        if not any(r.time_s <= t_max for r in records):
            binding.append("time")
        if not binding:
            binding = ["energy", "time"]
            why = "no record meets both budgets at once"
        else:
            why = " and ".join(
                f"{b} budget {e_max if b == 'energy' else t_max:g} is below the minimum "
                f"{min(r.energy_wh if b == 'energy' else r.time_s for r in records):g}" for b in binding)
        raise InfeasibleError(f"infeasible: {why}", binding)
    feasible.sort(key=_tiebreak)
    return feasible[0], feasible


def eta(record: RunRecord) -> float:
    """F1 per watt-hour."""
    if not record.energy_wh > 0:
        raise ValidationError(f"eta needs positive energy, got {record.energy_wh}")
    return record.f1 / record.energy_wh


def eta_value(f1: float, energy_wh: float) -> float:
    if not energy_wh > 0:
        raise ValidationError(f"eta needs positive energy, got {energy_wh}")
    return f1 / energy_wh


def rank_by_eta(records: Sequence[RunRecord]) -> list[tuple[RunRecord, float]]:
    pairs = [(r, eta(r)) for r in records]
    pairs.sort(key=lambda p: (-p[1], *_tiebreak(p[0])))
    return pairs


def dominates(a: RunRecord, b: RunRecord) -> bool:
    no_worse = a.f1 >= b.f1 and a.energy_wh <= b.energy_wh and a.time_s <= b.time_s
    better = a.f1 > b.f1 or a.energy_wh < b.energy_wh or a.time_s < b.time_s
    return no_worse and better


def pareto_front(records: Sequence[RunRecord]) -> list[RunRecord]:
    """Non-dominated records (max F1, min energy, min time), by descending F1."""
    records = list(records)
    front = [r for r in records if not any(dominates(o, r) for o in records if o is not r)]
    front.sort(key=_tiebreak)
    return front


# -- CSV ---------------------------------------------------------------------

def _read_rows(text: str, source: str):
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValidationError(f"{source}: no header row")
    reader = csv.DictReader(lines)
    header = tuple(h.strip() for h in (reader.fieldnames or ()))
    missing = [h for h in REPORT_HEADER if h not in header and h != "eta"]
    if missing:
        raise ValidationError(f"{source}: header is missing columns {missing}; expected {','.join(REPORT_HEADER)}")
    return list(reader)


def parse_records(text: str, source: str = "<csv>") -> list[RunRecord]:
    """Records from report-schema CSV text; ``#`` lines are comments."""
    out = []
    for i, row in enumerate(_read_rows(text, source), start=2):
        try:
            out.append(RunRecord(
                model=row["model"].strip(),
                aggregator=row["aggregator"].strip(),
                accuracy=float(row["accuracy"]),
                recall=float(row["recall"]),
                precision=float(row["precision"]),
                f1=float(row["f1"]),
                energy_wh=float(row["total_energy_wh"]),
                time_s=float(row["total_time_s"]),
            ))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{source}: bad data row {i}: {exc}") from exc
    if not out:
        raise ValidationError(f"{source}: no data rows")
    return out


def read_records(path) -> list[RunRecord]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    return parse_records(text, str(path))


def records_to_csv(records: Iterable[RunRecord], comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in records:
        w.writerow([r.model, r.aggregator, fmt(r.accuracy), fmt(r.recall), fmt(r.precision), fmt(r.f1),
                    fmt(r.energy_wh), fmt(r.time_s), fmt(eta(r))])
    return buf.getvalue()


# -- selection reports ---------------------------------------------------------

def _d3(x: float) -> str:
    return f"{x:.3f}"


def weighted_report(records: Sequence[RunRecord], lam: LambdaWeights):
    """``(winner, csv_text, plain_text)`` with the full normalized audit trail."""
    best, ranking = select_weighted(records, lam)
    header = ["rank", "model", "aggregator", "f1", "total_energy_wh", "total_time_s",
              "norm_energy", "norm_time", "norm_f1", "objective", "objective_3dp"]
    rows = [[str(k.rank), k.record.model, k.record.aggregator, fmt(k.record.f1), fmt(k.record.energy_wh),
             fmt(k.record.time_s), fmt(k.norm.energy), fmt(k.norm.time), fmt(k.norm.f1), fmt(k.score),
             _d3(k.score)] for k in ranking]
    title = f"weighted selection, lambda = ({', '.join(fmt(v) for v in lam.as_tuple())})"
    return best, _csv(header, rows), _text(title, best, header, rows)


def constrained_report(records: Sequence[RunRecord], e_max: float, t_max: float):
    best, feasible = select_constrained(records, e_max, t_max)
    feasible_ids = {id(r) for r in feasible}
    order = feasible + [r for r in records if id(r) not in feasible_ids]
    header = ["rank", "model", "aggregator", "f1", "total_energy_wh", "total_time_s", "feasible", "excluded_by"]
    rows = []
    for i, r in enumerate(order, start=1):
        excl = [n for n, bad in (("energy", r.energy_wh > e_max), ("time", r.time_s > t_max)) if bad]
        rows.append([str(i) if not excl else "-", r.model, r.aggregator, fmt(r.f1), fmt(r.energy_wh),
                     fmt(r.time_s), "yes" if not excl else "no", "+".join(excl)])
    title = f"constrained selection, E_max = {fmt(e_max)} Wh, T_max = {fmt(t_max)} s"
    return best, _csv(header, rows), _text(title, best, header, rows)


def eta_report(records: Sequence[RunRecord]):
    ranked = rank_by_eta(records)
    header = ["rank", "model", "aggregator", "f1", "total_energy_wh", "eta", "eta_3dp"]
    rows = [[str(i), r.model, r.aggregator, fmt(r.f1), fmt(r.energy_wh), fmt(e), _d3(e)]
            for i, (r, e) in enumerate(ranked, start=1)]
    return ranked[0][0], _csv(header, rows), _text("energy efficiency (F1 per Wh)", ranked[0][0], header, rows)


def pareto_report(records: Sequence[RunRecord]):
    front = pareto_front(records)
    on_front = {id(r) for r in front}
    header = ["model", "aggregator", "f1", "total_energy_wh", "total_time_s", "pareto"]
    ordered = front + [r for r in records if id(r) not in on_front]
    rows = [[r.model, r.aggregator, fmt(r.f1), fmt(r.energy_wh), fmt(r.time_s),
             "yes" if id(r) in on_front else "no"] for r in ordered]
    return front, _csv(header, rows), _text("pareto front (max F1, min energy, min time)", front[0], header, rows)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _text(title: str, best: RunRecord, header, rows) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [title, f"winner: {best.label}", "", line(header), line(["-" * w for w in widths])]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"
