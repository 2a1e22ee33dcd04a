"""Declarative experiment configuration and the run/sweep pipeline."""

from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from . import hierarchy as hi
from . import numerics as nx
from . import synthdata as sd
from .errors import FedscopeError, StorageError, ValidationError
from .fedcore import StrategyConfig, TrainConfig
from .seeding import derive_seed
from .selector import eta_value
from .telemetry import REPORT_HEADER, ROUND_LOG_HEADER, PowerModel, energy_total, evaluate, fmt

ALL_UCS = tuple(sd.RECIPES)
_TOP_KEYS = {"dataset", "n_clients", "rounds", "epochs", "batch_size", "smoothing", "split", "optimizer",
             "strategy", "model", "power", "seed", "use_cases", "grid"}


@dataclass(frozen=True)
class ModelChoice:
    name: str = "mlp-h32"
    router_hidden: tuple[int, ...] = (32,)
    specialist_hidden: tuple[int, ...] = (32,)

    def to_dict(self):
        return {"name": self.name, "router_hidden": list(self.router_hidden),
                "specialist_hidden": list(self.specialist_hidden)}

    @classmethod
    def from_dict(cls, d) -> "ModelChoice":
        if isinstance(d, str):
            return cls(name=d)
        unknown = set(d) - {"name", "router_hidden", "specialist_hidden", "hidden"}
        if unknown:
            raise ValidationError(f"model: unknown keys {sorted(unknown)}")
        hidden = d.get("hidden")
        r = tuple(d.get("router_hidden", hidden if hidden is not None else (32,)))
        s = tuple(d.get("specialist_hidden", hidden if hidden is not None else (32,)))
        name = d.get("name") or "mlp-h" + "x".join(str(h) for h in s)
        if any(int(h) < 1 for h in (*r, *s)):
            raise ValidationError("model: hidden widths must be >= 1")
        return cls(name, tuple(int(h) for h in r), tuple(int(h) for h in s))


def _optimizer(d: dict) -> nx.AdamHyper:
    d = dict(d or {})
    profile = d.pop("profile", "desk")
    if profile not in ("desk", "reference"):
        raise ValidationError(f"optimizer.profile must be 'desk' or 'reference', got {profile!r}")
    base = nx.AdamHyper.reference_profile() if profile == "reference" else nx.AdamHyper()
    try:
        return replace(base, **d)
    except TypeError as exc:
        raise ValidationError(f"optimizer: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: Any = field(default_factory=sd.DatasetSpec)  # DatasetSpec or path to an FSDS file
    n_clients: int = 10
    rounds: int = 30
    epochs: int = 5
    batch_size: int = 64
    smoothing: float = 0.1
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    optimizer: nx.AdamHyper = field(default_factory=nx.AdamHyper)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    model: ModelChoice = field(default_factory=ModelChoice)
    power: PowerModel = field(default_factory=PowerModel)
    seed: int = 0
    use_cases: tuple[str, ...] = ALL_UCS
    grid_models: tuple[ModelChoice, ...] = ()
    grid_strategies: tuple[StrategyConfig, ...] = ()

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValidationError("n_clients must be >= 1")
        if self.rounds < 0:
            raise ValidationError("rounds must be >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        bad = [u for u in self.use_cases if u not in sd.RECIPES]
        if bad:
            raise ValidationError(f"use_cases: unknown entries {bad}")
        if isinstance(self.dataset, (str, Path)) and not Path(self.dataset).exists():
            raise StorageError(f"dataset file {self.dataset} does not exist")
        # Constructed for validation only.
        TrainConfig(self.epochs, self.batch_size, self.smoothing, self.optimizer)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.smoothing, self.optimizer)

    @property
    def hierarchy_config(self) -> hi.HierarchyConfig:
        return hi.HierarchyConfig(self.rounds, self.model.router_hidden, self.model.specialist_hidden)

    def dataset_spec(self) -> sd.DatasetSpec:
        if isinstance(self.dataset, sd.DatasetSpec):
            return self.dataset
        return load_dataset(self).spec

    def to_dict(self, include_grid: bool = True) -> dict:
        d = {
            "dataset": self.dataset.to_dict() if isinstance(self.dataset, sd.DatasetSpec) else str(self.dataset),
            "n_clients": self.n_clients, "rounds": self.rounds, "epochs": self.epochs,
            "batch_size": self.batch_size, "smoothing": self.smoothing, "split": list(self.split),
            "optimizer": self.optimizer.to_dict(), "strategy": self.strategy.to_dict(),
            "model": self.model.to_dict(), "power": self.power.to_dict(), "seed": self.seed,
            "use_cases": list(self.use_cases),
        }
        if include_grid and (self.grid_models or self.grid_strategies):
            d["grid"] = {"models": [m.to_dict() for m in self.grid_models],
                         "strategies": [s.to_dict() for s in self.grid_strategies]}
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        seed = d.get("seed")
        if seed is not None:
            kw["seed"] = int(seed)
        ds = d.get("dataset", {})
        if isinstance(ds, str):
            p = Path(ds)
            kw["dataset"] = str(p if p.is_absolute() or base_dir is None else base_dir / p)
        else:
            ds = dict(ds)
            ds.setdefault("seed", kw.get("seed", 0))
            kw["dataset"] = sd.DatasetSpec.from_dict(ds)
        for key in ("n_clients", "rounds", "epochs", "batch_size"):
            if key in d:
                kw[key] = int(d[key])
        if "smoothing" in d:
            kw["smoothing"] = float(d["smoothing"])
        if "split" in d:
            kw["split"] = tuple(float(x) for x in d["split"])
        if "optimizer" in d:
            kw["optimizer"] = _optimizer(d["optimizer"])
        if "strategy" in d:
            kw["strategy"] = _strategy(d["strategy"])
        if "model" in d:
            kw["model"] = ModelChoice.from_dict(d["model"])
        if "power" in d:
            try:
                kw["power"] = PowerModel.from_dict(d["power"])
            except TypeError as exc:
                raise ValidationError(f"power: {exc}") from exc
        if "use_cases" in d:
            kw["use_cases"] = parse_uc(d["use_cases"])
        grid = d.get("grid")
        if grid is not None:
            kw["grid_models"] = tuple(ModelChoice.from_dict(m) for m in grid.get("models", []))
            kw["grid_strategies"] = tuple(_strategy(s) for s in grid.get("strategies", []))
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise StorageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: top level must be an object")
        return cls.from_dict(raw, path.parent)


def _strategy(d) -> StrategyConfig:
    try:
        return StrategyConfig.from_dict(d)
    except TypeError as exc:
        raise ValidationError(f"strategy: {exc}") from exc


def parse_uc(value) -> tuple[str, ...]:
    """``all``, ``none``, ``1..5`` or ``UCk`` (comma lists allowed)."""
    if isinstance(value, (list, tuple)):
        items = [str(v) for v in value]
    else:
        items = [s for s in str(value).split(",") if s.strip()]
    out = []
    for it in items:
        it = it.strip()
        low = it.lower()
        if low == "all":
            out.extend(ALL_UCS)
        elif low == "none":
            continue
        else:
            tag = f"UC{it}" if it.isdigit() else it.upper()
            if tag not in sd.RECIPES:
                raise ValidationError(f"unknown use case {it!r}; expected 1..5, all or none")
            out.append(tag)
    return tuple(dict.fromkeys(out))


def load_dataset(cfg: ExperimentConfig) -> sd.Dataset:
    if isinstance(cfg.dataset, sd.DatasetSpec):
        return sd.generate(cfg.dataset)
    return sd.load(cfg.dataset)


@dataclass
class RunOutput:
    config: ExperimentConfig
    report_rows: list[dict]
    robustness_rows: list[dict]
    round_log: list[dict]
    model: hi.HierarchicalModel
    energy_wh: float
    time_s: float


def training_seed(cfg: ExperimentConfig) -> int:
    # Keyed on the model label only, so strategies of one model share an initialization.
    return derive_seed(cfg.seed, "cell", cfg.model.name)


def prepare_data(cfg: ExperimentConfig, dataset: sd.Dataset | None = None):
    dataset = dataset if dataset is not None else load_dataset(cfg)
    train, val, test = sd.split(dataset, cfg.split, derive_seed(cfg.seed, "split"))
    shards = sd.partition(train, cfg.n_clients, derive_seed(cfg.seed, "partition"))
    return train, val, test, shards


def execute(cfg: ExperimentConfig, dataset: sd.Dataset | None = None, workers: int = 1, data=None) -> RunOutput:
    """Train the hierarchy for ``cfg`` and evaluate on clean + requested corruptions."""
    train, val, test, shards = data if data is not None else prepare_data(cfg, dataset)
    plans = hi.plan_sessions(train, shards, cfg.hierarchy_config)
    result = hi.train_hierarchy(plans, cfg.strategy, cfg.train_config, training_seed(cfg), val=val,
                                power=cfg.power, workers=workers, diseases=train.spec.diseases)
    e_wh, t_s = energy_total(result.ledger, cfg.power)
    variants = [("clean", None)] + [(uc, uc) for uc in cfg.use_cases]
    robust = []
    uc_seed = derive_seed(cfg.seed, "eval-corrupt")
    for name, uc in variants:
        m, _ = evaluate(result.model, test, uc, uc_seed)
        robust.append(_report_row(cfg, m, e_wh, t_s, eval_name=name))
    return RunOutput(cfg, [dict(robust[0])], robust, result.round_log, result.model, e_wh, t_s)


def _report_row(cfg, metrics, e_wh, t_s, eval_name=None) -> dict:
    row = {"eval": eval_name, "model": cfg.model.name, "aggregator": cfg.strategy.label,
           "accuracy": metrics["accuracy"], "recall": metrics["recall"], "precision": metrics["precision"],
           "f1": metrics["f1"], "total_energy_wh": e_wh, "total_time_s": t_s,
           "eta": eta_value(metrics["f1"], e_wh) if e_wh > 0 else math.nan}
    return row


def provenance_lines(configs) -> list[str]:
    lines = []
    for c in configs:
        lines.append("config: " + json.dumps(c.to_dict(include_grid=False), sort_keys=True, separators=(",", ":")))
    if any(not c.power.reproducible for c in configs):
        lines.append("non-reproducible: wallclock energy mode, totals depend on timing")
    lines.append("router training is included in total_energy_wh and total_time_s")
    return lines


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    return fmt(v)


def rows_to_csv(rows, header, comments=()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(r[h]) for h in header])
    return buf.getvalue()


ROBUSTNESS_HEADER = ("eval", *REPORT_HEADER)


def write_run(out: RunOutput, out_dir) -> dict:
    """Write report, robustness, per-round log and model files; returns their paths."""
    out_dir = Path(out_dir)
    comments = provenance_lines([out.config])
    paths = {
        "report": out_dir / "report.csv",
        "robustness": out_dir / "robustness.csv",
        "rounds": out_dir / "rounds.csv",
        "model": out_dir / "model.fshm",
    }
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths["report"].write_text(rows_to_csv(out.report_rows, REPORT_HEADER, comments))
        paths["robustness"].write_text(rows_to_csv(out.robustness_rows, ROBUSTNESS_HEADER, comments))
        paths["rounds"].write_text(rows_to_csv(out.round_log, ROUND_LOG_HEADER))
    except OSError as exc:
        raise StorageError(f"cannot write outputs to {out_dir}: {exc}") from exc
    hi.save_model(out.model, paths["model"], {"config": out.config.to_dict(include_grid=False),
                                              "strategy": out.config.strategy.to_dict(),
                                              "seed": out.config.seed,
                                              "training_seed": training_seed(out.config)})
    return paths


def sweep_cells(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    models = cfg.grid_models or (cfg.model,)
    strategies = cfg.grid_strategies or (cfg.strategy,)
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        raise ValidationError(f"grid model names must be unique, got {names}")
    return [replace(cfg, model=m, strategy=s, grid_models=(), grid_strategies=())
            for m in models for s in strategies]


def run_sweep(cfg: ExperimentConfig, out_dir=None, workers: int = 1):
    """One full run per (model, strategy) cell, in grid order, on a shared dataset."""
    cells = sweep_cells(cfg)
    data = prepare_data(cfg)
    outputs = []
    for i, cell in enumerate(cells):
        try:
            out = execute(cell, workers=workers, data=data)
        except FedscopeError as exc:
            raise type(exc)(f"sweep cell {i} ({cell.model.name}, {cell.strategy.label}): {exc}") from exc
        outputs.append(out)
        if out_dir is not None:
            write_run(out, Path(out_dir) / f"cell{i:02d}_{cell.model.name}_{cell.strategy.label}")
    report = [r for o in outputs for r in o.report_rows]
    robust = [r for o in outputs for r in o.robustness_rows]
    comments = provenance_lines(cells)
    texts = {"report": rows_to_csv(report, REPORT_HEADER, comments),
             "robustness": rows_to_csv(robust, ROBUSTNESS_HEADER, comments)}
    if out_dir is not None:
        try:
            Path(out_dir, "report.csv").write_text(texts["report"])
            Path(out_dir, "robustness.csv").write_text(texts["robustness"])
        except OSError as exc:
            raise StorageError(f"cannot write sweep outputs: {exc}") from exc
    return outputs, texts


def default_config_dict() -> dict:
    cfg = ExperimentConfig()
    d = cfg.to_dict()
    d["grid"] = {"models": [ModelChoice("mlp-h16", (16,), (16,)).to_dict(),
                            ModelChoice("mlp-h32", (32,), (32,)).to_dict(),
                            ModelChoice("mlp-h64", (64,), (64,)).to_dict()],
                 "strategies": [StrategyConfig("fedavg").to_dict(), StrategyConfig("fedprox").to_dict(),
                                StrategyConfig("fedavgm").to_dict()]}
    return copy.deepcopy(d)
