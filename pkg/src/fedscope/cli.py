"""Command line entry point.

Exit codes: 0 success, 2 validation error, 3 infeasible selection, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from importlib import resources
from pathlib import Path

from . import selector as sel
from . import synthdata as sd
from .errors import FedscopeError, StorageError, ValidationError
from .experiment import (ExperimentConfig, default_config_dict, execute, parse_uc, run_sweep,
                         write_run)

log = logging.getLogger("fedscope")

EXIT_OK, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_IO = 0, 2, 3, 4


def builtin_table2() -> str:
    return resources.files("fedscope").joinpath("data/table2.csv").read_text()


def _seed_arg(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _resolve_seed(args, file_seed_present: bool):
    if args.seed is not None:
        return args.seed
    if file_seed_present:
        return None
    env = os.environ.get("FEDSCOPE_SEED")
    if env:
        try:
            return _seed_arg(env)
        except argparse.ArgumentTypeError as exc:
            raise ValidationError(f"FEDSCOPE_SEED: {exc}")
    return None


def load_config(args) -> ExperimentConfig:
    """Config file (or defaults) with command line overrides applied."""
    if args.config:
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise StorageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        base = path.parent
    else:
        raw, base = {}, None
    if not isinstance(raw, dict):
        raise ValidationError("config top level must be a JSON object")
    raw = dict(raw)
    seed = _resolve_seed(args, "seed" in raw)
    if seed is not None:
        raw["seed"] = seed
        if isinstance(raw.get("dataset"), dict):
            raw["dataset"] = {**raw["dataset"], "seed": seed}
    if getattr(args, "uc", None) is not None:
        raw["use_cases"] = list(parse_uc(args.uc))
    if getattr(args, "energy", None) is not None:
        raw["power"] = {**raw.get("power", {}), "mode": args.energy}
    return ExperimentConfig.from_dict(raw, base)


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    if not isinstance(cfg.dataset, sd.DatasetSpec):
        raise ValidationError("gen-data needs an inline dataset spec, not a dataset file path")
    out = Path(args.out or ".")
    ds = sd.generate(cfg.dataset)
    path = out / (args.name or "dataset.fsds")
    manifest = sd.save(ds, path)
    print(f"wrote {path} ({manifest['n_samples']} samples, seed {manifest['seed']}, sha256 {manifest['sha256']})")
    print(f"wrote {sd.manifest_path(path)}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args)
    out = execute(cfg, workers=args.workers)
    paths = write_run(out, args.out or "run_out")
    for name, p in paths.items():
        print(f"{name}: {p}")
    _print_rows(out.robustness_rows)
    if not cfg.power.reproducible:
        print("note: wallclock energy mode, totals are timing-dependent")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    out_dir = Path(args.out or "sweep_out")
    outputs, _ = run_sweep(cfg, out_dir, workers=args.workers)
    print(f"report: {out_dir / 'report.csv'} ({len(outputs)} rows)")
    print(f"robustness: {out_dir / 'robustness.csv'}")
    _print_rows([r for o in outputs for r in o.report_rows])
    return EXIT_OK


def _print_rows(rows):
    for r in rows:
        tag = f"[{r['eval']}] " if r.get("eval") else ""
        eta = "nan" if math.isnan(r["eta"]) else f"{r['eta']:.6g}"
        print(f"  {tag}{r['model']},{r['aggregator']}: acc={r['accuracy']:.4f} f1={r['f1']:.4f} "
              f"E={r['total_energy_wh']:.6g} Wh T={r['total_time_s']:.6g} s eta={eta}")


def _read_input(args):
    if args.builtin:
        return sel.parse_records(builtin_table2(), "builtin:table2")
    if not args.csv:
        raise ValidationError("give a metrics CSV path or --builtin table2")
    return sel.read_records(args.csv)


def cmd_select(args) -> int:
    records = _read_input(args)
    mode = args.mode
    if mode == "weighted":
        lam = sel.LambdaWeights(*(args.lam or (1 / 3, 1 / 3, 1 / 3)))
        _, csv_text, text = sel.weighted_report(records, lam)
    elif mode == "constrained":
        if args.emax is None and args.tmax is None:
            raise ValidationError("constrained mode needs --emax and/or --tmax")
        e_max = math.inf if args.emax is None else args.emax
        t_max = math.inf if args.tmax is None else args.tmax
        _, csv_text, text = sel.constrained_report(records, e_max, t_max)
    elif mode == "eta":
        _, csv_text, text = sel.eta_report(records)
    else:
        _, csv_text, text = sel.pareto_report(records)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"selection_{mode}.csv").write_text(csv_text)
            (out / f"selection_{mode}.txt").write_text(text)
        except OSError as exc:
            raise StorageError(f"cannot write selection report: {exc}") from exc
    return EXIT_OK


def _summarize_rounds(text: str) -> str:
    import csv

    rows = list(csv.DictReader(ln for ln in text.splitlines() if ln and not ln.startswith("#")))
    out = []
    for session in dict.fromkeys(r["session"] for r in rows):
        out.append(f"session {session}")
        out.append(f"  {'round':>5}  {'train_loss':>10}  {'val_loss':>10}  {'val_acc':>7}  {'cum_E_wh':>10}")
        for r in rows:
            if r["session"] == session:
                out.append(f"  {r['round']:>5}  {float(r['train_loss']):>10.4f}  {float(r['val_loss']):>10.4f}"
                           f"  {float(r['val_acc']):>7.4f}  {float(r['cum_energy_wh']):>10.4g}")
    return "\n".join(out) + "\n"


def _summarize_report(records) -> str:
    best_f1 = max(records, key=lambda r: r.f1)
    low_e = min(records, key=lambda r: r.energy_wh)
    fast = min(records, key=lambda r: r.time_s)
    best_eta = max(records, key=sel.eta)
    header = ["model", "aggregator", "acc", "recall", "prec", "f1", "energy_wh", "time_s", "eta", "marks"]
    rows = []
    for r in records:
        marks = "".join(m for m, hit in (("P", r is best_f1), ("E", r is low_e), ("T", r is fast),
                                          ("*", r is best_eta)) if hit)
        rows.append([r.model, r.aggregator, f"{r.accuracy:.4f}", f"{r.recall:.4f}", f"{r.precision:.4f}",
                     f"{r.f1:.4f}", f"{r.energy_wh:.6g}", f"{r.time_s:.6g}", f"{sel.eta(r):.3f}", marks])
    widths = [max(len(h), *(len(x[i]) for x in rows)) for i, h in enumerate(header)]
    fmt_line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt_line(header), fmt_line(["-" * w for w in widths]), *map(fmt_line, rows), "",
             "marks: P best F1, E lowest energy, T fastest, * highest eta",
             f"highest F1: {best_f1.label}", f"lowest energy: {low_e.label}", f"fastest: {fast.label}",
             f"highest eta: {best_eta.label} ({sel.eta(best_eta):.6g} per Wh)"]
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    if args.builtin:
        text = builtin_table2()
    else:
        if not args.csv:
            raise ValidationError("give a report or rounds CSV path, or --builtin table2")
        try:
            text = Path(args.csv).read_text()
        except OSError as exc:
            raise StorageError(f"cannot read {args.csv}: {exc}") from exc
    first = next((ln for ln in text.splitlines() if ln and not ln.startswith("#")), "")
    if first.startswith("session,round"):
        summary = _summarize_rounds(text)
    else:
        summary = _summarize_report(sel.parse_records(text, args.csv or "builtin:table2"))
    sys.stdout.write(summary)
    if args.out:
        try:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            Path(args.out, "summary.txt").write_text(summary)
        except OSError as exc:
            raise StorageError(f"cannot write summary: {exc}") from exc
    return EXIT_OK


def cmd_init_config(args) -> int:
    text = json.dumps(default_config_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedscope", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, experiment=True):
        sp.add_argument("--config", metavar="PATH", help="JSON experiment config")
        sp.add_argument("--seed", type=_seed_arg, metavar="U64", help="master seed (falls back to FEDSCOPE_SEED)")
        sp.add_argument("--out", metavar="DIR", help="output directory")
        if experiment:
            sp.add_argument("--uc", metavar="{1..5|all|none}", help="corruption use-cases to evaluate")
            sp.add_argument("--energy", choices=("flop-proxy", "wallclock"), help="energy accounting mode")
            sp.add_argument("--workers", type=int, default=1, help="threads for client training")

    g = sub.add_parser("gen-data", help="generate the synthetic dataset file and manifest")
    common(g, experiment=False)
    g.add_argument("--name", help="output file name (default dataset.fsds)")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="train and evaluate one configuration")
    common(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run every model x strategy cell of the config grid")
    common(s)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("select", help="select a configuration from a metrics CSV")
    c.add_argument("csv", nargs="?", help="report-schema CSV")
    c.add_argument("--builtin", choices=("table2",), help="use the bundled published benchmark table")
    c.add_argument("--mode", choices=("weighted", "constrained", "eta", "pareto"), default="weighted")
    c.add_argument("--lambda", dest="lam", type=float, nargs=3, metavar=("L1", "L2", "L3"),
                   help="weights for energy, time and 1-F1")
    c.add_argument("--emax", type=float, metavar="WH")
    c.add_argument("--tmax", type=float, metavar="S")
    c.add_argument("--out", metavar="DIR")
    c.set_defaults(func=cmd_select)

    rp = sub.add_parser("report", help="plaintext summary of a report or per-round CSV")
    rp.add_argument("csv", nargs="?")
    rp.add_argument("--builtin", choices=("table2",))
    rp.add_argument("--out", metavar="DIR")
    rp.set_defaults(func=cmd_report)

    ic = sub.add_parser("init-config", help="print the default experiment config as JSON")
    ic.add_argument("--out", metavar="PATH")
    ic.set_defaults(func=cmd_init_config)
    return p


def _origin(exc: BaseException) -> str:
    """Short name of the package module that raised ``exc``."""
    tb, name = exc.__traceback__, "cli"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("fedscope."):
            name = mod.split(".", 1)[1]
        tb = tb.tb_next
    return name


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except FedscopeError as exc:
        print(f"fedscope {args.command}: {_origin(exc)} error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"fedscope {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
