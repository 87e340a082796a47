"""Command-line entry point.

Exit codes: 0 success, 1 failed invariant (leakage, gradient check),
2 usage or configuration error, 3 divergence, 4 unreadable dataset.
"""
from __future__ import annotations

import argparse
import dataclasses
import csv
import logging
import sys
from pathlib import Path

from . import cohort as C
from . import gradcheck, harness
from .config import load_config
from .model import RTNAG

EXIT_INVARIANT, EXIT_USAGE, EXIT_DIVERGED, EXIT_DATA = 1, 2, 3, 4


def _config_args(p: argparse.ArgumentParser, seed_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set model.q=6 (repeatable)")
    p.add_argument("--seed", type=int, required=seed_required)


def _data_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="cohort JSONL file")


def _tuple_of(kind):
    return lambda raw: tuple(kind(x) for x in raw.split(","))


def _cohort_flags(p: argparse.ArgumentParser) -> None:
    """One flag per generator setting, defaulting to the generator's value."""
    for f in dataclasses.fields(C.CohortConfig):
        if f.name == "seed":
            continue
        default = f.default
        flag = "--" + f.name.replace("_", "-")
        if isinstance(default, bool):
            p.add_argument(flag, action="store_true", help="distribution-shifted variant"
                           if f.name == "shifted" else None)
        elif isinstance(default, tuple):
            kind = int if all(isinstance(x, int) for x in default) else float
            p.add_argument(flag, type=_tuple_of(kind), default=default,
                           help=f"comma-separated (default {','.join(map(str, default))})")
        else:
            p.add_argument(flag, type=type(default), default=default,
                           help=f"default {default}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rtnag", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic cohort")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int, required=True)
    _cohort_flags(g)
    g.add_argument("--extra-missing", type=float, default=0.0,
                   help="inject extra missingness after generation")

    t = sub.add_parser("train", help="fit on a whole dataset and save the parameters")
    _config_args(t)
    _data_arg(t)
    t.add_argument("--out", type=Path, required=True, help="parameter file")
    t.add_argument("--loss-csv", type=Path)

    e = sub.add_parser("evaluate", help="score a saved model on a dataset")
    e.add_argument("--model", type=Path, required=True)
    _data_arg(e)
    e.add_argument("--out", type=Path, help="metrics CSV (default: stdout)")

    for name, helptext in (("cv", "k-fold cross-validation"),
                           ("sweep-missing", "retrain under injected missingness"),
                           ("sweep-horizon", "truncate observation windows by years"),
                           ("ablate", "component ablations")):
        x = sub.add_parser(name, help=helptext)
        _config_args(x)
        _data_arg(x)
        x.add_argument("--out", type=Path, required=True, help="report directory")
        if name == "sweep-missing":
            x.add_argument("--rates", type=float, nargs="+", default=list(harness.MISSING_RATES))
        if name == "sweep-horizon":
            x.add_argument("--years", type=int, nargs="+", default=list(harness.HORIZONS))
        if name == "ablate":
            x.add_argument("--cases", nargs="+", default=list(harness.ABLATION_CASES),
                           choices=harness.ABLATION_CASES)

    gc = sub.add_parser("gradcheck", help="finite-difference checks of the whole model")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--trials", type=int, default=10)
    return ap


def _load(args):
    cfg = load_config(args.config, args.set)
    cfg.seed = args.seed
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except harness.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except harness.LeakageError as exc:
        print(f"invariant failed: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (C.DatasetFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def _dispatch(args) -> int:
    if args.command == "generate":
        cfg = C.CohortConfig(**{f.name: getattr(args, f.name)
                                for f in dataclasses.fields(C.CohortConfig)})
        cohort = C.shifted_cohort(cfg) if cfg.shifted else C.generate_cohort(cfg)
        if args.extra_missing:
            cohort = C.inject_missingness(cohort, args.extra_missing, args.seed)
        C.write_dataset(cohort, args.out)
        print(f"{len(cohort)} subjects, {cohort.n_visits()} visits, "
              f"missing rate {cohort.missing_rate():.3f} -> {args.out}")
        return 0

    if args.command == "gradcheck":
        failed = 0
        for r in gradcheck.run_all(args.seed, args.trials):
            print(f"{'PASS' if r.ok else 'FAIL'} {r.name:18s} {r.error:.3e} (< {r.tolerance:g})")
            failed += not r.ok
        return EXIT_INVARIANT if failed else 0

    if args.command == "evaluate":
        model = RTNAG.load(args.model)
        cohort = C.read_dataset(args.data)
        row = {"experiment": "evaluate", "case": args.data.stem, "fold": 0}
        row.update(harness.evaluate(model, cohort.subjects))
        out = open(args.out, "w", newline="") if args.out else sys.stdout
        try:
            w = csv.writer(out, lineterminator="\n")
            w.writerow(harness.CSV_HEADER)
            w.writerow([harness.format_cell(row.get(c)) for c in harness.CSV_HEADER])
        finally:
            if args.out:
                out.close()
        return 0

    cfg = _load(args)
    cohort = C.read_dataset(args.data)
    if args.command == "train":
        model, curve = harness.train(cfg, cohort.subjects)
        model.save(args.out)
        if args.loss_csv:
            args.loss_csv.write_text("epoch,loss\n" +
                                     "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))
        print(f"final loss {curve[-1]:.6f}" if curve else "no epochs run")
        return 0
    if args.command == "cv":
        report = harness.crossvalidate(cfg, cohort)
    elif args.command == "sweep-missing":
        report = harness.sweep_missing(cfg, cohort, args.rates)
    elif args.command == "sweep-horizon":
        report = harness.sweep_horizon(cfg, cohort, args.years)
    else:
        report = harness.ablate(cfg, cohort, args.cases)
    harness.write_report(report, args.out)
    print(harness.summary_text(report), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
