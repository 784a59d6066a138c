"""Command-line interface: dataset generation, reference-table generation,
training, run comparison, and the derivation-checking suites.

Exit codes: 0 success, 2 configuration error, 3 data/file error, 4 numerical
failure, 5 verification (oracle) failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .data import (
    gen_synthetic,
    inject_symmetric_noise,
    load_binary,
    load_csv,
    make_imbalanced,
    save_binary,
)
from .errors import (
    BoundViolation,
    ConfigError,
    DataError,
    GridTooCoarse,
    InsufficientClassCount,
    InvalidDimensions,
    InvalidHyperparameter,
    InvalidRate,
    NumericsError,
)
from .evaluation import compare_runs, make_report
from .oracle import full_ggn_last_layer, kfac_fidelity, random_case, check_lower_bounds
from .reference import ReferenceTable, build_prototype_reference, save_reference
from .trainer import TrainerConfig, config_from_dict, config_to_dict, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bselect",
        description="Bayesian online batch selection for classifier training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gd = sub.add_parser("gen-data", help="generate or convert a dataset")
    gd.add_argument("--kind", choices=("synthetic", "csv2bin"), required=True)
    gd.add_argument("--out", required=True, help="output directory")
    gd.add_argument("--classes", type=int, default=10)
    gd.add_argument("--per-class", type=int, default=500)
    gd.add_argument("--dim", type=int, default=16)
    gd.add_argument("--separation", type=float, default=4.0)
    gd.add_argument("--test-per-class", type=int, default=None)
    gd.add_argument("--noise-rate", type=float, default=0.0)
    gd.add_argument("--imbalance-ratio", type=float, default=1.0)
    gd.add_argument("--subset-fraction", type=float, default=1.0)
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--noise-seed", type=int, default=1)
    gd.add_argument("--csv", help="input csv for csv2bin")
    gd.add_argument("--test-csv", help="optional test csv for csv2bin")

    gr = sub.add_parser("gen-reference", help="build a reference logit table")
    gr.add_argument("--dataset", required=True, help="binary dataset file")
    gr.add_argument("--mode", choices=("prototype", "from-logits"), default="prototype")
    gr.add_argument("--clean-frac", type=float, default=1.0)
    gr.add_argument("--tau", type=float, default=1.0)
    gr.add_argument("--seed", type=int, default=0)
    gr.add_argument("--logits", help="whitespace table of raw logits for from-logits")
    gr.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="run the selection-and-training loop")
    tr.add_argument("--config", required=True)
    tr.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted-path config override, e.g. selection.alpha=0.3")

    ev = sub.add_parser("eval", help="compare finished runs")
    ev.add_argument("--runs", nargs="+", required=True, help="run directories")
    ev.add_argument("--targets", required=True, help="comma-separated accuracies")
    ev.add_argument("--out", default=".", help="directory for report.csv / report.txt")

    ck = sub.add_parser("check", help="run the derivation-checking suites")
    ck.add_argument("--suite", choices=("bounds", "ggn", "all"), default="all")
    ck.add_argument("--cases", type=int, default=100)
    ck.add_argument("--seed", type=int, default=0)
    return parser


def cmd_gen_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "synthetic":
        train, test = gen_synthetic(
            args.classes, args.per_class, args.dim, args.separation, args.seed,
            test_per_class=args.test_per_class,
        )
        if args.subset_fraction < 1.0:
            train = train.take(np.arange(int(np.floor(args.subset_fraction * train.n))))
        if args.imbalance_ratio > 1.0:
            train = make_imbalanced(train, args.imbalance_ratio)
        if args.noise_rate > 0.0:
            train = inject_symmetric_noise(train, args.noise_rate, args.noise_seed)
    else:
        if not args.csv:
            raise ConfigError("csv2bin needs --csv")
        train = load_csv(args.csv)
        test = replace(load_csv(args.test_csv), split="test") if args.test_csv else None
    save_binary(train, os.path.join(args.out, "train.bsel"))
    print(f"wrote {os.path.join(args.out, 'train.bsel')} ({train.n} examples, "
          f"{train.num_classes} classes, {int(train.noise_flags.sum())} noisy)")
    if test is not None:
        save_binary(test, os.path.join(args.out, "test.bsel"))
        print(f"wrote {os.path.join(args.out, 'test.bsel')} ({test.n} examples)")
    return 0


def cmd_gen_reference(args) -> int:
    ds = load_binary(args.dataset)
    if args.mode == "prototype":
        table = build_prototype_reference(
            ds.features, ds.clean_labels, ds.num_classes,
            clean_frac=args.clean_frac, seed=args.seed, temperature=args.tau,
        )
    else:
        if not args.logits:
            raise ConfigError("from-logits needs --logits")
        raw = np.loadtxt(args.logits, ndmin=2)
        if raw.shape != (ds.n, ds.num_classes):
            raise ConfigError(
                f"logit table shape {raw.shape} does not match dataset "
                f"({ds.n}, {ds.num_classes})"
            )
        table = ReferenceTable(logits=raw, temperature=args.tau, provenance=args.logits)
    save_reference(table, args.out)
    print(f"wrote {args.out} (n={table.n}, k={table.num_classes}, tau={table.temperature})")
    return 0


def _apply_override(raw: dict, spec: str) -> None:
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} must look like section.key=value")
    path, _, value = spec.partition("=")
    parts = path.split(".")
    if len(parts) != 2:
        raise ConfigError(f"override key {path!r} must be section.key")
    section, key = parts
    try:
        parsed = json.loads(value)
    except ValueError:
        parsed = value
    raw.setdefault(section, {})[key] = parsed


def cmd_train(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
    file_cfg.pop("digest", None)  # resolved configs are re-loadable
    raw = copy.deepcopy(config_to_dict(TrainerConfig()))
    for section, body in file_cfg.items():
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        raw.setdefault(section, {}).update(body)
    for spec in args.override:
        _apply_override(raw, spec)
    config = config_from_dict(raw)
    if not config.run.out_dir:
        raise ConfigError("run.out_dir must be set (or use --override run.out_dir=...)")
    result = run(config)
    last = result.history[-1] if result.history else {}
    print(f"run complete: {len(result.trace.records)} steps, "
          f"final test_acc={last.get('test_acc')}")
    print(f"outputs in {config.run.out_dir}")
    return 0


def cmd_eval(args) -> int:
    targets = tuple(float(t) for t in args.targets.split(","))
    reports = []
    names = set()
    for run_dir in args.runs:
        cfg_path = os.path.join(run_dir, "config.json")
        metrics_path = os.path.join(run_dir, "metrics.jsonl")
        try:
            with open(cfg_path, "r", encoding="utf-8") as fh:
                cfg = json.load(fh)
            with open(metrics_path, "r", encoding="utf-8") as fh:
                history = [json.loads(line) for line in fh if line.strip()]
        except OSError as exc:
            raise DataError(f"cannot read run directory {run_dir}: {exc}") from exc
        if not history:
            raise DataError(f"{metrics_path} holds no evaluations")
        name = cfg.get("selection", {}).get("method", os.path.basename(run_dir))
        if name in names:
            name = f"{name}({os.path.basename(os.path.normpath(run_dir))})"
        names.add(name)
        reports.append(make_report(name, history, targets, cfg.get("digest", "")))
    text, csv_text = compare_runs(reports)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    with open(os.path.join(args.out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    for rep, run_dir in zip(reports, args.runs):
        with open(os.path.join(run_dir, "metrics.jsonl"), "r", encoding="utf-8") as fh:
            history = [json.loads(line) for line in fh if line.strip()]
        series_path = os.path.join(args.out, f"series_{rep.name.replace('/', '_')}.csv")
        with open(series_path, "w", encoding="utf-8") as fh:
            fh.write("epoch,test_acc,train_loss,noisy_frac_selected,redundant_frac_selected\n")
            for h in history:
                fh.write(
                    f"{h['epoch']},{h['test_acc']!r},{h['train_loss']!r},"
                    f"{h['noisy_frac_selected']!r},{h['redundant_frac_selected']!r}\n"
                )
    print(text, end="")
    return 0


def cmd_check(args) -> int:
    failed = False
    if args.suite in ("bounds", "all"):
        print(f"bounds suite: {args.cases} randomized cases")
        worst = np.inf
        for i in range(args.cases):
            case = random_case((args.seed, i))
            try:
                report = check_lower_bounds(case)
            except (BoundViolation, GridTooCoarse) as exc:
                print(f"  case {i:3d}: FAIL {exc}")
                failed = True
                break
            worst = min(worst, report["min_margin"])
            print(f"  case {i:3d}: p={report['n_params']} exact={report['exact']:+.6f} "
                  f"margin={report['min_margin']:.3e} refine={report['refinement_delta']:.1e}")
        if not failed:
            print(f"bounds suite PASS (worst margin {worst:.3e})")
    if args.suite in ("ggn", "all") and not failed:
        print("ggn suite: exactness and fidelity checks")
        rng = np.random.default_rng(args.seed)
        report = kfac_fidelity([], 1.0, 100.0, probe_features=np.eye(3))
        zero_ok = report.frobenius_gap == 0.0 and not report.predictive_gaps.any()
        print(f"  zero-data gap: frobenius={report.frobenius_gap} "
              f"predictive={report.predictive_gaps.max() if report.predictive_gaps.size else 0.0} "
              f"{'ok' if zero_ok else 'FAIL'}")
        failed = failed or not zero_ok
        for i in range(5):
            history = [
                (rng.standard_normal(4), rng.standard_normal(3), int(rng.integers(3)))
                for _ in range(8)
            ]
            ggn = full_ggn_last_layer([(h, f) for h, f, _ in history], 1.0)
            psd_ok = np.allclose(ggn, ggn.T) and np.linalg.eigvalsh(ggn).min() > 0
            fid = kfac_fidelity(history, 1.0, 50.0)
            print(f"  case {i}: ggn spd={'ok' if psd_ok else 'FAIL'} "
                  f"frobenius_gap={fid.frobenius_gap:.4f} "
                  f"max_predictive_gap={fid.predictive_gaps.max():.4f}")
            failed = failed or not psd_ok
        if not failed:
            print("ggn suite PASS")
    if failed:
        print("verification FAILED", file=sys.stderr)
        return 5
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "gen-reference": cmd_gen_reference,
    "train": cmd_train,
    "eval": cmd_eval,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, InvalidHyperparameter, InvalidDimensions, InvalidRate) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, InsufficientClassCount, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except (BoundViolation, GridTooCoarse) as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
