"""Command-line entry point: ``robustcf <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import load_csv, save_scaler
from .ensemble import ModelFormatError, load_model, save_model
from .experiment import (ExperimentConfig, Setup, build_family, counterfactual_rows, explain_queries, flip_check,
                         prepare, resolve_tau, run_evaluation, synthetic_family_check)
from .metrics import LofIndex, stability_histogram
from .robx import ConservativeIndex
from .stability import StabilityParams


class CliError(Exception):
    pass


def _load_config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(args, "out_dir", None):
        overrides["out_dir"] = args.out_dir
    if args.config:
        return ExperimentConfig.load(args.config, overrides)
    return ExperimentConfig.from_strings(overrides)


def _out_dir(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    return out


def _accuracy(model, ds) -> float:
    return float(np.mean(np.asarray(model.predict(ds.X)) == ds.y))


def cmd_train(args) -> int:
    cfg = _load_config(args)
    setup = prepare(cfg)
    out = _out_dir(cfg)
    save_model(setup.model, out / "model.json")
    setup.train.to_csv(out / "train.csv")
    setup.test.to_csv(out / "test.csv")
    if cfg.scenario == "half_split":
        setup.reference.to_csv(out / "reference.csv")
    if setup.data.scaler is not None:
        save_scaler(setup.data.scaler, out / "scaler.json")
    print(f"train accuracy {_accuracy(setup.model, setup.train):.4f}")
    print(f"test accuracy {_accuracy(setup.model, setup.test):.4f}")
    print(f"model written to {out / 'model.json'}")
    return 0


def cmd_retrain(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    model_path = Path(args.model) if args.model else out / "model.json"
    if not model_path.exists():
        raise CliError(f"base model {model_path} not found; run `train` first")
    setup = prepare(cfg, model=load_model(model_path))
    family = build_family(setup)
    fam_dir = _out_dir(cfg) / "family"
    fam_dir.mkdir(exist_ok=True)
    for old in fam_dir.glob("model_*.json"):
        old.unlink()
    for i, m in enumerate(family):
        save_model(m, fam_dir / f"model_{i:03d}.json")
    print(f"{len(family)} model(s) written to {fam_dir}")
    return 0


def _read_dataset(path):
    return load_csv(path, "label", scale=False)


def cmd_explain(args) -> int:
    cfg = _load_config(args)
    model = load_model(args.model)
    reference = _read_dataset(args.data)
    queries = _read_dataset(args.queries) if args.queries else reference
    if model.n_features != reference.d or queries.d != reference.d:
        raise CliError("model, data and queries disagree on the number of features")
    rows = [int(r) for r in args.rows.split(",")] if args.rows else list(range(queries.n))
    for r in rows:
        if not 0 <= r < queries.n:
            raise CliError(f"query row {r} out of range")
    cfg = replace(cfg, methods=args.method)
    setup = Setup(cfg, reference, reference, queries, reference, model)
    tau = resolve_tau(setup)
    index = ConservativeIndex(model, reference, cfg.stability_params(tau))
    out_prob = np.asarray(model.predict_proba(queries.X[rows]))
    rejected = [r for r, p in zip(rows, out_prob) if p <= 0.5]
    skipped = [r for r, p in zip(rows, out_prob) if p > 0.5]
    outcomes = explain_queries(setup, rejected, tau, index, cfg.jobs)
    keep = {args.method.upper() + "+RobX"} if args.robx else {args.method.upper()}
    outcomes = [o for o in outcomes if o.label in keep]
    table = counterfactual_rows(setup, outcomes, tau, LofIndex(reference.X, cfg.lof_params()))
    names = reference.feature_names
    for r in skipped:
        table.append([r, *map(repr, queries.X[r].tolist()), *[""] * len(names), args.method.upper(),
                      "", "", "", "", "query already accepted; skipped"])
        print(f"query {r} is already accepted by the model; skipped", file=sys.stderr)
    header, body = table[0], sorted(table[1:], key=lambda row: int(row[0]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows([header, *body])
    print(f"{len(body)} row(s) written to {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    report, _ = run_evaluation(cfg)
    print(cfg.dumps(), end="")
    print()
    print(report.to_markdown(), end="")
    print(f"report written to {Path(cfg.out_dir) / 'report.csv'}")
    return 0


def _histogram(args):
    model = load_model(args.model)
    data = _read_dataset(args.data)
    params = StabilityParams(args.K, args.sigma, 0.5, args.seed)
    return stability_histogram(data, model, params, bins=args.bins, companions=args.companions)


def cmd_tau_select(args) -> int:
    hist = _histogram(args)
    tau = hist.quantile(args.quantile)
    if args.histogram:
        hist.to_csv(args.histogram)
        print(f"histogram written to {args.histogram}")
    print(f"tau = {tau!r}")
    return 0


def cmd_stability_histogram(args) -> int:
    hist = _histogram(args)
    hist.to_csv(args.out)
    if args.companions:
        base = Path(args.out)
        for which in ("model_output", "neighborhood_mean"):
            counts, edges = hist.companion(which, bins=args.bins)
            path = base.with_name(f"{base.stem}_{which}{base.suffix}")
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["bin_left", "bin_right", "count"])
                for a, b, c in zip(edges[:-1], edges[1:], counts):
                    w.writerow([repr(float(a)), repr(float(b)), int(c)])
    print(f"histogram over {len(hist.scores)} accepted point(s) written to {args.out}")
    return 0


def cmd_verify_theorems(args) -> int:
    cfg = _load_config(args)
    setup = prepare(cfg, model=load_model(args.model) if args.model else None)
    tau_run = resolve_tau(setup)
    index = ConservativeIndex(setup.model, setup.reference, cfg.stability_params(tau_run))
    ok = True

    flips = flip_check(setup, tau_run, index)
    for label, v in flips.items():
        passed = v == 0.0
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} flip validity {label}: {v}")

    tau = args.tau
    stable = index.with_tau(tau)
    if stable.rows.size == 0:
        print(f"FAIL synthetic family: no conservative counterfactual at tau={tau}")
        return 1
    points = stable.X[stable.rows]
    for V in (0.0, args.V):
        chk = synthetic_family_check(setup.model, points, stable.scores, V, tau, args.n_models,
                                     cfg.seed, args.shock)
        if not chk.assumptions_hold:
            ok = False
            print(f"FAIL synthetic family V={V}: assumption construction failed "
                  f"(max std {chk.max_std:.4f}, min mean gap {chk.min_mean_gap:.4f})")
            continue
        passed = chk.invalidations == 0 if V == 0 else chk.passed
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} synthetic family V={V} tau={tau}: "
              f"rate {chk.rate:.5f} bound {chk.bound:.5f} se {chk.standard_error:.5f} "
              f"({chk.invalidations}/{chk.pairs}, {chk.n_models} models, {chk.n_points} points)")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustcf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out-dir", help="output directory (overrides out_dir)")
        return p

    with_config(sub.add_parser("train", help="train the base model")).set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("retrain", help="materialize the retrained model family"))
    p.add_argument("--model", help="base model JSON (default: <out_dir>/model.json)")
    p.set_defaults(func=cmd_retrain)

    p = with_config(sub.add_parser("explain", help="generate counterfactuals for query rows"))
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="normalized dataset CSV with a 'label' column")
    p.add_argument("--queries", help="CSV holding the query rows (default: --data)")
    p.add_argument("--rows", help="comma-separated query row indices (default: all)")
    p.add_argument("--method", default="NN", choices=["NN", "FT", "FOCUS", "FACE"], type=str.upper)
    p.add_argument("--robx", action="store_true", help="refine with RobX")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    with_config(sub.add_parser("evaluate", help="run the full evaluation protocol")).set_defaults(
        func=cmd_evaluate)

    for name, func, helptext in (("tau-select", cmd_tau_select, "pick tau as a stability quantile"),
                                 ("stability-histogram", cmd_stability_histogram,
                                  "histogram of stability over accepted points")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True, help="normalized dataset CSV with a 'label' column")
        p.add_argument("--K", type=int, default=1000)
        p.add_argument("--sigma", type=float, default=0.1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--bins", type=int, default=20)
        p.set_defaults(func=func, companions=False)
        if name == "tau-select":
            p.add_argument("--quantile", type=float, required=True)
            p.add_argument("--histogram", help="also write the histogram CSV here")
        else:
            p.add_argument("--out", required=True)
            p.add_argument("--companions", action="store_true",
                           help="also write model-output and neighborhood-mean histograms")

    p = with_config(sub.add_parser("verify-theorems", help="flip check and synthetic-family bound check"))
    p.add_argument("--model", help="model JSON (default: train from the config)")
    p.add_argument("--V", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=0.7)
    p.add_argument("--n-models", type=int, default=200)
    p.add_argument("--shock", choices=["two_point", "gaussian"], default="two_point")
    p.set_defaults(func=cmd_verify_theorems)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, ModelFormatError, OSError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
