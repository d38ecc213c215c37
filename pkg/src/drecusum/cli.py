"""Command-line front end.

Exit codes: 0 success, 1 usage or bounds error, 2 data/config error,
3 runtime failure. Every random choice derives from ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .core import (
    BoundsError,
    DataError,
    DegenerateProblemError,
    RandomSource,
    SplitConfig,
    TrainingError,
    read_series_csv,
    write_series_csv,
    write_truth,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _dre_config(args):
    from .dre import KernelConfig, MlpConfig, Objective

    objective = Objective(args.objective)
    cfg = KernelConfig(objective=objective) if args.model == "kernel" else MlpConfig(objective=objective)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    return cfg


def _source(args):
    from .ratios import LearnedRatio

    return LearnedRatio(_dre_config(args), folds=args.folds)


def _add_model_flags(p):
    p.add_argument("--model", choices=("mlp", "kernel"), default="mlp", help="density-ratio model (default mlp)")
    p.add_argument("--objective", choices=("kliep", "lsif"), default="kliep", help="training objective")
    p.add_argument("--iterations", type=int, default=None, help="override the number of training steps")
    p.add_argument("--folds", type=int, choices=(1, 2), default=2,
                   help="2 = cross-fitted log-ratios (default), 1 = single in-sample model")
    p.add_argument("--z-threshold", type=float, default=None, help="slope-change significance threshold")
    p.add_argument("--seed", type=int, default=0, help="root seed (default 0)")


def _seg_config(args):
    from .cusum import SegmentationConfig

    return SegmentationConfig() if args.z_threshold is None else SegmentationConfig(z_threshold=args.z_threshold)


def _emit_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- commands


def cmd_detect(args) -> int:
    from .detect import EnsembleConfig, detect_multi, detect_single, ensemble_detect

    series = read_series_csv(args.input)
    n = series.n
    if args.t_split == "auto":
        t_split = n // 2
    else:
        try:
            t_split = int(args.t_split)
        except ValueError:
            raise UsageError(f"--t-split must be an integer or 'auto', got {args.t_split!r}") from None
    rng = RandomSource(args.seed)
    source, seg = _source(args), _seg_config(args)
    if args.ensemble:
        result = ensemble_detect(series, EnsembleConfig(tuple(args.ensemble)), source, seg, rng)
    else:
        fn = detect_multi if args.multi else detect_single
        result = fn(series, SplitConfig(t_split), source, seg, rng)
    _emit_json(result.to_dict(), args.out)
    if args.cusum_out:
        result.write_cusum(args.cusum_out)
    return EXIT_OK


def cmd_detect_online(args) -> int:
    from .detect import OnlineConfig, WindowMode, emitted_changes, iter_online

    series = read_series_csv(args.input)
    cfg = OnlineConfig(args.window_len, args.stride, WindowMode(args.mode))
    results = list(iter_online(series.data, cfg, _source(args), _seg_config(args), RandomSource(args.seed)))
    _emit_json({
        "change_points": emitted_changes(results),
        "windows": [r.to_dict() for r in results],
        "seed": args.seed,
    }, args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .eval import SyntheticSpec, generate_synthetic, preset

    if args.spec:
        try:
            with open(args.spec, encoding="utf-8") as fh:
                spec = SyntheticSpec.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid spec JSON: {exc}") from None
    else:
        params = {}
        if args.t_star is not None:
            params["t_star"] = args.t_star
        if args.delta_mu is not None:
            params["delta_mu"] = args.delta_mu
        try:
            spec = preset(args.preset, **params)
        except DataError as exc:
            raise UsageError(str(exc)) from None
    series, truth = generate_synthetic(spec, RandomSource(args.seed))
    write_series_csv(series, args.out)
    if args.truth_out:
        write_truth(truth, args.truth_out)
    print(f"wrote {series.n}x{series.d} series with changes at {list(truth.change_indices)}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .eval import run_experiment

    report = run_experiment(args.config)
    if args.out:
        _emit_json(report, args.out)
    print(f"{'experiment':<16} {'generator':<16} {'detector':<24} {'FAR':>8} {'MDR':>8}")
    for exp in report["experiments"]:
        for run in exp["runs"]:
            print(f"{exp['name']:<16} {run['generator']:<16} {run['detector']:<24} "
                  f"{run['pooled']['far']:>8.4f} {run['pooled']['mdr']:>8.4f}")
    return EXIT_OK


def _load_setup(path, defaults: dict) -> dict:
    setup = dict(defaults)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid setup JSON: {exc}") from None
        if not isinstance(user, dict):
            raise DataError("setup must be a JSON object")
        unknown = set(user) - set(defaults)
        if unknown:
            raise DataError(f"unknown setup keys: {sorted(unknown)}")
        setup.update(user)
    return setup


def _setup_laws(setup: dict, rng: RandomSource):
    """Two Gaussian laws from explicit means or from per-entry uniform ranges."""
    from .distributions import GaussianSpec

    d = int(setup["d"])
    gen = rng.child(0).generator()
    means = []
    for key in ("mean1", "mean2"):
        value = setup[key]
        if isinstance(value, (int, float)):
            means.append(np.full(d, float(value)))
        elif isinstance(value, dict) and "range" in value:
            lo, hi = value["range"]
            means.append(gen.uniform(float(lo), float(hi), size=d))
        elif isinstance(value, list) and len(value) == d:
            means.append(np.asarray(value, dtype=np.float64))
        else:
            raise DataError(f"{key} must be a number, {{'range': [low, high]}} or a list of {d} numbers")
    return GaussianSpec(means[0]), GaussianSpec(means[1])


ORACLE_DEFAULTS = {"d": 10, "n": 500, "t_star": 150, "t_splits": [100, 250, 400],
                   "mean1": {"range": [0.0, 0.4]}, "mean2": {"range": [0.6, 1.0]},
                   "tolerance": 10, "mc_samples": 200_000}


def cmd_oracle_check(args) -> int:
    from .eval import check_slopes, oracle_argmax_errors

    setup = _load_setup(args.setup, ORACLE_DEFAULTS)
    rng = RandomSource(args.seed)
    p1, p2 = _setup_laws(setup, rng)
    n, t_star = int(setup["n"]), int(setup["t_star"])
    if p1 == p2:
        print("FAIL degenerate setup: pre- and post-change laws are identical")
        return EXIT_DATA
    all_ok = True
    for t_split in setup["t_splits"]:
        t_split = int(t_split)
        for chk in check_slopes(p1, p2, n, t_star, t_split, int(setup["mc_samples"]), rng.child(1, t_split)):
            sign = "PASS" if chk.sign_ok else "FAIL"
            tol = "PASS" if chk.tolerance_ok else "FAIL"
            all_ok &= chk.sign_ok and chk.tolerance_ok
            print(f"t_split={t_split:<5} {chk.region:<4} formula={chk.formula:+.5f} (se {chk.formula_se:.5f}) "
                  f"direct={chk.direct:+.5f} (se {chk.direct_se:.5f})  sign {sign}  tolerance {tol}")
        errors = oracle_argmax_errors(p1, p2, n, t_star, t_split, args.trials, rng=rng.child(2, t_split))
        freq = float(np.mean(np.abs(errors) <= int(setup["tolerance"])))
        ok = freq >= 0.95
        all_ok &= ok
        print(f"t_split={t_split:<5} argmax within +-{setup['tolerance']} of {t_star}: {freq:.3f} "
              f"over {args.trials} trials  {'PASS' if ok else 'FAIL'}")
    print("overall PASS" if all_ok else "overall FAIL")
    return EXIT_OK


THEOREM_DEFAULTS = {"d": 10, "n": 500, "t_star": 150, "t_split": 250, "mean1": 0.0, "mean2": 1.0,
                    "a_clip": 10.0}


def cmd_theorem_check(args) -> int:
    from .eval import empirical_accuracy

    setup = _load_setup(args.setup, THEOREM_DEFAULTS)
    rng = RandomSource(args.seed)
    p1, p2 = _setup_laws(setup, rng)
    rows = empirical_accuracy(p1, p2, int(setup["n"]), int(setup["t_star"]), int(setup["t_split"]),
                              args.trials, args.betas, float(setup["a_clip"]), rng.child(1))
    print(f"{'beta':>6} {'alpha':>14} {'exceedance':>11}")
    for row in rows:
        print(f"{row.beta:>6.3f} {row.alpha:>14.2f} {row.exceedance:>11.4f}  {'PASS' if row.passed else 'FAIL'}")
    print("overall PASS" if all(r.passed for r in rows) else "overall FAIL")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    from .detect import WindowMode
    from .eval import PRESETS

    parser = _Parser(prog="drecusum", description="Change-point detection with density-ratio CUSUM statistics.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("detect", help="detect change points in a CSV series")
    p.add_argument("--input", required=True, help="headerless numeric CSV, one row per time step")
    p.add_argument("--t-split", default="auto", help="split index (1-based) or 'auto' for n // 2")
    p.add_argument("--ensemble", type=_int_list, default=None, help="comma-separated split indices")
    p.add_argument("--multi", action="store_true", help="report every verified slope change")
    p.add_argument("--out", help="result JSON path (default: standard output)")
    p.add_argument("--cusum-out", help="CSV path for the statistic (one file per split)")
    _add_model_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("detect-online", help="sliding-window detection over a CSV stream")
    p.add_argument("--input", required=True)
    p.add_argument("--window-len", type=int, required=True)
    p.add_argument("--stride", type=int, default=None, help="default window_len // 2")
    p.add_argument("--mode", choices=[m.value for m in WindowMode], default="fixed")
    p.add_argument("--out")
    _add_model_flags(p)
    p.set_defaults(func=cmd_detect_online)

    p = sub.add_parser("simulate", help="write a synthetic series and its true change points")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=PRESETS)
    src.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    p.add_argument("--t-star", type=int, default=None, help="change index for the fig5a preset")
    p.add_argument("--delta-mu", type=float, default=None, help="mean increment for the fig5b preset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="run an experiment config and report FAR/MDR")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("oracle-check", help="check expected slopes and argmax location with exact ratios")
    p.add_argument("--setup", help="JSON overriding the default single-change setup")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("theorem-check", help="empirical exceedance against the accuracy radius")
    p.add_argument("--setup", help="JSON overriding the default setup")
    p.add_argument("--betas", type=_float_list, default=[0.05, 0.1, 0.2])
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_theorem_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except BoundsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DegenerateProblemError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
