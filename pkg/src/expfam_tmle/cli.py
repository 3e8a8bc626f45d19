"""Command-line interface: ``expfam-tmle <command> [options]``.

Every command writes its outputs plus a ``manifest.json`` (command, resolved
options, seed, version, timings, SHA-256 digests) into ``--out``.
Exit codes: 0 success, 1 numerical failure (error JSON on stdout and in
``--out``), 2 usage or input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import DataValidationError, TMLEError
from .io import (
    read_median_csv,
    read_missing_csv,
    read_shift_csv,
    write_curves_csv,
    write_median_csv,
    write_missing_csv,
    write_shift_csv,
)
from .median_reg import DEFAULT_BOX, tmle_median
from .missing_mean import estimate, fit_initial_nuisances
from .shift_effect import tmle_shift
from .simulate import (
    StudyConfig,
    efficiency_bound_exact,
    efficiency_bound_oracle,
    gen_median,
    gen_missing,
    gen_shift,
    mechanism_curves,
    run_study,
    true_value_oracle,
)


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from None
    if not lo < hi:
        raise argparse.ArgumentTypeError("need lo < hi")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expfam-tmle", description="Targeted maximum likelihood estimators.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="expfam_out", help="output directory (default: %(default)s)")
    common.add_argument("--config", help="flat key=value file; command-line flags take precedence")
    fit = argparse.ArgumentParser(add_help=False)
    fit.add_argument("--tol", type=float, default=1e-4)
    fit.add_argument("--max-iter", type=int, default=50)

    p = sub.add_parser("estimate-missing", parents=[common, fit], help="mean of an outcome missing at random")
    p.add_argument("--data", help="CSV with columns x1..xd,m,y")
    p.add_argument("--impl", type=_int_list, default=[1, 2, 3, 4], help="implementations, e.g. 1,2,3,4")
    p.add_argument("--spec", default="main", choices=["main", "i", "ii", "iii", "iv"])

    p = sub.add_parser("estimate-median", parents=[common, fit], help="median-regression coefficients")
    p.add_argument("--data", help="CSV with columns x1..xd,y")
    p.add_argument("--box", type=_float_pair, default=DEFAULT_BOX, help="search box 'lo,hi' per coordinate")
    p.add_argument("--cold-start", action="store_true", help="full grid search at every iteration")

    p = sub.add_parser("estimate-shift", parents=[common, fit], help="effect of an additive exposure shift")
    p.add_argument("--data", help="CSV with columns w1..wd,a,y")
    p.add_argument("--gamma", type=float)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--a-min", type=float)
    p.add_argument("--a-max", type=float)
    p.add_argument("--exposure-model", default="multinomial", choices=["multinomial", "marginal"])
    p.add_argument("--epsilon-mode", default="vector", choices=["vector", "shared"])

    p = sub.add_parser("study", parents=[common, fit], help="replicated simulation study of one cell")
    p.add_argument("--problem", default="missing_mean", choices=["missing_mean", "median_reg", "shift_effect"])
    p.add_argument("--mechanism", default="D1", help="D1-D3 (missing_mean) or D1-D2 (median_reg)")
    p.add_argument("--spec", default=None, help="i..iv (missing_mean) or multinomial/marginal (shift_effect)")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--replicates", type=int, default=500)
    p.add_argument("--seed", type=int)
    p.add_argument("--impl", type=_int_list, default=[1, 2, 3, 4])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--full", action="store_true", help="use the full-size replicate count (10000); slow")

    p = sub.add_parser("oracle", parents=[common], help="Monte-Carlo efficiency bounds and true values")
    what = p.add_mutually_exclusive_group()
    what.add_argument("--bound", choices=["D1", "D2", "D3"], help="efficiency bound of a missingness mechanism")
    what.add_argument("--truth", choices=["missing_mean", "median_reg", "shift_effect"], help="true parameter value")
    p.add_argument("--design", default="D1", choices=["D1", "D2"], help="median-regression design for --truth")
    p.add_argument("--reps", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen", parents=[common], help="write a simulated dataset as CSV")
    p.add_argument("--problem", choices=["missing", "median", "shift", "curves"], default="missing")
    p.add_argument("--mechanism", default="D1")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--gamma", type=float, default=0.5)
    return parser


def read_config(path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {line_no}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
        known = {a.dest: a for a in sub._actions}  # noqa: SLF001
        unknown = sorted(set(cfg) - set(known) - {"config"})
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for key, value in cfg.items():
            action = known[key]
            if action.type is not None:
                try:
                    value = action.type(value)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise UsageError(f"config key {key}: {exc}") from None
            elif action.const is True:  # store_true flags
                value = value.lower() in ("1", "true", "yes", "on")
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"config key {key}: {value!r} not in {sorted(action.choices)}")
            defaults[key] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2, allow_nan=True) + "\n", encoding="utf-8")


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{args.command}: missing required option(s) {flags}")


def _cmd_estimate_missing(args, out: Path):
    _require(args, "data")
    data = read_missing_csv(args.data)
    nuis = fit_initial_nuisances(data, args.spec)
    reports = {}
    for k in args.impl:
        if k not in (1, 2, 3, 4):
            raise UsageError(f"implementation must be 1-4, got {k}")
        reports[str(k)] = estimate(data, nuis, k, args.tol, args.max_iter).to_dict()
    payload = {"n": data.n, "spec": args.spec, "implementations": reports}
    _write_json(out / "estimate_missing.json", payload)
    return payload, None


def _cmd_estimate_median(args, out: Path):
    _require(args, "data")
    data = read_median_csv(args.data)
    res = tmle_median(data, args.tol, args.max_iter, args.box, warm_start=not args.cold_start)
    payload = {
        "n": data.n,
        "beta": res.beta,
        "beta_substitution": res.beta_substitution,
        "trace": res.trace.to_dict(),
    }
    _write_json(out / "estimate_median.json", payload)
    return payload, None


def _cmd_estimate_shift(args, out: Path):
    _require(args, "data", "gamma")
    data = read_shift_csv(args.data, args.gamma, args.a_min, args.a_max)
    rep = tmle_shift(data, args.bins, args.exposure_model, args.epsilon_mode, args.tol, args.max_iter)
    payload = {"n": data.n, "gamma": data.gamma, "a_range": [data.a_min, data.a_max], **rep.to_dict()}
    _write_json(out / "estimate_shift.json", payload)
    return payload, None


def _cmd_study(args, out: Path):
    _require(args, "seed")
    spec = args.spec
    if spec is None:
        spec = "multinomial" if args.problem == "shift_effect" else "i"
    replicates = 10_000 if args.full else args.replicates
    try:
        config = StudyConfig(
            problem=args.problem,
            n=args.n,
            replicates=replicates,
            seed=args.seed,
            mechanism=args.mechanism,
            spec=spec,
            implementations=tuple(args.impl),
            workers=args.workers,
            gamma=args.gamma,
            n_bins=args.bins,
            tol=args.tol,
            max_iter=args.max_iter,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = run_study(config, full=args.full)
    result.to_json(out / "study.json")
    result.to_csv(out / "study.csv")
    return result.to_dict(), args.seed


def _cmd_oracle(args, out: Path):
    if args.bound is None and args.truth is None:
        raise UsageError("oracle: give --bound D1|D2|D3 or --truth PROBLEM")
    if args.reps < 1:
        raise UsageError("--reps must be positive")
    t0 = time.perf_counter()
    if args.bound is not None:
        res = efficiency_bound_oracle(args.bound, args.reps, args.seed)
        payload = {
            "kind": "efficiency_bound",
            "mechanism": args.bound,
            "value": res.value,
            "se": res.se,
            "quadrature": efficiency_bound_exact(args.bound),
        }
    else:
        res = true_value_oracle(args.truth, args.reps, args.seed, design=args.design)
        payload = {"kind": "true_value", "problem": args.truth, "value": res.value, "se": res.se}
        if args.truth == "median_reg":
            payload["design"] = args.design
    payload.update(reps=args.reps, seed=args.seed, seconds=time.perf_counter() - t0)
    _write_json(out / "oracle.json", payload)
    return payload, args.seed


def _cmd_gen(args, out: Path):
    _require(args, "seed")
    if args.n < 1:
        raise UsageError("--n must be positive")
    path = out / "data.csv"
    try:
        if args.problem == "missing":
            write_missing_csv(path, gen_missing(args.n, args.mechanism, args.seed))
        elif args.problem == "median":
            write_median_csv(path, gen_median(args.n, args.mechanism, args.seed))
        elif args.problem == "shift":
            write_shift_csv(path, gen_shift(args.n, args.seed, args.gamma))
        else:
            path = out / "curves.csv"
            write_curves_csv(path, mechanism_curves())
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    payload = {"problem": args.problem, "file": path.name, "n": args.n, "seed": args.seed}
    return payload, args.seed


COMMANDS = {
    "estimate-missing": _cmd_estimate_missing,
    "estimate-median": _cmd_estimate_median,
    "estimate-shift": _cmd_estimate_shift,
    "study": _cmd_study,
    "oracle": _cmd_oracle,
    "gen": _cmd_gen,
}


def _write_manifest(out: Path, args, seed, started: str, seconds: float) -> None:
    outputs = {p.name: _sha256(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "command": args.command,
        "config": {k: v for k, v in vars(args).items() if k != "command"},
        "seed": seed,
        "version": __version__,
        "started": started,
        "wall_seconds": seconds,
        "outputs": outputs,
    }
    _write_json(out / "manifest.json", manifest)


def main(argv=None) -> int:
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(f"expfam-tmle: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors and --help/--version
        return int(exc.code or 0)
    out = Path(args.out)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            payload, seed = COMMANDS[args.command](args, out)
        for w in {(w.category.__name__, str(w.message)) for w in caught}:
            print(f"warning: {w[0]}: {w[1]}", file=sys.stderr)
    except (UsageError, DataValidationError) as exc:
        print(f"expfam-tmle: error: {exc}", file=sys.stderr)
        return 2
    except (TMLEError, ArithmeticError, np.linalg.LinAlgError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        _write_json(out / "error.json", err)
        _write_manifest(out, args, getattr(args, "seed", None), started, time.perf_counter() - t0)
        print(json.dumps(err))
        return 1
    _write_manifest(out, args, seed, started, time.perf_counter() - t0)
    print(json.dumps(_jsonable(payload), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
