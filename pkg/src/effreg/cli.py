"""Command-line driver: ``effreg fit | simulate | diagnose``.

Exit codes: 0 success, 1 input error, 2 numerical non-convergence.
Every run writes ``metadata.json`` into ``--out``; ``--replay`` on that
file re-runs the same command with the same resolved settings.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .diagnose import diagnose
from .errors import error_model_from_dict
from .exceptions import ConvergenceError, EffregError, SingularityError
from .model import exponential_model, linear_model, read_csv
from .simulate import DEFAULT_SEED, ScenarioError, bundled_scenario, load_scenario, run_study
from .solver import FitConfig, solve_efficient

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2


class InputError(Exception):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="effreg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"effreg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", default="effreg-out", help="output directory")
        sp.add_argument("--seed", type=int, default=None,
                        help=f"random seed (default {DEFAULT_SEED} or the scenario's own)")
        sp.add_argument("--format", choices=("json", "csv"), default="json")
        sp.add_argument("--replay", help="metadata.json from an earlier run")

    def data_args(sp, required):
        sp.add_argument("--input", required=required, help="CSV file with a header row")
        sp.add_argument("--response", help="name of the response column")
        sp.add_argument("--model", choices=("linear", "exponential"), default="linear")
        sp.add_argument("--intercept", dest="intercept", action="store_true", default=True)
        sp.add_argument("--no-intercept", dest="intercept", action="store_false")
        sp.add_argument("--error", choices=("normal", "gumbel", "mixture", "kernel"), default="normal")

    f = sub.add_parser("fit", help="fit a regression by efficient-score estimation")
    data_args(f, required=False)
    common(f)

    s = sub.add_parser("simulate", help="run a Monte Carlo study from a scenario file")
    s.add_argument("--scenario", help="scenario JSON path or bundled scenario name")
    s.add_argument("--reps", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--modes", help="comma separated modes (true,normal,gumbel,mixture,kernel)")
    s.add_argument("--threads", type=int)
    common(s)

    d = sub.add_parser("diagnose", help="residual diagnostics")
    data_args(d, required=False)
    d.add_argument("--column", default=None,
                   help="residual column of --input (skips fitting)")
    d.add_argument("--reference", choices=("normal", "fitted"), default="normal",
                   help="Q-Q reference law: normal, or the fitted error model")
    common(d)
    return p


def _resolve(args):
    if args.replay:
        with open(args.replay) as fh:
            meta = json.load(fh)
        if meta.get("command") != args.command:
            raise InputError(f"replay file is for {meta.get('command')!r}, not {args.command!r}")
        for k, v in meta["args"].items():
            if k not in ("out", "replay"):
                setattr(args, k, v)
    return args


def _write(out, name, text):
    with open(os.path.join(out, name), "w", newline="") as fh:
        fh.write(text)


def _metadata(args, extra=None):
    a = {k: v for k, v in vars(args).items() if k not in ("replay",)}
    d = {"command": args.command, "args": a, "version": __version__}
    d.update(extra or {})
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def _mean_model(args, data):
    if args.model == "exponential":
        return exponential_model()
    return linear_model(data.l, args.intercept)


def _load_data(args):
    if not args.input:
        raise InputError("--input is required")
    if not args.response:
        raise InputError("--response is required")
    if not os.path.exists(args.input):
        raise InputError(f"input file {args.input!r} does not exist")
    return read_csv(args.input, args.response)


def _cmd_fit(args):
    if args.seed is None:
        args.seed = DEFAULT_SEED
    data = _load_data(args)
    model = _mean_model(args, data)
    cfg = FitConfig(error_mode=args.error, seed=args.seed)
    fit = solve_efficient(data, model, cfg)
    os.makedirs(args.out, exist_ok=True)
    _write(args.out, "fit.json", fit.to_json(indent=2) + "\n")
    lines = ["index,residual"] + [f"{i},{r!r}" for i, r in enumerate(fit.residuals.tolist())]
    _write(args.out, "residuals.csv", "\n".join(lines) + "\n")
    diag = diagnose(fit.residuals)
    _write(args.out, "diagnostics.json", diag.to_json(indent=2) + "\n")
    _write(args.out, "metadata.json", _metadata(args, {"fit_config": cfg.to_dict(),
                                                       "covariates": list(data.names)}))
    print(fit.summary())
    return EXIT_OK if fit.converged else EXIT_NONCONVERGED


def _cmd_simulate(args):
    if not args.scenario:
        raise InputError("--scenario is required")
    try:
        sc = load_scenario(args.scenario) if os.path.exists(args.scenario) else bundled_scenario(args.scenario)
    except FileNotFoundError:
        raise InputError(f"scenario {args.scenario!r} not found") from None
    over = {}
    if args.reps is not None:
        over["reps"] = args.reps
    if args.n is not None:
        over["n"] = args.n
    if args.seed is not None:
        over["seed"] = args.seed
    sc = replace(sc, **over)
    args.seed = sc.seed
    modes = tuple(m.strip() for m in args.modes.split(",")) if args.modes else None
    report = run_study(sc, modes=modes, threads=args.threads)
    os.makedirs(args.out, exist_ok=True)
    _write(args.out, "report.csv", report.to_csv())
    _write(args.out, "report.json", report.to_json() + "\n")
    _write(args.out, "metadata.json", _metadata(args, {"scenario": sc.to_dict(),
                                                       "report_metadata": report.metadata}))
    for r in report.rows:
        print(f"{r['mode']:>8} {r['parameter']:>3}  est={r['estimate']:.4f}  se1={r['se1']:.4f}  "
              f"se2={r['se2']:.4f}  cvg={r['cvg95']:.3f}")
    return EXIT_OK


def _read_column(path, column):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise InputError(f"{path}: no data")
    header = [h.strip() for h in rows[0]]
    if column not in header:
        raise InputError(f"column {column!r} not found; available columns: {', '.join(header)}")
    j = header.index(column)
    vals = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            vals.append(float(row[j]))
        except (ValueError, IndexError):
            raise InputError(f"{path}: line {lineno}, column {j + 1}: non-numeric value") from None
    return np.array(vals)


def _cmd_diagnose(args):
    if args.seed is None:
        args.seed = DEFAULT_SEED
    reference = None
    if args.column:
        if not args.input or not os.path.exists(args.input):
            raise InputError("--input residual file is required")
        res = _read_column(args.input, args.column)
    else:
        data = _load_data(args)
        fit = solve_efficient(data, _mean_model(args, data), FitConfig(error_mode=args.error, seed=args.seed))
        res = fit.residuals
        if args.reference == "fitted" and args.error != "normal":
            reference = error_model_from_dict(fit.error_model)
    if res.size == 0:
        raise InputError("no residuals to diagnose")
    diag = diagnose(res, reference)
    os.makedirs(args.out, exist_ok=True)
    _write(args.out, "diagnostics.json", diag.to_json(indent=2) + "\n")
    _write(args.out, "qq.csv", diag.qq_csv())
    _write(args.out, "hist.csv", diag.hist_csv())
    _write(args.out, "metadata.json", _metadata(args))
    p = "skipped" if diag.shapiro_p is None else f"{diag.shapiro_p:.4g}"
    print(f"n={diag.n} skewness={diag.skewness:.4f} excess_kurtosis={diag.excess_kurtosis:.4f} "
          f"shapiro_p={p}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        args = _resolve(args)
        handler = {"fit": _cmd_fit, "simulate": _cmd_simulate, "diagnose": _cmd_diagnose}[args.command]
        return handler(args)
    except (ConvergenceError, SingularityError) as exc:
        print(f"effreg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (InputError, ScenarioError, EffregError, OSError) as exc:
        print(f"effreg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
