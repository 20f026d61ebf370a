"""Command line entry point: ``vbks <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from vbks.harness import (
    RunConfig,
    _coerce,
    ingest_csv,
    load_run,
    predict_run,
    read_config,
    run_vbks,
    write_csv,
)
from vbks.kernels import expand_grammar, parse_kernel
from vbks.prediction import rmse
from vbks.synthetic import DEFAULT_NOISE, TRUE_KERNELS, generate_synthetic, true_kernel


def _floats(text):
    return [float(v) for v in text.split(",")]


def cmd_generate(args):
    if args.kernel in TRUE_KERNELS and args.theta is None:
        expr, theta = true_kernel(args.kernel, args.noise)
    else:
        if args.theta is None:
            raise SystemExit("--theta is required for a custom kernel")
        expr = parse_kernel(args.kernel)
        theta = np.log(np.array(_floats(args.theta) + [args.noise]))
    domain = (_floats(args.low), _floats(args.high))
    data = generate_synthetic(expr, theta, args.n_seed, args.n_data, domain, args.seed)
    write_csv(args.output, data.X, data.y)
    if args.test_output:
        rng = np.random.default_rng([args.seed, 1])
        lo, hi = (np.asarray(d) for d in domain)
        Xt = rng.uniform(lo, hi, size=(args.n_test, lo.size))
        test = generate_synthetic(expr, theta, args.n_seed, args.n_test, domain, args.seed, X_data=Xt)
        write_csv(args.test_output, test.X, test.y)
    print(f"wrote {args.n_data} rows to {args.output}")


def _run_config(args) -> RunConfig:
    values = read_config(args.config) if args.config else {}
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    for key, value in vars(args).items():
        if key in fields and value is not None:
            values[key] = _coerce(fields[key], value) if isinstance(value, str) else value
    return RunConfig(**values)


def cmd_train(args):
    config = _run_config(args)
    if not config.data:
        raise SystemExit("no training data given (--data or data = ... in the config)")
    metrics = run_vbks(config)
    order = np.argsort(metrics["posterior"])[::-1]
    for i in order[:10]:
        print(f"{metrics['posterior'][i]:8.4f}  {metrics['kernels'][i]}")
    for key in ("rmse_bma", "rmse_single"):
        if key in metrics:
            print(f"{key} = {metrics[key]:.6g}")


def _predict(args):
    states, belief, scaling = load_run(args.run_dir)
    data = ingest_csv(args.input, n_inputs=args.n_inputs)
    pred = predict_run(states, belief, scaling, data.X, args.n_theta_draws, args.seed, args.observation)
    return data, pred


def cmd_predict(args):
    states, belief, scaling = load_run(args.run_dir)
    X = np.loadtxt(args.input, delimiter=",", ndmin=2, skiprows=args.skip_header)
    if args.n_inputs is not None:
        X = X[:, : args.n_inputs]
    pred = predict_run(states, belief, scaling, X, args.n_theta_draws, args.seed, args.observation)
    out = args.output or str(Path(args.run_dir) / "predictions.csv")
    write_csv(out, X, None, pred)
    print(f"wrote {len(X)} predictions to {out}")


def cmd_evaluate(args):
    data, pred = _predict(args)
    metrics = {"rmse_bma": rmse(pred["mean"], data.y), "rmse_single": rmse(pred["single_mean"], data.y)}
    if args.output:
        Path(args.output).write_text(json.dumps(metrics, indent=2))
    print(json.dumps(metrics, indent=2))


def cmd_expand(args):
    kernels = expand_grammar(args.bases.split(","), args.level)
    lines = [k.canonical_name for k in kernels]
    if args.output:
        Path(args.output).write_text("\n".join(lines) + "\n")
        print(f"wrote {len(lines)} kernels to {args.output}")
    else:
        print("\n".join(lines))


def _add_run_flags(p):
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if "bool" in str(f.type):
            p.add_argument(flag, dest=f.name, default=None, choices=["true", "false"])
        else:
            p.add_argument(flag, dest=f.name, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="vbks", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthetic data from a GP prior")
    p.add_argument("--kernel", default="(PER+RQ)*LIN")
    p.add_argument("--theta", help="comma separated kernel hyperparameters (natural scale)")
    p.add_argument("--noise", type=float, default=DEFAULT_NOISE)
    p.add_argument("--n-seed", type=int, default=256)
    p.add_argument("--n-data", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--low", default="-10")
    p.add_argument("--high", default="10")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.add_argument("--test-output")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run kernel selection and write run artifacts")
    p.add_argument("--config", help="flat key = value file; flags override it")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, text in (
        ("predict", cmd_predict, "predict at new inputs from a finished run"),
        ("evaluate", cmd_evaluate, "RMSE of a finished run on labelled data"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--run-dir", required=True)
        p.add_argument("--input", required=True)
        p.add_argument("--output")
        p.add_argument("--n-inputs", type=int)
        p.add_argument("--n-theta-draws", type=int, default=100)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--observation", action="store_true", help="add the noise variance")
        if name == "predict":
            p.add_argument("--skip-header", type=int, default=1)
        p.set_defaults(func=func)

    p = sub.add_parser("expand-kernels", help="list the kernels of the composition grammar")
    p.add_argument("--bases", default="SE,PER,LIN,RQ")
    p.add_argument("--level", type=int, default=3)
    p.add_argument("--output")
    p.set_defaults(func=cmd_expand)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
