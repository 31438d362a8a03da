"""Command-line entry point: ``ircpm {train,evaluate,check-bounds,verify,grid,sample}``.

Exit codes: 0 success, 1 failed verdict (``check-bounds``), 2 usage or config
error, 3 training-health abort, 4 I/O error; ``verify`` exits with the number
of failing suites.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from .config import RunConfig, build_model, load_config
from .diffnet import CheckpointError, load_checkpoint
from .errors import ConfigError, TrainingHealthError
from .targets import target_from_config

EXIT_USAGE, EXIT_HEALTH, EXIT_IO = 2, 3, 4


def _print(obj):
    print(json.dumps(obj, sort_keys=True))


def load_model(checkpoint, target=None):
    """Rebuild ``(cfg, stack, theta, target)`` from a checkpoint's embedded config."""
    values, header = load_checkpoint(checkpoint)
    if "config" not in header.get("meta", {}):
        raise ConfigError("checkpoint carries no run config", "meta.config")
    cfg = RunConfig.from_dict(header["meta"]["config"])
    stack, theta0, tgt = build_model(cfg)
    if theta0.size != values.size:
        raise CheckpointError(f"{checkpoint}: parameter count does not match its config")
    if target is not None:
        tgt = target_from_config({"name": target}, stack.manifold)
    return cfg, stack, values, tgt


def cmd_train(args):
    from .training import train

    cfg = load_config(args.config)
    if args.seed is not None:
        d = cfg.to_dict()
        d["train"]["seed"] = args.seed
        cfg = RunConfig.from_dict(d)
    out = args.out or cfg.output_dir
    stack, theta0, target = build_model(cfg)
    with open(os.path.join(_mkdir(out), "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    start = time.perf_counter()
    try:
        _, history = train(
            cfg.train, stack, target, theta0, out, {"config": cfg.to_dict()},
            log=lambda rec: print(json.dumps(rec, sort_keys=True), file=sys.stderr, flush=True),
        )
    except TrainingHealthError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_HEALTH
    # wall time lives outside metrics.jsonl so that file stays reproducible
    with open(os.path.join(out, "runtime.json"), "w") as fh:
        json.dump({"wall_seconds": time.perf_counter() - start, "steps": cfg.train.steps}, fh)
    _print(history[-1])
    return 0


def _mkdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def cmd_evaluate(args):
    from .evaluation import evaluate

    n = 20000 if args.n is None else args.n
    if n < 1:
        raise ConfigError("must be at least 1", "--n")
    _, stack, theta, target = load_model(args.checkpoint, args.target)
    rep = evaluate(stack, theta, target, n, seed=args.seed or 0)
    _print(rep.to_dict())
    return 0


def cmd_check_bounds(args):
    from .evaluation import bound_check

    n = 10**6 if args.n is None else args.n
    if n < 1:
        raise ConfigError("must be at least 1", "--n")
    _, stack, theta, _ = load_model(args.checkpoint)
    ok = True
    for i, layer in enumerate(stack.layers):
        if stack.share_parameters and i > 0:
            break
        rep = bound_check(
            layer.potential, stack.layer_theta(theta, i), stack.manifold, args.lam, n,
            args.seed or 0,
        )
        _print({"layer": i, **rep.to_dict()})
        ok &= rep.passes
    return 0 if ok else 1


def cmd_verify(args):
    from .verify import run_all

    results = run_all(args.inject_fault)
    width = max(len(r.name) for r in results)
    for r in results:
        flag = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {flag}  {r.metric:.3e} (tol {r.tolerance:.0e}) {r.detail}")
    return sum(not r.passed for r in results)


def cmd_grid(args):
    from .evaluation import density_grid, write_grid_csv, write_ppm

    res = 256 if args.resolution is None else args.resolution
    if res < 1:
        raise ConfigError("must be at least 1", "--resolution")
    _, stack, theta, _ = load_model(args.checkpoint)
    grid = density_grid(stack, theta, res)
    out = _mkdir(args.out or ".")
    write_grid_csv(grid, os.path.join(out, "grid.csv"))
    if len(grid.shape) == 2:
        write_ppm(grid, os.path.join(out, "grid.ppm"))
    _print({"resolution": res, "integral": grid.integral(),
            "flagged_cells": int((~grid.valid).sum())})
    return 0


def cmd_sample(args):
    from .evaluation import sample_model, write_samples_csv

    n = 1000 if args.n is None else args.n
    if n < 1:
        raise ConfigError("must be at least 1", "--n")
    _, stack, theta, _ = load_model(args.checkpoint)
    ys, log_q, conv = sample_model(stack, theta, n, args.seed or 0)
    out = _mkdir(args.out or ".")
    write_samples_csv(ys[conv], log_q[conv], os.path.join(out, "samples.csv"))
    _print({"n": n, "written": int(conv.sum())})
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="ircpm", description="Normalizing flows on tori and spheres from implicit c-concave maps.",
        epilog="exit codes: 0 ok, 1 failed bound check, 2 usage or config error, "
        "3 training aborted, 4 I/O error; verify exits with its failure count",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, *flags):
        s = sub.add_parser(name)
        s.set_defaults(func=fn)
        for f in flags:
            if f == "config":
                s.add_argument("--config", required=True, metavar="PATH")
            elif f == "checkpoint":
                s.add_argument("--checkpoint", required=True, metavar="PATH")
            elif f == "out":
                s.add_argument("--out", metavar="DIR")
            elif f in ("seed", "n", "resolution"):
                s.add_argument(f"--{f}", type=int, metavar="N")
        return s

    add("train", cmd_train, "config", "out", "seed")
    ev = add("evaluate", cmd_evaluate, "checkpoint", "n", "seed")
    ev.add_argument("--target", help="evaluate against a different named target")
    cb = add("check-bounds", cmd_check_bounds, "checkpoint", "n", "seed")
    cb.add_argument("--lambda", dest="lam", type=float, help="ball radius (default 2 max|grad|)")
    vf = add("verify", cmd_verify)
    vf.add_argument("--inject-fault", choices=["dist_derivatives"], help=argparse.SUPPRESS)
    add("grid", cmd_grid, "checkpoint", "resolution", "out")
    add("sample", cmd_sample, "checkpoint", "n", "out", "seed")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
