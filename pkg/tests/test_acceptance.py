"""Acceptance criteria, one test (and one printed verdict line) each.

Training criteria reuse finished runs under ``runs/`` when their stored config
matches the reference config in ``configs/``; otherwise the run is trained
first, which takes minutes (torus) to about an hour (sphere).
"""

import json
import os

import jax.numpy as jnp
import numpy as np
import pytest

from ircpm.ccave import FlowStack
from ircpm.cli import load_model, main
from ircpm.config import load_config
from ircpm.diffnet import load_checkpoint
from ircpm.evaluation import bound_check, density_grid, evaluate
from ircpm.manifold import Sphere, Torus, tcg
from ircpm.targets import make_target
from ircpm.training import grad_check, loss_param_grad
from ircpm.verify import (
    bounded_layer,
    envelope_identity,
    equivariance,
    jacobian_fd,
    quadratic_closed_form,
    unique_minimizer,
)

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
EVAL_SEED = 20261015
TORUS_RUNS = {
    "torus_u1_symmetric": 90.0,
    "torus_u1_energy_scaled": 95.0,
    "torus_u1_energy_quadratic": 95.0,
    "torus_u3_mlp": 95.0,
}
ALL_RUNS = [*TORUS_RUNS, "torus_u2_substitute_mlp", "sphere_vmf4_stack3"]


def ensure_run(name):
    """Directory of a finished run of ``configs/<name>.json``, training it if needed."""
    path = os.path.join(ROOT, "configs", f"{name}.json")
    cfg = load_config(path)
    out = os.path.join(ROOT, cfg.output_dir)
    ck = os.path.join(out, "checkpoint.bin")
    stored = os.path.join(out, "config.json")
    fresh = (
        os.path.exists(ck)
        and os.path.exists(stored)
        and open(stored).read() == cfg.to_json()
        and load_checkpoint(ck)[1]["meta"].get("step") == cfg.train.steps
    )
    if not fresh:
        assert main(["train", "--config", path, "--out", out]) == 0
    return out


def wall_seconds(out):
    p = os.path.join(out, "runtime.json")
    if os.path.exists(p):
        return json.load(open(p))["wall_seconds"]
    # runs started before runtime.json existed: config.json is written at
    # start and metrics.jsonl at the final evaluation
    return os.path.getmtime(os.path.join(out, "metrics.jsonl")) - os.path.getmtime(
        os.path.join(out, "config.json")
    )


def fresh_eval(out):
    _, stack, theta, target = load_model(os.path.join(out, "checkpoint.bin"))
    return stack, theta, evaluate(stack, theta, target, 20000, seed=EVAL_SEED)


def test_criterion_01_closed_form(criterion):
    r = quadratic_closed_form(n_cases=100, seed=11, tol=1e-8)
    assert criterion(1, r.passed, f"max abs error {r.metric:.2e} over 100 cases (tol 1e-8)")


def test_criterion_02_envelope_identity(criterion):
    details, ok = [], True
    for m in (Torus((2.0, 2.0)), Sphere(2)):
        r = envelope_identity([m], n_points=100, seed=12, tol=1e-6)
        ok &= r.passed
        details.append(f"{type(m).__name__} {r.metric:.2e}")
    assert criterion(2, ok, f"max distance {', '.join(details)} (tol 1e-6)")


def test_criterion_03_jacobian(criterion):
    r = jacobian_fd(heights=(1, 2, 3), n_points=5, seed=13, tol=1e-4)
    assert criterion(3, r.passed, f"max rel error {r.metric:.2e} on T2, S2, stacks 1-3 (tol 1e-4)")


def test_criterion_04_parameter_gradient(criterion):
    fd_err, unroll_err, sizes = 0.0, 0.0, []
    for m, tname in ((Torus((2.0, 2.0)), "u1"), (Sphere(2), "sphere_vmf4")):
        layer, th = bounded_layer(m, seed=14, sizes=(8, 8, 1))
        sizes.append(len(th))
        tgt = make_target(tname)
        for height in (1, 3):
            stack = FlowStack.repeat(layer, height)
            rep = grad_check(stack, th, tgt, n_points=16, epsilon=1e-5, seed=14)
            fd_err = max(fd_err, rep.max_rel_err)
        stack = FlowStack.repeat(layer, 2)
        xs = m.sample_base(32, 15)
        gi = loss_param_grad(stack, th, tgt, xs, "implicit")
        gu = loss_param_grad(stack, th, tgt, xs, "unrolled", unroll_steps=50)
        unroll_err = max(unroll_err, float(np.max(np.abs(gi - gu)) / np.max(np.abs(gi))))
    ok = fd_err <= 1e-3 and unroll_err <= 1e-3 and max(sizes) <= 200
    assert criterion(
        4, ok,
        f"vs FD {fd_err:.2e}, vs unrolled {unroll_err:.2e} (tol 1e-3; {max(sizes)} params)",
    )


def test_criterion_05_equivariance(criterion):
    r = equivariance(n_cases=100, seed=15, tol=1e-6)
    assert criterion(5, r.passed, f"max distance {r.metric:.2e} over 100 shifts (tol 1e-6)")


def test_criterion_06_sphere_spectrum(criterion):
    worst = 0.0
    for dim in (2, 3):
        m = Sphere(dim)
        x = jnp.zeros(dim + 1).at[-1].set(1.0)
        for t in (0.1, 0.5, 1.0, 1.5):
            v = jnp.zeros(dim + 1).at[0].set(t)
            y = m.exp_map(x, v)
            ev = np.sort(np.linalg.eigvalsh(m.dist_derivatives(x, y, 2).hess_yy))
            ref = np.sort([1.0] + [tcg(t)] * (dim - 1))
            worst = max(worst, float(np.max(np.abs(ev - ref))))
    tcg_err = abs(tcg(0.24) - 0.981)
    ok = worst <= 1e-8 and tcg_err <= 5e-4
    assert criterion(
        6, ok, f"eigenvalue error {worst:.1e} (tol 1e-8), tcg(0.24) = {tcg(0.24):.4f}"
    )


def test_criterion_07_unique_minimizer(criterion):
    results = [
        unique_minimizer(m, n_points=100, seed=17)
        for m in (Torus((2.0,)), Torus((2.0, 2.0)), Sphere(2))
    ]
    ok = all(r.passed for r in results)
    detail = ", ".join(f"{r.name} {int(r.metric)}" for r in results)
    assert criterion(7, ok, f"mismatches: {detail}")


@pytest.mark.slow
def test_criterion_08_torus_training(criterion):
    ok, parts = True, []
    for name, bar in TORUS_RUNS.items():
        out = ensure_run(name)
        _, _, rep = fresh_eval(out)
        secs = wall_seconds(out)
        passed = rep.ess >= bar and secs <= 900
        ok &= passed
        parts.append(f"{name} ESS {rep.ess:.1f}% (>= {bar:g}) in {secs / 60:.1f} min")
    assert criterion(8, ok, "; ".join(parts))


@pytest.mark.slow
def test_criterion_09_sphere_training(criterion):
    out = ensure_run("sphere_vmf4_stack3")
    stack, theta, rep = fresh_eval(out)
    bounds = bound_check(stack.layers[0].potential, theta, stack.manifold, n_probe=10**6, seed=9)
    secs = wall_seconds(out)
    ok = rep.ess >= 97 and rep.kl <= 0.01 and bounds.passes and secs <= 7200
    assert criterion(
        9, ok,
        f"ESS {rep.ess:.2f}% (>= 97), KL {rep.kl:.4f} +- {rep.kl_stderr:.4f} (<= 0.01), "
        f"bounds max|grad| {bounds.max_grad_norm:.3f} max|H| {bounds.max_hess_opnorm:.3f} "
        f"< tcg({bounds.lam:.3f}) = {bounds.eta_required:.3f}: "
        f"{'pass' if bounds.passes else 'fail'}, {secs / 60:.1f} min",
    )


@pytest.mark.slow
def test_criterion_10_u2_substitute(criterion):
    out = ensure_run("torus_u2_substitute_mlp")
    _, _, rep = fresh_eval(out)
    secs = wall_seconds(out)
    ok = rep.ess >= 95 and secs <= 900
    assert criterion(10, ok, f"ESS {rep.ess:.1f}% (>= 95) in {secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_11_normalization(criterion):
    worst, parts = 0.0, []
    for name in ALL_RUNS:
        out = ensure_run(name)
        _, stack, theta, _ = load_model(os.path.join(out, "checkpoint.bin"))
        g = density_grid(stack, theta, 256)
        err = abs(g.integral() - 1)
        worst = max(worst, err)
        parts.append(f"{name} {err:.1e} ({int((~g.valid).sum())} flagged)")
    assert criterion(11, worst <= 1e-3, f"|integral - 1| at 256: {'; '.join(parts)}")


@pytest.mark.slow
def test_criterion_12_determinism(criterion, tmp_path):
    name = "torus_u1_energy_scaled"
    ref = os.path.join(ensure_run(name), "metrics.jsonl")
    path = os.path.join(ROOT, "configs", f"{name}.json")
    for sub in ("a", "b"):
        assert main(["train", "--config", path, "--out", str(tmp_path / sub)]) == 0
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    stored = open(ref, "rb").read()
    ok = a == b == stored
    records = a.count(b"\n")
    assert criterion(
        12, ok,
        f"{name}: two fresh runs {'identical' if a == b else 'differ'}, "
        f"{'identical to' if a == stored else 'differ from'} the stored run "
        f"({len(a)} bytes, {records} records)",
    )

