"""Self-contained oracle suites (closed forms and finite differences).

Each suite returns a :class:`SuiteResult`. :func:`run_all` is what the
``verify`` command prints; its failure count becomes the exit code.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import manifold as _mf
from .ccave import FlowLayer, FlowStack, implicit_jacobian, inner_minimize, psi_c, stack_forward
from .diffnet import NetworkSpec, QuadraticPotential, build_potential
from .evaluation import potential_extrema, required_eta
from .manifold import Euclidean, Sphere, Torus
from .targets import make_target
from .training import grad_check


@dataclass
class SuiteResult:
    name: str
    passed: bool
    metric: float
    tolerance: float
    detail: str = ""


def _random_spd(rng, n, top=0.95):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return Q @ np.diag(rng.uniform(0.05, top, n)) @ Q.T


def quadratic_closed_form(n_cases=20, seed=0, tol=1e-8):
    """Quadratic potential on R^2: minimizer ``(I+M)^{-1}(x + M mu)`` and its value."""
    rng = np.random.default_rng(seed)
    m = Euclidean(2)
    pot = QuadraticPotential(m)
    layer = FlowLayer(m, pot)
    worst = 0.0
    for _ in range(n_cases):
        M, mu, x = _random_spd(rng, 2), rng.normal(size=2), rng.normal(size=2)
        th = pot.pack(mu, M)
        y_ref = np.linalg.solve(np.eye(2) + M, x + M @ mu)
        val_ref = 0.5 * np.sum((x - y_ref) ** 2) + 0.5 * (y_ref - mu) @ M @ (y_ref - mu)
        rep = inner_minimize(layer, th, x)
        worst = max(worst, np.max(np.abs(rep.minimizer - y_ref)), abs(rep.psi_c_value - val_ref))
    return SuiteResult("quadratic_closed_form", worst <= tol, worst, tol)


def bounded_layer(manifold, seed=0, sizes=(8, 8, 1), scale=None):
    """A layer whose random potential is small enough for the inner problem to be safe."""
    if scale is None:
        scale = 20.0 if isinstance(manifold, Sphere) else 4.0
    spec = NetworkSpec("mlp", list(sizes), scale)
    theta, pot = build_potential(spec, manifold, seed)
    return FlowLayer(manifold, pot), theta.values


def _fd_chart_grad(f, m, x, h):
    g = np.empty(m.dim)
    for b in range(m.dim):
        e = np.zeros(m.dim)
        e[b] = h
        g[b] = (f(m.chart(x, e)) - f(m.chart(x, -e))) / (2 * h)
    return g


def envelope_identity(manifolds=None, n_points=20, seed=0, tol=1e-6, h=1e-5):
    """``exp_x(-grad psi^c(x))`` (gradient by finite differences) equals ``y*``."""
    manifolds = manifolds or [Torus((2.0, 2.0)), Sphere(2)]
    worst = 0.0
    for m in manifolds:
        layer, th = bounded_layer(m, seed)
        xs = m.sample_base(n_points, seed + 1)
        for x in xs:
            g = _fd_chart_grad(lambda z: psi_c(layer, th, z)[0], m, x, h)
            y_env = m.exp_map(x, -(np.asarray(m.tangent_basis(x)).T @ g))
            y = inner_minimize(layer, th, x).minimizer
            worst = max(worst, float(m.dist(y_env, y)))
    return SuiteResult("envelope_identity", worst <= tol, worst, tol)


def fd_jacobian(fn, m, x, h=1e-5):
    """Central-difference Jacobian of a manifold map in normal charts at x and fn(x)."""
    y0 = fn(x)
    J = np.empty((m.dim, m.dim))
    for b in range(m.dim):
        e = np.zeros(m.dim)
        e[b] = h
        yp = np.asarray(m.chart_inverse(y0, fn(m.chart(x, e))))
        ym = np.asarray(m.chart_inverse(y0, fn(m.chart(x, -e))))
        J[:, b] = (yp - ym) / (2 * h)
    return J


def jacobian_fd(manifolds=None, heights=(1, 2, 3), n_points=5, seed=0, tol=1e-4):
    """Implicit Jacobians and stacked log-dets against finite differences."""
    manifolds = manifolds or [Torus((2.0, 2.0)), Sphere(2)]
    worst = 0.0
    for m in manifolds:
        layer, th = bounded_layer(m, seed)
        for x in m.sample_base(n_points, seed + 2):
            J = implicit_jacobian(layer, th, x)
            Jfd = fd_jacobian(lambda z: inner_minimize(layer, th, z).minimizer, m, x)
            worst = max(worst, np.max(np.abs(J - Jfd)) / np.max(np.abs(Jfd)))
        for hgt in heights:
            stack = FlowStack.repeat(layer, hgt)
            for x in m.sample_base(n_points, seed + 3):
                _, ld, _ = stack_forward(stack, th, x)
                Jfd = fd_jacobian(lambda z: stack_forward(stack, th, z)[0], m, x)
                ld_fd = np.log(abs(np.linalg.det(Jfd)))
                worst = max(worst, abs(ld - ld_fd) / max(1.0, abs(ld_fd)))
    return SuiteResult("jacobian_fd", worst <= tol, float(worst), tol)


def equivariance(n_cases=20, seed=0, tol=1e-6):
    """A symmetric-MLP flow on T^2 commutes with diagonal shifts."""
    m = Torus((2.0, 2.0))
    spec = NetworkSpec("symmetric_mlp", [32, 32, 1], 4.0)
    theta, pot = build_potential(spec, m, seed)
    layer = FlowLayer(m, pot)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        x, c = m.sample_base(1, rng)[0], rng.uniform(0, 2)
        shift = np.full(2, c)
        a = inner_minimize(layer, theta, m.shift(x, shift)).minimizer
        b = m.shift(inner_minimize(layer, theta, x).minimizer, shift)
        worst = max(worst, float(m.dist(a, b)))
    return SuiteResult("equivariance", worst <= tol, worst, tol)


def parameter_gradient(seed=0, tol=1e-3):
    """Implicit training gradient against finite differences of the batch KL."""
    m = Torus((2.0, 2.0))
    layer, th = bounded_layer(m, seed)
    stack = FlowStack.repeat(layer, 2)
    rep = grad_check(stack, th, make_target("u1"), n_points=32, epsilon=1e-5, seed=seed)
    return SuiteResult("grad_check", rep.max_rel_err <= tol, rep.max_rel_err, tol)


def rescaled_layer(manifold, lam, seed=0, sizes=(16, 16, 1), slack=0.8, n_probe=20000):
    """A random-MLP layer scaled so that ``|grad psi| < lam / 2`` and the Hessian bound hold.

    The output scale divides psi and all its derivatives, so one probe pass at
    scale 1 fixes it; ``slack`` leaves room for maxima the probes miss.
    """
    theta, pot = build_potential(NetworkSpec("mlp", list(sizes), 1.0), manifold, seed)
    g, h = potential_extrema(pot, theta, manifold, n_probe, seed + 1)
    scale = 1.0 / (slack * min(lam / 2 / g, required_eta(manifold, lam) / h))
    _, pot = build_potential(NetworkSpec("mlp", list(sizes), scale), manifold, seed)
    return FlowLayer(manifold, pot), theta.values


def _torus_grid(m, n_total):
    per_axis = round(n_total ** (1 / m.dim))
    axes = [np.arange(per_axis) * (L / per_axis) for L in m.circumferences]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, m.dim)
    return pts, max(m.circumferences) / per_axis


def unique_minimizer(
    manifold, n_points=100, seed=0, lam=None, grid_points=10**4, restarts=32, slack=0.8
):
    """Gradient descent from ``y = x`` finds the global minimizer of ``h(x, .)``.

    Tori are compared against a dense grid (which must also place every
    minimizer within ``lam`` of x); spheres against multi-start descent.
    The metric is the number of mismatching points.
    """
    import jax
    import jax.numpy as jnp

    if lam is None:
        lam = 1.0 if isinstance(manifold, Sphere) else 0.8 * min(manifold.circumferences) / 2
    layer, th = rescaled_layer(manifold, lam, seed, slack=slack)
    xs = manifold.sample_base(n_points, seed + 7)
    bad = []
    if isinstance(manifold, Sphere):
        multi = FlowLayer(
            manifold, layer.potential,
            type(layer.solver)(restart_points=restarts, restart_seed=seed),
        )
        for x in xs:
            a, b = inner_minimize(layer, th, x), inner_minimize(multi, th, x)
            if not (a.converged and float(manifold.dist(a.minimizer, b.minimizer)) <= 1e-8):
                bad.append(x)
    else:
        grid, spacing = _torus_grid(manifold, grid_points)
        psi = np.asarray(layer.potential.eval_batch(th, grid, 0).value)
        d2 = jax.jit(jax.vmap(manifold.dist_sq, in_axes=(None, 0)))
        for x in xs:
            hv = 0.5 * np.asarray(d2(jnp.asarray(x), grid)) + psi
            k = int(np.argmin(hv))
            rep = inner_minimize(layer, th, x)
            ok = (
                rep.converged
                and float(manifold.dist(rep.minimizer, grid[k])) <= 2 * spacing
                and rep.psi_c_value <= hv[k] + 1e-12
                and float(manifold.dist(x, grid[k])) <= lam
            )
            if not ok:
                bad.append(x)
    name = f"unique_minimizer[{type(manifold).__name__}{manifold.dim}]"
    return SuiteResult(name, not bad, float(len(bad)), 0.0, f"lambda={lam:g}")


SUITES = {
    "quadratic_closed_form": quadratic_closed_form,
    "envelope_identity": envelope_identity,
    "equivariance": equivariance,
    "jacobian_fd": jacobian_fd,
    "grad_check": parameter_gradient,
}


@contextlib.contextmanager
def corrupted_distance_derivatives(factor=1.01):
    """Test hook: scale the analytic mixed distance derivative by ``factor``."""
    saved = {}
    for cls in (_mf._Flat, Sphere):
        orig = cls.__dict__["dist_derivatives"]
        saved[cls] = orig

        def bad(self, x, y, order=2, _orig=orig):
            d = _orig(self, x, y, order)
            return d._replace(cross_yx=factor * d.cross_yx)

        setattr(cls, "dist_derivatives", bad)
    try:
        yield
    finally:
        for cls, orig in saved.items():
            setattr(cls, "dist_derivatives", orig)


FAULTS = {"dist_derivatives": corrupted_distance_derivatives}


def run_all(fault=None):
    """Run every suite, optionally under an injected fault.

    Returns:
        list of :class:`SuiteResult`.
    """
    ctx = FAULTS[fault]() if fault else contextlib.nullcontext()
    out = []
    with ctx:
        for name, fn in SUITES.items():
            try:
                out.append(fn())
            except Exception as e:  # a crashing suite counts as a failure
                out.append(SuiteResult(name, False, float("nan"), float("nan"), repr(e)))
    return out
