"""Implicit c-concave transport layers.

For a potential ``psi`` the layer solves the inner problem

    y*(x) = argmin_y h(x, y),    h(x, y) = d(x, y)^2 / 2 + psi(y),

so that ``psi^c(x) = h(x, y*(x))``. By the envelope identity
``grad psi^c(x) = -log_x(y*)``, hence the flow ``exp_x(-grad psi^c(x))`` is
``y*(x)`` itself.

Derivatives of ``y*`` follow from the stationarity condition
``F(x, y) = grad_y h(x, y) = 0``. Writing ``A = d_y F`` (the Hessian of h in y)
and ``C = d_x F`` (the mixed distance derivative), the flow Jacobian in the
tangent bases at x and y* is ``J = -A^{-1} C``. Higher-order products are
obtained by differentiating the same linear constraint again, which consumes
third derivatives of the distance and of ``psi``.

Local coordinates are the normal charts ``exp_p(E_p^T s)`` at the relevant
points. Log-determinants computed in these charts agree with the orthonormal
frame values to second order in the chart offset, so their first derivatives
(everything needed for training) are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConfigError, ContractError, DegenerateFlowError, ImplicitSolveError
from .manifold import Manifold


@dataclass(frozen=True)
class InnerSolverConfig:
    """Settings for the inner minimization of ``h(x, .)``."""

    grad_tolerance: float = 1e-10
    max_gd_steps: int = 200
    gd_step_size: float = 1.0
    newton_polish: bool = True
    newton_switch: float = 1e-4
    max_newton_steps: int = 20
    restart_points: int = 0
    restart_seed: int = 0

    def __post_init__(self):
        if not self.grad_tolerance > 0:
            raise ConfigError("must be positive", "solver.grad_tolerance")
        if not 0 < self.gd_step_size < 2:
            raise ConfigError("must lie in (0, 2)", "solver.gd_step_size")
        if self.max_gd_steps < 0 or self.restart_points < 0:
            raise ConfigError("step and restart counts must be non-negative", "solver")

    @property
    def max_iterations(self):
        return self.max_gd_steps + (self.max_newton_steps if self.newton_polish else 0)


@dataclass
class InnerSolveReport:
    """Outcome of one inner solve (arrays with a leading batch axis when batched)."""

    minimizer: np.ndarray
    psi_c_value: np.ndarray
    iterations: np.ndarray
    final_grad_norm: np.ndarray
    converged: np.ndarray
    hessian_min_eig: np.ndarray


@dataclass(frozen=True, eq=False)
class FlowLayer:
    """One implicit c-concave map on ``manifold`` driven by ``potential``."""

    manifold: Manifold
    potential: object
    solver: InnerSolverConfig = field(default_factory=InnerSolverConfig)

    def __post_init__(self):
        if self.potential.manifold != self.manifold:
            raise ContractError("potential lives on a different manifold than the layer")

    @property
    def n_params(self):
        return self.potential.n_params


@dataclass(frozen=True, eq=False)
class FlowStack:
    """Sequential composition of flow layers.

    With ``share_parameters`` every layer reads the same parameter vector;
    otherwise the stack's parameters are the concatenation of per-layer vectors.
    """

    layers: tuple
    share_parameters: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ContractError("a stack needs at least one layer")
        m = self.layers[0].manifold
        if any(layer.manifold != m for layer in self.layers):
            raise ContractError("all layers of a stack must share a manifold")
        if self.share_parameters and len({id(layer.potential) for layer in self.layers}) != 1:
            raise ContractError("shared parameters need one potential for all layers")

    @classmethod
    def repeat(cls, layer, height, share_parameters=True):
        return cls(tuple([layer] * height), share_parameters)

    @property
    def manifold(self):
        return self.layers[0].manifold

    @property
    def height(self):
        return len(self.layers)

    @property
    def n_params(self):
        if self.share_parameters:
            return self.layers[0].n_params
        return sum(layer.n_params for layer in self.layers)

    def layer_slices(self):
        if self.share_parameters:
            return [slice(0, self.n_params)] * self.height
        out, k = [], 0
        for layer in self.layers:
            out.append(slice(k, k + layer.n_params))
            k += layer.n_params
        return out

    def layer_theta(self, theta, i):
        return theta[self.layer_slices()[i]]


def _theta(theta):
    return jnp.asarray(getattr(theta, "values", theta), dtype=jnp.float64)


# --------------------------------------------------------------------------
# traceable single-point kernels


def _grad_and_hessian(layer, theta, x, y):
    D = layer.manifold.dist_derivatives(x, y, 2)
    P = layer.potential.chart_derivatives(theta, y, 2)
    return D.grad_y + P.grad_x, D.hess_yy + P.hess_x


def _h_value(layer, theta, x, y):
    return 0.5 * layer.manifold.dist_sq(x, y) + layer.potential.raw(theta, y)


def _solve_from(layer, theta, x, y0):
    """Riemannian gradient descent on ``h(x, .)`` from y0 with Newton polishing."""
    cfg = layer.solver
    m = layer.manifold

    def cond(state):
        _, k, g, _ = state
        return (k < cfg.max_iterations) & (jnp.linalg.norm(g) > cfg.grad_tolerance)

    def body(state):
        y, k, g, A = state
        gn = jnp.linalg.norm(g)
        step = -cfg.gd_step_size * g
        if cfg.newton_polish:
            pd = jnp.linalg.eigvalsh(A)[0] > 0
            # Newton near the solution, or as a fallback once the GD budget is
            # spent (GD contracts slowly when eigenvalues of A approach 0 or 2)
            use_newton = pd & ((gn < cfg.newton_switch) | (k >= cfg.max_gd_steps))
            newton = -jnp.linalg.solve(jnp.where(use_newton, A, jnp.eye(A.shape[0])), g)
            step = jnp.where(use_newton, newton, step)
        y = m.exp_map(y, m.tangent_basis(y).T @ step)
        g, A = _grad_and_hessian(layer, theta, x, y)
        return y, k + 1, g, A

    g0, A0 = _grad_and_hessian(layer, theta, x, y0)
    y, k, g, A = jax.lax.while_loop(cond, body, (y0, jnp.asarray(0), g0, A0))
    min_eig = jnp.linalg.eigvalsh(A)[0]
    gn = jnp.linalg.norm(g)
    value = _h_value(layer, theta, x, y)
    converged = (gn <= cfg.grad_tolerance) & (min_eig > 0)
    return y, value, k, gn, converged, min_eig


def _solve(layer, theta, x, starts=None):
    """Inner solve from ``y = x`` and optional extra starting points.

    Among converged candidates the lowest value wins; values within 1e-9 of the
    best are resolved in favour of the candidate nearest to x.
    """
    res = _solve_from(layer, theta, x, x)
    if starts is None:
        return res
    extra = jax.vmap(lambda y0: _solve_from(layer, theta, x, y0))(starts)
    cand = [jnp.concatenate([r[None], e]) for r, e in zip(res, extra)]
    ys, vals, ks, gns, conv, eigs = cand
    vals_ok = jnp.where(conv, vals, jnp.inf)
    best = jnp.min(vals_ok)
    near = jax.vmap(lambda y: layer.manifold.dist_sq(x, y))(ys)
    tie = vals_ok <= best + 1e-9
    idx = jnp.argmin(jnp.where(tie, near, jnp.inf))
    idx = jnp.where(jnp.isfinite(best), idx, 0)
    return tuple(c[idx] for c in cand)


def _local_terms(layer, theta, x, y, order=2):
    """Implicit-system ingredients at a solution pair ``(x, y)``."""
    D = layer.manifold.dist_derivatives(x, y, order)
    P = layer.potential.chart_derivatives(theta, y, order)
    A = D.hess_yy + P.hess_x
    C = D.cross_yx
    return D, P, A, C


def _logdet_from(A, C):
    _, ldA = jnp.linalg.slogdet(A)
    sC, ldC = jnp.linalg.slogdet(C)
    return ldC - ldA, jnp.abs(sC) * jnp.exp(ldC - ldA)


def _ell_partials(D, P, A, C):
    """Partials of ``log det A - log|det C|`` (minus the log-det) in s and r."""
    Ainv = jnp.linalg.inv(A)
    Cinv = jnp.linalg.inv(C)
    dA_ds = D.third_yyy + P.third_x  # [i, j, k]: d A_ij / d s_k
    ds = jnp.einsum("ji,ijk->k", Ainv, dA_ds) - jnp.einsum("ai,ika->k", Cinv, D.third_yyx)
    dr = jnp.einsum("ji,ija->a", Ainv, D.third_yyx) - jnp.einsum("bi,iab->a", Cinv, D.third_yxx)
    return ds, dr, Ainv


def _jacobian(layer, theta, x, y):
    _, _, A, C = _local_terms(layer, theta, x, y, 2)
    return -jnp.linalg.solve(A, C)


def _second_vjp(layer, theta, x, y, v1, v2):
    """``v2^T d_x (v1^T d_x y*)``: derivative of a first-order product along v2."""
    D, P, A, C = _local_terms(layer, theta, x, y, 3)
    J = -jnp.linalg.solve(A, C)
    w = jnp.linalg.solve(A, v1)
    dA = D.third_yyx + jnp.einsum("kb,ijk->ijb", J, D.third_yyy + P.third_x)
    dC = jnp.einsum("iab->iab", D.third_yxx) + jnp.einsum("kb,ika->iab", J, D.third_yyx)
    dA_v = jnp.einsum("ijb,b->ij", dA, v2)
    dC_v = jnp.einsum("iab,b->ia", dC, v2)
    return C.T @ jnp.linalg.solve(A, dA_v @ w) - dC_v.T @ w


# --------------------------------------------------------------------------
# checked single-point API


def _restart_starts(layer, x):
    cfg = layer.solver
    if cfg.restart_points <= 0:
        return None
    return jnp.asarray(layer.manifold.sample_base(cfg.restart_points, cfg.restart_seed))


def inner_minimize(layer, theta, x) -> InnerSolveReport:
    """Solve ``min_y d(x, y)^2 / 2 + psi(y)`` starting from ``y = x``.

    Non-convergence is reported in the returned report rather than raised.
    """
    x = layer.manifold._check_point(x)
    theta = _theta(theta)
    y, v, k, gn, conv, eig = _cached(layer, "solve")(theta, x, _restart_starts(layer, x))
    return InnerSolveReport(
        np.asarray(y), float(v), int(k), float(gn), bool(conv), float(eig)
    )


def psi_c(layer, theta, x):
    """The c-transform ``psi^c(x) = min_y h(x, y)``.

    Returns:
        ``(value, converged)``.
    """
    rep = inner_minimize(layer, theta, x)
    return rep.psi_c_value, rep.converged


def _require_solution(rep):
    if not rep.converged:
        if rep.hessian_min_eig <= 0:
            raise ImplicitSolveError(
                "Hessian of h is not positive definite at the inner solution",
                rep.hessian_min_eig,
            )
        raise ImplicitSolveError(
            f"inner solve did not converge (|grad| = {rep.final_grad_norm:.3e})",
            rep.hessian_min_eig,
        )


def forward(layer, theta, x):
    """Push x through the layer.

    Returns:
        ``(y, logdet, report)`` where ``logdet = log|det E_y J E_x^T|``.
    """
    rep = inner_minimize(layer, theta, x)
    theta = _theta(theta)
    logdet, absdet = _cached(layer, "logdet")(theta, jnp.asarray(x), jnp.asarray(rep.minimizer))
    if not float(absdet) > 1e-300:
        raise DegenerateFlowError("projected flow Jacobian is singular")
    return rep.minimizer, float(logdet), rep


def implicit_jacobian(layer, theta, x):
    """Flow Jacobian ``-A^{-1} C`` in the tangent bases at y* (rows) and x (columns)."""
    rep = inner_minimize(layer, theta, x)
    _require_solution(rep)
    return np.asarray(_cached(layer, "jacobian")(_theta(theta), jnp.asarray(x), rep.minimizer))


def implicit_vjp(layer, theta, x, v, order=1, v2=None, wrt="x"):
    """Vector-Jacobian products of the inner minimizer ``y*(x)``.

    Args:
        v: covector at y* (tangent-basis components).
        order: 1 gives ``v^T d y*``; 2 gives ``v2^T d_x (v^T d_x y*)``.
        v2: direction at x for the second-order product.
        wrt: ``"x"`` or ``"theta"`` (first order only).
    """
    rep = inner_minimize(layer, theta, x)
    _require_solution(rep)
    th = _theta(theta)
    x = jnp.asarray(x, dtype=jnp.float64)
    y = jnp.asarray(rep.minimizer)
    v = jnp.asarray(v, dtype=jnp.float64)
    if order == 1 and wrt == "x":
        _, _, A, C = _cached(layer, "terms2")(th, x, y)
        return np.asarray(-C.T @ jnp.linalg.solve(A, v))
    if order == 1 and wrt == "theta":
        _, _, A, _ = _cached(layer, "terms2")(th, x, y)
        w = jnp.linalg.solve(A, v)
        return layer.potential.param_grad_of(th, y, grad=-w)
    if order == 2 and wrt == "x":
        if v2 is None:
            raise ContractError("second-order product needs v2")
        return np.asarray(_cached(layer, "vjp2")(th, x, y, v, jnp.asarray(v2, dtype=jnp.float64)))
    raise ContractError(f"unsupported vjp request order={order}, wrt={wrt!r}")


def logdet_param_grad(layer, theta, x, frozen=()):
    """Gradient in theta of ``log|det E_y J E_x^T|`` at x."""
    rep = inner_minimize(layer, theta, x)
    _require_solution(rep)
    th = _theta(theta)
    y = jnp.asarray(rep.minimizer)
    D, P, A, C = _cached(layer, "terms3")(th, jnp.asarray(x, dtype=jnp.float64), y)
    ds, _, Ainv = _ell_partials(D, P, A, C)
    w = jnp.linalg.solve(A, ds)
    g = -layer.potential.param_grad_of(th, y, grad=-w, hess=Ainv)
    if frozen:
        g = np.where(layer.potential.layout.mask(frozen), 0.0, g)
    return g


def stack_forward(stack, theta, x):
    """Push x through every layer; log-dets add.

    Returns:
        ``(y, total_logdet, reports)``.
    """
    theta = _theta(theta)
    total, reports = 0.0, []
    y = x
    for i, layer in enumerate(stack.layers):
        y, ld, rep = forward(layer, stack.layer_theta(theta, i), y)
        total += ld
        reports.append(rep)
    return y, total, reports


def discrete_c_concave(manifold, anchors, x):
    """``min_i d(x, y_i)^2 / 2 + alpha_i`` for anchors ``[(y_i, alpha_i), ...]``."""
    if len(anchors) == 0:
        raise ContractError("need at least one anchor")
    pts = jnp.asarray(np.stack([np.asarray(a[0], dtype=float) for a in anchors]))
    vals = jnp.asarray([float(a[1]) for a in anchors])
    d2 = jax.vmap(lambda y: manifold.dist_sq(x, y))(pts)
    return float(jnp.min(0.5 * d2 + vals))


# --------------------------------------------------------------------------
# batched kernels


def _layer_batch_forward(layer, theta, xs, starts):
    sol = jax.vmap(lambda x: _solve(layer, theta, x, starts))(xs)
    ys, vals, ks, gns, conv, eigs = sol
    logdet, absdet = jax.vmap(
        lambda x, y: _logdet_from(*_local_terms(layer, theta, x, y, 2)[2:])
    )(xs, ys)
    conv = conv & (absdet > 1e-300)
    return ys, logdet, conv, sol


def stack_forward_batch(stack, theta, xs):
    """Batched forward pass.

    Returns:
        ``(ys, total_logdet, converged)`` as numpy arrays; ``converged`` is the
        conjunction over layers.
    """
    fn = _cached(stack, "forward_batch")
    ys, ld, conv = fn(_theta(theta), jnp.asarray(xs, dtype=jnp.float64))
    return np.asarray(ys), np.asarray(ld), np.asarray(conv)


def _stack_forward_kernel(stack, theta, xs):
    total = jnp.zeros(xs.shape[0])
    conv = jnp.ones(xs.shape[0], dtype=bool)
    for i, layer in enumerate(stack.layers):
        starts = _restart_starts(layer, None)
        xs, ld, c, _ = _layer_batch_forward(layer, stack.layer_theta(theta, i), xs, starts)
        total = total + ld
        conv = conv & c
    return xs, total, conv


def _stack_inverse_kernel(stack, theta, ys, check_tol):
    """Closed-form inverse ``x = exp_y(grad psi(y))`` layer by layer, re-checked forward."""
    m = stack.manifold
    total = jnp.zeros(ys.shape[0])
    valid = jnp.ones(ys.shape[0], dtype=bool)
    for i in reversed(range(stack.height)):
        layer = stack.layers[i]
        th = stack.layer_theta(theta, i)

        def inv(y):
            g = layer.potential.chart_derivatives(th, y, 1).grad_x
            return m.exp_map(y, m.tangent_basis(y).T @ g)

        xs = jax.vmap(inv)(ys)
        fwd = jax.vmap(lambda x: _solve(layer, th, x))(xs)
        err = jax.vmap(m.dist_sq)(fwd[0], ys)
        ld, absdet = jax.vmap(lambda x, y: _logdet_from(*_local_terms(layer, th, x, y, 2)[2:]))(
            xs, ys
        )
        valid = valid & fwd[4] & (err < check_tol**2) & (absdet > 1e-300)
        total = total + ld
        ys = xs
    return ys, total, valid


def stack_inverse_batch(stack, theta, ys, check_tol=1e-7):
    """Invert the stack at the points ``ys``.

    Returns:
        ``(xs, total_logdet, valid)``; ``total_logdet`` is the forward log-det at
        the preimages and ``valid`` flags points whose forward re-solve lands
        back on the input within ``check_tol``.
    """
    fn = _cached(stack, ("inverse", float(check_tol)))
    xs, ld, ok = fn(_theta(theta), jnp.asarray(ys, dtype=jnp.float64))
    return np.asarray(xs), np.asarray(ld), np.asarray(ok)


def _stack_grad_kernel(stack, theta, xs, energy, energy_grad):
    """Per-sample loss terms and the implicit-path parameter gradient.

    The per-sample loss is ``-sum_l logdet_l + u(y_L)``. The backward pass
    propagates the adjoint ``a`` (covector at each layer output) through the
    implicit relation; the parameter gradient is collected as the theta-gradient
    of a linear functional of ``psi``'s derivatives at every layer output.
    """
    m = stack.manifold
    n = xs.shape[0]
    pts, terms = [xs], []
    conv = jnp.ones(n, dtype=bool)
    for i, layer in enumerate(stack.layers):
        th = stack.layer_theta(theta, i)
        starts = _restart_starts(layer, None)
        sol = jax.vmap(lambda x: _solve(layer, th, x, starts))(pts[-1])
        ys = sol[0]
        t = jax.vmap(lambda x, y: _local_terms(layer, th, x, y, 3))(pts[-1], ys)
        conv = conv & sol[4]
        pts.append(ys)
        terms.append(t)

    logdets = []
    for D, P, A, C in terms:
        ld, absdet = jax.vmap(_logdet_from)(A, C)
        conv = conv & (absdet > 1e-300)
        logdets.append(ld)
    total_logdet = sum(logdets)
    yL = pts[-1]
    u = jax.vmap(energy)(yL)
    a = jax.vmap(lambda y: m.tangent_basis(y) @ energy_grad(y))(yL)

    weights = []
    for i in reversed(range(stack.height)):
        D, P, A, C = terms[i]
        ds, dr, Ainv = jax.vmap(_ell_partials)(D, P, A, C)
        gs = a + ds
        w = jnp.linalg.solve(A, gs[..., None])[..., 0]
        weights.append((i, Ainv, w))
        a = dr - jnp.einsum("nia,ni->na", C, w)

    mask = conv.astype(jnp.float64)
    count = jnp.maximum(jnp.sum(mask), 1.0)
    # zero the weights of dropped samples (and move them to a finite point) so
    # NaNs from failed solves cannot leak into the gradient
    safe = []
    for i, Ainv, w in weights:
        y = jnp.where(conv[:, None], pts[i + 1], xs)
        safe.append(
            (
                i,
                y,
                jnp.where(conv[:, None, None], Ainv, 0.0),
                jnp.where(conv[:, None], w, 0.0),
            )
        )

    def functional(th_all):
        total = 0.0
        for i, y_i, Ainv, w in safe:
            layer = stack.layers[i]
            th = stack.layer_theta(th_all, i)
            vals = jax.vmap(
                lambda y, W, ww: layer.potential.linear_functional(th, y, grad=-ww, hess=W)
            )(y_i, Ainv, w)
            total = total + jnp.sum(mask * vals)
        return total / count

    grad = jax.grad(functional)(theta)
    return {
        "ys": yL,
        "logdet": total_logdet,
        "energy": u,
        "converged": conv,
        "grad": grad,
        "grad_psi_max": jnp.max(
            jnp.stack([jnp.linalg.norm(t[1].grad_x, axis=-1) for t in terms]), axis=0
        ),
    }


def stack_loss_grad_batch(stack, theta, xs, target):
    """Implicit-path pieces for a batch: outputs, log-dets, energies, mean-loss gradient.

    The gradient is that of ``mean_converged(-sum logdet + u(y))``.
    """
    fn = _cached(stack, ("grad", id(target)), target)
    return {k: np.asarray(v) for k, v in fn(_theta(theta), jnp.asarray(xs)).items()}


# --------------------------------------------------------------------------
# unrolled differentiation (cross-check path)


def _gd_unroll(layer, theta, x, steps):
    m = layer.manifold

    def h(y):
        return _h_value(layer, theta, x, y)

    def step(y, _):
        g = m.project(y, jax.grad(h)(y))
        return m.exp_map(y, -layer.solver.gd_step_size * g), None

    y, _ = jax.lax.scan(step, x, None, length=steps)
    return y


def _unrolled_sample_loss(stack, theta, x, energy, steps):
    m = stack.manifold
    total = 0.0
    for i, layer in enumerate(stack.layers):
        th = stack.layer_theta(theta, i)
        fmap = lambda r, x=x, th=th, layer=layer: _gd_unroll(  # noqa: E731
            layer, th, m.chart(x, r), steps
        )
        y = fmap(jnp.zeros(m.dim))
        Jamb = jax.jacfwd(fmap)(jnp.zeros(m.dim))
        J = m.tangent_basis(jax.lax.stop_gradient(y)) @ Jamb
        total = total - jnp.linalg.slogdet(J)[1]
        x = y
    return total + energy(x)


def stack_loss_grad_unrolled(stack, theta, xs, target, steps=50):
    """Gradient of the mean loss by differentiating through ``steps`` plain GD steps."""
    fn = _cached(stack, ("unrolled", id(target), int(steps)), target)
    loss, grad = fn(_theta(theta), jnp.asarray(xs))
    return float(loss), np.asarray(grad)


# --------------------------------------------------------------------------
# jit cache


_CACHES = {}


def _cached(obj, kind, target=None):
    key = (id(obj), kind)
    entry = _CACHES.get(key)
    if entry is not None and entry[0] is obj:
        return entry[1]
    if isinstance(obj, FlowLayer):
        layer = obj
        if kind == "solve":
            fn = jax.jit(lambda th, x, starts: _solve(layer, th, x, starts))
        elif kind == "logdet":
            fn = jax.jit(lambda th, x, y: _logdet_from(*_local_terms(layer, th, x, y, 2)[2:]))
        elif kind == "jacobian":
            fn = jax.jit(lambda th, x, y: _jacobian(layer, th, x, y))
        elif kind == "terms2":
            fn = jax.jit(lambda th, x, y: _local_terms(layer, th, x, y, 2))
        elif kind == "terms3":
            fn = jax.jit(lambda th, x, y: _local_terms(layer, th, x, y, 3))
        elif kind == "vjp2":
            fn = jax.jit(lambda th, x, y, v1, v2: _second_vjp(layer, th, x, y, v1, v2))
        else:
            raise KeyError(kind)
    else:
        stack = obj
        name = kind[0] if isinstance(kind, tuple) else kind
        if name == "forward_batch":
            fn = jax.jit(lambda th, xs: _stack_forward_kernel(stack, th, xs))
        elif name == "inverse":
            tol = kind[1]
            fn = jax.jit(lambda th, ys: _stack_inverse_kernel(stack, th, ys, tol))
        elif name == "grad":
            fn = jax.jit(
                lambda th, xs: _stack_grad_kernel(stack, th, xs, target.energy, target.grad)
            )
        elif name == "unrolled":
            steps = kind[2]

            def loss(th, xs):
                per = jax.vmap(
                    lambda x: _unrolled_sample_loss(stack, th, x, target.energy, steps)
                )(xs)
                return jnp.mean(per)

            fn = jax.jit(jax.value_and_grad(loss))
        else:
            raise KeyError(kind)
    # keep a reference to obj so its id stays unique while cached
    _CACHES[key] = (obj, fn) if target is None else (obj, fn, target)
    return fn
