"""Model quality metrics, the gradient-descent safety bound check and grid exports."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .ccave import stack_forward_batch, stack_inverse_batch
from .errors import ContractError
from .manifold import Sphere, Torus, tcg
from .targets import log_Z_quadrature, sphere_grid

_LOGZ_CACHE = {}


def cached_log_Z(target):
    if id(target) not in _LOGZ_CACHE:
        _LOGZ_CACHE[id(target)] = (target, log_Z_quadrature(target))
    return _LOGZ_CACHE[id(target)][1]


def ess_from_log_weights(log_w):
    """Effective sample size ``(sum w)^2 / (N sum w^2)`` in percent."""
    log_w = np.asarray(log_w, dtype=float)
    if log_w.size == 0:
        return 0.0
    return 100.0 * math.exp(2 * logsumexp(log_w) - logsumexp(2 * log_w)) / log_w.size


@dataclass
class EvalReport:
    ess: float
    ess_raw: float
    kl: float
    kl_stderr: float
    mean_logdet: float
    n_samples: int
    n_nonconverged: int

    def to_dict(self):
        return asdict(self)


def sample_model(stack, theta, n, seed, batch=8192):
    """Draw ``n`` model samples with their log density.

    Returns:
        ``(ys, log_q, converged)``.
    """
    m = stack.manifold
    xs = m.sample_base(n, seed)
    ys, ld, conv = [], [], []
    for k in range(0, n, batch):
        y, l, c = stack_forward_batch(stack, theta, xs[k : k + batch])
        ys.append(y), ld.append(l), conv.append(c)
    ys, ld, conv = np.concatenate(ys), np.concatenate(ld), np.concatenate(conv)
    return ys, m.base_log_density() - ld, conv


def evaluate(stack, theta, target, n_samples=20000, seed=0, log_Z=None):
    """ESS (converged-only and raw) and Monte-Carlo KL of the model against ``target``."""
    if n_samples < 1:
        raise ContractError("n_samples must be positive")
    if log_Z is None:
        log_Z = cached_log_Z(target)
    ys, log_q, conv = sample_model(stack, theta, n_samples, seed)
    u = np.asarray(target.energy_batch(ys))
    log_w = -u - log_q
    finite = np.isfinite(log_w)
    good = conv & finite
    kl_terms = (log_q + u)[good] + log_Z
    n = int(good.sum())
    return EvalReport(
        ess=ess_from_log_weights(log_w[good]),
        ess_raw=ess_from_log_weights(log_w[finite]),
        kl=float(np.mean(kl_terms)) if n else float("nan"),
        kl_stderr=float(np.std(kl_terms, ddof=1) / math.sqrt(n)) if n > 1 else float("nan"),
        mean_logdet=float(np.mean(stack.manifold.base_log_density() - log_q[good]))
        if n
        else float("nan"),
        n_samples=int(n_samples),
        n_nonconverged=int(n_samples - n),
    )


def ess(stack, theta, target, n_samples=20000, seed=0):
    """Effective sample size in percent over converged samples."""
    return evaluate(stack, theta, target, n_samples, seed).ess


def kl_report(stack, theta, target, n_samples=20000, seed=0):
    """Monte-Carlo ``KL(q || p)`` with quadrature ``log Z``.

    Returns:
        ``(kl, standard_error)``.
    """
    r = evaluate(stack, theta, target, n_samples, seed)
    return r.kl, r.kl_stderr


@dataclass
class BoundReport:
    n_probe: int
    max_grad_norm: float
    max_hess_opnorm: float
    lam: float
    eta_required: float
    passes: bool

    def to_dict(self):
        return asdict(self)


def required_eta(manifold, lam, margin=0.0):
    """Largest admissible Hessian bound for a ball of radius ``lam``."""
    if isinstance(manifold, Sphere):
        if not 0 <= lam < math.pi:
            return 0.0
        return float(tcg(lam))
    # flat: the distance Hessian is exactly the identity
    return 1.0 - margin


def bound_verdict(manifold, max_grad, max_hess, lam=None, margin=0.0):
    """Apply the gradient/Hessian criterion to measured maxima.

    With ``lam=None`` the tightest admissible radius ``2 * max_grad`` is used.
    The gradient condition is ``max_grad <= lam / 2`` (a sampled maximum only
    bounds the supremum from below) and the Hessian condition is strict.
    """
    lam = 2 * max_grad if lam is None else float(lam)
    eta = required_eta(manifold, lam, margin)
    passes = bool(max_grad <= lam / 2 and max_hess < eta)
    return lam, eta, passes


def potential_extrema(potential, theta, manifold, n_probe, seed, chunk=8192):
    """Max gradient norm and Hessian operator norm of ``psi`` over uniform probes."""
    xs = manifold.sample_base(n_probe, seed)
    g_max = h_max = 0.0
    for k in range(0, n_probe, chunk):
        b = potential.eval_batch(theta, xs[k : k + chunk], 2)
        g = np.linalg.norm(np.asarray(b.grad_x), axis=-1)
        h = np.abs(np.linalg.eigvalsh(np.asarray(b.hess_x))).max(axis=-1)
        g_max, h_max = max(g_max, float(g.max())), max(h_max, float(h.max()))
    return g_max, h_max


def bound_check(potential, theta, manifold, lam=None, n_probe=10**6, seed=0, margin=0.0):
    """Check that gradient descent provably solves the inner problem everywhere."""
    if n_probe < 1:
        raise ContractError("n_probe must be at least 1")
    g, h = potential_extrema(potential, theta, manifold, n_probe, seed)
    lam, eta, ok = bound_verdict(manifold, g, h, lam, margin)
    return BoundReport(n_probe, g, h, lam, eta, ok)


@dataclass
class DensityGrid:
    """Model log density on a grid.

    ``coords`` are chart coordinates (torus angles, or latitude/longitude on the
    sphere), ``points`` the manifold points, ``weights`` quadrature weights and
    ``valid`` marks cells whose preimage was found.
    """

    coords: np.ndarray
    points: np.ndarray
    log_q: np.ndarray
    valid: np.ndarray
    weights: np.ndarray
    shape: tuple
    coord_names: tuple

    def integral(self):
        ok = self.valid
        return float(np.sum(self.weights[ok] * np.exp(self.log_q[ok])))


def grid_points(manifold, resolution):
    n = int(resolution)
    if n < 1:
        raise ContractError("resolution must be positive")
    if isinstance(manifold, Torus) and manifold.dim == 2:
        L = np.asarray(manifold.circumferences)
        a = (np.arange(n) + 0.5) * L[0] / n
        b = (np.arange(n) + 0.5) * L[1] / n
        A, B = np.meshgrid(a, b, indexing="ij")
        pts = np.stack([A.ravel(), B.ravel()], -1)
        w = np.full(n * n, L[0] * L[1] / n**2)
        return pts, pts, w, (n, n), ("x1", "x2")
    if isinstance(manifold, Torus) and manifold.dim == 1:
        L = manifold.circumferences[0]
        pts = ((np.arange(n) + 0.5) * L / n)[:, None]
        return pts, pts, np.full(n, L / n), (n,), ("x1",)
    if isinstance(manifold, Sphere) and manifold.dim == 2:
        lat, lon, xyz, w = sphere_grid(n)
        return np.stack([lat, lon], -1), xyz, w, (n, 2 * n), ("lat", "lon")
    raise ContractError(f"no grid for {manifold!r}")


def density_grid(stack, theta, resolution=256, batch=8192):
    """Evaluate ``log q`` on a grid by inverting the flow at each grid point."""
    coords, pts, w, shape, names = grid_points(stack.manifold, resolution)
    log_q, valid = [], []
    for k in range(0, len(pts), batch):
        _, ld, ok = stack_inverse_batch(stack, theta, pts[k : k + batch])
        log_q.append(stack.manifold.base_log_density() - ld)
        valid.append(ok)
    log_q, valid = np.concatenate(log_q), np.concatenate(valid)
    log_q = np.where(valid, log_q, np.nan)
    return DensityGrid(coords, pts, log_q, valid, w, shape, names)


def write_grid_csv(grid, path):
    """Comma-separated export: coordinate columns then ``log_q`` (``nan`` when flagged)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([*grid.coord_names, "log_q"])
        for c, lq in zip(grid.coords, grid.log_q):
            wr.writerow([*(repr(float(v)) for v in c), repr(float(lq))])


def write_samples_csv(points, log_q, path, coord_names=None):
    points = np.asarray(points)
    names = coord_names or [f"x{i + 1}" for i in range(points.shape[1])]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([*names, "log_q"])
        for p, lq in zip(points, log_q):
            wr.writerow([*(repr(float(v)) for v in p), repr(float(lq))])


def write_ppm(grid, path):
    """Binary portable-pixmap heatmap of ``exp(log_q)`` (2D grids only)."""
    if len(grid.shape) != 2:
        raise ContractError("heatmaps need a 2D grid")
    q = np.exp(np.nan_to_num(grid.log_q, nan=-np.inf)).reshape(grid.shape)
    top = q.max() if q.max() > 0 else 1.0

    def layout(a):
        # torus: x1 across, x2 up; sphere: longitude across, north up
        return a[::-1] if grid.coord_names[0] == "lat" else a.T[::-1]

    img = layout(q / top)
    rgb = np.stack(_colormap(img), -1)
    rgb[~np.isfinite(layout(grid.log_q.reshape(grid.shape)))] = (255, 0, 255)
    with open(path, "wb") as fh:
        fh.write(f"P6 {img.shape[1]} {img.shape[0]} 255\n".encode())
        fh.write(rgb.astype(np.uint8).tobytes())


def _colormap(v):
    v = np.clip(v, 0, 1)
    r = np.clip(255 * (1.5 * v), 0, 255)
    g = np.clip(255 * (1.5 * v - 0.5), 0, 255)
    b = np.clip(255 * (3 * v - 2) + 60 * (1 - v), 0, 255)
    return r, g, b
