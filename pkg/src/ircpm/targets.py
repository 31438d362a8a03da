"""Target energies ``u(x)`` (unnormalized densities ``p ~ exp(-u)``) and their normalizers.

Every target carries its energy as a ``jax.numpy`` function of a single point,
a hand-written gradient (torus: chart gradient; sphere: Riemannian gradient as
an ambient tangent vector), and an optional symmetry group.

Torus circumferences are chosen so that each target is exactly periodic:
``u1`` lives on the torus of side 2 and ``u3`` on the torus of side 6, where it
has 8 modes. ``u2_substitute`` is a three-component von Mises mixture standing
in for an externally defined benchmark.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp
from scipy.special import i0e

from .errors import ConfigError, UnsupportedError
from .manifold import Manifold, Sphere, Torus, from_descriptor


@dataclass(frozen=True)
class DiagonalShift:
    """The group ``(x_1, ..., x_d) -> (x_1 + c, ..., x_d + c)`` acting on a torus."""

    def act(self, manifold, x, c):
        return manifold.shift(x, c * jnp.ones(manifold.dim))


@dataclass(frozen=True)
class AxialRotation:
    """Rotations of ``S^2`` about a coordinate axis."""

    axis: int = 2

    def matrix(self, angle):
        c, s = jnp.cos(angle), jnp.sin(angle)
        i, j = [k for k in range(3) if k != self.axis]
        R = jnp.eye(3)
        R = R.at[i, i].set(c).at[i, j].set(-s).at[j, i].set(s).at[j, j].set(c)
        return R

    def act(self, manifold, x, angle):
        return self.matrix(angle) @ x


@dataclass(frozen=True, eq=False)
class TargetEnergy:
    """An unnormalized target density ``exp(-u)`` on a manifold."""

    name: str
    manifold: Manifold
    energy: Callable
    grad: Callable
    symmetry: Optional[object] = None
    spec: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.energy(jnp.asarray(x, dtype=jnp.float64))

    def energy_batch(self, xs):
        return _batched(self.energy)(jnp.asarray(xs, dtype=jnp.float64))

    def log_Z(self, resolution=64):
        return log_Z_quadrature(self, resolution)


_BATCH_CACHE = {}


def _batched(fn):
    if fn not in _BATCH_CACHE:
        _BATCH_CACHE[fn] = jax.jit(jax.vmap(fn))
    return _BATCH_CACHE[fn]


def u1(x):
    return jnp.sin(jnp.pi * (x[0] - x[1]))


def _u1_grad(x):
    g = jnp.pi * jnp.cos(jnp.pi * (x[0] - x[1]))
    return jnp.stack([g, -g])


def u3(x):
    k = 2 * jnp.pi / 3
    return 1.4 * jnp.sin(k * x[0]) * jnp.sin(k * x[1])


def _u3_grad(x):
    k = 2 * jnp.pi / 3
    return 1.4 * k * jnp.stack(
        [jnp.cos(k * x[0]) * jnp.sin(k * x[1]), jnp.sin(k * x[0]) * jnp.cos(k * x[1])]
    )


U2_MEANS = ((0.0, 0.0), (math.pi, math.pi), (4.8, 1.0))
U2_KAPPA = 2.0


def _vonmises_mixture(means, kappa, weights=None):
    means = jnp.asarray(means, dtype=jnp.float64)
    k = means.shape[0]
    logw = jnp.log(jnp.ones(k) / k if weights is None else jnp.asarray(weights) / np.sum(weights))
    d = means.shape[1]
    # log of the von Mises normalizer 2 pi I0(kappa), via the scaled Bessel function
    lognorm = d * (math.log(2 * math.pi * i0e(kappa)) + kappa)

    def energy(x):
        logc = kappa * jnp.sum(jnp.cos(x - means), axis=1) - lognorm + logw
        return -logsumexp(logc)

    def grad(x):
        logc = kappa * jnp.sum(jnp.cos(x - means), axis=1) + logw
        r = jax.nn.softmax(logc)
        return kappa * jnp.sum(r[:, None] * jnp.sin(x - means), axis=0)

    return energy, grad


def lat_lon_to_xyz(lat, lon):
    """Map latitude/longitude (radians) to a unit vector in ``R^3``."""
    lat, lon = np.asarray(lat, dtype=float), np.asarray(lon, dtype=float)
    return np.stack(
        [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1
    )


VMF4_MEANS_LATLON = ((0.7, 1.5), (-1.0, 1.0), (0.6, 0.5), (-0.7, 4.0))
VMF4_KAPPA = 10.0


def _vmf_mixture(means_xyz, kappa, weights=None):
    M = jnp.asarray(means_xyz, dtype=jnp.float64)
    logw = 0.0 if weights is None else jnp.log(jnp.asarray(weights, dtype=jnp.float64))

    def energy(x):
        return -logsumexp(kappa * (M @ x) + logw)

    def grad(x):
        r = jax.nn.softmax(kappa * (M @ x) + logw)
        g = -kappa * (r @ M)
        return g - jnp.dot(g, x) * x

    return energy, grad


def _zero(x):
    return jnp.zeros(())


def _fourier(terms):
    """``u(x) = sum_t coef_t * prod_i trig_{t,i}(freq_{t,i} * x_i)``."""
    coefs = [float(t["coef"]) for t in terms]
    facs = [[(f[0], float(f[1])) for f in t["factors"]] for t in terms]
    for fs in facs:
        for kind, _ in fs:
            if kind not in ("sin", "cos"):
                raise ConfigError(f"unknown factor {kind!r}", "target.terms.factors")
    trig = {"sin": (jnp.sin, jnp.cos), "cos": (jnp.cos, lambda z: -jnp.sin(z))}

    def energy(x):
        total = 0.0
        for c, fs in zip(coefs, facs):
            prod = c
            for i, (kind, w) in enumerate(fs):
                prod = prod * trig[kind][0](w * x[i])
            total = total + prod
        return jnp.asarray(total, dtype=jnp.float64)

    def grad(x):
        g = jnp.zeros(x.shape[0])
        for c, fs in zip(coefs, facs):
            vals = [trig[kind][0](w * x[i]) for i, (kind, w) in enumerate(fs)]
            for i, (kind, w) in enumerate(fs):
                other = c
                for j, v in enumerate(vals):
                    if j != i:
                        other = other * v
                g = g.at[i].add(other * w * trig[kind][1](w * x[i]))
        return g

    return energy, grad


_TARGET_KINDS = {
    "u1": Torus,
    "u3": Torus,
    "u2_substitute": Torus,
    "fourier": Torus,
    "sphere_vmf4": Sphere,
    "vmf_mixture": Sphere,
}


def make_target(name, manifold=None, **options) -> TargetEnergy:
    """Build a target by name.

    Known names: ``u1``, ``u2_substitute``, ``u3``, ``sphere_vmf4``, ``uniform``
    and the declarative ``fourier`` (torus) and ``vmf_mixture`` (sphere) forms.
    """
    kind = _TARGET_KINDS.get(name)
    if manifold is not None and kind is not None and not (
        isinstance(manifold, kind) and manifold.dim == 2
    ):
        raise ConfigError(
            f"{name} is defined on a 2D {kind.__name__.lower()}, not {manifold!r}", "target"
        )
    if name == "u1":
        m = manifold or Torus((2.0, 2.0))
        return TargetEnergy("u1", m, u1, _u1_grad, DiagonalShift(), {"name": "u1"})
    if name == "u3":
        m = manifold or Torus((6.0, 6.0))
        return TargetEnergy("u3", m, u3, _u3_grad, None, {"name": "u3"})
    if name == "u2_substitute":
        m = manifold or Torus((2 * math.pi, 2 * math.pi))
        e, g = _vonmises_mixture(U2_MEANS, U2_KAPPA)
        return TargetEnergy("u2_substitute", m, e, g, None, {"name": "u2_substitute"})
    if name == "sphere_vmf4":
        m = manifold or Sphere(2)
        lat, lon = np.asarray(VMF4_MEANS_LATLON).T
        e, g = _vmf_mixture(lat_lon_to_xyz(lat, lon), VMF4_KAPPA)
        return TargetEnergy("sphere_vmf4", m, e, g, None, {"name": "sphere_vmf4"})
    if name == "uniform":
        if manifold is None:
            raise ConfigError("uniform target needs a manifold", "target.manifold")
        return TargetEnergy(
            "uniform",
            manifold,
            _zero,
            lambda x: jnp.zeros(x.shape[0]),
            None,
            {"name": "uniform"},
        )
    if name == "fourier":
        if "terms" not in options:
            raise ConfigError("missing field", "target.terms")
        m = manifold or Torus()
        e, g = _fourier(options["terms"])
        return TargetEnergy("fourier", m, e, g, None, {"name": "fourier", **options})
    if name == "vmf_mixture":
        if "means" not in options or "kappa" not in options:
            raise ConfigError("vmf_mixture needs means and kappa", "target")
        m = manifold or Sphere(2)
        means = np.asarray(options["means"], dtype=float)
        if means.shape[1] == 2:
            means = lat_lon_to_xyz(means[:, 0], means[:, 1])
        e, g = _vmf_mixture(means, float(options["kappa"]), options.get("weights"))
        return TargetEnergy("vmf_mixture", m, e, g, None, {"name": "vmf_mixture", **options})
    raise ConfigError(f"unknown target {name!r}", "target.name")


def target_from_config(cfg: dict, manifold=None) -> TargetEnergy:
    """Build a target from its config section (``{"name": ..., ...}``)."""
    if not isinstance(cfg, dict) or "name" not in cfg:
        raise ConfigError("missing field", "target.name")
    opts = {k: v for k, v in cfg.items() if k not in ("name", "manifold")}
    if manifold is None and "manifold" in cfg:
        manifold = from_descriptor(cfg["manifold"])
    return make_target(cfg["name"], manifold, **opts)


def _torus_logZ(target, n):
    L = np.asarray(target.manifold.circumferences)
    g1 = np.arange(n) * L[0] / n
    g2 = np.arange(n) * L[1] / n
    X = np.stack(np.meshgrid(g1, g2, indexing="ij"), -1).reshape(-1, 2)
    u = np.asarray(target.energy_batch(X))
    return float(logsumexp(-u)) + math.log(L[0] * L[1] / n**2)


def sphere_grid(n):
    """Latitude/longitude product rule on ``S^2`` exact for smooth integrands.

    Gauss-Legendre nodes in ``z = sin(lat)`` (which absorbs the area element)
    times ``2n`` equispaced longitudes. Returns ``(lat, lon, xyz, weights)``
    with weights summing to ``4 pi``.
    """
    z, wz = np.polynomial.legendre.leggauss(n)
    lon = (np.arange(2 * n) + 0.5) * np.pi / n
    lat = np.arcsin(z)
    LAT, LON = np.meshgrid(lat, lon, indexing="ij")
    W = np.outer(wz, np.full(2 * n, np.pi / n))
    return LAT.ravel(), LON.ravel(), lat_lon_to_xyz(LAT.ravel(), LON.ravel()), W.ravel()


def _sphere_logZ(target, n):
    _, _, xyz, w = sphere_grid(n)
    u = np.asarray(target.energy_batch(xyz))
    return float(logsumexp(-u, b=w))


def log_Z_quadrature(target, resolution=64, tol=1e-6, max_resolution=4096):
    """Log normalizer ``log int exp(-u) dvol`` by resolution doubling.

    Doubles the grid until successive estimates differ by less than ``tol``.
    """
    m = target.manifold
    if m.dim != 2 or not isinstance(m, (Torus, Sphere)):
        raise UnsupportedError("quadrature is implemented for 2D tori and S^2 only")
    rule = _torus_logZ if isinstance(m, Torus) else _sphere_logZ
    n = int(resolution)
    prev = rule(target, n)
    while n < max_resolution:
        n *= 2
        cur = rule(target, n)
        if abs(cur - prev) < tol:
            return cur
        prev = cur
    return prev
