"""Geometry of the supported manifolds: flat tori, unit spheres and Euclidean space.

Points are plain arrays. Torus points are angle coordinates in ``[0, L_i)``,
sphere points are unit vectors in the ambient space ``R^{n+1}`` and Euclidean
points are free vectors. Tangent vectors are ambient arrays at their base point.

Intrinsic derivatives are always reported in the orthonormal tangent basis
``E_x`` returned by :meth:`Manifold.tangent_basis`, as derivatives at ``s = 0``
of the normal-coordinate chart ``s -> exp_x(E_x^T s)``. Up to second order this
coincides with the Riemannian gradient and Hessian.

All single-point methods are written with ``jax.numpy`` so they can be traced,
vectorised with ``jax.vmap`` and differentiated. Domain checks are only
performed on concrete (non-traced) inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConfigError, ContractError, CutLocusError, UnsupportedError

# below this geodesic distance the sphere formulas switch to power series
_SERIES_T = 0.05
_SERIES_W = 1e-6


def _concrete(*arrays):
    return not any(isinstance(a, jax.core.Tracer) for a in arrays)


def _poly(t2, coeffs):
    """Evaluate sum_k coeffs[k] * t2**k (Horner)."""
    out = jnp.zeros_like(t2) + coeffs[-1]
    for c in reversed(coeffs[:-1]):
        out = out * t2 + c
    return out


def tcg(t):
    """Return ``t * cot(t)`` with the limit value 1 at ``t = 0``.

    This is the non-radial eigenvalue of the Hessian of half the squared
    geodesic distance on the unit sphere. Defined on ``[0, pi)``.
    """
    t = jnp.asarray(t, dtype=jnp.float64)
    if _concrete(t) and np.any((np.asarray(t) < 0) | (np.asarray(t) >= np.pi)):
        raise ContractError(f"tcg is defined on [0, pi), got {np.asarray(t)}")
    small = t < _SERIES_T
    ts = jnp.where(small, 0.5, t)
    closed = ts * jnp.cos(ts) / jnp.sin(ts)
    series = _poly(t * t, [1.0, -1 / 3, -1 / 45, -2 / 945, -1 / 4725, -2 / 93555])
    return jnp.where(small, series, closed)


def _phi_derivatives(t):
    """Derivatives of ``c -> arccos(c)^2 / 2`` at ``c = cos(t)``, orders 1..3."""
    small = t < _SERIES_T
    ts = jnp.where(small, 0.5, t)
    s, c = jnp.sin(ts), jnp.cos(ts)
    d1 = -ts / s
    d2 = (s - ts * c) / s**3
    d3 = -(ts * s**2 - 3 * c * (s - ts * c)) / s**5
    t2 = t * t
    d1s = _poly(t2, [-1.0, -1 / 6, -7 / 360, -31 / 15120, -127 / 604800, -73 / 3421440])
    d2s = _poly(t2, [1 / 3, 2 / 15, 2 / 63, 4 / 675, 2 / 2079, 2764 / 19348875])
    d3s = _poly(
        t2,
        [-4 / 15, -6 / 35, -13 / 210, -1153 / 69300, -187619 / 50450400, -3325549 / 4540536000],
    )
    return (
        jnp.where(small, d1s, d1),
        jnp.where(small, d2s, d2),
        jnp.where(small, d3s, d3),
    )


class DistanceDerivatives(NamedTuple):
    """Derivatives of ``f(x, y) = d(x, y)^2 / 2`` in the tangent bases at y and x.

    Index conventions: ``cross_yx[i, a] = d2f / dy_i dx_a``,
    ``third_yyx[i, j, a] = d3f / dy_i dy_j dx_a`` and
    ``third_yxx[i, a, b] = d3f / dy_i dx_a dx_b``.
    """

    grad_y: jnp.ndarray
    hess_yy: jnp.ndarray
    cross_yx: jnp.ndarray
    third_yyy: Optional[jnp.ndarray] = None
    third_yyx: Optional[jnp.ndarray] = None
    third_yxx: Optional[jnp.ndarray] = None


class Manifold:
    """Interface shared by the concrete manifolds."""

    kind: str = "abstract"

    @property
    def dim(self) -> int:
        raise NotImplementedError

    @property
    def ambient_dim(self) -> int:
        raise NotImplementedError

    @property
    def injectivity_radius(self) -> float:
        raise NotImplementedError

    @property
    def volume(self) -> float:
        raise UnsupportedError(f"{self.kind} has no finite volume")

    def _check_point(self, x, name="x"):
        x = jnp.asarray(x, dtype=jnp.float64)
        if x.shape[-1:] != (self.ambient_dim,):
            raise ContractError(
                f"{name} has trailing dimension {x.shape[-1:]}, expected ({self.ambient_dim},)"
            )
        return x

    def descriptor(self) -> dict:
        raise NotImplementedError

    def project(self, x, v):
        """Orthogonal projection of an ambient vector onto the tangent space at x."""
        return v

    def normalize(self, x):
        """Map an approximate point back onto the manifold."""
        return x

    def chart(self, x, s):
        """Normal-coordinate chart ``exp_x(E_x^T s)``."""
        return self.exp_map(x, self.tangent_basis(x).T @ s)

    def chart_inverse(self, x, y):
        """Normal coordinates of y around x, ``E_x log_x(y)``."""
        return self.tangent_basis(x) @ self.log_map(x, y)

    def base_log_density(self, x=None):
        """Log density of the uniform (Haar) measure with respect to volume."""
        return -math.log(self.volume)

    def sample_base(self, n, seed):
        raise UnsupportedError(f"{self.kind} has no uniform base measure")

    def pullback(self, x, basis, grad, hess=None, third=None):
        """Chart derivatives at x of an ambient function given its ambient derivatives.

        Flat manifolds use the identity chart, so the derivatives pass through.
        """
        return grad, hess, third

    def dist(self, x, y):
        return jnp.sqrt(self.dist_sq(x, y))

    def dist_sq(self, x, y):
        raise NotImplementedError

    def exp_map(self, x, v):
        raise NotImplementedError

    def log_map(self, x, y):
        raise NotImplementedError

    def tangent_basis(self, x):
        raise NotImplementedError

    def dist_derivatives(self, x, y, order=2) -> DistanceDerivatives:
        raise NotImplementedError


class _Flat(Manifold):
    """Shared code for the flat manifolds (Euclidean space and tori)."""

    def _displacement(self, x, y):
        return y - x

    @property
    def ambient_dim(self):
        return self.dim

    def tangent_basis(self, x):
        return jnp.eye(self.dim)

    def dist_sq(self, x, y):
        x, y = self._check_point(x), self._check_point(y, "y")
        d = self._displacement(x, y)
        return jnp.sum(d * d, axis=-1)

    def dist_derivatives(self, x, y, order=2):
        if order not in (1, 2, 3):
            raise ContractError(f"order must be 1, 2 or 3, got {order}")
        x, y = self._check_point(x), self._check_point(y, "y")
        n = self.dim
        eye = jnp.eye(n)
        zeros3 = jnp.zeros((n, n, n)) if order == 3 else None
        return DistanceDerivatives(
            grad_y=self._displacement(x, y),
            hess_yy=eye,
            cross_yx=-eye,
            third_yyy=zeros3,
            third_yyx=zeros3,
            third_yxx=zeros3,
        )


@dataclass(frozen=True)
class Euclidean(_Flat):
    """Flat space ``R^d``; used as the closed-form test manifold."""

    n: int = 2
    kind = "euclidean"

    @property
    def dim(self):
        return self.n

    @property
    def injectivity_radius(self):
        return math.inf

    def descriptor(self):
        return {"kind": "euclidean", "dimension": self.n}

    def exp_map(self, x, v):
        x, v = self._check_point(x), self._check_point(v, "v")
        return x + v

    def log_map(self, x, y):
        x, y = self._check_point(x), self._check_point(y, "y")
        return y - x


@dataclass(frozen=True)
class Torus(_Flat):
    """Flat torus ``R^d / (L_1 Z x ... x L_d Z)`` in angle coordinates."""

    circumferences: tuple = (2 * math.pi, 2 * math.pi)
    kind = "torus"

    def __post_init__(self):
        circ = tuple(float(c) for c in self.circumferences)
        if not circ or any(c <= 0 for c in circ):
            raise ConfigError("circumferences must be positive", "manifold.circumferences")
        object.__setattr__(self, "circumferences", circ)

    @property
    def dim(self):
        return len(self.circumferences)

    @property
    def lengths(self):
        return jnp.asarray(self.circumferences)

    @property
    def injectivity_radius(self):
        return min(self.circumferences) / 2

    @property
    def volume(self):
        return float(np.prod(self.circumferences))

    def descriptor(self):
        return {
            "kind": "torus",
            "dimension": self.dim,
            "circumferences": list(self.circumferences),
        }

    def normalize(self, x):
        L = self.lengths
        r = jnp.mod(x, L)
        return jnp.where(r >= L, r - L, r)

    def _displacement(self, x, y):
        L = self.lengths
        return jnp.mod(y - x + L / 2, L) - L / 2

    def exp_map(self, x, v):
        x, v = self._check_point(x), self._check_point(v, "v")
        return self.normalize(x + v)

    def log_map(self, x, y):
        x, y = self._check_point(x), self._check_point(y, "y")
        d = self._displacement(x, y)
        if _concrete(d):
            half = np.asarray(self.circumferences) / 2
            if np.any(np.isclose(np.abs(np.asarray(d)), half, rtol=0, atol=1e-12 * half)):
                raise CutLocusError("points are antipodal along a torus axis")
        return d

    def shift(self, x, c):
        """Translate by the vector ``c`` (an isometry)."""
        return self.normalize(x + c)

    def sample_base(self, n, seed):
        rng = np.random.default_rng(seed)
        return rng.uniform(0.0, 1.0, size=(n, self.dim)) * np.asarray(self.circumferences)


@dataclass(frozen=True)
class Sphere(Manifold):
    """Unit sphere ``S^n`` embedded in ``R^{n+1}``."""

    n: int = 2
    kind = "sphere"

    @property
    def dim(self):
        return self.n

    @property
    def ambient_dim(self):
        return self.n + 1

    @property
    def injectivity_radius(self):
        return math.pi

    @property
    def volume(self):
        k = (self.n + 1) / 2
        return 2 * math.pi**k / math.gamma(k)

    def descriptor(self):
        return {"kind": "sphere", "dimension": self.n}

    def normalize(self, x):
        return x / jnp.linalg.norm(x, axis=-1, keepdims=True)

    def project(self, x, v):
        return v - jnp.dot(x, v) * x

    def _angle(self, x, y):
        q = jnp.linalg.norm(x - y)
        return 2 * jnp.arcsin(jnp.minimum(q / 2, 1.0))

    def dist_sq(self, x, y):
        x, y = self._check_point(x), self._check_point(y, "y")
        diff = x - y
        w = 0.5 * jnp.sum(diff * diff, axis=-1)  # 1 - <x, y> for unit vectors
        small = w < _SERIES_W
        ws = jnp.where(small, 1.0, w)
        closed = (2 * jnp.arcsin(jnp.minimum(jnp.sqrt(ws / 2), 1.0))) ** 2
        series = w * _poly(w, [2.0, 1 / 3, 4 / 45, 1 / 35])
        return jnp.where(small, series, closed)

    def exp_map(self, x, v):
        x, v = self._check_point(x), self._check_point(v, "v")
        nv2 = jnp.dot(v, v)
        small = nv2 < 1e-16
        nv = jnp.sqrt(jnp.where(small, 1.0, nv2))
        cos = jnp.where(small, 1 - nv2 / 2 + nv2**2 / 24, jnp.cos(nv))
        sinc = jnp.where(small, 1 - nv2 / 6 + nv2**2 / 120, jnp.sin(nv) / nv)
        return self.normalize(cos * x + sinc * v)

    def log_map(self, x, y):
        x, y = self._check_point(x), self._check_point(y, "y")
        c = jnp.dot(x, y)
        perp = y - c * x
        s2 = jnp.dot(perp, perp)
        t = self._angle(x, y)
        if _concrete(t) and float(t) > math.pi - 1e-8:
            raise CutLocusError("antipodal points have no unique logarithm")
        small = s2 < 1e-16
        s = jnp.sqrt(jnp.where(small, 1.0, s2))
        factor = jnp.where(small, 1 + s2 / 6 + 3 * s2**2 / 40, t / s)
        return factor * perp

    def tangent_basis(self, x):
        x = self._check_point(x)
        order = jnp.argsort(jnp.abs(x), stable=True)
        eye = jnp.eye(self.ambient_dim)
        rows = []
        for k in range(self.n):
            v = eye[order[k]]
            v = v - jnp.dot(x, v) * x
            for r in rows:
                v = v - jnp.dot(r, v) * r
            rows.append(v / jnp.linalg.norm(v))
        return jnp.stack(rows)

    def sample_base(self, n, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, self.ambient_dim))
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    def pullback(self, x, basis, grad, hess=None, third=None):
        E = basis
        gs = E @ grad
        if hess is None:
            return gs, None, None
        eye = jnp.eye(self.n)
        gp = jnp.dot(grad, x)
        hs = E @ hess @ E.T - gp * eye
        if third is None:
            return gs, hs, None
        Tee = jnp.einsum("abc,ia,jb,kc->ijk", third, E, E, E)
        pHe = E @ (hess @ x)
        ge = gs
        corr = (
            jnp.einsum("ij,k->ijk", eye, pHe)
            + jnp.einsum("ik,j->ijk", eye, pHe)
            + jnp.einsum("jk,i->ijk", eye, pHe)
        )
        corr_g = (
            jnp.einsum("ij,k->ijk", eye, ge)
            + jnp.einsum("ik,j->ijk", eye, ge)
            + jnp.einsum("jk,i->ijk", eye, ge)
        )
        return gs, hs, Tee - corr - corr_g / 3

    def dist_derivatives(self, x, y, order=2):
        if order not in (1, 2, 3):
            raise ContractError(f"order must be 1, 2 or 3, got {order}")
        x, y = self._check_point(x), self._check_point(y, "y")
        t = self._angle(x, y)
        if _concrete(t) and float(t) > math.pi - 1e-6:
            raise CutLocusError("distance derivatives are singular at the cut locus")
        Ey, Ex = self.tangent_basis(y), self.tangent_basis(x)
        d1, d2, d3 = _phi_derivatives(t)
        c = jnp.cos(t)
        cs = Ey @ x  # dc/ds
        cr = Ex @ y  # dc/dr
        csr = Ey @ Ex.T
        eye = jnp.eye(self.n)
        grad = d1 * cs
        if order == 1:
            return DistanceDerivatives(grad, None, None)
        hess = d2 * jnp.outer(cs, cs) - d1 * c * eye
        cross = d2 * jnp.outer(cs, cr) + d1 * csr
        if order == 2:
            return DistanceDerivatives(grad, hess, cross)

        def sym3(a):
            return (
                jnp.einsum("ij,k->ijk", eye, a)
                + jnp.einsum("ik,j->ijk", eye, a)
                + jnp.einsum("jk,i->ijk", eye, a)
            )

        yyy = (
            d3 * jnp.einsum("i,j,k->ijk", cs, cs, cs)
            - d2 * c * sym3(cs)
            - d1 / 3 * sym3(cs)
        )
        yyx = (
            d3 * jnp.einsum("i,j,a->ija", cs, cs, cr)
            + d2
            * (
                -c * jnp.einsum("ij,a->ija", eye, cr)
                + jnp.einsum("ia,j->ija", csr, cs)
                + jnp.einsum("ja,i->ija", csr, cs)
            )
            - d1 * jnp.einsum("ij,a->ija", eye, cr)
        )
        yxx = (
            d3 * jnp.einsum("i,a,b->iab", cs, cr, cr)
            + d2
            * (
                jnp.einsum("ia,b->iab", csr, cr)
                + jnp.einsum("ib,a->iab", csr, cr)
                - c * jnp.einsum("ab,i->iab", eye, cs)
            )
            - d1 * jnp.einsum("ab,i->iab", eye, cs)
        )
        return DistanceDerivatives(grad, hess, cross, yyy, yyx, yxx)


def from_descriptor(desc: dict) -> Manifold:
    """Build a manifold from a config descriptor ``{kind, dimension, circumferences}``."""
    if not isinstance(desc, dict):
        raise ConfigError("manifold descriptor must be a mapping", "manifold")
    kind = desc.get("kind")
    dim = desc.get("dimension")
    if kind == "torus":
        circ = desc.get("circumferences")
        if circ is None:
            if dim is None:
                raise ConfigError("torus needs dimension or circumferences", "manifold")
            circ = [2 * math.pi] * int(dim)
        if dim is not None and int(dim) != len(circ):
            raise ConfigError("dimension does not match circumferences", "manifold.dimension")
        return Torus(tuple(circ))
    if kind == "sphere":
        return Sphere(int(dim if dim is not None else 2))
    if kind == "euclidean":
        if dim is None:
            raise ConfigError("missing field", "manifold.dimension")
        return Euclidean(int(dim))
    raise ConfigError(f"unknown manifold kind {kind!r}", "manifold.kind")
