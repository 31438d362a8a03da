"""Parametric scalar potentials ``psi_theta`` and their derivatives.

A potential is a smooth function on the manifold with a flat parameter vector.
Input derivatives up to third order are taken by nested forward-mode
differentiation of the ambient function and pulled back to the normal-coordinate
chart of the manifold. Parameter gradients of linear functionals of those
derivatives use reverse mode on top of the forward-mode evaluation.

Architectures:

``mlp``
    softplus MLP on periodic features ``(cos, sin)`` of each torus angle, or on
    the ambient coordinates of a sphere point.
``symmetric_mlp``
    softplus MLP on invariant features: ``(cos h, sin h)`` with
    ``h = 2 pi (x_1 - x_2) / L`` on a torus (diagonal shifts), or the coordinate
    along the rotation axis on the sphere.
``energy_scaled``
    ``alpha * u(x)`` for the target energy ``u``.
``energy_quadratic``
    ``alpha * u(x) + grad u(x)^T M grad u(x)`` with symmetric ``M``.

The raw value is divided by ``output_scale`` for every architecture.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConfigError, ContractError, IRCPMError, UnsupportedError
from .manifold import Euclidean, Manifold, Sphere, Torus

ARCHITECTURES = ("mlp", "symmetric_mlp", "energy_scaled", "energy_quadratic")


@dataclass
class NetworkSpec:
    """Declarative description of a potential."""

    architecture: str = "mlp"
    layer_sizes: list = field(default_factory=lambda: [32, 32, 1])
    output_scale: float = 1.0
    feature_map: Optional[str] = None
    axis: int = 2

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(
                f"unsupported architecture {self.architecture!r}", "network.architecture"
            )
        self.layer_sizes = [int(k) for k in self.layer_sizes]
        if self.architecture in ("mlp", "symmetric_mlp"):
            if not self.layer_sizes or self.layer_sizes[-1] != 1:
                raise ConfigError("last layer must have size 1", "network.layer_sizes")
        if not self.output_scale > 0:
            raise ConfigError("must be positive", "network.output_scale")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("network section must be a mapping", "network")
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "network")
        return cls(**d)


@dataclass(frozen=True)
class ParamLayout:
    """Named segments of a flat parameter vector, in storage order."""

    segments: tuple  # of (name, shape)

    @property
    def size(self):
        return sum(int(np.prod(s)) for _, s in self.segments)

    def offsets(self):
        out, k = {}, 0
        for name, shape in self.segments:
            n = int(np.prod(shape))
            out[name] = (k, k + n, shape)
            k += n
        return out

    def unflatten(self, theta):
        return {
            name: theta[a:b].reshape(shape) for name, (a, b, shape) in self.offsets().items()
        }

    def mask(self, names):
        """Boolean mask selecting the given segments."""
        m = np.zeros(self.size, dtype=bool)
        off = self.offsets()
        for n in names:
            if n not in off:
                raise ContractError(f"unknown parameter segment {n!r}")
            a, b, _ = off[n]
            m[a:b] = True
        return m

    def segment_of(self, index):
        for name, (a, b, _) in self.offsets().items():
            if a <= index < b:
                return name
        raise IndexError(index)

    def to_list(self):
        return [[name, list(shape)] for name, shape in self.segments]

    @classmethod
    def from_list(cls, lst):
        return cls(tuple((name, tuple(shape)) for name, shape in lst))


@dataclass
class ParamVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ContractError(
                f"parameter vector has shape {self.values.shape}, layout needs {self.layout.size}"
            )

    def __len__(self):
        return self.values.shape[0]

    def segment(self, name):
        a, b, shape = self.layout.offsets()[name]
        return self.values[a:b].reshape(shape)

    def replace(self, values):
        return ParamVector(np.asarray(values, dtype=np.float64).copy(), self.layout)


class DerivativeBundle(NamedTuple):
    """Value and chart derivatives of a potential at a point."""

    value: jnp.ndarray
    grad_x: Optional[jnp.ndarray] = None
    hess_x: Optional[jnp.ndarray] = None
    third_x: Optional[jnp.ndarray] = None


def _softplus(z):
    return jax.nn.softplus(z)


class PotentialBase:
    """Derivative machinery shared by every potential.

    Subclasses provide ``manifold``, ``layout`` and ``raw(theta, z)``.
    Methods operate on a single point unless suffixed with ``_batch``.
    """

    @property
    def n_params(self):
        return self.layout.size

    def _ambient(self, theta, z, order):
        f = lambda zz: self.raw(theta, zz)  # noqa: E731
        g = jax.jacfwd(f)
        out = [f(z)]
        if order >= 1:
            out.append(g(z))
        if order >= 2:
            out.append(jax.jacfwd(g)(z))
        if order >= 3:
            out.append(jax.jacfwd(jax.jacfwd(g))(z))
        return out

    def chart_derivatives(self, theta, x, order=2, basis=None):
        """Traceable core of :meth:`eval` (no checks)."""
        E = self.manifold.tangent_basis(x) if basis is None else basis
        amb = self._ambient(theta, x, order)
        if order == 0:
            return DerivativeBundle(amb[0])
        amb = amb + [None] * (4 - len(amb))
        gs, hs, ts = self.manifold.pullback(x, E, amb[1], amb[2], amb[3])
        return DerivativeBundle(amb[0], gs, hs, ts)

    def eval(self, theta, x, order=2) -> DerivativeBundle:
        """Value and chart derivatives of ``psi_theta`` at x up to ``order`` (0..3)."""
        if order not in (0, 1, 2, 3):
            raise ContractError(f"order must be 0..3, got {order}")
        theta = _as_theta(theta, self.n_params)
        x = self.manifold._check_point(x)
        return self._jitted("eval", order)(theta, x)

    def eval_batch(self, theta, xs, order=2) -> DerivativeBundle:
        theta = _as_theta(theta, self.n_params)
        return self._jitted("eval_batch", order)(theta, jnp.asarray(xs, dtype=jnp.float64))

    def linear_functional(self, theta, x, value=0.0, grad=None, hess=None, basis=None):
        """``value * psi + grad . grad_psi + <hess, H_psi>`` at x (chart derivatives)."""
        order = 2 if hess is not None else (1 if grad is not None else 0)
        b = self.chart_derivatives(theta, x, order, basis)
        out = value * b.value
        if grad is not None:
            out = out + jnp.dot(grad, b.grad_x)
        if hess is not None:
            out = out + jnp.sum(hess * b.hess_x)
        return out

    def param_grad_of(self, theta, x, value=0.0, grad=None, hess=None):
        """Gradient in theta of a linear functional of the derivatives at one point.

        The functional is ``value * psi(x) + grad . grad psi(x) + <hess, H_psi(x)>``;
        ``w^T H w'`` corresponds to ``hess = outer(w, w')``.
        """
        theta = _as_theta(theta, self.n_params)
        x = self.manifold._check_point(x)
        fn = lambda th: self.linear_functional(th, x, value, grad, hess)  # noqa: E731
        return np.asarray(jax.grad(fn)(theta))

    def _jitted(self, kind, order):
        key = (kind, order)
        if key not in self._jit_cache:
            if kind == "eval":
                fn = jax.jit(lambda th, x: self.chart_derivatives(th, x, order))
            else:
                fn = jax.jit(
                    jax.vmap(lambda th, x: self.chart_derivatives(th, x, order), (None, 0))
                )
            self._jit_cache[key] = fn
        return self._jit_cache[key]




class Potential(PotentialBase):
    """A potential bound to a manifold (and, for energy forms, a target)."""

    def __init__(self, spec: NetworkSpec, manifold: Manifold, target=None):
        self.spec = spec
        self.manifold = manifold
        self.target = target
        arch = spec.architecture
        if arch in ("energy_scaled", "energy_quadratic") and target is None:
            raise ConfigError("energy architectures need a target", "target")
        if target is not None and arch.startswith("energy") and target.manifold != manifold:
            raise ConfigError("target manifold differs from model manifold", "target")
        self.n_features = self._n_features()
        self.layout = self._layout()
        self._jit_cache = {}

    # ------------------------------------------------------------------ layout

    def _n_features(self):
        m, arch = self.manifold, self.spec.architecture
        if arch == "mlp":
            return 2 * m.dim if isinstance(m, Torus) else m.ambient_dim
        if arch == "symmetric_mlp":
            fm = self.spec.feature_map
            if isinstance(m, Torus):
                if fm not in (None, "diagonal_shift"):
                    raise ConfigError(f"feature map {fm!r} not valid on a torus", "network")
                if m.dim < 2 or len(set(m.circumferences)) != 1:
                    raise ConfigError(
                        "diagonal-shift features need at least two equal circumferences",
                        "network.feature_map",
                    )
                return 2 * (m.dim - 1)
            if isinstance(m, Sphere):
                if fm not in (None, "axial"):
                    raise ConfigError(f"feature map {fm!r} not valid on a sphere", "network")
                return 1
            raise UnsupportedError("symmetric_mlp needs a torus or a sphere")
        return 0

    def _layout(self):
        arch = self.spec.architecture
        if arch in ("mlp", "symmetric_mlp"):
            segs, fan_in = [], self.n_features
            for i, k in enumerate(self.spec.layer_sizes):
                segs.append((f"layer{i}.weight", (fan_in, k)))
                segs.append((f"layer{i}.bias", (k,)))
                fan_in = k
            return ParamLayout(tuple(segs))
        if arch == "energy_scaled":
            return ParamLayout((("alpha", ()),))
        n = self.manifold.ambient_dim
        return ParamLayout((("alpha", ()), ("M", (n * (n + 1) // 2,))))

    def init_params(self, seed) -> ParamVector:
        rng = np.random.default_rng(seed)
        arch = self.spec.architecture
        if arch == "energy_scaled":
            return ParamVector(np.ones(1), self.layout)
        if arch == "energy_quadratic":
            v = np.zeros(self.layout.size)
            v[0] = 1.0
            return ParamVector(v, self.layout)
        parts = []
        for name, shape in self.layout.segments:
            fan_in = self.layout.offsets()[name.replace("bias", "weight")][2][0]
            bound = 1.0 / math.sqrt(fan_in)
            parts.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
        return ParamVector(np.concatenate(parts), self.layout)

    # ------------------------------------------------------------------ values

    def features(self, z):
        m, arch = self.manifold, self.spec.architecture
        if isinstance(m, Torus):
            ang = 2 * jnp.pi * z / m.lengths
            if arch == "symmetric_mlp":
                ang = ang[:-1] - ang[1:]
            return jnp.concatenate([jnp.cos(ang), jnp.sin(ang)])
        if arch == "symmetric_mlp":
            return z[self.spec.axis : self.spec.axis + 1]
        return z

    def raw(self, theta, z):
        """Potential value at ambient coordinates ``z`` (extends off the manifold)."""
        arch = self.spec.architecture
        p = self.layout.unflatten(theta)
        if arch in ("mlp", "symmetric_mlp"):
            h = self.features(z)
            n = len(self.spec.layer_sizes)
            for i in range(n):
                h = h @ p[f"layer{i}.weight"] + p[f"layer{i}.bias"]
                if i < n - 1:
                    h = _softplus(h)
            out = h[0]
        elif arch == "energy_scaled":
            out = p["alpha"] * self.target.energy(z)
        else:
            g = self.target.grad(z)
            M = _sym_from_entries(p["M"], self.manifold.ambient_dim)
            out = p["alpha"] * self.target.energy(z) + g @ M @ g
        return out / self.spec.output_scale

def _as_theta(theta, n):
    if isinstance(theta, ParamVector):
        theta = theta.values
    theta = jnp.asarray(theta, dtype=jnp.float64)
    if theta.shape != (n,):
        raise ContractError(f"theta has shape {theta.shape}, expected ({n},)")
    return theta


def _sym_from_entries(entries, n):
    iu = np.triu_indices(n)
    M = jnp.zeros((n, n)).at[iu].set(entries)
    return M + M.T - jnp.diag(jnp.diag(M))


def build_potential(spec: NetworkSpec, manifold: Manifold, seed=0, target=None):
    """Construct a potential and its initial parameters.

    Returns:
        ``(ParamVector, Potential)``.
    """
    if isinstance(spec, dict):
        spec = NetworkSpec.from_dict(spec)
    if isinstance(manifold, Euclidean) and spec.architecture == "symmetric_mlp":
        raise UnsupportedError("symmetric_mlp is not defined on Euclidean space")
    pot = Potential(spec, manifold, target)
    return pot.init_params(seed), pot


class QuadraticPotential(PotentialBase):
    """``psi(y) = 0.5 (y - mu)^T M (y - mu)`` on Euclidean space (closed-form oracle).

    Shares the derivative interface of :class:`Potential`; parameters are the
    entries of ``mu`` followed by the upper triangle of ``M``.
    """

    def __init__(self, manifold: Euclidean):
        if not isinstance(manifold, Euclidean):
            raise ContractError("QuadraticPotential lives on Euclidean space")
        self.manifold = manifold
        n = manifold.dim
        self.layout = ParamLayout((("mu", (n,)), ("M", (n * (n + 1) // 2,))))
        self.spec = NetworkSpec("energy_scaled", [], 1.0)
        self._jit_cache = {}

    def pack(self, mu, M):
        n = self.manifold.dim
        iu = np.triu_indices(n)
        return ParamVector(np.concatenate([np.ravel(mu), np.asarray(M)[iu]]), self.layout)

    def raw(self, theta, z):
        p = self.layout.unflatten(theta)
        M = _sym_from_entries(p["M"], self.manifold.dim)
        d = z - p["mu"]
        return 0.5 * d @ M @ d


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"IRCPMCK\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(IRCPMError, IOError):
    """A checkpoint file is truncated, corrupted or of an unknown version."""


def save_checkpoint(path, theta, spec, manifold, meta=None):
    """Write parameters and their description to a binary checkpoint.

    Layout: 8-byte magic, ``uint32`` format version, ``uint32`` header length,
    a UTF-8 JSON header (network spec, manifold descriptor, parameter layout,
    SHA-256 of the parameter bytes, free-form ``meta``), then the parameters as
    little-endian ``float64``.
    """
    values = np.asarray(getattr(theta, "values", theta), dtype="<f8")
    layout = getattr(theta, "layout", None)
    payload = values.tobytes()
    header = {
        "network": spec.to_dict() if hasattr(spec, "to_dict") else dict(spec),
        "manifold": manifold.descriptor(),
        "layout": layout.to_list() if layout is not None else None,
        "n_params": int(values.size),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        fh.write(payload)


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns:
        ``(values, header)`` with ``values`` a float64 array.

    Raises:
        CheckpointError: bad magic, unknown version, truncation or digest mismatch.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, n_head = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[16 : 16 + n_head].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from None
    payload = blob[16 + n_head :]
    if len(payload) != 8 * header["n_params"]:
        raise CheckpointError(f"{path}: expected {header['n_params']} parameters")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: parameter digest mismatch")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64), header
