import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from ircpm.errors import ConfigError, UnsupportedError
from ircpm.manifold import Sphere, Torus
from ircpm.targets import (
    U2_MEANS,
    VMF4_MEANS_LATLON,
    lat_lon_to_xyz,
    log_Z_quadrature,
    make_target,
    sphere_grid,
    target_from_config,
)


def grid_minima(target, n):
    L = np.asarray(target.manifold.circumferences)
    a = np.arange(n) * L[0] / n
    b = np.arange(n) * L[1] / n
    X = np.stack(np.meshgrid(a, b, indexing="ij"), -1).reshape(-1, 2)
    U = np.asarray(target.energy_batch(X)).reshape(n, n)
    is_min = np.ones_like(U, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                is_min &= U < np.roll(np.roll(U, di, 0), dj, 1)
    return [(a[i], b[j]) for i, j in zip(*np.nonzero(is_min))]


class TestU1:
    def test_values(self):
        u = make_target("u1")
        assert float(u(np.array([0.5, 0.0]))) == pytest.approx(1.0)
        assert abs(float(u(np.array([0.3, 0.3])))) < 1e-15

    def test_symmetry(self):
        u = make_target("u1")
        rng = np.random.default_rng(0)
        for _ in range(100):
            x, c = rng.uniform(0, 2, 2), rng.uniform(-5, 5)
            shifted = u.symmetry.act(u.manifold, jnp.asarray(x), c)
            assert abs(float(u(shifted)) - float(u(x))) <= 1e-12


class TestU3:
    def test_values(self):
        u = make_target("u3")
        assert float(u(np.zeros(2))) == 0.0
        assert float(u(np.array([0.75, 2.25]))) == pytest.approx(-1.4)

    def test_eight_modes(self):
        assert len(grid_minima(make_target("u3"), 120)) == 8


class TestU2Substitute:
    def test_three_modes_at_means(self):
        u = make_target("u2_substitute")
        mins = grid_minima(u, 200)
        assert len(mins) == 3
        # overlapping components pull each mode slightly off its mean
        for mu in U2_MEANS:
            d = min(float(u.manifold.dist(jnp.array(mu), jnp.array(m))) for m in mins)
            assert d < 0.15

    def test_periodic(self):
        u = make_target("u2_substitute")
        x = np.array([1.3, 4.4])
        assert float(u(x + 2 * math.pi)) == pytest.approx(float(u(x)), abs=1e-12)


class TestSphereVmf4:
    def test_mode_value(self):
        u = make_target("sphere_vmf4")
        m1 = lat_lon_to_xyz(*VMF4_MEANS_LATLON[0])
        assert float(u(m1)) <= -10 + math.log(4)

    def test_not_rotation_invariant(self):
        u = make_target("sphere_vmf4")
        Q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(3, 3)))
        x = Sphere(2).sample_base(1, 2)[0]
        assert abs(float(u(Q @ x)) - float(u(x))) > 1e-6

    def test_finite_everywhere(self):
        u = make_target("sphere_vmf4")
        assert np.all(np.isfinite(u.energy_batch(Sphere(2).sample_base(1000, 3))))


@pytest.mark.parametrize("name", ["u1", "u3", "u2_substitute", "sphere_vmf4"])
def test_gradient_against_fd(name):
    u = make_target(name)
    m = u.manifold
    for x in m.sample_base(20, 4):
        E = np.asarray(m.tangent_basis(x))

        def f(s):
            return float(u(m.chart(jnp.asarray(x), jnp.asarray(s))))

        h = 1e-6
        fd = np.array([(f(h * e) - f(-h * e)) / (2 * h) for e in np.eye(m.dim)])
        g = E @ np.asarray(u.grad(jnp.asarray(x)))
        assert np.max(np.abs(g - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))


def test_gradient_matches_autodiff_for_fourier():
    terms = [{"coef": 0.7, "factors": [["sin", 1.0], ["cos", 2.0]]}]
    u = make_target("fourier", Torus(), terms=terms)
    x = jnp.array([0.4, 1.1])
    np.testing.assert_allclose(u.grad(x), jax.grad(u.energy)(x), rtol=1e-12)


class TestLogZ:
    def test_uniform_areas(self):
        assert log_Z_quadrature(make_target("uniform", Torus())) == pytest.approx(
            math.log(4 * math.pi**2), abs=1e-12
        )
        assert log_Z_quadrature(make_target("uniform", Sphere(2))) == pytest.approx(
            math.log(4 * math.pi), abs=1e-12
        )

    def test_u1_against_monte_carlo(self):
        u = make_target("u1")
        xs = u.manifold.sample_base(10**6, 0)
        w = np.exp(-np.asarray(u.energy_batch(xs)))
        mc, se = 4 * w.mean(), 4 * w.std() / 1000
        assert abs(math.exp(log_Z_quadrature(u)) - mc) <= 3 * se

    def test_vmf_closed_form(self):
        # each component integrates to 4 pi sinh(k) / k
        u = make_target("sphere_vmf4")
        k = 10.0
        exact = math.log(4 * (4 * math.pi * math.sinh(k) / k))
        assert log_Z_quadrature(u) == pytest.approx(exact, abs=1e-6)

    def test_not_2d(self):
        with pytest.raises(UnsupportedError):
            log_Z_quadrature(make_target("uniform", Torus((1.0, 1.0, 1.0))))

    def test_sphere_grid_weights(self):
        *_, xyz, w = sphere_grid(16)
        assert w.sum() == pytest.approx(4 * math.pi)
        assert np.allclose(np.linalg.norm(xyz, axis=1), 1)


def test_config_errors():
    with pytest.raises(ConfigError, match="target.name"):
        target_from_config({})
    with pytest.raises(ConfigError, match="target.name"):
        make_target("nope")
