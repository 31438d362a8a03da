import csv
import math

import numpy as np
import pytest

from ircpm.ccave import FlowLayer, FlowStack, stack_forward_batch
from ircpm.diffnet import NetworkSpec, build_potential
from ircpm.errors import ContractError
from ircpm.evaluation import (
    bound_check,
    bound_verdict,
    density_grid,
    ess_from_log_weights,
    evaluate,
    required_eta,
    sample_model,
    write_grid_csv,
    write_ppm,
    write_samples_csv,
)
from ircpm.manifold import Euclidean, Sphere, Torus, tcg
from ircpm.targets import make_target
from ircpm.verify import bounded_layer

T1 = Torus((2.0,))
T2 = Torus((2.0, 2.0))
S2 = Sphere(2)


def identity_stack(m):
    theta, pot = build_potential(NetworkSpec("mlp", [4, 1]), m)
    return FlowStack.repeat(FlowLayer(m, pot), 1), np.zeros(len(theta.values))


class TestEss:
    def test_equal_weights(self):
        assert ess_from_log_weights(np.full(50, -3.7)) == pytest.approx(100.0)

    def test_single_dominant_weight(self):
        lw = np.full(10, -1e4)
        lw[3] = 0.0
        assert ess_from_log_weights(lw) == pytest.approx(10.0)

    def test_direct_formula(self):
        w = np.random.default_rng(0).exponential(size=1000)
        ref = 100 * w.sum() ** 2 / (w**2).sum() / w.size
        assert ess_from_log_weights(np.log(w) + 700.0) == pytest.approx(ref, rel=1e-12)

    def test_empty(self):
        assert ess_from_log_weights([]) == 0.0


class TestEvaluate:
    @pytest.mark.parametrize("m", [T2, S2], ids=["torus", "sphere"])
    def test_perfect_model(self, m):
        stack, th = identity_stack(m)
        rep = evaluate(stack, th, make_target("uniform", m), 5000)
        assert rep.ess == pytest.approx(100.0)
        assert abs(rep.kl) < 1e-12 and rep.n_nonconverged == 0

    def test_identity_against_direct_weights(self):
        u = make_target("u1")
        stack, th = identity_stack(T2)
        rep = evaluate(stack, th, u, 4000, seed=5)
        xs = T2.sample_base(4000, 5)
        w = np.exp(-np.asarray(u.energy_batch(xs)))
        assert rep.ess == pytest.approx(100 * w.sum() ** 2 / (w**2).sum() / w.size, rel=1e-10)

    def test_sample_model_matches_forward(self):
        layer, th = bounded_layer(S2, seed=1)
        stack = FlowStack.repeat(layer, 2)
        ys, log_q, conv = sample_model(stack, th, 100, seed=3, batch=32)
        y2, ld, _ = stack_forward_batch(stack, th, S2.sample_base(100, 3))
        np.testing.assert_array_equal(ys, y2)
        np.testing.assert_allclose(log_q, -math.log(4 * math.pi) - ld)
        assert conv.all()

    def test_bad_sample_count(self):
        stack, th = identity_stack(T2)
        with pytest.raises(ContractError):
            evaluate(stack, th, make_target("u1"), 0)


class TestBounds:
    def test_required_eta(self):
        assert required_eta(S2, 0.5) == pytest.approx(tcg(0.5))
        assert required_eta(S2, math.pi) == 0.0
        assert required_eta(T2, 0.5) == 1.0
        assert required_eta(T2, 0.5, margin=0.1) == pytest.approx(0.9)

    def test_verdict_sphere(self):
        lam, eta, ok = bound_verdict(S2, 0.2, 0.8)
        assert lam == pytest.approx(0.4) and eta == pytest.approx(tcg(0.4)) and ok
        assert not bound_verdict(S2, 0.2, tcg(0.4))[2]
        assert not bound_verdict(S2, 0.3, 0.1, lam=0.5)[2]

    def test_verdict_flat(self):
        assert bound_verdict(T2, 5.0, 0.99)[2]
        assert not bound_verdict(T2, 5.0, 1.0)[2]

    @pytest.mark.parametrize("m", [T2, S2], ids=["torus", "sphere"])
    def test_check_on_bounded_and_scaled(self, m):
        layer, th = bounded_layer(m, seed=2)
        rep = bound_check(layer.potential, th, m, n_probe=5000, seed=1)
        assert rep.passes and rep.lam == pytest.approx(2 * rep.max_grad_norm)
        _, big = build_potential(NetworkSpec("mlp", [8, 8, 1], 0.05), m, seed=2)
        assert not bound_check(big, th, m, n_probe=5000, seed=1).passes

    def test_probe_count(self):
        layer, th = bounded_layer(T2)
        with pytest.raises(ContractError):
            bound_check(layer.potential, th, T2, n_probe=0)


class TestDensityGrid:
    @pytest.mark.parametrize("m", [T1, T2, S2], ids=["circle", "torus", "sphere"])
    def test_identity_is_uniform(self, m):
        stack, th = identity_stack(m)
        g = density_grid(stack, th, 16)
        np.testing.assert_allclose(g.log_q, m.base_log_density(), atol=1e-12)
        assert g.integral() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("m", [T2, S2], ids=["torus", "sphere"])
    def test_normalized(self, m):
        layer, th = bounded_layer(m, seed=3)
        g = density_grid(FlowStack.repeat(layer, 3), th, 128)
        assert g.valid.all()
        assert g.integral() == pytest.approx(1.0, abs=1e-3)

    def test_grid_matches_forward_density(self):
        # the density at y = f(x) is pi(x) / |det J(x)|
        layer, th = bounded_layer(T2, seed=4)
        stack = FlowStack.repeat(layer, 2)
        g = density_grid(stack, th, 8)
        from ircpm.ccave import stack_inverse_batch

        xs, _, _ = stack_inverse_batch(stack, th, g.points)
        ys, ld, _ = stack_forward_batch(stack, th, xs)
        np.testing.assert_allclose(ys, g.points, atol=1e-9)
        np.testing.assert_allclose(g.log_q, -math.log(4) - ld, atol=1e-9)

    def test_no_grid_for_euclidean(self):
        stack, th = identity_stack(Euclidean(2))
        with pytest.raises(ContractError):
            density_grid(stack, th, 8)


class TestExports:
    def test_grid_csv_and_ppm(self, tmp_path):
        layer, th = bounded_layer(S2, seed=1)
        g = density_grid(FlowStack.repeat(layer, 1), th, 8)
        write_grid_csv(g, tmp_path / "g.csv")
        rows = list(csv.reader(open(tmp_path / "g.csv")))
        assert rows[0] == ["lat", "lon", "log_q"] and len(rows) == 1 + 8 * 16
        np.testing.assert_allclose([float(r[2]) for r in rows[1:]], g.log_q)
        write_ppm(g, tmp_path / "g.ppm")
        blob = (tmp_path / "g.ppm").read_bytes()
        assert blob.startswith(b"P6 16 8 255\n") and len(blob) == 12 + 16 * 8 * 3

    def test_flagged_cells_are_magenta(self, tmp_path):
        stack, th = identity_stack(T2)
        g = density_grid(stack, th, 4)
        g.log_q[0] = np.nan
        write_ppm(g, tmp_path / "g.ppm")
        px = np.frombuffer((tmp_path / "g.ppm").read_bytes()[11:], np.uint8).reshape(4, 4, 3)
        # cell (0, 0) is drawn bottom-left
        assert tuple(px[3, 0]) == (255, 0, 255)
        assert tuple(px[0, 0]) != (255, 0, 255)

    def test_samples_csv(self, tmp_path):
        write_samples_csv(np.array([[0.1, 0.2]]), np.array([-1.5]), tmp_path / "s.csv")
        assert (tmp_path / "s.csv").read_text().splitlines() == ["x1,x2,log_q", "0.1,0.2,-1.5"]
