import json
import os
import subprocess
import sys

import numpy as np
import pytest

from ircpm.cli import main
from ircpm.config import RunConfig, build_model, load_config
from ircpm.diffnet import load_checkpoint, save_checkpoint
from ircpm.errors import ConfigError

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = sorted(f for f in os.listdir(os.path.join(ROOT, "configs")) if f.endswith(".json"))

SMALL = {
    "manifold": {"kind": "torus", "circumferences": [2.0, 2.0]},
    "target": {"name": "u1"},
    "network": {"architecture": "energy_scaled", "output_scale": 20.0},
    "solver": {"newton_switch": 0.1, "max_gd_steps": 30},
    "train": {"batch_size": 32, "steps": 6, "learning_rate": 0.01, "eval_every": 3,
              "eval_samples": 500, "bound_probes": 64},
}


def write(tmp_path, d, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return str(p)


def identity_checkpoint(tmp_path, manifold, target):
    d = {"manifold": manifold, "target": {"name": target},
         "network": {"architecture": "mlp", "layer_sizes": [4, 1]}}
    cfg = RunConfig.from_dict(d)
    stack, theta, _ = build_model(cfg)
    pot = stack.layers[0].potential
    p = tmp_path / "identity.bin"
    save_checkpoint(p, np.zeros_like(theta), pot.spec, stack.manifold, {"config": cfg.to_dict()})
    return str(p)


class TestRunConfig:
    @pytest.mark.parametrize("name", CONFIGS)
    def test_reference_configs_round_trip(self, name):
        cfg = load_config(os.path.join(ROOT, "configs", name))
        again = RunConfig.from_json(cfg.to_json())
        assert again == cfg and again.to_json() == cfg.to_json()

    @pytest.mark.parametrize(
        "patch,field",
        [({"target": {}}, "target.name"),
         ({"target": {"name": "nope"}}, "target.name"),
         ({"manifold": {"kind": "klein"}}, "manifold.kind"),
         ({"network": {"architecture": "mlp", "output_scale": -1}}, "network.output_scale"),
         ({"stack": {"height": 0}}, "stack.height"),
         ({"solver": {"gd_step_size": 3.0}}, "solver.gd_step_size"),
         ({"train": {"learning_rate": -1}}, "train.learning_rate"),
         ({"extra": 1}, "<root>")],
    )
    def test_field_paths(self, patch, field):
        with pytest.raises(ConfigError) as e:
            RunConfig.from_dict({**SMALL, **patch})
        assert e.value.field == field

    def test_target_on_other_manifold(self):
        with pytest.raises(ConfigError, match="target"):
            RunConfig.from_dict({**SMALL, "manifold": {"kind": "sphere", "dimension": 2}})

    def test_bad_json(self):
        with pytest.raises(ConfigError, match="invalid JSON"):
            RunConfig.from_json("{")

    def test_unshared_stack_seeds_layers(self):
        cfg = RunConfig.from_dict({
            **SMALL, "network": {"architecture": "mlp", "layer_sizes": [4, 1]},
            "stack": {"height": 2, "share_parameters": False},
        })
        stack, theta, _ = build_model(cfg)
        n = stack.layers[0].n_params
        assert theta.size == 2 * n and not np.array_equal(theta[:n], theta[n:])


class TestTrainCommand:
    def test_runs_and_is_deterministic(self, tmp_path, capsys):
        cfg = write(tmp_path, SMALL)
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        final = json.loads(capsys.readouterr().out)
        assert final["step"] == 6 and 0 < final["ess"] <= 100
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        for f in ("metrics.jsonl", "checkpoint.bin", "config.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        _, header = load_checkpoint(tmp_path / "a" / "checkpoint.bin")
        assert RunConfig.from_dict(header["meta"]["config"]) == load_config(cfg)

    def test_seed_flag(self, tmp_path):
        cfg = write(tmp_path, SMALL)
        main(["train", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "7"])
        assert json.loads((tmp_path / "a" / "config.json").read_text())["train"]["seed"] == 7

    def test_missing_target_name(self, tmp_path, capsys):
        cfg = write(tmp_path, {**SMALL, "target": {}})
        assert main(["train", "--config", cfg]) == 2
        assert "target.name" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.json")]) == 4

    def test_health_abort(self, tmp_path, capsys):
        d = {**SMALL, "network": {"architecture": "energy_scaled", "output_scale": 1.0},
             "solver": {"max_gd_steps": 2, "newton_polish": False},
             "train": {**SMALL["train"], "max_nonconverged": 0.0}}
        assert main(["train", "--config", write(tmp_path, d), "--out", str(tmp_path / "r")]) == 3
        assert (tmp_path / "r" / "checkpoint_abort.bin").exists()
        assert "training aborted" in capsys.readouterr().err


class TestCheckpointCommands:
    def test_evaluate_identity(self, tmp_path, capsys):
        ck = identity_checkpoint(tmp_path, {"kind": "sphere", "dimension": 2}, "uniform")
        assert main(["evaluate", "--checkpoint", ck, "--n", "2000"]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["ess"] == pytest.approx(100.0) and abs(rep["kl"]) < 1e-12

    def test_evaluate_other_target(self, tmp_path, capsys):
        ck = identity_checkpoint(tmp_path, {"kind": "sphere", "dimension": 2}, "uniform")
        assert main(["evaluate", "--checkpoint", ck, "--n", "2000", "--target",
                     "sphere_vmf4"]) == 0
        assert json.loads(capsys.readouterr().out)["ess"] < 50

    def test_zero_samples(self, tmp_path):
        ck = identity_checkpoint(tmp_path, {"kind": "sphere", "dimension": 2}, "uniform")
        assert main(["evaluate", "--checkpoint", ck, "--n", "0"]) == 2
        assert main(["check-bounds", "--checkpoint", ck, "--n", "0"]) == 2
        assert main(["sample", "--checkpoint", ck, "--n", "0"]) == 2
        assert main(["grid", "--checkpoint", ck, "--resolution", "0"]) == 2

    def test_check_bounds(self, tmp_path, capsys):
        ck = identity_checkpoint(tmp_path, {"kind": "sphere", "dimension": 2}, "uniform")
        assert main(["check-bounds", "--checkpoint", ck, "--n", "1000"]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["passes"] and rep["max_grad_norm"] == 0.0

    def test_check_bounds_failing(self, tmp_path, capsys):
        d = {"manifold": {"kind": "sphere", "dimension": 2}, "target": {"name": "uniform"},
             "network": {"architecture": "mlp", "layer_sizes": [8, 1], "output_scale": 0.05}}
        cfg = RunConfig.from_dict(d)
        stack, theta, _ = build_model(cfg)
        p = tmp_path / "big.bin"
        save_checkpoint(p, theta, stack.layers[0].potential.spec, stack.manifold,
                        {"config": cfg.to_dict()})
        assert main(["check-bounds", "--checkpoint", str(p), "--n", "1000"]) == 1
        assert not json.loads(capsys.readouterr().out)["passes"]

    def test_grid_and_sample(self, tmp_path, capsys):
        ck = identity_checkpoint(tmp_path, {"kind": "torus", "circumferences": [2.0, 2.0]}, "u1")
        out = tmp_path / "exports"
        assert main(["grid", "--checkpoint", ck, "--resolution", "16", "--out", str(out)]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["integral"] == pytest.approx(1.0, abs=1e-12) and rep["flagged_cells"] == 0
        assert (out / "grid.csv").exists() and (out / "grid.ppm").exists()
        assert main(["sample", "--checkpoint", ck, "--n", "10", "--out", str(out)]) == 0
        first = (out / "samples.csv").read_bytes()
        assert len(first.splitlines()) == 11
        main(["sample", "--checkpoint", ck, "--n", "10", "--out", str(out)])
        assert (out / "samples.csv").read_bytes() == first

    def test_unwritable_output(self, tmp_path):
        ck = identity_checkpoint(tmp_path, {"kind": "torus", "circumferences": [2.0, 2.0]}, "u1")
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["grid", "--checkpoint", ck, "--resolution", "4",
                     "--out", str(blocker / "sub")]) == 4

    def test_corrupt_checkpoint(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"garbage")
        assert main(["evaluate", "--checkpoint", str(p)]) == 4


class TestVerifyCommand:
    def test_clean_build(self, capsys):
        assert main(["verify"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_injected_fault(self, capsys):
        code = main(["verify", "--inject-fault", "dist_derivatives"])
        out = capsys.readouterr().out
        failing = [line.split()[0] for line in out.splitlines() if "FAIL" in line]
        assert code == len(failing) >= 1 and "jacobian_fd" in failing


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "ircpm", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "evaluate", "check-bounds", "verify", "grid", "sample"):
        assert cmd in r.stdout


def test_usage_error_exit_code():
    r = subprocess.run([sys.executable, "-m", "ircpm", "evaluate"], capture_output=True)
    assert r.returncode == 2
