"""Declarative run configuration (JSON) and model construction from it."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .ccave import FlowLayer, FlowStack, InnerSolverConfig
from .diffnet import NetworkSpec, build_potential
from .errors import ConfigError
from .manifold import from_descriptor
from .targets import target_from_config
from .training import TrainConfig

SECTIONS = ("manifold", "target", "network", "stack", "solver", "train", "output_dir")


@dataclass
class RunConfig:
    """Everything needed to build and train a model.

    ``target`` is the target section (``{"name": ..., ...options}``); its
    manifold is the model manifold. ``stack`` holds ``height`` and
    ``share_parameters``.
    """

    manifold: dict
    target: dict
    network: NetworkSpec = field(default_factory=NetworkSpec)
    stack: dict = field(default_factory=lambda: {"height": 1, "share_parameters": True})
    solver: InnerSolverConfig = field(default_factory=InnerSolverConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"

    def to_dict(self):
        return {
            "manifold": dict(self.manifold),
            "target": dict(self.target),
            "network": self.network.to_dict(),
            "stack": dict(self.stack),
            "solver": asdict(self.solver),
            "train": self.train.to_dict(),
            "output_dir": self.output_dir,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping", "<root>")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown sections {sorted(unknown)}", "<root>")
        for key in ("manifold", "target"):
            if key not in d:
                raise ConfigError("missing section", key)
        target = d["target"]
        if not isinstance(target, dict) or "name" not in target:
            raise ConfigError("missing field", "target.name")
        stack = {"height": 1, "share_parameters": True, **d.get("stack", {})}
        if set(stack) - {"height", "share_parameters"}:
            raise ConfigError("unknown keys", "stack")
        if not isinstance(stack["height"], int) or stack["height"] < 1:
            raise ConfigError("must be a positive integer", "stack.height")
        if not isinstance(stack["share_parameters"], bool):
            raise ConfigError("must be true or false", "stack.share_parameters")
        solver = d.get("solver", {})
        if not isinstance(solver, dict) or set(solver) - set(
            InnerSolverConfig.__dataclass_fields__
        ):
            raise ConfigError("unknown or malformed keys", "solver")
        cfg = cls(
            manifold=dict(d["manifold"]),
            target=dict(target),
            network=NetworkSpec.from_dict(d.get("network", {})),
            stack=stack,
            solver=InnerSolverConfig(**solver),
            train=TrainConfig.from_dict(d.get("train", {})),
            output_dir=str(d.get("output_dir", "runs/default")),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON ({e})", "<root>") from None
        return cls.from_dict(d)

    def validate(self):
        """Check cross-references (the target lives on the model manifold)."""
        m = from_descriptor(self.manifold)
        t = target_from_config(self.target, m)
        if t.manifold != m:
            raise ConfigError("target manifold differs from model manifold", "target")
        return m, t


def load_config(path):
    with open(path) as fh:
        return RunConfig.from_json(fh.read())


def build_model(cfg: RunConfig, seed=None):
    """Construct ``(stack, theta0, target)`` from a config.

    Unshared stacks initialize each layer from ``seed + layer_index``.
    """
    m, target = cfg.validate()
    seed = cfg.train.seed if seed is None else seed
    h = cfg.stack["height"]
    if cfg.stack["share_parameters"]:
        theta, pot = build_potential(cfg.network, m, seed, target)
        stack = FlowStack.repeat(FlowLayer(m, pot, cfg.solver), h, True)
        return stack, theta.values, target
    layers, values = [], []
    for i in range(h):
        theta, pot = build_potential(cfg.network, m, seed + i, target)
        layers.append(FlowLayer(m, pot, cfg.solver))
        values.append(theta.values)
    return FlowStack(tuple(layers), False), np.concatenate(values), target
