"""Reverse-KL training of flow stacks.

The loss for base samples ``x ~ pi`` is

    KL(q || p) = E[ln pi(x) - ln|det J(x)| + u(f(x))] + ln Z,

estimated by Monte Carlo over a batch. Its parameter gradient comes either from
the implicit backward pass in :mod:`ircpm.ccave` or, as a cross-check, from
differentiating through a fixed number of unrolled gradient-descent steps.
Samples whose inner solve fails are dropped from the batch and counted.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .ccave import stack_forward_batch, stack_loss_grad_batch, stack_loss_grad_unrolled
from .diffnet import save_checkpoint
from .errors import ConfigError, TrainingHealthError
from .evaluation import cached_log_Z, evaluate, potential_extrema


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings.

    ``frozen`` names parameter segments that are held fixed. ``bound_probes``
    is the number of uniform probes used for the gradient/Hessian maxima in
    each metrics record. ``lr_schedule`` is ``"constant"`` or ``"cosine"``
    (half-cosine decay from ``learning_rate`` to zero over ``steps``).
    """

    batch_size: int = 256
    steps: int = 5000
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    grad_path: str = "implicit"
    eval_every: int = 500
    eval_samples: int = 20000
    bound_probes: int = 4096
    unroll_steps: int = 50
    max_nonconverged: float = 0.1
    frozen: tuple = ()
    lr_schedule: str = "constant"

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        object.__setattr__(self, "frozen", tuple(self.frozen))
        if not self.learning_rate > 0:
            raise ConfigError("must be positive", "train.learning_rate")
        if len(self.adam_betas) != 2 or not all(0 < b < 1 for b in self.adam_betas):
            raise ConfigError("betas must lie in (0, 1)", "train.adam_betas")
        if not self.adam_eps > 0:
            raise ConfigError("must be positive", "train.adam_eps")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("must be 'constant' or 'cosine'", "train.lr_schedule")
        if self.grad_path not in ("implicit", "unrolled"):
            raise ConfigError("must be 'implicit' or 'unrolled'", "train.grad_path")
        for name in ("batch_size", "eval_every", "eval_samples", "bound_probes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError("must be at least 1", f"train.{name}")
        if int(self.steps) < 0:
            raise ConfigError("must be non-negative", "train.steps")

    def learning_rate_at(self, step):
        if self.lr_schedule == "cosine" and self.steps > 0:
            return self.learning_rate * 0.5 * (1 + math.cos(math.pi * step / self.steps))
        return self.learning_rate

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["frozen"] = list(self.frozen)
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("train section must be a mapping", "train")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "train")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e), "train") from None


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def _segment_name(layout, index):
    if layout is None:
        return f"theta[{index}]"
    return layout.segment_of(index % layout.size)


def adam_step(state, theta, grad, config, layout=None, frozen_mask=None, lr=None):
    """One bias-corrected Adam update.

    Args:
        state: moments and step counter (not modified).
        theta: current parameters.
        grad: loss gradient at ``theta``.
        config: a :class:`TrainConfig` (learning rate, betas, eps).
        layout: optional parameter layout, used to name offending segments.
        frozen_mask: boolean mask of parameters to keep fixed.
        lr: step size overriding ``config.learning_rate`` (for schedules).

    Returns:
        ``(new_state, new_theta)``.

    Raises:
        TrainingHealthError: ``grad`` has a non-finite entry.
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        seg = _segment_name(layout, int(bad[0]))
        raise TrainingHealthError(f"non-finite gradient in segment {seg}", seg)
    b1, b2 = config.adam_betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad**2
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    lr = config.learning_rate if lr is None else lr
    step = lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    if frozen_mask is not None:
        step = np.where(frozen_mask, 0.0, step)
    return AdamState(m, v, t), theta - step


@dataclass
class LossBreakdown:
    kl_estimate: float
    mean_logdet: float
    mean_target_energy: float
    non_converged_fraction: float
    kl_stderr: float = float("nan")

    def to_dict(self):
        return asdict(self)


def _breakdown(stack, logdet, energy, conv, log_Z, max_nonconverged):
    n = len(conv)
    frac = 1.0 - float(np.count_nonzero(conv)) / n
    if frac > max_nonconverged:
        raise TrainingHealthError(
            f"{100 * frac:.1f}% of inner solves failed (limit {100 * max_nonconverged:.0f}%)"
        )
    terms = stack.manifold.base_log_density() - logdet[conv] + energy[conv]
    if log_Z is not None:
        terms = terms + log_Z
    k = terms.size
    return LossBreakdown(
        kl_estimate=float(np.mean(terms)),
        mean_logdet=float(np.mean(logdet[conv])),
        mean_target_energy=float(np.mean(energy[conv])),
        non_converged_fraction=frac,
        kl_stderr=float(np.std(terms, ddof=1) / np.sqrt(k)) if k > 1 else float("nan"),
    )


def kl_loss_batch(stack, theta, target, xs, log_Z="quadrature", max_nonconverged=0.1):
    """Monte-Carlo KL estimate over a batch of base samples.

    Args:
        log_Z: ``"quadrature"`` (cached per target), a number, or ``None`` to
            report the KL up to the constant ``ln Z``.

    Raises:
        TrainingHealthError: more than ``max_nonconverged`` of the solves failed.
    """
    if isinstance(log_Z, str):
        log_Z = cached_log_Z(target)
    ys, logdet, conv = stack_forward_batch(stack, theta, xs)
    energy = np.asarray(target.energy_batch(ys))
    return _breakdown(stack, logdet, energy, conv, log_Z, max_nonconverged)


def loss_and_grad(stack, theta, target, xs, grad_path="implicit", unroll_steps=50,
                  log_Z="quadrature", max_nonconverged=0.1):
    """Batch loss breakdown and its parameter gradient in one pass.

    The unrolled path averages over all samples (it has no convergence test);
    its breakdown is still taken from the exact forward pass.
    """
    if isinstance(log_Z, str):
        log_Z = cached_log_Z(target)
    if grad_path == "implicit":
        out = stack_loss_grad_batch(stack, theta, xs, target)
        br = _breakdown(
            stack, out["logdet"], out["energy"], out["converged"], log_Z, max_nonconverged
        )
        return br, out["grad"]
    if grad_path == "unrolled":
        br = kl_loss_batch(stack, theta, target, xs, log_Z, max_nonconverged)
        _, g = stack_loss_grad_unrolled(stack, theta, xs, target, unroll_steps)
        return br, g
    raise ConfigError("must be 'implicit' or 'unrolled'", "train.grad_path")


def loss_param_grad(stack, theta, target, xs, grad_path="implicit", unroll_steps=50,
                    max_nonconverged=0.1):
    """Gradient of the batch KL estimate with respect to the stack parameters."""
    return loss_and_grad(
        stack, theta, target, xs, grad_path, unroll_steps, None, max_nonconverged
    )[1]


def _potentials(stack):
    seen, out = set(), []
    for layer in stack.layers:
        if id(layer.potential) not in seen:
            seen.add(id(layer.potential))
            out.append(layer.potential)
    return out


def psi_extrema(stack, theta, n_probe, seed):
    """Largest ``|grad psi|`` and ``|H_psi|`` over probes, across all layers."""
    g = h = 0.0
    for i, layer in enumerate(stack.layers):
        if stack.share_parameters and i > 0:
            break
        gi, hi = potential_extrema(
            layer.potential, stack.layer_theta(np.asarray(theta), i), stack.manifold,
            n_probe, seed,
        )
        g, h = max(g, gi), max(h, hi)
    return g, h


def metrics_record(stack, theta, target, step, config, log_Z=None):
    """Evaluation record written to the metrics file."""
    rep = evaluate(stack, theta, target, config.eval_samples, seed=[config.seed, 1, step],
                   log_Z=log_Z)
    g, h = psi_extrema(stack, theta, config.bound_probes, seed=[config.seed, 2])
    return {
        "step": int(step),
        "kl": rep.kl,
        "ess": rep.ess,
        "mean_logdet": rep.mean_logdet,
        "nonconverged_frac": rep.n_nonconverged / rep.n_samples,
        "max_grad_psi": g,
        "max_hess_psi": h,
        "ess_raw": rep.ess_raw,
        "kl_stderr": rep.kl_stderr,
    }


def _layout_of(stack):
    pot = stack.layers[0].potential
    return getattr(pot, "layout", None)


def _checkpoint(stack, theta, path, meta):
    pot = stack.layers[0].potential
    save_checkpoint(path, theta, pot.spec, stack.manifold, meta)


def train(config, stack, target, theta0, out_dir=None, meta=None, log=None):
    """Run the training loop.

    Base batches and evaluation samples are drawn from generators seeded by
    ``(config.seed, step)``, so runs are deterministic given the seed.

    Args:
        config: :class:`TrainConfig`.
        stack: the :class:`~ircpm.ccave.FlowStack` to train.
        target: target energy.
        theta0: initial parameters.
        out_dir: when given, ``metrics.jsonl`` and ``checkpoint.bin`` are written there.
        meta: extra checkpoint header content (e.g. the run config).
        log: optional callable receiving each metrics record.

    Returns:
        ``(theta, history)`` with ``history`` the list of metrics records.

    Raises:
        TrainingHealthError: after writing ``checkpoint_abort.bin`` with the last
            healthy parameters.
    """
    theta = np.asarray(getattr(theta0, "values", theta0), dtype=float).copy()
    layout = _layout_of(stack)
    frozen_mask = None
    if config.frozen:
        base = layout.mask(config.frozen)
        frozen_mask = np.tile(base, stack.n_params // layout.size)
    log_Z = cached_log_Z(target)
    state = AdamState.zeros(theta.size)
    history = []
    meta = dict(meta or {})
    metrics_path = ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        ckpt_path = os.path.join(out_dir, "checkpoint.bin")
        open(metrics_path, "w").close()

    def record(step):
        rec = metrics_record(stack, theta, target, step, config, log_Z)
        history.append(rec)
        if metrics_path:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            _checkpoint(stack, theta, ckpt_path, {**meta, "step": step})
        if log:
            log(rec)

    m = stack.manifold
    for step in range(config.steps):
        if step % config.eval_every == 0:
            record(step)
        xs = m.sample_base(config.batch_size, [config.seed, 0, step])
        try:
            _, g = loss_and_grad(
                stack, theta, target, xs, config.grad_path, config.unroll_steps, log_Z,
                config.max_nonconverged,
            )
            state, theta = adam_step(
                state, theta, g, config, layout, frozen_mask, config.learning_rate_at(step)
            )
        except TrainingHealthError as e:
            if out_dir is not None:
                _checkpoint(
                    stack, theta, os.path.join(out_dir, "checkpoint_abort.bin"),
                    {**meta, "step": step, "aborted": str(e)},
                )
            raise
    record(config.steps)
    return theta, history


@dataclass
class GradCheckReport:
    max_rel_err: float
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    epsilon: float
    extra: dict = field(default_factory=dict)


def grad_check(stack, theta, target, n_points=64, epsilon=1e-5, seed=0, indices=None,
               grad_path="implicit", max_indices=2000):
    """Compare :func:`loss_param_grad` with central differences of :func:`kl_loss_batch`.

    The relative error is ``max_i |g_i - fd_i| / max_i |fd_i|`` over the checked
    indices, so entries that barely affect the loss do not dominate it. For
    vectors longer than ``max_indices`` a random subset is checked.
    """
    theta = np.asarray(getattr(theta, "values", theta), dtype=float)
    xs = stack.manifold.sample_base(n_points, seed)
    g = np.asarray(loss_param_grad(stack, theta, target, xs, grad_path, max_nonconverged=1.0))
    if indices is None:
        indices = np.arange(theta.size)
        if theta.size > max_indices:
            rng = np.random.default_rng(seed)
            indices = np.sort(rng.choice(theta.size, max_indices, replace=False))
    indices = np.asarray(indices)

    def loss(th):
        return kl_loss_batch(stack, th, target, xs, None, 1.0).kl_estimate

    fd = np.empty(indices.size)
    for k, i in enumerate(indices):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += epsilon
        tm[i] -= epsilon
        fd[k] = (loss(tp) - loss(tm)) / (2 * epsilon)
    ga = g[indices]
    scale = np.max(np.abs(fd))
    err = float(np.max(np.abs(ga - fd)) / scale) if scale > 0 else float(np.max(np.abs(ga)))
    return GradCheckReport(err, indices, ga, fd, epsilon)
