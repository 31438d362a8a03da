"""Inspect a trained checkpoint: metrics, safety bounds and a density heatmap.

Usage: python demos/03_inspect_checkpoint.py runs/sphere_vmf4_stack3/checkpoint.bin [out_dir]
"""

import os
import sys

from ircpm.cli import load_model
from ircpm.evaluation import bound_check, density_grid, evaluate, write_ppm

path = sys.argv[1]
out = sys.argv[2] if len(sys.argv) > 2 else os.path.dirname(path)
cfg, stack, theta, target = load_model(path)

rep = evaluate(stack, theta, target, 20000, seed=1)
print(f"{target.name}: ESS {rep.ess:.2f}%  KL {rep.kl:.4f} +- {rep.kl_stderr:.4f}")

# the stack shares one potential, so one check covers every layer
b = bound_check(stack.layers[0].potential, stack.layer_theta(theta, 0), stack.manifold,
                n_probe=100_000)
print(f"max|grad psi| {b.max_grad_norm:.3f}  max|H psi| {b.max_hess_opnorm:.3f}  "
      f"required < {b.eta_required:.3f} at lambda {b.lam:.3f}: "
      f"{'safe' if b.passes else 'NOT certified'}")

grid = density_grid(stack, theta, 128)
print(f"density integrates to {grid.integral():.5f} ({(~grid.valid).sum()} flagged cells)")
write_ppm(grid, os.path.join(out, "density.ppm"))
print("heatmap written to", os.path.join(out, "density.ppm"))
