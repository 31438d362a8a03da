"""Implicit Riemannian concave potential maps: normalizing flows on tori and spheres."""

import os

# RPF_THREADS caps worker parallelism; it must be applied before jax starts
if os.environ.get("RPF_THREADS"):
    _n = str(int(os.environ["RPF_THREADS"]))
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _n)
    os.environ["XLA_FLAGS"] = (
        os.environ.get("XLA_FLAGS", "")
        + f" --xla_cpu_multi_thread_eigen={'false' if _n == '1' else 'true'}"
        + f" intra_op_parallelism_threads={_n}"
    ).strip()

import jax  # noqa: E402

jax.config.update("jax_enable_x64", True)

from . import manifold  # noqa: E402
from .errors import (  # noqa: E402
    ConfigError,
    ContractError,
    CutLocusError,
    DegenerateFlowError,
    ImplicitSolveError,
    TrainingHealthError,
    UnsupportedError,
)
from .manifold import Euclidean, Sphere, Torus, tcg  # noqa: E402

__version__ = "0.1.0"
