"""Nonparametric mixture of variational autoencoders.

A self-contained float64 stack (flat-buffer tensors, a define-by-run tape,
Adam) drives three layers: a VAE with Bernoulli or Gaussian decoders, a
Dirichlet-process mixture of VAEs trained by blocked Gibbs sweeps, and a
mixture-of-experts classifier gated by the generative responsibilities.
Hot kernels run through a compiled extension when available, with a pure
Python fallback that produces bit-identical results.
"""

from .backend import BACKEND_NAME, get_backend
from .config import RunConfig, build_config, load_config_file
from .data_io import (
    Dataset,
    MetricsWriter,
    binarize,
    load_checkpoint,
    load_idx,
    save_checkpoint,
)
from .errors import (
    CheckpointCorruptError,
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    IdxError,
    NumericsError,
    ShapeError,
    VaemixError,
)
from .mixture import (
    SPAWN,
    MixtureConfig,
    MixtureState,
    fit,
    gibbs_sweep,
    resume_fit,
    responsibility,
)
from .moe import MoeConfig, MoeModel, evaluate, linear_probe, predict, train
from .rng import CounterRng
from .tensor import Tensor
from .vae import VaeConfig, VaeModel, pretrain

__version__ = "0.1.0"

__all__ = [
    "BACKEND_NAME",
    "CheckpointCorruptError",
    "CheckpointError",
    "CheckpointVersionError",
    "ConfigError",
    "CounterRng",
    "DataError",
    "Dataset",
    "IdxError",
    "MetricsWriter",
    "MixtureConfig",
    "MixtureState",
    "MoeConfig",
    "MoeModel",
    "NumericsError",
    "RunConfig",
    "SPAWN",
    "ShapeError",
    "Tensor",
    "VaeConfig",
    "VaeModel",
    "VaemixError",
    "binarize",
    "build_config",
    "evaluate",
    "fit",
    "get_backend",
    "gibbs_sweep",
    "linear_probe",
    "load_checkpoint",
    "load_config_file",
    "load_idx",
    "predict",
    "pretrain",
    "responsibility",
    "resume_fit",
    "save_checkpoint",
    "train",
    "__version__",
]
