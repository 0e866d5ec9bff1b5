"""Run configuration: defaults, key=value config files, flag overrides.

Precedence: built-in defaults < config file < command-line flags.  The
validated config is echoed into checkpoints and metrics headers so every
artifact records how it was produced.
"""

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError

ENV_OUT_DIR = "VAEMIX_OUT_DIR"


@dataclass
class RunConfig:
    seed: int = 0
    alpha: float = 2.0
    hidden_dim: int = 100
    latent_dim: Optional[int] = None  # None = 10% of hidden_dim
    mc_samples: int = 2
    learning_rate: float = 0.001
    # learning rate for component updates during Gibbs sweeps; 0 = same as
    # learning_rate
    sweep_learning_rate: float = 0.0
    batch_size: int = 500
    max_iterations: int = 1000
    max_sweeps: int = 30
    c_max: int = 64
    update_rule: str = "sgd"
    decoder_kind: str = "bernoulli"
    architecture: str = "asymmetric"
    convergence_tol: float = 1e-4
    n_trials: int = 3
    label_budget: int = 100
    recon_samples: int = 20
    moe_epochs: int = 50
    moe_batch_size: int = 100
    moe_learning_rate: float = 0.001
    # draws per responsibility estimate when gating the classifier and the
    # latent probe; 0 = same as mc_samples
    gating_samples: int = 0
    train_trunk: bool = False
    # data source: "synth" or "idx"
    dataset: str = "synth"
    images_path: str = ""
    labels_path: str = ""
    test_images_path: str = ""
    test_labels_path: str = ""
    binarize_input: bool = True
    data_seed: int = 777
    synth_classes: int = 4
    synth_dim: int = 64
    synth_count: int = 2000
    synth_test_count: int = 400
    synth_flip: float = 0.05
    out_dir: str = ""

    def __post_init__(self):
        if not self.out_dir:
            self.out_dir = os.environ.get(ENV_OUT_DIR, "runs")

    def validate(self) -> "RunConfig":
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if self.latent_dim is not None and self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.learning_rate <= 0 or self.moe_learning_rate <= 0:
            raise ConfigError("learning rates must be positive")
        if self.sweep_learning_rate < 0:
            raise ConfigError("sweep_learning_rate must be >= 0")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.max_sweeps < 0:
            raise ConfigError("max_sweeps must be >= 0")
        if self.c_max < 1:
            raise ConfigError("c_max must be >= 1")
        if self.update_rule not in ("adam", "sgd"):
            raise ConfigError(f"unknown update_rule {self.update_rule!r}")
        if self.decoder_kind not in ("bernoulli", "gaussian"):
            raise ConfigError(f"unknown decoder_kind {self.decoder_kind!r}")
        if self.architecture not in ("asymmetric", "symmetric"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.convergence_tol <= 0:
            raise ConfigError("convergence_tol must be positive")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")
        if self.label_budget < 1:
            raise ConfigError("label_budget must be >= 1")
        if self.recon_samples < 1:
            raise ConfigError("recon_samples must be >= 1")
        if self.gating_samples < 0:
            raise ConfigError("gating_samples must be >= 0")
        if self.dataset not in ("synth", "idx"):
            raise ConfigError(f"unknown dataset kind {self.dataset!r}")
        if self.dataset == "idx" and not self.images_path:
            raise ConfigError("dataset=idx needs images_path")
        if not (0.0 <= self.synth_flip < 0.5):
            raise ConfigError("synth_flip must be in [0, 0.5)")
        return self

    def echo(self) -> str:
        """One-line JSON of everything except the output location."""
        d = dataclasses.asdict(self)
        d.pop("out_dir")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_BOOL_FIELDS = {"train_trunk", "binarize_input"}
_INT_FIELDS = {
    "seed", "hidden_dim", "latent_dim", "mc_samples", "batch_size",
    "max_iterations", "max_sweeps", "c_max", "n_trials", "label_budget",
    "recon_samples", "moe_epochs", "moe_batch_size", "gating_samples",
    "data_seed",
    "synth_classes", "synth_dim", "synth_count", "synth_test_count",
}
_FLOAT_FIELDS = {
    "alpha", "learning_rate", "sweep_learning_rate", "convergence_tol",
    "moe_learning_rate", "synth_flip",
}


def parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _BOOL_FIELDS:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if key in _INT_FIELDS:
            return int(raw)
        if key in _FLOAT_FIELDS:
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
    return raw


def load_config_file(path: str) -> dict:
    """key = value lines; # starts a comment; unknown keys are rejected."""
    values = {}
    try:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ConfigError(
                        f"{path}:{lineno}: expected key = value, got {line!r}"
                    )
                key, raw = stripped.split("=", 1)
                key = key.strip()
                if key not in _FIELD_TYPES:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = parse_value(key, raw)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return values


def build_config(file_path: Optional[str] = None, **overrides) -> RunConfig:
    values = {}
    if file_path:
        values.update(load_config_file(file_path))
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config field {key!r}")
        values[key] = val
    return RunConfig(**values).validate()
