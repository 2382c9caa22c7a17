"""Hyperparameter and ablation-flag containers plus config fingerprinting."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .errors import ConfigError

#: Search space used for the loss-weight grid search.
WEIGHT_GRID = (0.01, 0.10, 0.25, 0.50, 1.00, 10.0, 50.0)

ENCODER_KINDS = ("hd", "mmoe", "mema")

DISCREPANCY_KINDS = ("mmd_rbf", "mmd_linear", "wasserstein_sinkhorn")


@dataclass
class Hyperparams:
    """Loss weights, architecture sizes, and optimizer settings.

    Defaults follow the recommended operating point: hidden width 200,
    ``alpha=1.0``, ``beta=zeta=0.5``, ``eta=0.25``, at most 4 attention heads,
    weight decay inside [1e-5, 1e-3], roughly 1000 training iterations.
    """

    alpha: float = 1.0
    beta: float = 0.5
    zeta: float = 0.5
    eta: float = 0.25
    lambda_reg: float = 1e-4
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_iterations: int = 1000
    m_experts: int = 4
    n_heads: int = 4
    d_m: int = 200
    h: int = 200
    expert_hidden: tuple = (200,)
    tower_hidden: tuple = (200,)
    head_hidden: tuple = (200,)
    discrepancy_kind: str = "mmd_rbf"
    layer_norm: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    eval_interval: int = 50

    def __post_init__(self):
        self.expert_hidden = tuple(self.expert_hidden)
        self.tower_hidden = tuple(self.tower_hidden)
        self.head_hidden = tuple(self.head_hidden)
        for name in ("alpha", "beta", "zeta", "eta", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be positive")
        if self.m_experts < 2:
            raise ConfigError("m_experts must be at least 2")
        if self.n_heads < 1:
            raise ConfigError("n_heads must be at least 1")
        if self.d_m % self.n_heads != 0:
            raise ConfigError(
                f"d_m={self.d_m} must divide evenly across n_heads={self.n_heads}"
            )
        if self.discrepancy_kind not in DISCREPANCY_KINDS:
            raise ConfigError(f"unknown discrepancy_kind {self.discrepancy_kind!r}")

    @property
    def d_k(self):
        return self.d_m // self.n_heads

    @property
    def d_v(self):
        return self.d_m // self.n_heads


@dataclass
class AblationFlags:
    """Which encoder variant runs and which auxiliary components are active.

    ``hd`` uses three fully separate encoders, ``mmoe`` shared experts with
    per-task softmax mixing and no attention, ``mema`` the full
    expert-attention encoder.
    """

    encoder_kind: str = "mema"
    use_lor: bool = True
    use_imbalance: bool = True
    use_isw: bool = True

    def __post_init__(self):
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"encoder_kind must be one of {ENCODER_KINDS}")


#: The six ablation rows: encoder variants with everything on, then the full
#: encoder with exactly one auxiliary component removed, then the full model.
ABLATION_GRID = (
    AblationFlags(encoder_kind="hd"),
    AblationFlags(encoder_kind="mmoe"),
    AblationFlags(encoder_kind="mema", use_lor=False),
    AblationFlags(encoder_kind="mema", use_imbalance=False),
    AblationFlags(encoder_kind="mema", use_isw=False),
    AblationFlags(encoder_kind="mema"),
)


def default_sweep_grid():
    """One axis per loss weight over the standard search space."""
    return {
        "alpha": list(WEIGHT_GRID),
        "beta": list(WEIGHT_GRID),
        "zeta": list(WEIGHT_GRID),
        "eta": list(WEIGHT_GRID),
    }


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item") and getattr(obj, "ndim", None) == 0:
        return obj.item()
    return obj


def fingerprint(obj):
    """Stable 16-hex-digit hash of any jsonable config structure."""
    blob = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
