"""Counterfactual regression with softly disentangled latent factors.

A numpy library for estimating individual treatment effects from
observational data: an expert-attention encoder splits covariates into
instrument, confounder, and adjustment factors; gate vectors with an
orthogonality penalty keep the factors separated; outcome regression is
reweighted against selection bias with propensity-derived importance
weights.  Includes benchmark loaders, a ground-truth synthetic generator,
an ablation grid, and the uplift/ITE evaluation suite.
"""

from .config import (
    ABLATION_GRID,
    WEIGHT_GRID,
    AblationFlags,
    Hyperparams,
    default_sweep_grid,
    fingerprint,
)
from .data import (
    Scaler,
    SplitSpec,
    SyntheticConfig,
    TaggedDataset,
    benchmark_splits,
    from_csv,
    generate_synthetic,
    load_acic,
    load_ihdp,
    load_jobs,
    split,
    standardize_splits,
    to_csv,
)
from .encoder import (
    FactorBundle,
    GateVectors,
    apply_gates,
    encode,
    expert_forward,
    multi_head_attention,
    orthogonality_penalty,
    task_heads,
)
from .heads import (
    HeadParams,
    importance_weights,
    predict_outcomes,
    predict_treatment,
    propensity,
)
from .losses import (
    LossBreakdown,
    discrepancy,
    factual_loss,
    imbalance_loss,
    iw_loss,
    total_loss,
    treatment_loss,
)
from .metrics import (
    MetricsReport,
    ate_error,
    att_error,
    auuc,
    pehe,
    policy_risk,
    qini,
    uplift_curve,
)
from .training import (
    train_with_restarts,
    Model,
    TrainingHistory,
    TrainResult,
    ablate,
    evaluate_model,
    init_model,
    load_checkpoint,
    predict_ite,
    save_checkpoint,
    sweep,
    train,
)

__version__ = "0.1.0"
