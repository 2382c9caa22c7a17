"""Prediction heads on top of the latent factors.

Outcome heads read ``concat(confounder, adjustment)``; the treatment head
reads ``concat(instrument, confounder)``; the propensity model is logistic in
the confounder block alone.  Probabilities are clipped to
``[CLIP_EPS, 1 - CLIP_EPS]`` before they enter logs or ratios.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nets import Mlp, init_mlp, mlp_backward, mlp_forward, sigmoid

CLIP_EPS = 0.01


@dataclass
class HeadParams:
    h0: Mlp
    h1: Mlp
    pi: Mlp
    g_weights: np.ndarray
    g_bias: np.ndarray


def init_heads(rng, hyper):
    two_h = 2 * hyper.h
    return HeadParams(
        h0=init_mlp(rng, (two_h, *hyper.head_hidden, 1), activation="elu"),
        h1=init_mlp(rng, (two_h, *hyper.head_hidden, 1), activation="elu"),
        pi=init_mlp(rng, (two_h, *hyper.head_hidden, 1), activation="elu"),
        g_weights=rng.normal(0.0, 1.0 / np.sqrt(hyper.h), size=hyper.h),
        g_bias=np.zeros(()),
    )


def _clipped_sigmoid_fwd(logits):
    s = sigmoid(logits)
    p = np.clip(s, CLIP_EPS, 1.0 - CLIP_EPS)
    grad_mask = s * (1.0 - s) * ((s > CLIP_EPS) & (s < 1.0 - CLIP_EPS))
    return p, grad_mask


def _predict_outcomes_fwd(factors, params, outcome_type):
    z = np.hstack([factors.confounder, factors.adjustment])
    if z.shape[1] != params.h0.in_dim:
        raise ShapeError(f"outcome heads expect width {params.h0.in_dim}, got {z.shape[1]}")
    out0, c0 = mlp_forward(params.h0, z)
    out1, c1 = mlp_forward(params.h1, z)
    out0, out1 = out0[:, 0], out1[:, 0]
    if outcome_type == "binary":
        y0, mask0 = _clipped_sigmoid_fwd(out0)
        y1, mask1 = _clipped_sigmoid_fwd(out1)
    else:
        y0, y1 = out0, out1
        mask0 = mask1 = None
    return (y0, y1), (c0, c1, mask0, mask1, factors.confounder.shape[1])


def _predict_outcomes_bwd(grad_y0, grad_y1, params, cache):
    c0, c1, mask0, mask1, h = cache
    if mask0 is not None:
        grad_y0 = grad_y0 * mask0
        grad_y1 = grad_y1 * mask1
    gz0, g_h0 = mlp_backward(params.h0, c0, grad_y0[:, None])
    gz1, g_h1 = mlp_backward(params.h1, c1, grad_y1[:, None])
    gz = gz0 + gz1
    return (gz[:, :h], gz[:, h:]), {"h0": g_h0, "h1": g_h1}


def predict_outcomes(factors, params, outcome_type="continuous"):
    """Per-arm outcome predictions from the confounder+adjustment factors.

    Returns raw regression values for continuous outcomes and clipped
    probabilities for binary ones.  The instrument factor is not consumed.
    """
    (y0, y1), _ = _predict_outcomes_fwd(factors, params, outcome_type)
    return y0, y1


def _predict_treatment_fwd(factors, params):
    z = np.hstack([factors.instrument, factors.confounder])
    if z.shape[1] != params.pi.in_dim:
        raise ShapeError(f"treatment head expects width {params.pi.in_dim}, got {z.shape[1]}")
    logits, cache = mlp_forward(params.pi, z)
    p, mask = _clipped_sigmoid_fwd(logits[:, 0])
    return p, (cache, mask, factors.instrument.shape[1])


def _predict_treatment_bwd(grad_p, params, cache):
    mlp_cache, mask, h = cache
    gz, g_pi = mlp_backward(params.pi, mlp_cache, (grad_p * mask)[:, None])
    return (gz[:, :h], gz[:, h:]), {"pi": g_pi}


def predict_treatment(factors, params):
    """Treatment-assignment probability from instrument+confounder factors."""
    p, _ = _predict_treatment_fwd(factors, params)
    return p


def _propensity_fwd(delta_rows, params):
    delta_rows = np.asarray(delta_rows, dtype=float)
    logits = delta_rows @ params.g_weights + params.g_bias
    g, mask = _clipped_sigmoid_fwd(logits)
    return g, (delta_rows, mask)


def _propensity_bwd(grad_g, params, cache):
    delta_rows, mask = cache
    g_logit = grad_g * mask
    grad_delta = np.outer(g_logit, params.g_weights)
    return grad_delta, {"g_weights": delta_rows.T @ g_logit,
                        "g_bias": np.asarray(g_logit.sum())}


def propensity(delta_rows, params):
    """Treated-arm propensity ``sigmoid(delta . w + b)``, clipped.

    The arm-conditional value is this for treated units and its complement
    for controls.
    """
    g, _ = _propensity_fwd(delta_rows, params)
    return g


def importance_weights(g_values, t, p_treat):
    """Per-unit factual-loss weights from the clipped propensities.

    ``p_treat`` is the dataset-level treated fraction.  The weight is
    ``1 + odds(own arm marginal) * odds(other arm | confounder)``, which is
    at least 1 and approaches 1 as the propensity of the own arm approaches
    certainty.  Weights are constants with respect to gradient flow.
    """
    if not 0.0 < p_treat < 1.0:
        raise ConfigError(f"p_treat must lie strictly inside (0, 1), got {p_treat}")
    g_values = np.asarray(g_values, dtype=float)
    t = np.asarray(t)
    g_own = np.where(t == 1, g_values, 1.0 - g_values)
    p_own = np.where(t == 1, p_treat, 1.0 - p_treat)
    return 1.0 + (p_own / (1.0 - p_own)) * ((1.0 - g_own) / g_own)
