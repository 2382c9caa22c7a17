"""Treatment-effect and uplift evaluation metrics.

All functions are pure and operate on 1-D numpy arrays.  The uplift-curve
family uses group-size-corrected cumulative counts over score-ranked
prefixes: sorting is descending by score with ties broken by original index,
and the curve value at prefix ``k`` is

    value(k) = posT(k) - posC(k) * nT(k) / nC(k)

where ``posT/posC`` count positive outcomes and ``nT/nC`` count units of each
arm inside the top-``k`` prefix (a term is zero while its group is empty).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import UnsupportedMetricError

WITHIN_SAMPLE = "within_sample"
OUT_OF_SAMPLE = "out_of_sample"


@dataclass
class MetricsReport:
    """Evaluation results for one split; fields stay ``None`` when the
    required ground truth is unavailable (e.g. no counterfactuals)."""

    sample_scope: str
    pehe: Optional[float] = None
    eps_ate: Optional[float] = None
    eps_att: Optional[float] = None
    policy_risk: Optional[float] = None
    auuc: Optional[float] = None
    qini: Optional[float] = None

    def to_dict(self):
        out = {"sample_scope": self.sample_scope}
        for name in ("pehe", "eps_ate", "eps_att", "policy_risk", "auuc", "qini"):
            value = getattr(self, name)
            if value is not None:
                out[name] = float(value)
        return out


def _check_equal_length(*arrays):
    lengths = {len(a) for a in arrays}
    if len(lengths) != 1:
        raise ValueError(f"length mismatch: {sorted(lengths)}")


def pehe(tau_hat, tau_true):
    """Root-mean-squared error between estimated and true unit-level effects."""
    tau_hat = np.asarray(tau_hat, dtype=float)
    tau_true = np.asarray(tau_true, dtype=float)
    _check_equal_length(tau_hat, tau_true)
    diff = tau_hat - tau_true
    return float(np.sqrt(np.mean(diff * diff)))


def ate_error(tau_hat, tau_true):
    """Absolute error of the average treatment effect."""
    tau_hat = np.asarray(tau_hat, dtype=float)
    tau_true = np.asarray(tau_true, dtype=float)
    _check_equal_length(tau_hat, tau_true)
    return float(abs(np.mean(tau_true) - np.mean(tau_hat)))


def att_error(tau_hat, t, y, randomized_flag):
    """Absolute error of the effect on the treated, against the randomized
    subsample's difference of means."""
    if randomized_flag is None:
        raise UnsupportedMetricError("att_error needs the randomized-subsample flag")
    tau_hat = np.asarray(tau_hat, dtype=float)
    t = np.asarray(t)
    y = np.asarray(y, dtype=float)
    e = np.asarray(randomized_flag)
    _check_equal_length(tau_hat, t, y, e)
    treated = (t == 1) & (e == 1)
    rand_controls = (t == 0) & (e == 1)
    if not treated.any() or not rand_controls.any():
        raise UnsupportedMetricError("randomized subsample lacks one arm")
    att_true = y[treated].mean() - y[rand_controls].mean()
    return float(abs(att_true - tau_hat[t == 1].mean()))


def policy_risk(yhat0, yhat1, t, y):
    """Expected loss of treating exactly the units the model says to treat.

    The policy treats a unit when the predicted effect is positive; each
    policy arm is scored on the units whose observed treatment agrees with it.
    Empty conditional means count as zero.
    """
    yhat0 = np.asarray(yhat0, dtype=float)
    yhat1 = np.asarray(yhat1, dtype=float)
    t = np.asarray(t)
    y = np.asarray(y, dtype=float)
    _check_equal_length(yhat0, yhat1, t, y)
    if not np.isin(y, (0, 1)).all():
        raise UnsupportedMetricError("policy_risk is defined for binary outcomes only")
    pi = (yhat1 - yhat0) > 0
    p_treat_policy = pi.mean()
    gain = 0.0
    mask1 = pi & (t == 1)
    if mask1.any():
        gain += y[mask1].mean() * p_treat_policy
    mask0 = (~pi) & (t == 0)
    if mask0.any():
        gain += y[mask0].mean() * (1.0 - p_treat_policy)
    return float(1.0 - gain)


def _ranked(scores, t, y):
    scores = np.asarray(scores, dtype=float)
    t = np.asarray(t)
    y = np.asarray(y, dtype=float)
    _check_equal_length(scores, t, y)
    if not np.isin(y, (0, 1)).all():
        raise UnsupportedMetricError("uplift metrics are defined for binary outcomes only")
    if (t == 1).sum() == 0 or (t == 0).sum() == 0:
        raise UnsupportedMetricError("both treatment and control units are required")
    order = np.argsort(-scores, kind="stable")
    return t[order], y[order]


def _curve_values(t_sorted, y_sorted):
    n = len(t_sorted)
    is_t = (t_sorted == 1).astype(float)
    n_t = np.cumsum(is_t)
    n_c = np.arange(1, n + 1) - n_t
    pos_t = np.cumsum(y_sorted * is_t)
    pos_c = np.cumsum(y_sorted * (1.0 - is_t))
    ratio = np.divide(n_t, n_c, out=np.zeros(n), where=n_c > 0)
    return pos_t - pos_c * ratio


def uplift_curve(scores, t, y):
    """Cumulative corrected uplift per prefix; returns an ``(n, 2)`` array of
    ``(k, value)`` rows for ``k = 1..n``."""
    t_sorted, y_sorted = _ranked(scores, t, y)
    values = _curve_values(t_sorted, y_sorted)
    ks = np.arange(1, len(values) + 1, dtype=float)
    return np.column_stack([ks, values])


def auuc(scores, t, y):
    """Area under the uplift curve: the mean of the prefix values."""
    curve = uplift_curve(scores, t, y)
    return float(curve[:, 1].mean())


def optimal_uplift_scores(t, y):
    """Score vector whose descending order is the reference best-case ranking:
    outcome-matching units first (treated responders, control non-responders),
    with the larger nuisance group used as the tie-breaker."""
    t = np.asarray(t)
    y = np.asarray(y, dtype=float)
    control_responders = ((y == 1) & (t == 0)).sum()
    treated_nonresponders = ((y == 0) & (t == 1)).sum()
    summand = y if control_responders > treated_nonresponders else (t == 1).astype(float)
    return 2.0 * (y == t).astype(float) + summand


def _area_above_diagonal(values):
    n = len(values)
    ks = np.arange(1, n + 1, dtype=float)
    diagonal = ks / n * values[-1]
    return float(np.sum(values - diagonal))


def qini(scores, t, y):
    """Ratio of the curve-above-diagonal area to the same area under the
    best-case ranking; 1 for the best-case ranking itself, negative when the
    ranking is anti-predictive."""
    t_sorted, y_sorted = _ranked(scores, t, y)
    model_area = _area_above_diagonal(_curve_values(t_sorted, y_sorted))
    best = optimal_uplift_scores(t, y)
    tb_sorted, yb_sorted = _ranked(best, t, y)
    best_area = _area_above_diagonal(_curve_values(tb_sorted, yb_sorted))
    if best_area == 0.0:
        raise UnsupportedMetricError("no uplift signal: best-case area is zero")
    return float(model_area / best_area)
