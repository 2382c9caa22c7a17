"""Training loop, ablation grid, hyperparameter sweep, and checkpoints.

One training iteration samples a mini-batch, runs the encoder and heads,
assembles the active loss terms, and applies a single adaptive-moment update
to every parameter that received a gradient.  Components disabled by flag or
weighted zero are skipped entirely, so their parameters are bitwise
untouched.  All randomness derives from one root seed, split per consumer
(initialization, batch order).
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics as M
from .config import ABLATION_GRID, AblationFlags, Hyperparams, fingerprint
from .data import Scaler, TaggedDataset
from .encoder import (
    GateVectors,
    _encode_bwd,
    _encode_fwd,
    _orthogonality_penalty_bwd,
    init_expert_attention,
    init_gates,
    init_softmax_mix,
    init_split_encoder,
    orthogonality_penalty,
)
from .errors import NumericError, TrainingDiverged
from .heads import (
    HeadParams,
    _predict_outcomes_bwd,
    _predict_outcomes_fwd,
    _predict_treatment_bwd,
    _predict_treatment_fwd,
    _propensity_bwd,
    _propensity_fwd,
    importance_weights,
    init_heads,
)
from .losses import (
    LossBreakdown,
    _bce_fwd,
    _factual_fwd,
    _imbalance_bwd,
    _imbalance_fwd,
    _iw_fwd,
    total_loss,
)
from .params import add_grads, iter_arrays


@dataclass
class Model:
    """Trained (or freshly initialized) parameters plus structural facts."""

    encoder: object
    gates: GateVectors
    heads: HeadParams
    encoder_kind: str
    outcome_type: str
    apply_gating: bool
    use_layer_norm: bool
    d: int
    h: int
    scaler: Optional[Scaler] = None

    def trainable(self):
        yield from iter_arrays(self.encoder, "encoder")
        yield from iter_arrays(self.gates, "gates")
        yield from iter_arrays(self.heads, "heads")

    def flat(self):
        return {path: arr.copy() for path, arr in self.trainable()}


_ENCODER_INITS = {
    "mema": init_expert_attention,
    "mmoe": init_softmax_mix,
    "hd": init_split_encoder,
}


def init_model(hyper, flags, d, outcome_type, rng):
    encoder = _ENCODER_INITS[flags.encoder_kind](rng, d, hyper)
    gates = init_gates(rng, hyper.h)
    heads = init_heads(rng, hyper)
    return Model(
        encoder=encoder, gates=gates, heads=heads,
        encoder_kind=flags.encoder_kind, outcome_type=outcome_type,
        apply_gating=bool(flags.use_lor and hyper.zeta > 0),
        use_layer_norm=bool(hyper.layer_norm),
        d=d, h=hyper.h,
    )


def _reg_paths(model):
    cached = getattr(model, "_reg_cache", None)
    if cached is None:
        cached = [(path, arr) for path, arr in model.trainable()
                  if not (path.startswith("gates") or "bias" in path)]
        model._reg_cache = cached
    return cached


def regularization_value(model):
    """Sum of squared weight parameters, excluding biases and gate vectors."""
    return float(sum(np.sum(arr * arr) for _, arr in _reg_paths(model)))


def model_forward(model, x):
    """Factors and outcome predictions for preprocessed covariates."""
    gates = model.gates if model.apply_gating else None
    bundle, _ = _encode_fwd(x, model.encoder, gates, model.use_layer_norm)
    (y0, y1), _ = _predict_outcomes_fwd(bundle, model.heads, model.outcome_type)
    return bundle, y0, y1


def predict_ite(model, x):
    """Per-unit effect estimate ``yhat1 - yhat0``; expects covariates in the
    same (standardized) space the model was trained on."""
    _, y0, y1 = model_forward(model, np.asarray(x, dtype=float))
    return y1 - y0


def _loss_and_grads(model, x, t, y, hyper, flags, p_treat):
    """One batch forward pass, term assembly, and full backward pass."""
    gates = model.gates if model.apply_gating else None
    bundle, enc_cache = _encode_fwd(x, model.encoder, gates, model.use_layer_norm)
    (y0, y1), out_cache = _predict_outcomes_fwd(bundle, model.heads, model.outcome_type)

    grads = {}
    d_inst = np.zeros_like(bundle.instrument)
    d_conf = np.zeros_like(bundle.confounder)
    d_adj = np.zeros_like(bundle.adjustment)
    parts = {}

    isw_active = flags.use_isw
    if isw_active:
        g_values, g_cache = _propensity_fwd(bundle.confounder, model.heads)
        omega = importance_weights(g_values, t, p_treat)
    else:
        omega = np.ones(len(t))

    parts["pred"], (d_y1, d_y0) = _factual_fwd(y0, y1, y, t, omega, model.outcome_type)
    (g_conf, g_adj), head_grads = _predict_outcomes_bwd(d_y0, d_y1, model.heads, out_cache)
    d_conf += g_conf
    d_adj += g_adj
    add_grads(grads, head_grads, "heads")

    if hyper.alpha > 0:
        that, t_cache = _predict_treatment_fwd(bundle, model.heads)
        parts["treat"], d_that = _bce_fwd(that, t.astype(float))
        (g_inst, g_conf), pi_grads = _predict_treatment_bwd(d_that, model.heads, t_cache)
        d_inst += hyper.alpha * g_inst
        d_conf += hyper.alpha * g_conf
        add_grads(grads, pi_grads, "heads", scale=hyper.alpha)

    if flags.use_imbalance and hyper.beta > 0:
        parts["disc"], disc_cache = _imbalance_fwd(
            bundle, t, y, model.outcome_type, hyper.discrepancy_kind)
        g_gam, g_ups = _imbalance_bwd(hyper.discrepancy_kind, disc_cache)
        d_inst += hyper.beta * g_gam
        d_adj += hyper.beta * g_ups

    if model.apply_gating:
        parts["lor"] = orthogonality_penalty(model.gates)
        add_grads(grads, _orthogonality_penalty_bwd(model.gates), "gates",
                  scale=hyper.zeta)

    if isw_active:
        parts["iw"], d_g = _iw_fwd(g_values, t)
        if hyper.eta > 0:
            g_conf, g_grads = _propensity_bwd(d_g, model.heads, g_cache)
            d_conf += hyper.eta * g_conf
            add_grads(grads, g_grads, "heads", scale=hyper.eta)

    if hyper.lambda_reg > 0:
        parts["reg"] = regularization_value(model)
        for path, arr in _reg_paths(model):
            if path in grads:
                grads[path] += 2.0 * hyper.lambda_reg * arr
            else:
                grads[path] = 2.0 * hyper.lambda_reg * arr

    breakdown = total_loss(parts, hyper)

    _, enc_grads, gate_grads = _encode_bwd((d_inst, d_conf, d_adj), model.encoder, enc_cache)
    add_grads(grads, enc_grads, "encoder")
    if gate_grads is not None:
        add_grads(grads, gate_grads, "gates")
    return breakdown, grads


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(model, grads, state, hyper, eps=1e-8):
    """In-place adaptive-moment update of every parameter with a gradient."""
    state.step += 1
    b1, b2 = hyper.adam_beta1, hyper.adam_beta2
    correct1 = 1.0 - b1 ** state.step
    correct2 = 1.0 - b2 ** state.step
    arrays = dict(model.trainable())
    for path in sorted(grads):
        g = grads[path]
        if path not in state.m:
            state.m[path] = np.zeros_like(g)
            state.v[path] = np.zeros_like(g)
        state.m[path] = b1 * state.m[path] + (1.0 - b1) * g
        state.v[path] = b2 * state.v[path] + (1.0 - b2) * g * g
        m_hat = state.m[path] / correct1
        v_hat = state.v[path] / correct2
        arrays[path] -= hyper.learning_rate * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainingHistory:
    """Per-iteration loss records plus periodic validation snapshots."""

    seed: int
    config_fingerprint: str
    iterations: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)
    validations: list = field(default_factory=list)

    def record(self, breakdown):
        self.iterations.append(breakdown)
        self.timestamps.append(time.time())

    def record_validation(self, iteration, criterion, extra=None):
        entry = {"iteration": iteration, "criterion": criterion}
        if extra:
            entry.update(extra)
        self.validations.append(entry)

    def to_csv(self, path):
        """history.csv schema: iteration,pred,treat,disc,lor,iw,reg,total."""
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write("iteration," + ",".join(LossBreakdown.CSV_FIELDS) + "\n")
            for i, b in enumerate(self.iterations, start=1):
                fh.write(f"{i}," + ",".join(repr(v) for v in b.as_row()) + "\n")


@dataclass
class TrainResult:
    model: Model
    history: TrainingHistory
    initial_params: dict
    final_params: dict
    best_criterion: float


def validation_criterion(model, dataset, hyper, flags):
    """Unweighted factual loss plus ``beta`` times the imbalance loss, both on
    the full given split; uses observable quantities only."""
    bundle, y0, y1 = model_forward(model, dataset.x)
    pred, _ = _factual_fwd(y0, y1, dataset.y_factual, dataset.t,
                           np.ones(dataset.n), model.outcome_type)
    crit = pred
    if flags.use_imbalance and hyper.beta > 0:
        disc, _ = _imbalance_fwd(bundle, dataset.t, dataset.y_factual,
                                 model.outcome_type, hyper.discrepancy_kind)
        crit = crit + hyper.beta * disc
    return float(crit)


def train(splits, hyper, flags, seed):
    """Run the mini-batch training loop and return the best-validation model.

    ``splits`` is a ``(train, validation, test)`` triple of
    :class:`TaggedDataset`; covariates are used as given.  Deterministic for
    a fixed seed.  Raises :class:`TrainingDiverged` (history attached) when
    the total loss stops being finite.
    """
    train_ds, val_ds, _ = splits
    root = np.random.SeedSequence(seed)
    init_ss, batch_ss = root.spawn(2)
    model = init_model(hyper, flags, train_ds.d, train_ds.outcome_type,
                       np.random.default_rng(init_ss))
    initial_params = model.flat()
    batch_rng = np.random.default_rng(batch_ss)
    p_treat = float(train_ds.t.mean())
    history = TrainingHistory(seed=seed, config_fingerprint=fingerprint({
        "hyper": hyper, "flags": flags, "seed": seed}))
    adam = AdamState()

    x_all, t_all, y_all = train_ds.x, train_ds.t, train_ds.y_factual
    n = train_ds.n
    order = batch_rng.permutation(n)
    cursor = 0
    best_criterion = np.inf
    best_params = None

    y_binary = train_ds.outcome_type == "binary"
    y_all = y_all.astype(float)

    for it in range(1, hyper.max_iterations + 1):
        if cursor >= n:
            order = batch_rng.permutation(n)
            cursor = 0
        idx = order[cursor: cursor + hyper.batch_size]
        cursor += hyper.batch_size
        try:
            breakdown, grads = _loss_and_grads(
                model, x_all[idx], t_all[idx], y_all[idx], hyper, flags, p_treat)
        except NumericError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}", history=history) from exc
        adam_step(model, grads, adam, hyper)
        history.record(breakdown)

        if it % hyper.eval_interval == 0 or it == hyper.max_iterations:
            crit = validation_criterion(model, val_ds, hyper, flags)
            extra = {}
            tau_true = val_ds.tau_true
            if tau_true is not None:
                extra["pehe"] = M.pehe(predict_ite(model, val_ds.x), tau_true)
            history.record_validation(it, crit, extra)
            if crit < best_criterion:
                best_criterion = crit
                best_params = model.flat()

    final_params = model.flat()
    if best_params is not None:
        assign_flat_to_model(model, best_params)
    return TrainResult(model=model, history=history,
                       initial_params=initial_params, final_params=final_params,
                       best_criterion=float(best_criterion))


def train_with_restarts(splits, hyper, flags, seed, restarts=1):
    """Train ``restarts`` times from different root seeds and keep the run
    with the best validation criterion.  Restart ``r`` uses root seed
    ``seed * 10 + r`` so different dataset seeds never share streams."""
    best = None
    for r in range(restarts):
        result = train(splits, hyper, flags, seed * 10 + r if restarts > 1 else seed)
        if best is None or result.best_criterion < best.best_criterion:
            best = result
    return best


def assign_flat_to_model(model, flat):
    arrays = dict(model.trainable())
    for path, arr in arrays.items():
        arr[...] = flat[path]


def build_model_like(hyper, flags, d, outcome_type, flat):
    """Materialize a model with the given flat parameter values."""
    model = init_model(hyper, flags, d, outcome_type, np.random.default_rng(0))
    assign_flat_to_model(model, flat)
    return model


def evaluate_model(model, dataset, scope):
    """Metrics report for a dataset in model space; fields without the needed
    ground truth stay unset."""
    bundle, y0, y1 = model_forward(model, dataset.x)
    tau_hat = y1 - y0
    report = M.MetricsReport(sample_scope=scope)
    tau_true = dataset.tau_true
    if tau_true is not None:
        report.pehe = M.pehe(tau_hat, tau_true)
        report.eps_ate = M.ate_error(tau_hat, tau_true)
    if dataset.randomized_flag is not None:
        try:
            report.eps_att = M.att_error(tau_hat, dataset.t, dataset.y_factual,
                                         dataset.randomized_flag)
        except Exception:
            report.eps_att = None
    if dataset.outcome_type == "binary":
        report.policy_risk = M.policy_risk(y0, y1, dataset.t, dataset.y_factual)
        try:
            report.auuc = M.auuc(tau_hat, dataset.t, dataset.y_factual)
            report.qini = M.qini(tau_hat, dataset.t, dataset.y_factual)
        except Exception:
            pass
    return report


def concat_datasets(a, b):
    """Row-wise concatenation carrying optional fields when both sides have
    them."""

    def cat(u, v):
        return None if u is None or v is None else np.concatenate([u, v])

    return TaggedDataset(
        x=np.vstack([a.x, b.x]),
        t=np.concatenate([a.t, b.t]),
        y_factual=np.concatenate([a.y_factual, b.y_factual]),
        y_counterfactual=cat(a.y_counterfactual, b.y_counterfactual),
        mu0=cat(a.mu0, b.mu0),
        mu1=cat(a.mu1, b.mu1),
        randomized_flag=cat(a.randomized_flag, b.randomized_flag),
        outcome_type=a.outcome_type,
        metadata=dict(a.metadata),
    )


@dataclass
class AblationRow:
    flags: AblationFlags
    seed: int
    within: M.MetricsReport
    out: M.MetricsReport


def ablate(splits, hyper, seed, restarts=1):
    """Train the six ablation configurations and report within-sample and
    out-of-sample metrics for each; ``restarts > 1`` picks each row's model
    by validation criterion across restarts."""
    train_ds, val_ds, test_ds = splits
    within_ds = concat_datasets(train_ds, val_ds)
    rows = []
    for flags in ABLATION_GRID:
        result = train_with_restarts(splits, hyper, flags, seed, restarts)
        rows.append(AblationRow(
            flags=flags, seed=seed,
            within=evaluate_model(result.model, within_ds, M.WITHIN_SAMPLE),
            out=evaluate_model(result.model, test_ds, M.OUT_OF_SAMPLE),
        ))
    return rows


@dataclass
class SweepEntry:
    overrides: dict
    criterion: float
    history: Optional[TrainingHistory]
    error: Optional[str] = None


def expand_grid(grid):
    """Cartesian product of a ``name -> values`` mapping, as override dicts."""
    names = sorted(grid)
    combos = itertools.product(*(grid[name] for name in names))
    return [dict(zip(names, combo)) for combo in combos]


def sweep(splits, base_hyper, grid, seed, flags=None):
    """Train one model per grid point and rank them by validation criterion.

    Individual failures are recorded (criterion ``inf``) and the sweep
    continues.  Returns entries sorted best-first.
    """
    flags = flags or AblationFlags()
    entries = []
    for overrides in expand_grid(grid):
        hyper = replace(base_hyper, **overrides)
        try:
            result = train(splits, hyper, flags, seed)
            entries.append(SweepEntry(overrides=overrides,
                                      criterion=result.best_criterion,
                                      history=result.history))
        except TrainingDiverged as exc:
            entries.append(SweepEntry(overrides=overrides, criterion=float("inf"),
                                      history=exc.history, error=str(exc)))
    return sorted(entries, key=lambda e: e.criterion)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model, hyper, flags, config_fingerprint="", extra=None):
    """Single-file checkpoint: named parameter arrays plus a JSON meta entry.

    Arrays are stored as float64 binary so a round trip is bit-exact.
    """
    payload = {f"param:{p}": arr for p, arr in model.trainable()}
    if model.scaler is not None:
        payload["scaler:mean"] = model.scaler.mean
        payload["scaler:std"] = model.scaler.std
    meta = {
        "format": "factorcfr-checkpoint-v1",
        "fingerprint": config_fingerprint,
        "d": model.d,
        "outcome_type": model.outcome_type,
        "hyper": {f: getattr(hyper, f) for f in (
            "alpha", "beta", "zeta", "eta", "lambda_reg", "learning_rate",
            "batch_size", "max_iterations", "m_experts", "n_heads", "d_m", "h",
            "discrepancy_kind", "layer_norm", "adam_beta1", "adam_beta2",
            "eval_interval")},
        "hyper_tuples": {f: list(getattr(hyper, f)) for f in (
            "expert_hidden", "tower_hidden", "head_hidden")},
        "flags": {f: getattr(flags, f) for f in (
            "encoder_kind", "use_lor", "use_imbalance", "use_isw")},
    }
    if extra:
        meta.update(extra)
    payload["meta"] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **payload)


def load_checkpoint(path):
    """Rebuild ``(model, hyper, flags, meta)`` from :func:`save_checkpoint`."""
    archive = np.load(path, allow_pickle=False)
    meta = json.loads(str(archive["meta"]))
    hyper_kwargs = dict(meta["hyper"])
    for name, value in meta["hyper_tuples"].items():
        hyper_kwargs[name] = tuple(value)
    hyper = Hyperparams(**hyper_kwargs)
    flags = AblationFlags(**meta["flags"])
    model = init_model(hyper, flags, meta["d"], meta["outcome_type"],
                       np.random.default_rng(0))
    flat = {key[len("param:"):]: archive[key] for key in archive.files
            if key.startswith("param:")}
    assign_flat_to_model(model, flat)
    if "scaler:mean" in archive.files:
        model.scaler = Scaler(mean=archive["scaler:mean"], std=archive["scaler:std"])
    return model, hyper, flags, meta
