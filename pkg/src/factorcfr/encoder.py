"""Encoders that map covariates to three latent factor blocks.

The full encoder runs a bank of expert MLPs, adds learned per-expert position
vectors, lets the expert tokens exchange information through multi-head
scaled dot-product attention, mean-pools the tokens, and applies one
feed-forward tower per factor (instrument, confounder, adjustment).  Gate
vectors then scale each factor element-wise; an orthogonality penalty on the
unit-normalized gates softly separates the factors.

Two reduced variants back the ablation grid: ``mmoe`` replaces attention with
per-task softmax mixing over the shared experts, and ``hd`` uses three fully
independent MLPs of matched total parameter count.

Forward functions come in pairs: a public one returning the result, and an
internal ``*_fwd`` returning ``(result, cache)`` consumed by the matching
``*_bwd``.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .errors import ConfigError, ShapeError
from .nets import (
    init_mlp,
    layer_norm,
    layer_norm_backward,
    mlp_backward,
    mlp_forward,
    softmax,
    softmax_backward,
)

FACTOR_NAMES = ("instrument", "confounder", "adjustment")


@dataclass
class FactorBundle:
    """The three latent factor matrices for a batch, each ``batch x h``."""

    instrument: np.ndarray
    confounder: np.ndarray
    adjustment: np.ndarray

    def __post_init__(self):
        shapes = {self.instrument.shape, self.confounder.shape, self.adjustment.shape}
        if len(shapes) != 1:
            raise ShapeError(f"factor blocks disagree on shape: {shapes}")

    def as_tuple(self):
        return (self.instrument, self.confounder, self.adjustment)


@dataclass
class GateVectors:
    """Unconstrained gate parameters; consumers see the unit-normalized form."""

    raw_treat: np.ndarray
    raw_conf: np.ndarray
    raw_adj: np.ndarray

    def normalized(self):
        return tuple(v / np.linalg.norm(v) for v in (self.raw_treat, self.raw_conf, self.raw_adj))


def init_gates(rng, h):
    return GateVectors(
        raw_treat=rng.normal(size=h),
        raw_conf=rng.normal(size=h),
        raw_adj=rng.normal(size=h),
    )


@dataclass
class ExpertAttentionParams:
    """Full encoder: experts + position vectors + attention + task towers."""

    experts: list
    pos_encoding: np.ndarray
    w_query: list
    w_key: list
    w_value: list
    task_towers: list

    @property
    def m(self):
        return len(self.experts)

    @property
    def d_m(self):
        return self.pos_encoding.shape[1]

    @property
    def n_heads(self):
        return len(self.w_query)


@dataclass
class SoftmaxMixParams:
    """Shared experts mixed per task by a softmax gating network."""

    experts: list
    mix_weights: list
    mix_biases: list
    task_towers: list


@dataclass
class SplitEncoderParams:
    """Three fully independent covariate-to-factor networks."""

    nets: list


def init_expert_attention(rng, d, hyper):
    if hyper.d_m % hyper.n_heads != 0:
        raise ConfigError("d_m must be divisible by n_heads")
    d_k = hyper.d_m // hyper.n_heads
    experts = [
        init_mlp(rng, (d, *hyper.expert_hidden, hyper.d_m), activation="gelu")
        for _ in range(hyper.m_experts)
    ]
    pos = rng.normal(0.0, 1.0 / np.sqrt(hyper.d_m), size=(hyper.m_experts, hyper.d_m))
    w_query = [rng.normal(0.0, 1.0 / np.sqrt(hyper.d_m), size=(hyper.d_m, d_k))
               for _ in range(hyper.n_heads)]
    w_key = [rng.normal(0.0, 1.0 / np.sqrt(hyper.d_m), size=(hyper.d_m, d_k))
             for _ in range(hyper.n_heads)]
    w_value = [rng.normal(0.0, 1.0 / np.sqrt(hyper.d_m), size=(hyper.d_m, d_k))
               for _ in range(hyper.n_heads)]
    towers = [
        init_mlp(rng, (hyper.d_m, *hyper.tower_hidden, hyper.h), activation="elu")
        for _ in FACTOR_NAMES
    ]
    return ExpertAttentionParams(
        experts=experts, pos_encoding=pos,
        w_query=w_query, w_key=w_key, w_value=w_value, task_towers=towers,
    )


def init_softmax_mix(rng, d, hyper):
    experts = [
        init_mlp(rng, (d, *hyper.expert_hidden, hyper.d_m), activation="gelu")
        for _ in range(hyper.m_experts)
    ]
    mix_w = [rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, hyper.m_experts))
             for _ in FACTOR_NAMES]
    mix_b = [np.zeros(hyper.m_experts) for _ in FACTOR_NAMES]
    towers = [
        init_mlp(rng, (hyper.d_m, *hyper.tower_hidden, hyper.h), activation="elu")
        for _ in FACTOR_NAMES
    ]
    return SoftmaxMixParams(experts=experts, mix_weights=mix_w, mix_biases=mix_b,
                            task_towers=towers)


def full_encoder_param_count(d, hyper):
    """Parameter count of the full encoder at these sizes."""
    reference = init_expert_attention(np.random.default_rng(0), d, hyper)
    total = sum(e.num_params() for e in reference.experts)
    total += reference.pos_encoding.size
    total += sum(w.size for w in reference.w_query + reference.w_key + reference.w_value)
    total += sum(tw.num_params() for tw in reference.task_towers)
    return total


def _split_encoder_width(d, hyper):
    """Hidden width giving roughly the same total parameter count as the
    full encoder, split across three two-hidden-layer nets (depth comparable
    to the expert-plus-tower path)."""
    per_net = full_encoder_param_count(d, hyper) / 3.0
    h = hyper.h
    # (d+1)w + (w+1)w + (w+1)h = per_net
    b = d + 2 + h
    width = (-b + np.sqrt(b * b - 4.0 * (h - per_net))) / 2.0
    return max(4, int(round(width)))


def init_split_encoder(rng, d, hyper):
    width = _split_encoder_width(d, hyper)
    nets = [init_mlp(rng, (d, width, width, hyper.h), activation="gelu")
            for _ in FACTOR_NAMES]
    return SplitEncoderParams(nets=nets)


# ---------------------------------------------------------------------------
# Full encoder forward/backward


def _expert_forward_fwd(x, params, use_layer_norm=False):
    if x.ndim != 2 or x.shape[1] != params.experts[0].in_dim:
        raise ShapeError(
            f"expected batch x {params.experts[0].in_dim} covariates, got {x.shape}")
    outs, caches = [], []
    for j, expert in enumerate(params.experts):
        out, cache = mlp_forward(expert, x)
        outs.append(out + params.pos_encoding[j])
        caches.append(cache)
    tokens = np.stack(outs, axis=1)
    ln_cache = None
    if use_layer_norm:
        tokens, ln_cache = layer_norm(tokens)
    return tokens, (caches, ln_cache)


def _expert_forward_bwd(grad_tokens, params, cache):
    caches, ln_cache = cache
    if ln_cache is not None:
        grad_tokens = layer_norm_backward(grad_tokens, ln_cache)
    grad_x = None
    expert_grads = []
    pos_grad = grad_tokens.sum(axis=0)
    for j, expert in enumerate(params.experts):
        g_x, g_e = mlp_backward(expert, caches[j], grad_tokens[:, j, :])
        expert_grads.append(g_e)
        grad_x = g_x if grad_x is None else grad_x + g_x
    return grad_x, {"experts": expert_grads, "pos_encoding": pos_grad}


def expert_forward(x, params, use_layer_norm=False):
    """Expert outputs plus their position vectors: ``batch x m x d_m`` tokens."""
    tokens, _ = _expert_forward_fwd(np.asarray(x, dtype=float), params, use_layer_norm)
    return tokens


def _attention_fwd(tokens, params):
    d_m = params.d_m
    if tokens.ndim != 3 or tokens.shape[2] != d_m:
        raise ShapeError(f"tokens must be batch x m x {d_m}, got {tokens.shape}")
    d_k = params.w_query[0].shape[1]
    scale = 1.0 / np.sqrt(d_k)
    heads, head_caches = [], []
    for wq, wk, wv in zip(params.w_query, params.w_key, params.w_value):
        q = tokens @ wq
        k = tokens @ wk
        v = tokens @ wv
        scores = q @ k.transpose(0, 2, 1) * scale
        weights = softmax(scores, axis=-1)
        heads.append(weights @ v)
        head_caches.append((q, k, v, weights))
    attended = np.concatenate(heads, axis=-1)
    return attended, (tokens, head_caches, scale)


def _attention_bwd(grad_attended, params, cache):
    tokens, head_caches, scale = cache
    d_v = params.w_value[0].shape[1]
    grad_tokens = np.zeros_like(tokens)
    g_wq, g_wk, g_wv = [], [], []
    for i, (wq, wk, wv) in enumerate(zip(params.w_query, params.w_key, params.w_value)):
        q, k, v, weights = head_caches[i]
        g_head = grad_attended[..., i * d_v: (i + 1) * d_v]
        g_weights = g_head @ v.transpose(0, 2, 1)
        g_v = weights.transpose(0, 2, 1) @ g_head
        g_scores = softmax_backward(g_weights, weights, axis=-1) * scale
        g_q = g_scores @ k
        g_k = g_scores.transpose(0, 2, 1) @ q
        g_wq.append(np.einsum("bmd,bmk->dk", tokens, g_q))
        g_wk.append(np.einsum("bmd,bmk->dk", tokens, g_k))
        g_wv.append(np.einsum("bmd,bmk->dk", tokens, g_v))
        grad_tokens += g_q @ wq.T + g_k @ wk.T + g_v @ wv.T
    return grad_tokens, {"w_query": g_wq, "w_key": g_wk, "w_value": g_wv}


def multi_head_attention(tokens, params):
    """Scaled dot-product attention over the expert tokens, heads concatenated."""
    attended, _ = _attention_fwd(np.asarray(tokens, dtype=float), params)
    return attended


def attention_weights(tokens, params):
    """Per-head attention weight matrices (softmax rows sum to one)."""
    _, (_, head_caches, _) = _attention_fwd(np.asarray(tokens, dtype=float), params)
    return [cache[3] for cache in head_caches]


def _task_heads_fwd(attended, params):
    pooled = attended.mean(axis=1)
    raws, caches = [], []
    for tower in params.task_towers:
        out, cache = mlp_forward(tower, pooled)
        raws.append(out)
        caches.append(cache)
    return tuple(raws), (attended.shape[1], caches)


def _task_heads_bwd(grad_raws, params, cache):
    m, caches = cache
    grad_pooled = None
    tower_grads = []
    for tower, tcache, g in zip(params.task_towers, caches, grad_raws):
        g_p, g_t = mlp_backward(tower, tcache, g)
        tower_grads.append(g_t)
        grad_pooled = g_p if grad_pooled is None else grad_pooled + g_p
    grad_attended = np.repeat(grad_pooled[:, None, :] / m, m, axis=1)
    return grad_attended, {"task_towers": tower_grads}


def task_heads(attended, params):
    """Mean-pool the attended tokens and run each factor tower."""
    raws, _ = _task_heads_fwd(np.asarray(attended, dtype=float), params)
    return raws


# ---------------------------------------------------------------------------
# Gates


def _apply_gates_fwd(raw_factors, gates):
    raws = [np.asarray(r, dtype=float) for r in raw_factors]
    raw_gates = (gates.raw_treat, gates.raw_conf, gates.raw_adj)
    h = raw_gates[0].shape[0]
    for r in raws:
        if r.shape[1] != h:
            raise ShapeError(f"factor width {r.shape[1]} != gate length {h}")
    norms = [np.linalg.norm(v) for v in raw_gates]
    units = [v / nrm for v, nrm in zip(raw_gates, norms)]
    gated = [r * u for r, u in zip(raws, units)]
    return FactorBundle(*gated), (raws, units, norms)


def _apply_gates_bwd(grad_bundle, cache):
    raws, units, norms = cache
    grads_raw_factors = []
    grads_gates = []
    for g_out, raw, u, nrm in zip(grad_bundle, raws, units, norms):
        grads_raw_factors.append(g_out * u)
        d_u = (g_out * raw).sum(axis=0)
        grads_gates.append((d_u - (d_u @ u) * u) / nrm)
    gate_grads = {"raw_treat": grads_gates[0], "raw_conf": grads_gates[1],
                  "raw_adj": grads_gates[2]}
    return tuple(grads_raw_factors), gate_grads


def apply_gates(raw_factors, gates):
    """Element-wise product of each raw factor with its unit-normalized gate."""
    bundle, _ = _apply_gates_fwd(raw_factors, gates)
    return bundle


def orthogonality_penalty(gates, squared=True):
    """Sum of (squared) pairwise dot products of the unit-normalized gates.

    The squared form is zero exactly when the gates are pairwise orthogonal
    and is invariant to sign flips; ``squared=False`` keeps the raw sum of
    dot products for compatibility (it rewards anti-alignment).  Cost is
    linear in the gate length per pair.
    """
    u_t, u_c, u_a = gates.normalized()
    dots = np.array([u_t @ u_c, u_c @ u_a, u_t @ u_a])
    if squared:
        return float(np.sum(dots * dots))
    return float(np.sum(dots))


def _orthogonality_penalty_bwd(gates, squared=True):
    """Gradient of the penalty with respect to the raw gate vectors."""
    raw = (gates.raw_treat, gates.raw_conf, gates.raw_adj)
    norms = [np.linalg.norm(v) for v in raw]
    units = [v / nrm for v, nrm in zip(raw, norms)]
    pairs = ((0, 1), (1, 2), (0, 2))
    d_units = [np.zeros_like(u) for u in units]
    for a, b in pairs:
        dot = units[a] @ units[b]
        coef = 2.0 * dot if squared else 1.0
        d_units[a] += coef * units[b]
        d_units[b] += coef * units[a]
    grads = [(du - (du @ u) * u) / nrm for du, u, nrm in zip(d_units, units, norms)]
    return {"raw_treat": grads[0], "raw_conf": grads[1], "raw_adj": grads[2]}


# ---------------------------------------------------------------------------
# Reduced encoders


def _softmax_mix_fwd(x, params):
    if x.ndim != 2 or x.shape[1] != params.experts[0].in_dim:
        raise ShapeError(
            f"expected batch x {params.experts[0].in_dim} covariates, got {x.shape}")
    outs, expert_caches = [], []
    for expert in params.experts:
        out, cache = mlp_forward(expert, x)
        outs.append(out)
        expert_caches.append(cache)
    stack = np.stack(outs, axis=1)
    raws, mix_caches, tower_caches = [], [], []
    for k, tower in enumerate(params.task_towers):
        logits = x @ params.mix_weights[k] + params.mix_biases[k]
        mix = softmax(logits, axis=-1)
        blended = np.einsum("bm,bmd->bd", mix, stack)
        out, tcache = mlp_forward(tower, blended)
        raws.append(out)
        mix_caches.append(mix)
        tower_caches.append(tcache)
    return tuple(raws), (x, stack, expert_caches, mix_caches, tower_caches)


def _softmax_mix_bwd(grad_raws, params, cache):
    x, stack, expert_caches, mix_caches, tower_caches = cache
    grad_stack = np.zeros_like(stack)
    grad_x = np.zeros_like(x)
    tower_grads, mix_w_grads, mix_b_grads = [], [], []
    for k, tower in enumerate(params.task_towers):
        g_blended, g_tower = mlp_backward(tower, tower_caches[k], grad_raws[k])
        tower_grads.append(g_tower)
        mix = mix_caches[k]
        grad_stack += mix[:, :, None] * g_blended[:, None, :]
        g_mix = np.einsum("bd,bmd->bm", g_blended, stack)
        g_logits = softmax_backward(g_mix, mix, axis=-1)
        mix_w_grads.append(x.T @ g_logits)
        mix_b_grads.append(g_logits.sum(axis=0))
        grad_x += g_logits @ params.mix_weights[k].T
    expert_grads = []
    for j, expert in enumerate(params.experts):
        g_x, g_e = mlp_backward(expert, expert_caches[j], grad_stack[:, j, :])
        expert_grads.append(g_e)
        grad_x += g_x
    return grad_x, {"experts": expert_grads, "mix_weights": mix_w_grads,
                    "mix_biases": mix_b_grads, "task_towers": tower_grads}


def _split_encoder_fwd(x, params):
    if x.ndim != 2 or x.shape[1] != params.nets[0].in_dim:
        raise ShapeError(
            f"expected batch x {params.nets[0].in_dim} covariates, got {x.shape}")
    raws, caches = [], []
    for net in params.nets:
        out, cache = mlp_forward(net, x)
        raws.append(out)
        caches.append(cache)
    return tuple(raws), caches


def _split_encoder_bwd(grad_raws, params, caches):
    grad_x = None
    net_grads = []
    for net, cache, g in zip(params.nets, caches, grad_raws):
        g_x, g_n = mlp_backward(net, cache, g)
        net_grads.append(g_n)
        grad_x = g_x if grad_x is None else grad_x + g_x
    return grad_x, {"nets": net_grads}


# ---------------------------------------------------------------------------
# Composition


def _raw_factors_fwd(x, encoder, use_layer_norm=False):
    if isinstance(encoder, ExpertAttentionParams):
        tokens, c1 = _expert_forward_fwd(x, encoder, use_layer_norm)
        attended, c2 = _attention_fwd(tokens, encoder)
        raws, c3 = _task_heads_fwd(attended, encoder)
        return raws, ("mema", c1, c2, c3)
    if isinstance(encoder, SoftmaxMixParams):
        raws, cache = _softmax_mix_fwd(x, encoder)
        return raws, ("mmoe", cache)
    if isinstance(encoder, SplitEncoderParams):
        raws, cache = _split_encoder_fwd(x, encoder)
        return raws, ("hd", cache)
    raise ConfigError(f"unknown encoder parameters: {type(encoder).__name__}")


def _raw_factors_bwd(grad_raws, encoder, cache):
    kind = cache[0]
    if kind == "mema":
        _, c1, c2, c3 = cache
        grad_attended, tower_grads = _task_heads_bwd(grad_raws, encoder, c3)
        grad_tokens, attn_grads = _attention_bwd(grad_attended, encoder, c2)
        grad_x, expert_grads = _expert_forward_bwd(grad_tokens, encoder, c1)
        return grad_x, {**expert_grads, **attn_grads, **tower_grads}
    if kind == "mmoe":
        return _softmax_mix_bwd(grad_raws, encoder, cache[1])
    return _split_encoder_bwd(grad_raws, encoder, cache[1])


def _encode_fwd(x, encoder, gates, use_layer_norm=False):
    x = np.asarray(x, dtype=float)
    raws, enc_cache = _raw_factors_fwd(x, encoder, use_layer_norm)
    if gates is None:
        bundle = FactorBundle(*raws)
        return bundle, (enc_cache, None)
    bundle, gate_cache = _apply_gates_fwd(raws, gates)
    return bundle, (enc_cache, gate_cache)


def _encode_bwd(grad_bundle, encoder, cache):
    enc_cache, gate_cache = cache
    if gate_cache is None:
        grad_raws = tuple(grad_bundle)
        gate_grads = None
    else:
        grad_raws, gate_grads = _apply_gates_bwd(grad_bundle, gate_cache)
    grad_x, enc_grads = _raw_factors_bwd(grad_raws, encoder, enc_cache)
    return grad_x, enc_grads, gate_grads


def encode(x, encoder, gates=None, use_layer_norm=False):
    """Full covariates-to-factors pass; ``gates=None`` skips the gating step."""
    bundle, _ = _encode_fwd(x, encoder, gates, use_layer_norm)
    return bundle
