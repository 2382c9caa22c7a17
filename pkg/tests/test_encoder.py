import json

import numpy as np
import pytest

from factorcfr import Hyperparams
from factorcfr.encoder import (
    ExpertAttentionParams,
    GateVectors,
    apply_gates,
    attention_weights,
    encode,
    expert_forward,
    init_expert_attention,
    init_gates,
    init_softmax_mix,
    init_split_encoder,
    multi_head_attention,
    orthogonality_penalty,
    task_heads,
    _encode_bwd,
    _encode_fwd,
    _orthogonality_penalty_bwd,
)
from factorcfr.errors import ConfigError, ShapeError
from factorcfr.nets import Mlp

from oracles import fd_gradient, rel_error


def small_hyper(**overrides):
    base = dict(m_experts=4, n_heads=2, d_m=64, h=16,
                expert_hidden=(32,), tower_hidden=(16,), head_hidden=(16,),
                batch_size=8, max_iterations=10)
    base.update(overrides)
    return Hyperparams(**base)


class TestExpertForward:
    def test_shape(self, rng):
        hyper = small_hyper()
        params = init_expert_attention(rng, 12, hyper)
        tokens = expert_forward(rng.normal(size=(32, 12)), params)
        assert tokens.shape == (32, 4, 64)

    def test_zero_params_zero_tokens(self, rng):
        hyper = small_hyper()
        params = init_expert_attention(rng, 5, hyper)
        for expert in params.experts:
            for w in expert.weights:
                w[...] = 0.0
        params.pos_encoding[...] = 0.0
        tokens = expert_forward(rng.normal(size=(4, 5)), params)
        np.testing.assert_array_equal(tokens, 0.0)

    def test_positional_offsets_added(self, rng):
        hyper = small_hyper()
        params = init_expert_attention(rng, 5, hyper)
        x = rng.normal(size=(3, 5))
        base = expert_forward(x, params)
        params.pos_encoding[1] += 1.0
        shifted = expert_forward(x, params)
        np.testing.assert_allclose(shifted[:, 1, :] - base[:, 1, :], 1.0)
        np.testing.assert_allclose(shifted[:, 0, :], base[:, 0, :])

    def test_dimension_mismatch(self, rng):
        params = init_expert_attention(rng, 5, small_hyper())
        with pytest.raises(ShapeError):
            expert_forward(rng.normal(size=(4, 7)), params)


def hand_attention_params():
    """One head, d_m=1, two tokens; query weight 1, key weight ln 3."""
    mlp = Mlp(weights=[np.zeros((1, 1))], biases=[np.zeros(1)], activation="gelu")
    return ExpertAttentionParams(
        experts=[mlp, mlp],
        pos_encoding=np.zeros((2, 1)),
        w_query=[np.array([[1.0]])],
        w_key=[np.array([[np.log(3.0)]])],
        w_value=[np.array([[1.0]])],
        task_towers=[],
    )


class TestAttention:
    def test_identical_tokens_uniform_weights(self, rng):
        hyper = small_hyper()
        params = init_expert_attention(rng, 6, hyper)
        token = rng.normal(size=hyper.d_m)
        tokens = np.tile(token, (2, hyper.m_experts, 1))
        for w in attention_weights(tokens, params):
            np.testing.assert_allclose(w, 1.0 / hyper.m_experts)

    def test_hand_built_scores(self):
        params = hand_attention_params()
        tokens = np.array([[[1.0], [2.0]]])
        weights = attention_weights(tokens, params)[0]
        # row 1 scores differ by ln 3, so the softmax is (1/4, 3/4)
        np.testing.assert_allclose(weights[0, 0], [0.25, 0.75], atol=1e-12)
        attended = multi_head_attention(tokens, params)
        np.testing.assert_allclose(attended[0, 0, 0], 0.25 * 1.0 + 0.75 * 2.0)

    def test_rows_sum_to_one_many_trials(self, rng):
        hyper = small_hyper(m_experts=3, d_m=8, n_heads=2)
        params = init_expert_attention(rng, 4, hyper)
        tokens = rng.normal(size=(1000, 3, 8))
        for w in attention_weights(tokens, params):
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)

    def test_head_division_validated(self):
        with pytest.raises(ConfigError):
            small_hyper(d_m=10, n_heads=3)


class TestTaskHeads:
    def test_shapes_and_determinism(self, rng):
        hyper = small_hyper()
        params = init_expert_attention(rng, 9, hyper)
        x = rng.normal(size=(32, 9))
        attended = multi_head_attention(expert_forward(x, params), params)
        raws = task_heads(attended, params)
        assert all(r.shape == (32, hyper.h) for r in raws)
        raws2 = task_heads(attended, params)
        for a, b in zip(raws, raws2):
            np.testing.assert_array_equal(a, b)

    def test_identical_units_identical_rows(self, rng):
        hyper = small_hyper()
        params = init_expert_attention(rng, 9, hyper)
        x = np.tile(rng.normal(size=9), (2, 1))
        attended = multi_head_attention(expert_forward(x, params), params)
        for r in task_heads(attended, params):
            np.testing.assert_array_equal(r[0], r[1])

    def test_zero_input_zero_output(self, rng):
        hyper = small_hyper()
        params = init_expert_attention(rng, 9, hyper)
        attended = np.zeros((4, hyper.m_experts, hyper.d_m))
        for r in task_heads(attended, params):
            np.testing.assert_array_equal(r, 0.0)


class TestGates:
    def test_normalized_exposure(self, rng):
        gates = init_gates(rng, 24)
        for u in gates.normalized():
            assert abs(np.linalg.norm(u) - 1.0) < 1e-6

    def test_zero_coordinate_masks_column(self, rng):
        gates = GateVectors(raw_treat=np.array([1.0, 1.0]),
                            raw_conf=np.array([1.0, 0.0]),
                            raw_adj=np.array([0.0, 1.0]))
        raws = tuple(rng.normal(size=(5, 2)) for _ in range(3))
        bundle = apply_gates(raws, gates)
        np.testing.assert_array_equal(bundle.confounder[:, 1], 0.0)
        np.testing.assert_array_equal(bundle.adjustment[:, 0], 0.0)

    def test_direct_multiplication(self):
        gates = GateVectors(raw_treat=np.array([1.0, 0.0, 0.0]),
                            raw_conf=np.array([0.0, 1.0, 0.0]),
                            raw_adj=np.array([0.0, 0.0, 1.0]))
        raw = (np.array([[1.0, 2.0, 3.0]]),) * 3
        bundle = apply_gates(raw, gates)
        np.testing.assert_allclose(bundle.instrument, [[1.0, 0.0, 0.0]])
        np.testing.assert_allclose(bundle.confounder, [[0.0, 2.0, 0.0]])
        np.testing.assert_allclose(bundle.adjustment, [[0.0, 0.0, 3.0]])

    def test_length_mismatch(self, rng):
        gates = init_gates(rng, 4)
        with pytest.raises(ShapeError):
            apply_gates(tuple(rng.normal(size=(3, 5)) for _ in range(3)), gates)


class TestOrthogonalityPenalty:
    def test_orthogonal_is_zero(self):
        gates = GateVectors(raw_treat=np.array([1.0, 0.0, 0.0]),
                            raw_conf=np.array([0.0, 2.0, 0.0]),
                            raw_adj=np.array([0.0, 0.0, 0.5]))
        assert orthogonality_penalty(gates) == pytest.approx(0.0, abs=1e-12)

    def test_identical_is_three(self):
        v = np.array([0.3, -0.4, 1.2])
        gates = GateVectors(raw_treat=v, raw_conf=v.copy(), raw_adj=v.copy())
        assert orthogonality_penalty(gates) == pytest.approx(3.0)

    def test_planar_angles(self):
        def at(angle):
            return np.array([np.cos(angle), np.sin(angle)])

        gates = GateVectors(raw_treat=at(0.0), raw_conf=at(np.pi / 3),
                            raw_adj=at(2 * np.pi / 3))
        assert orthogonality_penalty(gates) == pytest.approx(0.75)

    def test_sign_flip_invariance(self, rng):
        gates = init_gates(rng, 8)
        flipped = GateVectors(raw_treat=-gates.raw_treat, raw_conf=gates.raw_conf,
                              raw_adj=-gates.raw_adj)
        assert orthogonality_penalty(flipped) == pytest.approx(
            orthogonality_penalty(gates))

    def test_literal_variant_signed(self):
        v = np.array([1.0, 0.0])
        gates = GateVectors(raw_treat=v, raw_conf=-v, raw_adj=v.copy())
        # dot products: -1, -1, 1
        assert orthogonality_penalty(gates, squared=False) == pytest.approx(-1.0)

    def test_gradient_matches_fd(self, rng):
        gates = init_gates(rng, 5)
        grads = _orthogonality_penalty_bwd(gates)
        for name in ("raw_treat", "raw_conf", "raw_adj"):
            fd = fd_gradient(lambda: orthogonality_penalty(gates),
                             getattr(gates, name))
            assert rel_error(grads[name], fd) < 1e-4


class TestEncode:
    @pytest.mark.parametrize("init", [init_expert_attention, init_softmax_mix,
                                      init_split_encoder])
    def test_shapes(self, rng, init):
        hyper = small_hyper(h=16)
        enc = init(rng, 25, hyper)
        gates = init_gates(rng, 16)
        bundle = encode(rng.normal(size=(16, 25)), enc, gates)
        assert bundle.instrument.shape == (16, 16)
        assert bundle.confounder.shape == (16, 16)
        assert bundle.adjustment.shape == (16, 16)

    def test_deterministic(self, rng):
        hyper = small_hyper()
        enc = init_expert_attention(rng, 7, hyper)
        gates = init_gates(rng, hyper.h)
        x = rng.normal(size=(6, 7))
        a = encode(x, enc, gates)
        b = encode(x, enc, gates)
        for u, v in zip(a.as_tuple(), b.as_tuple()):
            np.testing.assert_array_equal(u, v)

    def test_permutation_equivariance(self, rng):
        hyper = small_hyper()
        enc = init_expert_attention(rng, 7, hyper)
        gates = init_gates(rng, hyper.h)
        x = rng.normal(size=(10, 7))
        perm = rng.permutation(10)
        direct = encode(x[perm], enc, gates)
        reordered = encode(x, enc, gates)
        for u, v in zip(direct.as_tuple(), reordered.as_tuple()):
            np.testing.assert_allclose(u, v[perm], atol=1e-12)

    def test_golden_forward(self, golden_dir):
        payload = json.loads((golden_dir / "encoder_forward.json").read_text())
        hyper = Hyperparams(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in payload["hyper"].items()})
        rng = np.random.default_rng(payload["seed_params"])
        enc = init_expert_attention(rng, payload["d"], hyper)
        gates = init_gates(rng, hyper.h)
        x = np.array(payload["x"])[None, :]
        tokens = expert_forward(x, enc)
        np.testing.assert_allclose(tokens[0], payload["tokens"], atol=1e-12)
        bundle = encode(x, enc, gates)
        np.testing.assert_allclose(bundle.instrument[0], payload["instrument"], atol=1e-12)
        np.testing.assert_allclose(bundle.confounder[0], payload["confounder"], atol=1e-12)
        np.testing.assert_allclose(bundle.adjustment[0], payload["adjustment"], atol=1e-12)

    def test_gradient_matches_fd(self, rng):
        """Analytic gradient of a scalar readout of encode vs central FD."""
        hyper = Hyperparams(m_experts=2, n_heads=2, d_m=4, h=4,
                            expert_hidden=(5,), tower_hidden=(4,), head_hidden=(4,),
                            batch_size=4, max_iterations=10)
        enc = init_expert_attention(rng, 6, hyper)
        gates = init_gates(rng, hyper.h)
        x = rng.normal(size=(5, 6))
        coeffs = rng.normal(size=(3, 5, hyper.h))

        def readout():
            bundle = encode(x, enc, gates)
            return float(sum((coeffs[i] * f).sum()
                             for i, f in enumerate(bundle.as_tuple())))

        bundle, cache = _encode_fwd(x, enc, gates)
        _, enc_grads, gate_grads = _encode_bwd(tuple(coeffs), enc, cache)

        from factorcfr.params import iter_arrays
        analytic = dict(iter_arrays(enc_grads))
        for path, arr in iter_arrays(enc):
            fd = fd_gradient(readout, arr)
            assert rel_error(analytic[path], fd) < 1e-4, path
        for name in ("raw_treat", "raw_conf", "raw_adj"):
            fd = fd_gradient(readout, getattr(gates, name))
            assert rel_error(gate_grads[name], fd) < 1e-4, name
