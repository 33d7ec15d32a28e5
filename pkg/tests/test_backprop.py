import numpy as np
import pytest

from hlq.errors.handlers import DimensionError, ParameterError, StateError
from hlq.harness.gradcheck import cosine_similarity
from hlq.models.quantized import RngState
from hlq.models.strategy import BackwardStrategy, GradPath
from hlq.models.tensor import LayerDims, Tensor
from hlq.ops.backprop import (
    BATCH_AXIS,
    SEQUENCE_AXIS,
    acbp_plan,
    backward,
    hlq_backward,
    hlq_gw,
    hlq_gw_forward_stage,
    hq_gx,
    ht_axis,
    lbp_wht_backward,
    naive_quant_backward,
    transform_weight,
    vanilla_backward,
)
from hlq.ops.hadamard import default_bases, make_plan, unproject_lowrank, walsh_matrix


def exact_grads(x, w, g_y):
    x, w, g_y = (np.asarray(t.data, dtype=np.float64) for t in (x, w, g_y))
    B = x.shape[0]
    return g_y @ w, np.einsum("blo,bli->oi", g_y, x) / B


def block_projection(L, n, bases):
    """Block-diagonal H M H over a length-L axis."""
    H = walsh_matrix(int(np.log2(n))).data.astype(np.float64)
    mask = np.zeros((n, n))
    mask[list(bases), list(bases)] = 1.0
    return np.kron(np.eye(L // n), H @ mask @ H)


def lattice(rng, shape):
    """Integers in [-7, 7] with a 7 in every row and column, so every int4 scale is 1."""
    values = rng.integers(-7, 8, size=shape).astype(np.float32)
    values[..., 0] = 7.0
    values[0] = 7.0
    return Tensor(values)


def softmax_gradients(rng, rows, classes, temperature=2.0):
    """Rows of p - onehot, the gradient a cross-entropy head sends back."""
    logits = rng.standard_normal((rows, classes)) * temperature
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(rows), rng.integers(0, classes, size=rows)] -= 1.0
    return probs.astype(np.float32)


def mean_square_ratio(samples, target):
    """||mean - target||^2 over the summed squared standard errors of the mean."""
    samples = np.asarray(samples, dtype=np.float64)
    mean = samples.mean(axis=0)
    standard_error = samples.var(axis=0, ddof=1) / samples.shape[0]
    return float(np.sum((mean - target) ** 2) / np.sum(standard_error))


DEBUG_STRATEGIES = {
    "naive": BackwardStrategy.naive(4).without_quantization(),
    "hq": BackwardStrategy.hq().without_quantization(),
    "lbp-wht": BackwardStrategy.lbp_wht().at_full_rank(),
    "hlq": BackwardStrategy.hlq().without_quantization().at_full_rank(),
}


class TestDegeneration:

    @pytest.mark.parametrize("name", sorted(DEBUG_STRATEGIES))
    def test_debug_mode_matches_vanilla(self, rng, max_rel_error, name):
        strategy = DEBUG_STRATEGIES[name]
        for _ in range(50):
            B = int(rng.integers(1, 3))
            L, I, O = (16 * int(k) for k in rng.integers(1, 4, size=3))
            x = Tensor(rng.standard_normal((B, L, I)).astype(np.float32))
            w = Tensor(rng.standard_normal((O, I)).astype(np.float32))
            g_y = Tensor(rng.standard_normal((B, L, O)).astype(np.float32))
            reference = vanilla_backward(x, w, g_y)
            pair = backward(x, w, g_y, strategy)
            assert max_rel_error(pair.g_x.data, reference.g_x.data) < 1e-5
            assert max_rel_error(pair.g_w.data, reference.g_w.data) < 1e-5

    @pytest.mark.parametrize("name", sorted(DEBUG_STRATEGIES))
    def test_debug_mode_with_padding(self, layer_operands, max_rel_error, name):
        x, w, g_y = layer_operands(3, 20, 12, 20)
        reference = vanilla_backward(x, w, g_y)
        pair = backward(x, w, g_y, DEBUG_STRATEGIES[name])
        assert pair.g_x.shape == (3, 20, 12)
        assert pair.g_w.shape == (20, 12)
        assert max_rel_error(pair.g_x.data, reference.g_x.data) < 1e-5
        assert max_rel_error(pair.g_w.data, reference.g_w.data) < 1e-5

    def test_full_rank_lbp_wht_plan(self, layer_operands, max_rel_error):
        x, w, g_y = layer_operands(2, 32, 8, 16)
        reference = vanilla_backward(x, w, g_y)
        pair = lbp_wht_backward(x, w, g_y, make_plan(16, 16, SEQUENCE_AXIS))
        assert max_rel_error(pair.g_w.data, reference.g_w.data) < 1e-5


class TestVanilla:

    def test_matches_dense_formulas(self, layer_operands):
        x, w, g_y = layer_operands(2, 5, 6, 4)
        g_x, g_w = exact_grads(x, w, g_y)
        pair = vanilla_backward(x, w, g_y)
        assert np.allclose(pair.g_x.data, g_x, atol=1e-5)
        assert np.allclose(pair.g_w.data, g_w, atol=1e-5)

    def test_matches_finite_differences(self, layer_operands):
        x, w, g_y = layer_operands(2, 3, 4, 5)
        xs, ws, G = (t.data.astype(np.float64) for t in (x, w, g_y))

        def loss(x_value, w_value):
            return float(np.sum((x_value @ w_value.T) * G))

        h = 1e-3
        fd_w = np.zeros_like(ws)
        for index in np.ndindex(*ws.shape):
            plus, minus = ws.copy(), ws.copy()
            plus[index] += h
            minus[index] -= h
            fd_w[index] = (loss(xs, plus) - loss(xs, minus)) / (2 * h)
        fd_x = np.zeros_like(xs)
        for index in np.ndindex(*xs.shape):
            plus, minus = xs.copy(), xs.copy()
            plus[index] += h
            minus[index] -= h
            fd_x[index] = (loss(plus, ws) - loss(minus, ws)) / (2 * h)

        pair = vanilla_backward(x, w, g_y)
        B = x.shape[0]
        assert np.linalg.norm(B * pair.g_w.data - fd_w) / np.linalg.norm(fd_w) < 1e-3
        assert np.linalg.norm(pair.g_x.data - fd_x) / np.linalg.norm(fd_x) < 1e-3

    def test_zero_upstream_gradient(self, layer_operands):
        x, w, _ = layer_operands(2, 16, 8, 8)
        pair = vanilla_backward(x, w, Tensor(np.zeros((2, 16, 8))))
        assert not pair.g_x.data.any() and not pair.g_w.data.any()

    def test_dims_must_match(self, layer_operands):
        x, w, g_y = layer_operands(2, 4, 3, 5)
        with pytest.raises(DimensionError):
            vanilla_backward(x, w, g_y, LayerDims(3, 4, 3, 5))

    def test_inconsistent_shapes(self, layer_operands):
        x, w, _ = layer_operands(2, 4, 3, 5)
        with pytest.raises(DimensionError):
            vanilla_backward(x, w, Tensor(np.zeros((2, 4, 6))))
        with pytest.raises(DimensionError):
            vanilla_backward(Tensor(np.zeros((2, 3))), w, Tensor(np.zeros((2, 5))))


class TestAxisChoice:

    @pytest.mark.parametrize("B, L, expected", [(1, 196, SEQUENCE_AXIS), (32, 1, BATCH_AXIS), (16, 16, SEQUENCE_AXIS),
                                                (4, 8, SEQUENCE_AXIS)])
    def test_ht_axis(self, B, L, expected):
        assert ht_axis(B, L, 16) == expected

    def test_short_axes_without_padding(self):
        with pytest.raises(DimensionError):
            ht_axis(4, 8, 16, pad_short_axes=False)

    def test_short_padded_axis_keeps_full_rank(self):
        plan = acbp_plan(BackwardStrategy.hlq(), (8, 1, 12))
        assert plan.target_axis == SEQUENCE_AXIS
        assert plan.full_rank

    def test_low_rank_on_long_axes(self):
        assert not acbp_plan(BackwardStrategy.hlq(), (2, 32, 12)).full_rank
        assert not acbp_plan(BackwardStrategy.hlq(), (32, 1, 12)).full_rank


class TestLbpWht:

    def test_matches_dense_mask_oracle(self, layer_operands):
        x, w, g_y = layer_operands(2, 32, 6, 5)
        plan = make_plan(16, 8, SEQUENCE_AXIS)
        P = block_projection(32, 16, plan.basis_indices)
        xs, ws, G = (t.data.astype(np.float64) for t in (x, w, g_y))
        expected_w = sum(G[b].T @ P @ xs[b] for b in range(2)) / 2
        expected_x = np.stack([P @ G[b] @ ws for b in range(2)])
        pair = lbp_wht_backward(x, w, g_y, plan)
        assert np.max(np.abs(pair.g_w.data - expected_w)) < 1e-5 * max(1.0, np.max(np.abs(expected_w)))
        assert np.max(np.abs(pair.g_x.data - expected_x)) < 1e-5 * max(1.0, np.max(np.abs(expected_x)))

    def test_batch_axis_for_flat_inputs(self, layer_operands):
        x, w, g_y = layer_operands(32, 1, 6, 5)
        pair = lbp_wht_backward(x, w, g_y, make_plan(16, 8, 0))
        assert pair.g_x.shape == (32, 1, 6)
        assert pair.g_w.shape == (5, 6)

    def test_short_padded_axis_is_not_scaled_down(self, layer_operands, max_rel_error):
        x, w, g_y = layer_operands(8, 1, 12, 10)
        reference = vanilla_backward(x, w, g_y)
        pair = lbp_wht_backward(x, w, g_y, make_plan(16, 8, SEQUENCE_AXIS))
        ratio = np.linalg.norm(pair.g_w.data) / np.linalg.norm(reference.g_w.data)
        assert abs(ratio - 1.0) < 1e-5
        assert max_rel_error(pair.g_w.data, reference.g_w.data) < 1e-5
        assert max_rel_error(pair.g_x.data, reference.g_x.data) < 1e-5

    def test_sequence_axis_ignores_sample_order(self, layer_operands):
        x, w, g_y = layer_operands(6, 32, 8, 8)
        order = np.array([3, 0, 5, 1, 4, 2])
        plan = make_plan(16, 8, SEQUENCE_AXIS)
        pair = lbp_wht_backward(x, w, g_y, plan)
        shuffled = lbp_wht_backward(Tensor(x.data[order]), w, Tensor(g_y.data[order]), plan)
        assert np.allclose(shuffled.g_w.data, pair.g_w.data, atol=1e-6)
        assert np.allclose(shuffled.g_x.data, pair.g_x.data[order], atol=1e-6)

    def test_batch_axis_depends_on_sample_order(self, layer_operands):
        # neighbouring samples share a projection block, so reordering the batch changes g_w
        x, w, g_y = layer_operands(32, 1, 6, 5)
        order = np.random.default_rng(0).permutation(32)
        plan = make_plan(16, 8, BATCH_AXIS)
        pair = lbp_wht_backward(x, w, g_y, plan)
        shuffled = lbp_wht_backward(Tensor(x.data[order]), w, Tensor(g_y.data[order]), plan)
        reference = vanilla_backward(x, w, g_y).g_w.data
        assert np.max(np.abs(shuffled.g_w.data - pair.g_w.data)) > 1e-2 * np.max(np.abs(reference))


class TestNaive:

    def test_lattice_inputs_are_exact(self, rng):
        x, w, g_y = lattice(rng, (2, 4, 3)), lattice(rng, (5, 3)), lattice(rng, (2, 4, 5))
        reference = vanilla_backward(x, w, g_y)
        for rounding in ("pseudo", "stochastic"):
            pair = naive_quant_backward(x, w, g_y, 4, RngState(3), rounding)
            assert np.allclose(pair.g_x.data, reference.g_x.data, atol=1e-6)
            assert np.allclose(pair.g_w.data, reference.g_w.data, atol=1e-6)

    def test_seed_average_is_unbiased(self, layer_operands):
        x, w, g_y = layer_operands(2, 16, 8, 8)
        reference = vanilla_backward(x, w, g_y)
        samples = [naive_quant_backward(x, w, g_y, 4, RngState(seed)) for seed in range(200)]
        assert mean_square_ratio([s.g_w.data for s in samples], reference.g_w.data) < 2.0
        assert mean_square_ratio([s.g_x.data for s in samples], reference.g_x.data) < 2.0

    def test_zero_upstream_gradient(self, layer_operands):
        x, w, _ = layer_operands(2, 16, 8, 8)
        pair = naive_quant_backward(x, w, Tensor(np.zeros((2, 16, 8))), 4, RngState(0))
        assert not pair.g_x.data.any() and not pair.g_w.data.any()


class TestHadamardQuantization:

    def test_without_quantizers_matches_vanilla(self, layer_operands, max_rel_error):
        x, w, g_y = layer_operands(2, 8, 12, 20)
        assert max_rel_error(hq_gx(g_y, w, None).data, vanilla_backward(x, w, g_y).g_x.data) < 1e-5

    def test_zero_weight(self, layer_operands):
        _, w, g_y = layer_operands(2, 8, 12, 16)
        g_x = hq_gx(g_y, Tensor(np.zeros(w.shape)), 4, RngState(0))
        assert g_x.shape == (2, 8, 12)
        assert not g_x.data.any()

    def test_cached_weight_transform(self, layer_operands):
        _, w, g_y = layer_operands(2, 8, 12, 20)
        cached = transform_weight(w, 16)
        assert cached.shape == (32, 12)
        plain = hq_gx(g_y, w, 4, RngState(4))
        reused = hq_gx(g_y, w, 4, RngState(4), transformed_weight=cached)
        assert np.array_equal(plain.data, reused.data)

    def test_stale_weight_transform(self, layer_operands):
        _, w, g_y = layer_operands(2, 8, 12, 20)
        with pytest.raises(StateError):
            hq_gx(g_y, w, 4, RngState(4), transformed_weight=Tensor(np.zeros((16, 12))))

    def test_operands_must_chain(self, layer_operands):
        _, w, _ = layer_operands(2, 8, 12, 20)
        with pytest.raises(DimensionError):
            hq_gx(Tensor(np.zeros((2, 8, 16))), w, 4)

    def test_beats_naive_on_softmax_gradients(self, rng):
        B, L, I, O = 8, 16, 32, 10
        x = Tensor(np.zeros((B, L, I), dtype=np.float32))
        wins = 0
        for trial in range(100):
            g_y = Tensor(softmax_gradients(rng, B * L, O).reshape(B, L, O))
            w = Tensor((rng.standard_normal((O, I)) / np.sqrt(O)).astype(np.float32))
            exact = vanilla_backward(x, w, g_y).g_x.data.astype(np.float64)
            state = RngState(trial)
            naive = naive_quant_backward(x, w, g_y, 4, state.split(0), "stochastic").g_x.data
            transformed = hq_gx(g_y, w, 4, state.split(1), "stochastic").data
            wins += np.mean((transformed - exact) ** 2) < np.mean((naive - exact) ** 2)
        assert wins >= 95

    def test_sequence_axis_ignores_sample_order(self, layer_operands):
        x, w, g_y = layer_operands(6, 32, 8, 8)
        order = np.array([3, 0, 5, 1, 4, 2])
        strategy = BackwardStrategy.hlq(rounding="pseudo")
        pair = hlq_backward(x, w, g_y, strategy)
        shuffled = hlq_backward(Tensor(x.data[order]), w, Tensor(g_y.data[order]), strategy)
        assert np.allclose(shuffled.g_w.data, pair.g_w.data, atol=1e-6)
        assert np.allclose(shuffled.g_x.data, pair.g_x.data[order], atol=1e-6)


class TestCompressedActivation:

    @pytest.mark.parametrize("B, L, I", [(1, 16, 8), (2, 32, 24), (4, 64, 3)])
    def test_default_payload_is_one_eighth(self, rng, B, L, I):
        x = Tensor(rng.standard_normal((B, L, I)).astype(np.float32))
        strategy = BackwardStrategy.hlq()
        stored = hlq_gw_forward_stage(x, acbp_plan(strategy, x.shape), 8, RngState(0))
        assert stored.stored_shape == (B, L // 2, I)
        assert stored.payload_bytes == B * (L // 2) * I
        assert 8 * stored.payload_bytes == stored.original_bytes == 4 * B * L * I

    def test_padded_payload(self, rng):
        x = Tensor(rng.standard_normal((3, 20, 5)).astype(np.float32))
        stored = hlq_gw_forward_stage(x, make_plan(16, 8, SEQUENCE_AXIS), 8, RngState(0))
        assert stored.payload_bytes == 3 * 16 * 5
        assert stored.original_shape == (3, 20, 5)

    def test_constant_input_keeps_first_coefficient(self):
        x = Tensor(np.full((1, 16, 2), 2.0))
        stored = hlq_gw_forward_stage(x, make_plan(16, 8, SEQUENCE_AXIS), 8, RngState(0))
        coefficients = stored.quantized.to_tensor().data
        index = list(stored.plan.basis_indices).index(0)
        assert np.allclose(coefficients[:, index], 8.0, atol=1e-5)
        assert np.allclose(np.delete(coefficients, index, axis=1), 0.0, atol=1e-6)

    def test_zero_input(self):
        stored = hlq_gw_forward_stage(Tensor(np.zeros((2, 16, 4))), make_plan(16, 8, SEQUENCE_AXIS), 8, RngState(0))
        assert not stored.quantized.payload.any()
        assert stored.quantized.scale.tolist() == [1.0]

    def test_needs_bits(self, random_tensor):
        with pytest.raises(ParameterError):
            hlq_gw_forward_stage(random_tensor(1, 16, 2), make_plan(16, 8, SEQUENCE_AXIS), None)


class TestHlqWeightGradient:

    def test_seed_average_converges_to_low_rank_gradient(self, layer_operands):
        x, w, g_y = layer_operands(2, 32, 8, 8)
        plan = make_plan(16, 8, SEQUENCE_AXIS)
        target = lbp_wht_backward(x, w, g_y, plan).g_w.data
        samples = []
        for seed in range(100):
            state = RngState(seed)
            stored = hlq_gw_forward_stage(x, plan, 8, state.split(0), "stochastic")
            samples.append(hlq_gw(stored, g_y, plan, 8, state.split(1), "stochastic").data)
        assert mean_square_ratio(samples, target) < 2.0
        bound = 0.05 * np.max(np.abs(target))
        assert np.max(np.abs(samples[0] - target)) < bound

    def test_plan_must_match_stored_activation(self, layer_operands):
        x, _, g_y = layer_operands(2, 32, 8, 8)
        stored = hlq_gw_forward_stage(x, make_plan(16, 8, SEQUENCE_AXIS), 8, RngState(0))
        with pytest.raises(StateError):
            hlq_gw(stored, g_y, make_plan(16, 8, SEQUENCE_AXIS, (8, 9, 10, 11, 12, 13, 14, 15)), 8, RngState(1))
        with pytest.raises(StateError):
            hlq_gw(stored, g_y, make_plan(16, 8, BATCH_AXIS), 8, RngState(1))

    def test_upstream_gradient_must_match(self, layer_operands):
        x, _, _ = layer_operands(2, 32, 8, 8)
        plan = make_plan(16, 8, SEQUENCE_AXIS)
        stored = hlq_gw_forward_stage(x, plan, 8, RngState(0))
        with pytest.raises(StateError):
            hlq_gw(stored, Tensor(np.zeros((2, 16, 8))), plan, 8, RngState(1))

    def test_zero_upstream_gradient(self, layer_operands):
        x, _, _ = layer_operands(2, 32, 8, 8)
        plan = make_plan(16, 8, SEQUENCE_AXIS)
        stored = hlq_gw_forward_stage(x, plan, 8, RngState(0))
        assert not hlq_gw(stored, Tensor(np.zeros((2, 32, 8))), plan, 8, RngState(1)).data.any()


class TestHlqComposite:

    def test_shapes_with_padded_axes(self, layer_operands):
        x, w, g_y = layer_operands(3, 20, 12, 20)
        strategy = BackwardStrategy.hlq(rounding="stochastic")
        rng = RngState(11)
        stored = hlq_gw_forward_stage(x, acbp_plan(strategy, x.shape), 8, rng.split(0), "stochastic")
        pair = hlq_backward(stored, w, g_y, strategy, rng)
        assert pair.g_x.shape == x.shape
        assert pair.g_w.shape == w.shape

    def test_stored_and_raw_activation_paths_agree_in_shape(self, layer_operands):
        x, w, g_y = layer_operands(2, 32, 16, 16)
        strategy = BackwardStrategy.hlq()
        raw = hlq_backward(x, w, g_y, strategy)
        stored = hlq_gw_forward_stage(x, acbp_plan(strategy, x.shape), 8)
        compressed = hlq_backward(stored, w, g_y, strategy)
        assert raw.g_w.shape == compressed.g_w.shape == (16, 16)
        assert np.array_equal(raw.g_x.data, compressed.g_x.data)

    def test_smooth_activations_keep_weight_gradient_direction(self, rng):
        B, L, I, O = 4, 32, 16, 16
        bases = default_bases(16, 8)
        plan = make_plan(16, 8, SEQUENCE_AXIS, bases)
        coefficients = Tensor(rng.standard_normal((B, 2 * 8, I)).astype(np.float32))
        x = unproject_lowrank(coefficients, plan, L)
        w = Tensor(rng.standard_normal((O, I)).astype(np.float32))
        g_y = Tensor(rng.standard_normal((B, L, O)).astype(np.float32))
        strategy = BackwardStrategy.hlq(rounding="stochastic")
        reference = vanilla_backward(x, w, g_y)
        pair = backward(x, w, g_y, strategy, RngState(0))
        assert cosine_similarity(pair.g_w.data, reference.g_w.data) > 0.95
        assert cosine_similarity(pair.g_x.data, reference.g_x.data) > 0.85

    def test_requires_hlq_strategy(self, layer_operands):
        x, w, g_y = layer_operands(2, 16, 8, 8)
        with pytest.raises(ParameterError):
            hlq_backward(x, w, g_y, BackwardStrategy.vanilla())

    def test_stochastic_rounding_needs_rng(self, layer_operands):
        x, w, g_y = layer_operands(2, 16, 8, 8)
        with pytest.raises(ParameterError):
            backward(x, w, g_y, BackwardStrategy.hlq(rounding="stochastic"))

    def test_mixed_paths(self, layer_operands, max_rel_error):
        x, w, g_y = layer_operands(2, 16, 8, 8)
        strategy = BackwardStrategy.custom(GradPath(bits=4, hadamard=True), GradPath())
        pair = backward(x, w, g_y, strategy, RngState(2))
        assert max_rel_error(pair.g_w.data, vanilla_backward(x, w, g_y).g_w.data) < 1e-6
