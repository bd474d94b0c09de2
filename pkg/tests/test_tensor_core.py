import math
from concurrent.futures import ThreadPoolExecutor
import numpy as np
import pytest
from diffusion.tensor_core import (
    AttentionParams,
    _executor,
    as_tensor,
    conv2d,
    conv2d_frames,
    downsample2x,
    group_normalize,
    multi_head_attention,
    parallel_map,
    scaled_dot_attention,
    shutdown_executors,
    silu,
    sinusoidal_embedding,
    softmax_rows,
    upsample2x,
)
from utils.errors import ConfigurationError, KernelError


class TestSoftmax:
    def test_rows_sum_to_one(self, rng):
        s = softmax_rows(rng.standard_normal((5, 7)))
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(5), atol=1e-15)

    def test_large_logits_are_stable(self):
        s = softmax_rows(np.array([[1000.0, 1000.0]]))
        np.testing.assert_array_equal(s, [[0.5, 0.5]])

    def test_saturated_row(self):
        np.testing.assert_allclose(softmax_rows(np.array([[1000.0, 0.0]])), [[1.0, 0.0]], atol=1e-12)

    def test_matches_direct_exponentials(self):
        e = [math.exp(1.0), math.exp(2.0), math.exp(3.0)]
        expected = [[v / sum(e) for v in e]]
        np.testing.assert_allclose(softmax_rows(np.array([[1.0, 2.0, 3.0]])), expected, rtol=1e-14)

    def test_row_shift_invariance(self, rng):
        m = rng.standard_normal((4, 6))
        shifted = m + rng.standard_normal((4, 1)) * 50
        np.testing.assert_allclose(softmax_rows(shifted), softmax_rows(m), atol=1e-12)

    def test_non_finite_input_rejected(self):
        with pytest.raises(KernelError):
            softmax_rows(np.array([[0.0, np.nan]]))

    def test_as_tensor_rejects_inf(self):
        with pytest.raises(KernelError):
            as_tensor([1.0, np.inf])


class TestAttention:
    def test_zero_queries_average_values(self, rng):
        v = rng.standard_normal((6, 3))
        out = scaled_dot_attention(np.zeros((6, 4)), rng.standard_normal((6, 4)), v)
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (6, 1)), atol=1e-12)

    def test_scores_are_row_stochastic(self, rng):
        q, k, v = (rng.standard_normal((2, 5, 4)) for _ in range(3))
        _, scores = scaled_dot_attention(q, k, v, return_scores=True)
        assert scores.shape == (2, 5, 5)
        np.testing.assert_allclose(scores.sum(axis=-1), np.ones((2, 5)), atol=1e-12)

    def test_single_head_matches_plain_attention(self, rng):
        q, k, v = (rng.standard_normal((5, 8)) for _ in range(3))
        np.testing.assert_allclose(multi_head_attention(q, k, v, heads=1), scaled_dot_attention(q, k, v), atol=1e-14)

    def test_heads_attend_independently(self, rng):
        q, k, v = (rng.standard_normal((5, 8)) for _ in range(3))
        out = multi_head_attention(q, k, v, heads=2)
        first = scaled_dot_attention(q[:, :4], k[:, :4], v[:, :4])
        second = scaled_dot_attention(q[:, 4:], k[:, 4:], v[:, 4:])
        np.testing.assert_allclose(out, np.concatenate([first, second], axis=1), atol=1e-14)

    def test_single_token_returns_value(self, rng):
        v = rng.standard_normal((1, 3))
        np.testing.assert_array_equal(scaled_dot_attention(rng.standard_normal((1, 3)), rng.standard_normal((1, 3)), v), v)

    def test_identical_keys_average_values(self, rng):
        v = rng.standard_normal((4, 3))
        k = np.tile(rng.standard_normal((1, 3)), (4, 1))
        out = scaled_dot_attention(rng.standard_normal((4, 3)), k, v)
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (4, 1)), atol=1e-12)

    def test_two_by_two_matches_scalar_evaluation(self, rng):
        q, k, v = (rng.standard_normal((2, 2)) for _ in range(3))
        expected = np.zeros((2, 2))
        for i in range(2):
            logits = [sum(q[i, c] * k[j, c] for c in range(2)) / math.sqrt(2) for j in range(2)]
            weights = [math.exp(x) for x in logits]
            for c in range(2):
                expected[i, c] = sum(weights[j] * v[j, c] for j in range(2)) / sum(weights)
        np.testing.assert_allclose(scaled_dot_attention(q, k, v), expected, atol=1e-12)

    def test_permutation_equivariance(self, rng):
        q, k, v = (rng.standard_normal((6, 4)) for _ in range(3))
        perm = rng.permutation(6)
        out = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(scaled_dot_attention(q[perm], k[perm], v[perm]), out[perm], atol=1e-12)

    def test_non_finite_values_rejected(self, rng):
        q, k = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        v = np.array([[np.nan, 0.0, 0.0], [1.0, 1.0, 1.0]])
        with pytest.raises(KernelError):
            scaled_dot_attention(q, k, v)
        with pytest.raises(KernelError):
            scaled_dot_attention(q, np.full((2, 3), np.inf), q)

    def test_mismatched_shapes(self, rng):
        with pytest.raises(KernelError):
            scaled_dot_attention(rng.standard_normal((5, 4)), rng.standard_normal((5, 3)), rng.standard_normal((5, 4)))

    def test_params_validate_head_layout(self, rng):
        w = rng.standard_normal((8, 6))
        with pytest.raises(ConfigurationError):
            AttentionParams(w, w, w, head_dim=4, heads=1)
        params = AttentionParams(w, w, w, head_dim=3, heads=2)
        assert params.model_dim == 8


class TestConvolution:
    def test_centred_delta_kernel_is_identity(self, rng):
        x = rng.standard_normal((3, 5, 6))
        kernel = np.zeros((3, 3, 3, 3))
        for c in range(3):
            kernel[c, c, 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d(x, kernel), x)

    def test_one_by_one_kernel_mixes_channels(self, rng):
        x = rng.standard_normal((3, 4, 4))
        kernel = rng.standard_normal((2, 3, 1, 1))
        bias = np.array([0.5, -1.0])
        expected = np.einsum("oc,chw->ohw", kernel[:, :, 0, 0], x) + bias[:, None, None]
        np.testing.assert_allclose(conv2d(x, kernel, bias), expected, atol=1e-12)

    def test_zero_padding_at_border(self):
        x = np.ones((1, 3, 3))
        out = conv2d(x, np.ones((1, 1, 3, 3)))
        assert out[0, 1, 1] == 9.0
        assert out[0, 0, 0] == 4.0
        assert out[0, 0, 1] == 6.0

    def test_zero_input_gives_zero_output(self, rng):
        out = conv2d(np.zeros((2, 4, 4)), rng.standard_normal((3, 2, 3, 3)))
        np.testing.assert_array_equal(out, np.zeros((3, 4, 4)))

    def test_linearity(self, rng):
        kernel = rng.standard_normal((3, 2, 3, 3))
        for _ in range(5):
            x, y = rng.standard_normal((2, 5, 5)), rng.standard_normal((2, 5, 5))
            a, b = rng.standard_normal(2)
            np.testing.assert_allclose(
                conv2d(a * x + b * y, kernel), a * conv2d(x, kernel) + b * conv2d(y, kernel), atol=1e-9
            )

    def test_non_finite_inputs_rejected(self, rng):
        x = rng.standard_normal((1, 3, 3))
        x[0, 1, 1] = np.nan
        with pytest.raises(KernelError):
            conv2d(x, np.ones((1, 1, 3, 3)))
        with pytest.raises(KernelError):
            conv2d(np.ones((1, 3, 3)), np.full((1, 1, 3, 3), np.inf))
        with pytest.raises(KernelError):
            conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.array([np.nan]))

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(KernelError):
            conv2d(rng.standard_normal((1, 4, 4)), np.ones((1, 1, 2, 2)))

    def test_channel_mismatch(self, rng):
        with pytest.raises(KernelError):
            conv2d(rng.standard_normal((2, 4, 4)), np.ones((1, 3, 3, 3)))

    def test_threaded_frames_match_sequential(self, rng):
        x = rng.standard_normal((5, 2, 4, 4))
        kernel = rng.standard_normal((3, 2, 3, 3))
        sequential = np.stack([conv2d(f, kernel) for f in x])
        np.testing.assert_array_equal(conv2d_frames(x, kernel), sequential)
        threaded = np.stack(parallel_map(lambda f: conv2d(f, kernel), list(x), threads=3))
        np.testing.assert_array_equal(threaded, sequential)


class TestNormalization:
    def test_groups_have_zero_mean_unit_variance(self, rng):
        x = rng.standard_normal((2, 8, 4, 4)) * 3 + 1
        out = group_normalize(x, 4, np.ones(8), np.zeros(8), 1e-12)
        grouped = out.reshape(2, 4, -1)
        np.testing.assert_allclose(grouped.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(grouped.var(axis=-1), 1.0, atol=1e-9)

    def test_constant_input_normalizes_to_zero(self):
        out = group_normalize(np.full((4, 3, 3), 2.5), 2, np.ones(4), np.zeros(4), 1e-5)
        np.testing.assert_array_equal(out, np.zeros((4, 3, 3)))

    def test_zero_gain_yields_bias(self, rng):
        bias = np.array([0.5, -1.0, 2.0, 0.0])
        out = group_normalize(rng.standard_normal((4, 2, 2)), 2, np.zeros(4), bias, 1e-5)
        np.testing.assert_array_equal(out, np.broadcast_to(bias[:, None, None], (4, 2, 2)))

    def test_single_group_standardizes(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        expected = (x - 2.5) / math.sqrt(1.25 + 1e-5)
        np.testing.assert_allclose(group_normalize(x, 1, np.ones(1), np.zeros(1), 1e-5), expected, atol=1e-12)

    def test_non_finite_input_rejected(self):
        with pytest.raises(KernelError):
            group_normalize(np.array([[[np.inf, 1.0]]]), 1, np.ones(1), np.zeros(1), 1e-5)
        with pytest.raises(KernelError):
            group_normalize(np.ones((1, 1, 2)), 1, np.array([np.nan]), np.zeros(1), 1e-5)

    def test_indivisible_groups(self, rng):
        with pytest.raises(ConfigurationError):
            group_normalize(rng.standard_normal((6, 2, 2)), 4, np.ones(6), np.zeros(6), 1e-5)

    def test_non_positive_eps(self, rng):
        with pytest.raises(ConfigurationError):
            group_normalize(rng.standard_normal((4, 2, 2)), 2, np.ones(4), np.zeros(4), 0.0)


class TestElementwise:
    def test_silu(self):
        assert silu(np.array([0.0]))[0] == 0.0
        assert math.isclose(silu(np.array([1.0]))[0], 1.0 / (1.0 + math.exp(-1.0)))

    def test_resampling_round_trip(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        np.testing.assert_allclose(downsample2x(upsample2x(x)), x, atol=1e-14)

    def test_embedding_shape_and_origin(self):
        emb = sinusoidal_embedding(0.0, 7)
        assert emb.shape == (7,)
        np.testing.assert_array_equal(emb, [0, 0, 0, 1, 1, 1, 0])


class TestDeterminism:
    def test_kernels_are_bit_reproducible(self, rng):
        x = rng.standard_normal((2, 4, 4, 4))
        kernel = rng.standard_normal((4, 4, 3, 3))
        q, k, v = (rng.standard_normal((3, 5, 4)) for _ in range(3))
        np.testing.assert_array_equal(conv2d_frames(x, kernel), conv2d_frames(x, kernel))
        np.testing.assert_array_equal(multi_head_attention(q, k, v, 2), multi_head_attention(q, k, v, 2))
        gain, bias = np.ones(4), np.zeros(4)
        np.testing.assert_array_equal(group_normalize(x, 2, gain, bias, 1e-5), group_normalize(x, 2, gain, bias, 1e-5))

    def test_executor_pool_is_shared_across_threads(self):
        shutdown_executors()
        with ThreadPoolExecutor(max_workers=8) as outer:
            pools = list(outer.map(lambda _: _executor(3), range(32)))
        assert len({id(pool) for pool in pools}) == 1
        shutdown_executors()
        assert parallel_map(lambda x: x * 2, [1, 2, 3], threads=3) == [2, 4, 6]
