"""Forward-value oracles for the tensor ops.

Reference results come from naive nested-loop implementations written
directly from the operation definitions, independent of the vectorized
code paths under test.
"""

import numpy as np
import pytest

from hyattnet import ops
from hyattnet.tensor import ShapeError, Tape, Tensor, backward


def naive_conv2d(x, w, b=None, stride=1, padding=1, dilation=1, groups=1):
    """Nested-loop cross-correlation used as the conv oracle."""
    bs, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    out_h = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    out_w = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((bs, cout, out_h, out_w))
    for n in range(bs):
        for o in range(cout):
            g = o // (cout // groups)
            for i in range(out_h):
                for j in range(out_w):
                    acc = 0.0
                    for c in range(cin_g):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (
                                    xp[n, g * cin_g + c, i * stride + ki * dilation,
                                       j * stride + kj * dilation]
                                    * w[o, c, ki, kj]
                                )
                    out[n, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


class TestConv2d:
    def test_1x1_kernel_scales(self):
        x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        w = Tensor([[[[2.0]]]])
        y = ops.conv2d(x, w)
        np.testing.assert_allclose(y.data, [[[[2.0, 4.0], [6.0, 8.0]]]])

    def test_dilated_sum_of_ones(self):
        x = Tensor(np.ones((1, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        y = ops.conv2d(x, w, dilation=2, padding=0)
        assert y.shape == (1, 1, 1, 1)
        assert y.item() == pytest.approx(9.0)

    def test_depthwise_matches_per_channel_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((2, 1, 3, 3))
        got = ops.conv2d(Tensor(x), Tensor(w), padding=1, groups=2)
        want = naive_conv2d(x, w, padding=1, groups=2)
        np.testing.assert_allclose(got.data, want, atol=1e-6)

    @pytest.mark.parametrize("stride,padding,dilation,groups", [
        (1, 0, 1, 1), (2, 1, 1, 1), (1, 2, 2, 1), (1, 1, 1, 2), (2, 1, 1, 4),
    ])
    def test_matches_loop_oracle(self, stride, padding, dilation, groups):
        rng = np.random.default_rng(stride * 7 + padding * 3 + dilation + groups)
        x = rng.standard_normal((2, 4, 6, 5))
        w = rng.standard_normal((4, 4 // groups, 3, 3))
        b = rng.standard_normal(4)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride,
                         padding=padding, dilation=dilation, groups=groups)
        want = naive_conv2d(x, w, b, stride, padding, dilation, groups)
        np.testing.assert_allclose(got.data, want, atol=1e-5)

    def test_group_mismatch_raises(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        w = Tensor(np.zeros((2, 1, 3, 3)))
        with pytest.raises(ShapeError, match="Cin"):
            ops.conv2d(x, w, groups=2)

    def test_kernel_does_not_fit(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        w = Tensor(np.zeros((1, 1, 5, 5)))
        with pytest.raises(ShapeError, match="height/width"):
            ops.conv2d(x, w)


class TestTransposedConv2d:
    def test_broadcasts_kernel(self):
        x = Tensor([[[[5.0]]]])
        w = Tensor(np.ones((1, 1, 2, 2)))
        y = ops.transposed_conv2d(x, w, stride=2)
        np.testing.assert_allclose(y.data, 5.0 * np.ones((1, 1, 2, 2)))

    def test_identity_kernel(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        w = Tensor([[[[1.0]]]])
        y = ops.transposed_conv2d(x, w, stride=1)
        np.testing.assert_allclose(y.data, x.data)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (2, 1), (3, 1)])
    def test_adjoint_of_conv2d(self, stride, padding):
        # Forward transposed conv must equal the conv2d input-gradient map.
        rng = np.random.default_rng(11 + stride + padding)
        x = rng.standard_normal((2, 3, 4, 4))
        w = rng.standard_normal((3, 5, 3, 3))  # (Cin, Cout, kh, kw)
        got = ops.transposed_conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)

        z = Tensor(np.zeros((2, 5) + got.shape[2:]), requires_grad=True)
        with Tape() as tape:
            y = ops.conv2d(z, Tensor(w), stride=stride, padding=padding)
            loss = ops.sum_all(ops.mul(y, Tensor(x)))
        backward(loss, tape)
        np.testing.assert_allclose(got.data, z.grad, atol=1e-6)


class TestSoftmax:
    def test_uniform_logits(self):
        y = ops.softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.data, np.full(3, 1 / 3), rtol=1e-6)

    def test_ln2_logit(self):
        y = ops.softmax_lastdim(Tensor([0.0, np.log(2.0)]))
        np.testing.assert_allclose(y.data, [1 / 3, 2 / 3], rtol=1e-6)

    def test_single_element(self):
        y = ops.softmax_lastdim(Tensor([7.3]))
        np.testing.assert_allclose(y.data, [1.0])

    def test_slices_sum_to_one(self):
        rng = np.random.default_rng(0)
        y = ops.softmax_lastdim(Tensor(rng.standard_normal((4, 5, 6))))
        np.testing.assert_allclose(y.data.sum(axis=-1), np.ones((4, 5)), atol=1e-6)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 8)).astype(np.float32)
        a = ops.softmax_lastdim(Tensor(x))
        b = ops.softmax_lastdim(Tensor(x + 3.5))
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)

    def test_empty_lastdim_raises(self):
        with pytest.raises(ShapeError):
            ops.softmax_lastdim(Tensor(np.zeros((2, 0))))


class TestTopkRows:
    def test_direct_ranking(self):
        idx = ops.topk_rows(np.array([[0.1, 0.9, 0.5]]), 2)
        np.testing.assert_array_equal(idx, [[1, 2]])

    def test_tie_breaks_by_index(self):
        idx = ops.topk_rows(np.array([[3.0, 3.0, 3.0]]), 2)
        np.testing.assert_array_equal(idx, [[0, 1]])

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(5)
        scores = rng.standard_normal((8, 8))
        idx = ops.topk_rows(scores, 3)
        for r in range(8):
            want = sorted(range(8), key=lambda c: (-scores[r, c], c))[:3]
            assert list(idx[r]) == want

    def test_full_k_is_permutation(self):
        rng = np.random.default_rng(6)
        scores = rng.standard_normal((5, 7))
        idx = ops.topk_rows(scores, 7)
        for r in range(5):
            assert sorted(idx[r]) == list(range(7))

    def test_k_out_of_range(self):
        with pytest.raises(ShapeError):
            ops.topk_rows(np.zeros((2, 3)), 4)

    def test_prefix_nesting(self):
        rng = np.random.default_rng(7)
        scores = rng.standard_normal((6, 9))
        prev = None
        for k in range(1, 10):
            idx = ops.topk_rows(scores, k)
            if prev is not None:
                np.testing.assert_array_equal(idx[:, : k - 1], prev)
            prev = idx


class TestGatherRows:
    def test_permutation(self):
        src = Tensor(np.arange(12.0).reshape(3, 4))
        out = ops.gather_rows(src, np.array([[2], [0], [1]]))
        np.testing.assert_allclose(out.data[:, 0], src.data[[2, 0, 1]])

    def test_identity(self):
        src = Tensor(np.arange(12.0).reshape(3, 4))
        out = ops.gather_rows(src, np.array([[0], [1], [2]]))
        np.testing.assert_allclose(out.data[:, 0], src.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(8)
        src = rng.standard_normal((6, 3, 2))
        idx = rng.integers(0, 6, size=(6, 4))
        out = ops.gather_rows(Tensor(src), idx)
        for i in range(6):
            for j in range(4):
                np.testing.assert_array_equal(out.data[i, j], src[idx[i, j]])

    def test_out_of_range_names_row_and_value(self):
        src = Tensor(np.zeros((3, 2)))
        with pytest.raises(IndexError, match=r"row 1 holds index 5"):
            ops.gather_rows(src, np.array([[0], [5], [1]]))


class TestPool:
    def test_global_avg(self):
        x = Tensor([[[[1.0, 3.0], [5.0, 7.0]]]])
        assert ops.pool(x, "global_avg").item() == pytest.approx(4.0)

    def test_global_max(self):
        x = Tensor([[[[1.0, 3.0], [5.0, 7.0]]]])
        assert ops.pool(x, "global_max").item() == pytest.approx(7.0)

    def test_spatial_channel_avg(self):
        x = Tensor(np.stack([np.ones((2, 2)), 3 * np.ones((2, 2))])[None])
        out = ops.pool(x, "spatial_channel_avg")
        np.testing.assert_allclose(out.data, 2 * np.ones((1, 1, 2, 2)))

    def test_spatial_channel_max(self):
        x = Tensor(np.stack([np.ones((2, 2)), 3 * np.ones((2, 2))])[None])
        out = ops.pool(x, "spatial_channel_max")
        np.testing.assert_allclose(out.data, 3 * np.ones((1, 1, 2, 2)))


class TestBackwardBasics:
    def test_linear_map(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.mul(x, 2.0))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2 * np.ones((2, 3)))

    def test_quadratic(self):
        x = Tensor([1.0, -3.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.mul(x, x))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [2.0, -6.0])

    def test_non_scalar_loss_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, x)
        with pytest.raises(ShapeError):
            backward(y, tape)

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.mul(x, 3.0))
        backward(loss, tape)
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [6.0, 6.0])

    def test_operator_sugar(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(x * x + x - 1.0)
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [5.0])


class TestDeterminism:
    def test_conv_bitwise_repeatable(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        a = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
        b = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
        assert np.array_equal(a, b)

    def test_resize_bitwise_repeatable(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((1, 2, 5, 7)).astype(np.float32)
        a = ops.bilinear_resize(Tensor(x), (13, 11)).data
        b = ops.bilinear_resize(Tensor(x), (13, 11)).data
        assert np.array_equal(a, b)
