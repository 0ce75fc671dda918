import math

import numpy as np
import pytest

from unitscope.errors import ShapeError, ValidationError
from unitscope.tensor import (
    ConvSpec,
    Tensor,
    batchnorm_inference,
    bilinear_upsample,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    global_avgpool,
    global_avgpool_backward,
    maxpool2,
    maxpool2_backward,
    relu,
    relu_backward,
    softmax_xent,
    _bilinear_resize,
    _conv2d_backward_batch,
    _conv2d_batch,
    _fc_backward_batch,
    _fc_batch,
    _global_avgpool_batch,
    _global_avgpool_grad_batch,
    _maxpool2_batch,
    _maxpool2_grad_batch,
    _maxpool2_relu_grad_batch,
    _relu,
    _relu_grad,
    _softmax_xent_batch,
)

from oracles import central_diff, conv2d_loop, maxpool2_loop, rel_err


class TestTensorType:
    def test_nan_rejected(self):
        with pytest.raises(ValidationError):
            Tensor([1.0, float("nan")])

    def test_inf_rejected(self):
        with pytest.raises(ValidationError):
            Tensor([1.0, float("inf")])

    def test_shape_product_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0, 3.0], shape=(2, 2))

    def test_row_major_flat_data(self):
        t = Tensor([1, 2, 3, 4, 5, 6], shape=(2, 3))
        assert t.shape == (2, 3)
        assert t.data[1, 0] == 4.0

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0,)))


class TestConvSpec:
    def test_bad_kernel(self):
        with pytest.raises(ValidationError):
            ConvSpec(0, 3, 1, 0, 1, 1)

    def test_bad_stride(self):
        with pytest.raises(ValidationError):
            ConvSpec(3, 3, 0, 0, 1, 1)

    def test_output_too_small(self):
        spec = ConvSpec(5, 5, 1, 0, 1, 1)
        with pytest.raises(ShapeError):
            spec.output_hw(3, 3)


class TestConvForward:
    def test_zero_input_gives_bias(self):
        spec = ConvSpec(3, 3, 1, 1, 1, 2)
        x = Tensor.zeros((1, 3, 3))
        w = Tensor(np.random.default_rng(0).standard_normal((2, 1, 3, 3)))
        b = Tensor([0.5, -1.5])
        out = conv2d_forward(x, w, b, spec)
        assert out.shape == (2, 3, 3)
        assert np.allclose(out.data[0], 0.5)
        assert np.allclose(out.data[1], -1.5)

    def test_identity_kernel(self):
        spec = ConvSpec(1, 1, 1, 0, 1, 1)
        x = Tensor(np.random.default_rng(1).random((1, 4, 5), dtype=np.float32))
        w = Tensor([[[[1.0]]]])
        b = Tensor.zeros((1,))
        out = conv2d_forward(x, w, b, spec)
        assert np.array_equal(out.data, x.data)

    def test_matches_loop_oracle_bit_for_bit(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 5, 5)).astype(np.float32)
        w = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        spec = ConvSpec(3, 3, 2, 1, 1, 2)
        got = conv2d_forward(Tensor(x), Tensor(w), Tensor(b), spec)
        want = conv2d_loop(x[None], w, b, 2, 1, f32_ordered=True)[0]
        assert np.array_equal(got.data, want)

    def test_matches_float64_oracle_within_1e5(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            x = rng.standard_normal((3, 8, 7)).astype(np.float32)
            w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
            b = rng.standard_normal(4).astype(np.float32)
            spec = ConvSpec(3, 3, 1, 1, 3, 4)
            got = conv2d_forward(Tensor(x), Tensor(w), Tensor(b), spec).data
            want = conv2d_loop(x[None].astype(np.float64), w, b, 1, 1)[0]
            # 1e-5 relative at tensor scale (float32 accumulation order differs)
            assert np.max(np.abs(got - want)) < 1e-5 * max(1.0, np.max(np.abs(want)))

    def test_channel_mismatch_diagnostic(self):
        spec = ConvSpec(3, 3, 1, 1, 3, 4)
        x = Tensor.zeros((1, 5, 5))
        w = Tensor.zeros((4, 3, 3, 3))
        b = Tensor.zeros((4,))
        with pytest.raises(ShapeError, match="in_channels"):
            conv2d_forward(x, w, b, spec)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((2, 9, 9)).astype(np.float32))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32))
        b = Tensor(rng.standard_normal(3).astype(np.float32))
        spec = ConvSpec(3, 3, 1, 1, 2, 3)
        a = conv2d_forward(x, w, b, spec)
        bb = conv2d_forward(x, w, b, spec)
        assert np.array_equal(a.data, bb.data)


class TestConvBackward:
    def test_zero_upstream(self):
        rng = np.random.default_rng(5)
        spec = ConvSpec(3, 3, 1, 1, 2, 3)
        x = Tensor(rng.standard_normal((2, 6, 6)).astype(np.float32))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32))
        g = Tensor.zeros((3, 6, 6))
        gx, gw, gb = conv2d_backward(g, x, w, spec)
        assert not gx.data.any() and not gw.data.any() and not gb.data.any()

    def test_grad_bias_is_channel_sum(self):
        rng = np.random.default_rng(6)
        spec = ConvSpec(3, 3, 1, 1, 2, 3)
        x = Tensor(rng.standard_normal((2, 6, 6)).astype(np.float32))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32))
        g = rng.standard_normal((3, 6, 6)).astype(np.float32)
        _, _, gb = conv2d_backward(Tensor(g), x, w, spec)
        want = g.sum(axis=(1, 2))
        assert rel_err(gb.data, want) < 1e-5

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (3, 2)])
    def test_finite_differences(self, stride, pad):
        rng = np.random.default_rng(7 + stride * 10 + pad)
        x = rng.standard_normal((1, 2, 7, 7))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        g = rng.standard_normal(_conv2d_batch(x, w, b, stride, pad).shape)
        gx, gw, gb = _conv2d_backward_batch(g, x, w, stride, pad)
        fd_x = central_diff(lambda v: float(np.sum(g * _conv2d_batch(v, w, b, stride, pad))), x)
        fd_w = central_diff(lambda v: float(np.sum(g * _conv2d_batch(x, v, b, stride, pad))), w)
        fd_b = central_diff(lambda v: float(np.sum(g * _conv2d_batch(x, w, v, stride, pad))), b)
        assert rel_err(gx, fd_x) < 1e-4
        assert rel_err(gw, fd_w) < 1e-4
        assert rel_err(gb, fd_b) < 1e-4

    def test_shape_mismatch_rejected(self):
        spec = ConvSpec(3, 3, 1, 1, 2, 3)
        x = Tensor.zeros((2, 6, 6))
        w = Tensor.zeros((3, 2, 3, 3))
        with pytest.raises(ShapeError, match="grad_out"):
            conv2d_backward(Tensor.zeros((3, 5, 5)), x, w, spec)


class TestRelu:
    def test_sign_cases(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_grad_zero_at_zero(self):
        g = relu_backward(Tensor([1.0, 1.0, 1.0]), Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(g.data, [0.0, 0.0, 1.0])

    def test_finite_differences_away_from_zero(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((40,))
        x = x[np.abs(x) > 5e-3][:20]
        g = rng.standard_normal(x.shape)
        an = _relu_grad(g, x)
        fd = central_diff(lambda v: float(np.sum(g * _relu(v))), x)
        assert rel_err(an, fd) < 1e-4


class TestMaxpool:
    def test_single_window(self):
        out, idx = maxpool2(Tensor([[[1.0, 2.0], [3.0, 4.0]]]))
        assert out.data[0, 0, 0] == 4.0
        assert idx[0, 0, 0] == 3

    def test_tie_routes_topleft(self):
        out, idx = maxpool2(Tensor(np.full((1, 4, 4), 2.5, dtype=np.float32)))
        assert np.all(out.data == 2.5)
        assert np.all(idx == 0)
        g = maxpool2_backward(Tensor(np.ones((1, 2, 2), dtype=np.float32)), idx)
        want = np.zeros((1, 4, 4))
        want[0, ::2, ::2] = 1.0
        assert np.array_equal(g.data, want)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((1, 8, 8)).astype(np.float32)
        out, idx = maxpool2(Tensor(x))
        want, warg = maxpool2_loop(x)
        assert np.array_equal(out.data, want)
        assert np.array_equal(idx.astype(np.intp), warg)

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            maxpool2(Tensor(np.zeros((1, 3, 4), dtype=np.float32) + 1))

    def test_finite_differences(self):
        rng = np.random.default_rng(10)
        # rejection-sample until every window has a clear gap between top two
        while True:
            x = rng.standard_normal((1, 1, 6, 6))
            wins = x.reshape(1, 1, 3, 2, 3, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
            top2 = np.sort(wins, axis=1)[:, -2:]
            if np.min(top2[:, 1] - top2[:, 0]) > 5e-3:
                break
        g = rng.standard_normal((1, 1, 3, 3))

        def f(v):
            out, _ = _maxpool2_batch(v)
            return float(np.sum(g * out))

        _, idx = _maxpool2_batch(x)
        an = _maxpool2_grad_batch(g, idx)
        fd = central_diff(f, x)
        assert rel_err(an, fd) < 1e-4

    def test_fused_relu_grad_matches_composition(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        r = _relu(a)
        p, idx = _maxpool2_batch(r)
        g = rng.standard_normal(p.shape).astype(np.float32)
        fused = _maxpool2_relu_grad_batch(g, idx, r)
        composed = _relu_grad(_maxpool2_grad_batch(g, idx), a)
        assert np.array_equal(fused, composed)


class TestFC:
    def test_identity(self):
        x = Tensor([1.0, -2.0, 3.0])
        w = Tensor(np.eye(3, dtype=np.float32))
        b = Tensor.zeros((3,))
        assert np.array_equal(fc_forward(x, w, b).data, x.data)

    def test_zero_input_gives_bias(self):
        x = Tensor.zeros((4,))
        w = Tensor(np.random.default_rng(12).standard_normal((3, 4)).astype(np.float32))
        b = Tensor([1.0, 2.0, 3.0])
        assert np.array_equal(fc_forward(x, w, b).data, b.data)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            fc_forward(Tensor.zeros((5,)), Tensor.zeros((3, 4)), Tensor.zeros((3,)))

    def test_finite_differences(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((1, 4))
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(3)
        g = rng.standard_normal((1, 3))
        gx, gw, gb = _fc_backward_batch(g, x, w)
        fd_x = central_diff(lambda v: float(np.sum(g * _fc_batch(v, w, b))), x)
        fd_w = central_diff(lambda v: float(np.sum(g * _fc_batch(x, v, b))), w)
        fd_b = central_diff(lambda v: float(np.sum(g * _fc_batch(x, w, v))), b)
        assert rel_err(gx, fd_x) < 1e-4
        assert rel_err(gw, fd_w) < 1e-4
        assert rel_err(gb, fd_b) < 1e-4

    def test_backward_formulas(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.standard_normal(4).astype(np.float32))
        w = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
        g = Tensor(rng.standard_normal(3).astype(np.float32))
        gx, gw, gb = fc_backward(g, x, w)
        assert rel_err(gx.data, w.data.T @ g.data) < 1e-6
        assert rel_err(gw.data, np.outer(g.data, x.data)) < 1e-6
        assert np.array_equal(gb.data, g.data)


class TestGlobalAvgPool:
    def test_constant_channel(self):
        x = Tensor(np.full((2, 3, 3), 1.25, dtype=np.float32))
        assert np.allclose(global_avgpool(x).data, 1.25)

    def test_arithmetic_mean(self):
        x = Tensor([[[1.0, 3.0], [5.0, 7.0]]])
        assert global_avgpool(x).data[0] == 4.0

    def test_matches_sum_oracle(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((4, 5, 6)).astype(np.float32)
        got = global_avgpool(Tensor(x)).data
        want = np.array([x[c].sum() / 30.0 for c in range(4)])
        assert rel_err(got, want) < 1e-5

    def test_backward_uniform(self):
        g = Tensor([6.0, 12.0])
        gx = global_avgpool_backward(g, 2, 3)
        assert np.allclose(gx.data[0], 1.0)
        assert np.allclose(gx.data[1], 2.0)

    def test_finite_differences(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((1, 2, 3, 4))
        g = rng.standard_normal((1, 2))
        an = _global_avgpool_grad_batch(g, 3, 4)
        fd = central_diff(lambda v: float(np.sum(g * _global_avgpool_batch(v))), x)
        assert rel_err(an, fd) < 1e-4


class TestSoftmaxXent:
    def test_symmetric_logits(self):
        loss, grad = softmax_xent(Tensor([0.0, 0.0]), 1)
        assert abs(loss - math.log(2)) < 1e-7
        assert np.allclose(grad.data, [0.5, -0.5])

    def test_extreme_logits_no_overflow(self):
        loss, grad = softmax_xent(Tensor([1000.0, -1000.0]), 0)
        assert loss == pytest.approx(0.0, abs=1e-6)
        assert np.isfinite(grad.data).all()

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            logits = Tensor(rng.standard_normal(2).astype(np.float32) * 5)
            label = int(rng.integers(0, 2))
            loss, _ = softmax_xent(logits, label)
            assert loss >= 0.0

    def test_finite_differences(self):
        rng = np.random.default_rng(18)
        for _ in range(10):
            logits = rng.standard_normal((1, 2))
            label = np.array([int(rng.integers(0, 2))])
            _, grad = _softmax_xent_batch(logits, label)
            fd = central_diff(lambda v: float(_softmax_xent_batch(v, label)[0][0]), logits)
            assert rel_err(grad, fd) < 1e-5


class TestBilinearUpsample:
    def test_identity(self):
        rng = np.random.default_rng(19)
        m = rng.random((5, 7), dtype=np.float32)
        out = bilinear_upsample(Tensor(m), 5, 7)
        assert np.array_equal(out.data, m)

    def test_constant(self):
        m = Tensor(np.full((3, 3), 0.7, dtype=np.float32))
        out = bilinear_upsample(m, 9, 11)
        assert np.allclose(out.data, 0.7)

    def test_hand_interpolated_center(self):
        m = Tensor([[0.0, 1.0], [1.0, 2.0]])
        out = bilinear_upsample(m, 3, 3)
        assert out.data[1, 1] == pytest.approx(1.0, abs=1e-7)
        # corners preserved exactly
        assert out.data[0, 0] == 0.0 and out.data[2, 2] == 2.0
        assert out.data[0, 2] == 1.0 and out.data[2, 0] == 1.0

    def test_roundtrip_at_original_grid(self):
        rng = np.random.default_rng(20)
        m = rng.random((4, 6), dtype=np.float32)
        up = _bilinear_resize(m, 7, 11)  # (n-1)*2+1 grid: originals land on nodes
        back = up[::2, ::2]
        assert np.array_equal(back, m)

    def test_single_pixel_source(self):
        out = bilinear_upsample(Tensor([[3.5]]), 4, 4)
        assert np.allclose(out.data, 3.5)


class TestBatchnormInference:
    def test_identity_params(self):
        rng = np.random.default_rng(21)
        x = Tensor(rng.standard_normal((3, 4, 4)).astype(np.float32))
        out = batchnorm_inference(
            x, Tensor.zeros((3,)), Tensor(np.ones(3)), Tensor(np.ones(3)), Tensor.zeros((3,)), 0.0
        )
        assert np.allclose(out.data, x.data, atol=1e-6)

    def test_beta_only(self):
        rng = np.random.default_rng(22)
        x = Tensor(rng.standard_normal((2, 3, 3)).astype(np.float32))
        out = batchnorm_inference(
            x, Tensor.zeros((2,)), Tensor(np.ones(2)), Tensor.zeros((2,)), Tensor([4.0, -2.0]), 1e-5
        )
        assert np.allclose(out.data[0], 4.0)
        assert np.allclose(out.data[1], -2.0)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(23)
        x = rng.standard_normal((3, 2, 2)).astype(np.float32)
        mean = rng.standard_normal(3).astype(np.float32)
        var = rng.random(3).astype(np.float32) + 0.1
        gamma = rng.standard_normal(3).astype(np.float32)
        beta = rng.standard_normal(3).astype(np.float32)
        eps = 1e-5
        got = batchnorm_inference(
            Tensor(x), Tensor(mean), Tensor(var), Tensor(gamma), Tensor(beta), eps
        ).data
        want = np.zeros_like(x, dtype=np.float64)
        for c in range(3):
            for i in range(2):
                for j in range(2):
                    want[c, i, j] = (x[c, i, j] - mean[c]) / math.sqrt(var[c] + eps) * gamma[c] + beta[c]
        assert rel_err(got, want) < 1e-5

    def test_negative_var_rejected(self):
        x = Tensor.zeros((1, 2, 2))
        with pytest.raises(ValidationError):
            batchnorm_inference(
                x, Tensor.zeros((1,)), Tensor([-1.0]), Tensor([1.0]), Tensor.zeros((1,)), 1e-5
            )
