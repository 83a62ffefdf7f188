import io
import math

import numpy as np
import pytest

from eqreg.tensor import (
    ConvParams,
    EqtFormatError,
    as_tensor4,
    conv2d_backward,
    conv2d_forward,
    frobenius_sq,
    load_tensor,
    read_tensor,
    relu_backward,
    relu_forward,
    save_tensor,
    write_tensor,
)

from naive_ref import central_difference, conv2d_loops, rel_err


def rand_params(rng, cout, cin, p, dtype=np.float64):
    w = rng.standard_normal((cout, cin, p, p)).astype(dtype)
    b = rng.standard_normal(cout).astype(dtype)
    return ConvParams(w, b)


class TestConvForward:
    def test_identity_kernel_scales(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        params = ConvParams(np.full((1, 1, 1, 1), 2.0), np.zeros(1))
        np.testing.assert_array_equal(conv2d_forward(x, params), 2.0 * x)

    def test_ones_kernel_full_overlap(self):
        # 2x2 ones with a 3x3 ones kernel: every window covers all four pixels
        x = np.ones((1, 1, 2, 2))
        params = ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1))
        np.testing.assert_array_equal(conv2d_forward(x, params), np.full((1, 1, 2, 2), 4.0))

    def test_bias_only(self):
        x = np.zeros((2, 3, 4, 4))
        params = ConvParams(np.zeros((5, 3, 3, 3)), np.arange(5.0))
        out = conv2d_forward(x, params)
        np.testing.assert_array_equal(out, np.broadcast_to(np.arange(5.0)[:, None, None], (2, 5, 4, 4)))

    @pytest.mark.parametrize("shape,cout,p", [((2, 3, 5, 5), 4, 3), ((1, 1, 4, 6), 2, 5), ((3, 2, 3, 3), 1, 1)])
    def test_matches_loop_reference(self, shape, cout, p):
        rng = np.random.default_rng(hash((shape, cout, p)) % 2**32)
        x = rng.standard_normal(shape)
        params = rand_params(rng, cout, shape[1], p)
        got = conv2d_forward(x, params)
        want = conv2d_loops(x, params.weight, params.bias)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        x = np.zeros((1, 2, 4, 4))
        params = ConvParams(np.zeros((1, 3, 3, 3)), np.zeros(1))
        with pytest.raises(ValueError, match="channels"):
            conv2d_forward(x, params)

    def test_rank_validation(self):
        with pytest.raises(ValueError, match="rank-4"):
            as_tensor4(np.zeros((2, 3, 4)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1))

    def test_bias_shape_rejected(self):
        with pytest.raises(ValueError, match="bias"):
            ConvParams(np.zeros((2, 1, 3, 3)), np.zeros(3))

    def test_deterministic_bits(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
        params = rand_params(rng, 4, 4, 3, np.float32)
        a = conv2d_forward(x, params)
        b = conv2d_forward(x, params)
        assert a.tobytes() == b.tobytes()


class TestConvBackward:
    def test_zero_grad_out(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 4, 4))
        params = rand_params(rng, 2, 3, 3)
        gx, gw, gb = conv2d_backward(x, params, np.zeros((2, 2, 4, 4)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_one_by_one_grad_w_is_input_sum(self):
        # out = w * x elementwise, loss = sum(out): dL/dw = sum(x)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 1, 3, 3))
        params = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
        _, gw, gb = conv2d_backward(x, params, np.ones((2, 1, 3, 3)))
        assert math.isclose(gw[0, 0, 0, 0], x.sum(), rel_tol=1e-12)
        assert math.isclose(gb[0], 18.0, rel_tol=1e-12)

    def test_grad_x_adjoint_identity(self):
        # bias-free conv is linear in x: <conv(x), g> must equal <x, grad_x>
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 6, 6))
        params = ConvParams(rng.standard_normal((4, 3, 3, 3)), np.zeros(4))
        g = rng.standard_normal((2, 4, 6, 6))
        gx, _, _ = conv2d_backward(x, params, g)
        lhs = np.vdot(conv2d_forward(x, params), g)
        rhs = np.vdot(x, gx)
        assert rel_err(lhs, rhs) < 1e-12

    @pytest.mark.parametrize("p", [1, 3, 5])
    def test_finite_difference_all_parameter_kinds(self, p):
        rng = np.random.default_rng(10 + p)
        x = rng.standard_normal((2, 2, 4, 4))
        params = rand_params(rng, 3, 2, p)
        g = rng.standard_normal((2, 3, 4, 4))
        gx, gw, gb = conv2d_backward(x, params, g)

        def loss_of_w(w):
            return np.vdot(conv2d_forward(x, ConvParams(w, params.bias)), g)

        def loss_of_x(xv):
            return np.vdot(conv2d_forward(xv, params), g)

        def loss_of_b(b):
            return np.vdot(conv2d_forward(x, ConvParams(params.weight, b)), g)

        for _ in range(12):
            idx = tuple(rng.integers(0, d) for d in params.weight.shape)
            assert rel_err(central_difference(loss_of_w, params.weight, idx), gw[idx]) < 1e-5
        for _ in range(8):
            idx = tuple(rng.integers(0, d) for d in x.shape)
            assert rel_err(central_difference(loss_of_x, x, idx), gx[idx]) < 1e-5
        for i in range(3):
            assert rel_err(central_difference(loss_of_b, params.bias, (i,)), gb[i]) < 1e-5

    def test_grad_out_shape_rejected(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 2, 4, 4))
        params = rand_params(rng, 3, 2, 3)
        with pytest.raises(ValueError, match="grad_out"):
            conv2d_backward(x, params, np.zeros((1, 3, 5, 5)))


class TestRelu:
    def test_values(self):
        x = np.array([[[[-1.0, 0.0], [2.5, -0.1]]]])
        np.testing.assert_array_equal(relu_forward(x), [[[[0.0, 0.0], [2.5, 0.0]]]])

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 4, 4))
        y = relu_forward(x)
        np.testing.assert_array_equal(relu_forward(y), y)

    def test_backward_masks_nonpositive(self):
        x = np.array([[[[-1.0, 0.0], [2.0, 3.0]]]])
        g = np.ones_like(x)
        np.testing.assert_array_equal(relu_backward(x, g), [[[[0.0, 0.0], [1.0, 1.0]]]])

    def test_backward_finite_difference(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 2, 5, 5)) + 0.3  # keep coordinates away from the kink
        g = rng.standard_normal(x.shape)
        gx = relu_backward(x, g)
        for _ in range(20):
            idx = tuple(rng.integers(0, d) for d in x.shape)
            if abs(x[idx]) < 1e-3:
                continue
            fd = central_difference(lambda xv: np.vdot(relu_forward(xv), g), x, idx)
            assert rel_err(fd, gx[idx], floor=1e-9) < 1e-5


class TestFrobenius:
    def test_zeros(self):
        assert frobenius_sq(np.zeros((2, 2))) == 0.0

    def test_three_four_five(self):
        assert frobenius_sq(np.array([3.0, 4.0])) == 25.0

    def test_homogeneity(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 4))
        assert math.isclose(frobenius_sq(2.0 * x), 4.0 * frobenius_sq(x), rel_tol=1e-15)

    def test_permutation_invariant_bitwise(self):
        # exact rounding makes the sum independent of element order
        rng = np.random.default_rng(8)
        x = rng.standard_normal(4096).astype(np.float32)
        for seed in range(5):
            perm = np.random.default_rng(seed).permutation(x.size)
            assert frobenius_sq(x[perm]) == frobenius_sq(x)

    def test_finite_on_finite_input(self):
        rng = np.random.default_rng(9)
        x = (rng.standard_normal((4, 4, 8, 8)) * 1e18).astype(np.float64)
        assert math.isfinite(frobenius_sq(x))


class TestEqt1:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("shape", [(3,), (2, 5), (2, 3, 4, 5)])
    def test_roundtrip(self, tmp_path, dtype, shape):
        rng = np.random.default_rng(11)
        arr = rng.standard_normal(shape).astype(dtype)
        path = tmp_path / "t.eqt1"
        save_tensor(path, arr)
        back = load_tensor(path)
        assert back.dtype == arr.dtype and back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()

    def test_stream_of_records(self):
        buf = io.BytesIO()
        a = np.arange(6.0, dtype=np.float32).reshape(2, 3)
        b = np.ones((4,), dtype=np.float64)
        write_tensor(buf, a)
        write_tensor(buf, b)
        buf.seek(0)
        np.testing.assert_array_equal(read_tensor(buf), a)
        np.testing.assert_array_equal(read_tensor(buf), b)

    def test_bad_magic(self):
        with pytest.raises(EqtFormatError, match="magic"):
            read_tensor(io.BytesIO(b"NOPE" + b"\x00" * 16))

    def test_truncated_payload(self):
        buf = io.BytesIO()
        write_tensor(buf, np.ones((8, 8), dtype=np.float32))
        raw = buf.getvalue()[:-7]
        with pytest.raises(EqtFormatError, match="truncated"):
            read_tensor(io.BytesIO(raw))

    def test_truncated_header(self):
        with pytest.raises(EqtFormatError, match="truncated"):
            read_tensor(io.BytesIO(b"EQT"))

    def test_unknown_dtype_tag(self):
        buf = io.BytesIO()
        write_tensor(buf, np.ones(2, dtype=np.float32))
        raw = bytearray(buf.getvalue())
        raw[4] = 9
        with pytest.raises(EqtFormatError, match="dtype"):
            read_tensor(io.BytesIO(bytes(raw)))

    def test_integer_dtype_rejected_on_write(self):
        with pytest.raises(ValueError, match="float32/float64"):
            write_tensor(io.BytesIO(), np.arange(4))

    def test_byte_layout_is_little_endian(self):
        buf = io.BytesIO()
        write_tensor(buf, np.array([1.0], dtype=np.float32))
        raw = buf.getvalue()
        assert raw[:4] == b"EQT1"
        assert raw[4] == 0 and raw[5] == 1
        assert raw[6:10] == (1).to_bytes(4, "little")
        assert raw[10:14] == np.float32(1.0).tobytes()
