"""Kernel-level tests: forward values against independent oracles,
autograd against finite differences, engine invariants."""

import struct

import numpy as np
import pytest

from pyrcore import tensor as T
from pyrcore.tensor import Tensor


def rng64(seed=0):
    return np.random.default_rng(seed)


def rand_t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64)


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def conv2d_loop(x, w, b=None, stride=1, padding=0):
    """Direct loop-nest multiply-accumulate reference, written without
    reference to the production kernel."""
    n, c, h, wid = x.shape
    oc, ic, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wid + 2 * padding - k) // stride + 1
    xp = np.zeros((n, c, h + 2 * padding, wid + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + wid] = x
    out = np.zeros((n, oc, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(ic):
                        for di in range(k):
                            for dj in range(k):
                                acc += w[o, ci, di, dj] * xp[ni, ci, i * stride + di, j * stride + dj]
                    out[ni, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def bilinear_point(x2d, dst_i, dst_j, out_h, out_w):
    """Evaluate the half-pixel sampling formula at one output pixel."""
    h, w = x2d.shape
    sy = min(max((dst_i + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
    sx = min(max((dst_j + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
    y0, x0 = int(np.floor(sy)), int(np.floor(sx))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    ty, tx = sy - y0, sx - x0
    return ((1 - ty) * (1 - tx) * x2d[y0, x0] + (1 - ty) * tx * x2d[y0, x1]
            + ty * (1 - tx) * x2d[y1, x0] + ty * tx * x2d[y1, x1])


def two_pass_stats(values):
    mean = values.sum() / values.size
    var = ((values - mean) ** 2).sum() / values.size
    return mean, var


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv2d_identity_1x1():
    rng = rng64(1)
    x = rand_t(rng, 2, 3, 5, 5)
    eye = np.zeros((3, 3, 1, 1))
    for i in range(3):
        eye[i, i, 0, 0] = 1.0
    out = T.conv2d(x, Tensor(eye))
    assert np.array_equal(out.data, x.data)


def test_conv2d_output_sizes_stride2():
    # matches the P5 -> P6 -> P7 sizes of an 800x800 image
    assert T.conv_out_size(25, 3, 2, 1) == 13
    assert T.conv_out_size(13, 3, 2, 1) == 7
    rng = rng64(2)
    x = rand_t(rng, 1, 2, 25, 25)
    w = rand_t(rng, 4, 2, 3, 3)
    out = T.conv2d(x, w, stride=2, padding=1)
    assert out.shape == (1, 4, 13, 13)
    out2 = T.conv2d(out, rand_t(rng, 4, 4, 3, 3), stride=2, padding=1)
    assert out2.shape == (1, 4, 7, 7)


def test_conv2d_matches_loop_oracle():
    x = np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4)
    w = np.array([[1, 0, -1], [2, 0, -2], [1, 0, -1]], dtype=np.float64).reshape(1, 1, 3, 3)
    got = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    want = conv2d_loop(x, w, padding=1)
    assert np.allclose(got, want, atol=1e-12)
    # one hand-computed pixel as a spot check on the oracle itself
    assert got[0, 0, 0, 0] == -10.0


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 1), (1, 1, 3), (2, 1, 3), (3, 2, 5)])
def test_conv2d_random_vs_oracle(stride, padding, k):
    rng = rng64(3)
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    want = conv2d_loop(x, w, b, stride=stride, padding=padding)
    assert np.allclose(got, want, atol=1e-10)


def test_conv2d_channel_mismatch_raises():
    rng = rng64(4)
    with pytest.raises(T.ShapeError):
        T.conv2d(rand_t(rng, 1, 3, 4, 4), rand_t(rng, 2, 4, 1, 1))


def test_conv2d_nonpositive_output_raises():
    rng = rng64(5)
    with pytest.raises(T.ShapeError):
        T.conv2d(rand_t(rng, 1, 1, 2, 2), rand_t(rng, 1, 1, 5, 5))


def test_conv_linearity():
    rng = rng64(6)
    x = rng.standard_normal((1, 2, 6, 6))
    y = rng.standard_normal((1, 2, 6, 6))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    a, b = 1.7, -0.4
    lhs = T.conv2d(Tensor(a * x + b * y), w, padding=1).data
    rhs = a * T.conv2d(Tensor(x), w, padding=1).data + b * T.conv2d(Tensor(y), w, padding=1).data
    assert np.allclose(lhs, rhs, rtol=1e-5, atol=1e-8)


# ---------------------------------------------------------------------------
# group_norm
# ---------------------------------------------------------------------------

def test_group_norm_constant_input_is_zero():
    x = Tensor(np.full((2, 4, 3, 3), 7.5))
    out = T.group_norm(x, 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.allclose(out.data, 0.0, atol=1e-6)


def test_group_norm_statistics_two_pass():
    rng = rng64(7)
    n, c, h, w, groups = 2, 8, 5, 4, 4
    x = rng.standard_normal((n, c, h, w)) * 3 + 1
    out = T.group_norm(Tensor(x), groups, Tensor(np.ones(c)), Tensor(np.zeros(c))).data
    cg = c // groups
    for ni in range(n):
        for g in range(groups):
            vals = out[ni, g * cg:(g + 1) * cg].reshape(-1)
            mean, var = two_pass_stats(vals)
            assert abs(mean) < 1e-6
            assert abs(var - 1.0) < 1e-4


def test_group_norm_gamma_zero_gives_beta():
    rng = rng64(8)
    x = rand_t(rng, 1, 6, 2, 2)
    beta = np.array([0.0, 1, 2, 3, 4, 5])
    out = T.group_norm(x, 3, Tensor(np.zeros(6)), Tensor(beta)).data
    assert np.allclose(out, beta[None, :, None, None] * np.ones_like(out))


def test_group_norm_divisibility_error():
    rng = rng64(9)
    with pytest.raises(T.ShapeError):
        T.group_norm(rand_t(rng, 1, 6, 2, 2), 4, Tensor(np.ones(6)), Tensor(np.zeros(6)))


# ---------------------------------------------------------------------------
# relu / add / sum
# ---------------------------------------------------------------------------

def test_relu_cases():
    assert np.all(T.relu(Tensor(-np.ones((1, 1, 2, 2)))).data == 0)
    x = np.abs(rng64(10).standard_normal((1, 1, 3, 3))) + 0.1
    assert np.array_equal(T.relu(Tensor(x)).data, x)
    got = T.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data
    assert np.array_equal(got, [0.0, 0.0, 2.0])


def test_add_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 1))))


# ---------------------------------------------------------------------------
# bilinear_resize
# ---------------------------------------------------------------------------

def test_bilinear_identity_bit_exact():
    rng = rng64(11)
    x = rng.standard_normal((2, 3, 5, 7))
    out = T.bilinear_resize(Tensor(x), 5, 7).data
    assert np.array_equal(out, x)


def test_bilinear_constant_preserved():
    x = Tensor(np.full((1, 2, 3, 3), 4.25))
    out = T.bilinear_resize(x, 7, 5).data
    assert np.allclose(out, 4.25, atol=1e-12)


def test_bilinear_2x2_to_4x4_frozen():
    x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
    got = T.bilinear_resize(Tensor(x), 4, 4).data[0, 0]
    want = np.array([
        [0.00, 0.25, 0.75, 1.00],
        [0.50, 0.75, 1.25, 1.50],
        [1.50, 1.75, 2.25, 2.50],
        [2.00, 2.25, 2.75, 3.00],
    ])
    assert np.allclose(got, want, atol=1e-12)
    # cross-check every pixel against the scalar sampling formula
    for i in range(4):
        for j in range(4):
            assert abs(got[i, j] - bilinear_point(x[0, 0], i, j, 4, 4)) < 1e-12


def test_bilinear_random_vs_point_oracle():
    rng = rng64(12)
    x = rng.standard_normal((1, 2, 5, 3))
    out = T.bilinear_resize(Tensor(x), 8, 7).data
    for ci in range(2):
        for i in range(8):
            for j in range(7):
                assert abs(out[0, ci, i, j] - bilinear_point(x[0, ci], i, j, 8, 7)) < 1e-10


def test_bilinear_partition_of_unity():
    for n_in, n_out in [(2, 4), (4, 2), (5, 13), (13, 5), (7, 7), (1, 6)]:
        for dt in (np.float32, np.float64):
            m = T._interp_matrix(n_in, n_out, np.dtype(dt).type)
            sums = m.sum(axis=1)
            assert np.all(np.abs(sums - 1.0) <= np.finfo(dt).eps)


def test_bilinear_bad_target_raises():
    with pytest.raises(T.ShapeError):
        T.bilinear_resize(Tensor(np.zeros((1, 1, 2, 2))), 0, 3)


# ---------------------------------------------------------------------------
# autograd
# ---------------------------------------------------------------------------

def test_grad_check_conv2d():
    rng = rng64(13)
    x = rand_t(rng, 1, 2, 5, 5)
    w = rand_t(rng, 3, 2, 3, 3)
    b = rand_t(rng, 3)
    err = T.grad_check(lambda: T.conv2d(x, w, b, stride=2, padding=1).sum(), [x, w, b])
    assert err < 1e-6


def test_grad_check_group_norm():
    rng = rng64(14)
    x = rand_t(rng, 2, 4, 3, 3)
    gamma = Tensor(rng.uniform(0.5, 1.5, 4), dtype=np.float64)
    beta = rand_t(rng, 4)
    err = T.grad_check(lambda: T.group_norm(x, 2, gamma, beta).sum(), [x, gamma, beta])
    assert err < 1e-5


def test_grad_check_bilinear():
    rng = rng64(15)
    x = rand_t(rng, 1, 2, 4, 4)
    err = T.grad_check(lambda: T.bilinear_resize(x, 8, 8).sum(), [x])
    assert err < 1e-6
    err_down = T.grad_check(lambda: T.bilinear_resize(x, 3, 2).sum(), [x])
    assert err_down < 1e-6


def test_grad_check_relu_offset_from_kink():
    rng = rng64(16)
    # keep probes away from 0 so finite differences stay valid
    x = Tensor(rng.uniform(0.5, 1.5, (1, 2, 3, 3)) * np.sign(rng.standard_normal((1, 2, 3, 3))),
               dtype=np.float64)
    err = T.grad_check(lambda: T.relu(x).sum(), [x])
    assert err < 1e-8


def test_grad_check_random_compositions():
    rng = rng64(17)
    for trial in range(5):
        x = rand_t(rng, 1, 4, 6, 6)
        w1 = rand_t(rng, 4, 4, 3, 3, scale=0.5)
        gamma = Tensor(rng.uniform(0.5, 1.5, 4), dtype=np.float64)
        beta = rand_t(rng, 4)
        w2 = rand_t(rng, 2, 4, 1, 1, scale=0.5)

        def f():
            h = T.conv2d(x, w1, padding=1)
            h = T.group_norm(h, 2, gamma, beta)
            h = T.bilinear_resize(h, 3, 3)
            h = T.conv2d(h, w2)
            h = T.add(h, h)
            return h.sum()

        err = T.grad_check(f, [x, w1, gamma, beta, w2], max_checks=40,
                           rng=np.random.default_rng(trial))
        assert err < 1e-4


def test_gradient_accumulates_across_uses():
    x = Tensor(np.ones((1, 1, 2, 2)), dtype=np.float64, requires_grad=True)
    out = T.add(x, x).sum()
    out.backward()
    assert np.allclose(x.grad, 2.0)


# ---------------------------------------------------------------------------
# determinism, init, serialization
# ---------------------------------------------------------------------------

def test_determinism_same_seed_bit_identical():
    def run(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((1, 4, 6, 6)), requires_grad=True)
        w = Tensor(T.kaiming_uniform(rng, (4, 4, 3, 3), 36, np.float64), requires_grad=True)
        out = T.conv2d(x, w, padding=1).sum()
        out.backward()
        return x.data.copy(), out.data.copy(), x.grad.copy(), w.grad.copy()

    a = run(123)
    b = run(123)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_kaiming_uniform_bound_and_mean():
    rng = rng64(18)
    w = T.kaiming_uniform(rng, (64, 16, 3, 3), 16 * 9, np.float64)
    bound = np.sqrt(6.0 / (16 * 9))
    assert np.all(np.abs(w) <= bound)
    assert abs(w.mean()) < 3 * bound / np.sqrt(3 * w.size)


def test_serialization_round_trip_and_golden_bytes():
    arr = np.array([[1.5, -2.0], [0.25, 4.0]], dtype=np.float32)
    buf = T.tensor_to_bytes(arr)
    want = (b"TPN1" + struct.pack("<BB", 0, 2) + struct.pack("<QQ", 2, 2)
            + struct.pack("<4f", 1.5, -2.0, 0.25, 4.0))
    assert buf == want
    back, end = T.tensor_from_bytes(buf)
    assert end == len(buf)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)

    arr64 = np.arange(6, dtype=np.float64).reshape(3, 2)
    two = T.tensor_to_bytes(arr) + T.tensor_to_bytes(arr64)
    first, off = T.tensor_from_bytes(two)
    second, end = T.tensor_from_bytes(two, off)
    assert np.array_equal(second, arr64) and end == len(two)


def test_serialization_rejects_bad_magic():
    with pytest.raises(ValueError):
        T.tensor_from_bytes(b"NOPE" + b"\x00" * 10)


def test_no_grad_blocks_graph():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with T.no_grad():
        out = T.relu(x)
    assert not out.requires_grad
