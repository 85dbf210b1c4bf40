import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from din import ops
from din.checks import PRIMITIVES
from din.gradcheck import gradcheck
from din.profiler import profile
from din.tensor import ShapeError, Tensor, backward, no_grad


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def naive_conv2d(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for cc in range(ci):
                        for ky in range(k):
                            for kx in range(k):
                                acc += w[o, cc, ky, kx] * xp[i, cc, y * stride + ky, xx * stride + kx]
                    out[i, o, y, xx] = acc
    return out


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_sum_of_ones():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), pad=1)
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rand(rng, 2, 1, 5, 4)
    out = ops.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize(
    "shape,cout,k,stride,pad",
    [((2, 3, 5, 5), 4, 3, 1, 0), ((2, 3, 5, 5), 4, 3, 1, 1), ((2, 8, 9, 9), 3, 3, 1, 1),
     ((1, 2, 9, 9), 3, 3, 2, 1), ((1, 2, 8, 8), 2, 8, 4, 2), ((2, 4, 6, 7), 5, 1, 1, 0)],
)
def test_conv2d_matches_loop_oracle(shape, cout, k, stride, pad):
    rng = np.random.default_rng(1)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((cout, shape[1], k, k))
    b = rng.standard_normal(cout)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, pad), atol=1e-12, rtol=0)


def test_conv2d_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


def test_conv2d_records_mult_adds():
    with profile() as prof:
        ops.conv2d(Tensor(np.zeros((1, 64, 64, 64))), Tensor(np.zeros((64, 64, 3, 3))), pad=1)
    assert prof.mult_adds == 64 * 64 * 9 * 64 * 64 == 150_994_944


# ---------------------------------------------------------------------------
# depthwise, activations, pooling


def test_depthwise_identity_and_annihilation():
    rng = np.random.default_rng(2)
    x = rand(rng, 2, 4, 3, 3)
    np.testing.assert_array_equal(ops.depthwise_conv1x1(x, Tensor(np.ones(4))).data, x.data)
    w = np.ones(4)
    w[2] = 0.0
    out = ops.depthwise_conv1x1(x, Tensor(w)).data
    assert np.all(out[:, 2] == 0)


def test_depthwise_matches_scalar_multiply():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 4, 3))
    w = rng.standard_normal(5)
    expect = np.stack([x[:, c] * w[c] for c in range(5)], axis=1)
    np.testing.assert_array_equal(ops.depthwise_conv1x1(Tensor(x), Tensor(w)).data, expect)


def test_depthwise_cost_is_chw():
    with profile() as prof:
        ops.depthwise_conv1x1(Tensor(np.zeros((1, 64, 64, 64))), Tensor(np.ones(64)))
    assert prof.mult_adds == 64 * 64 * 64 == 262_144
    assert ops.depthwise_mult_adds(7, 5, 3) == 105


def test_depthwise_length_mismatch():
    with pytest.raises(ShapeError):
        ops.depthwise_conv1x1(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.ones(4)))


def test_leaky_relu_values():
    out = ops.leaky_relu(Tensor(np.array([-1.0, 3.5]).reshape(1, 1, 1, 2)), 0.2).data.ravel()
    np.testing.assert_allclose(out, [-0.2, 3.5])


def test_leaky_relu_gradient_at_minus_one():
    x = Tensor(np.full((1, 1, 1, 1), -1.0), requires_grad=True)
    backward(ops.sum_(ops.leaky_relu(x, 0.2)))
    h = 1e-5
    fd = ((-1.0 + h) * 0.2 - (-1.0 - h) * 0.2) / (2 * h)
    assert x.grad.item() == pytest.approx(0.2)
    assert x.grad.item() == pytest.approx(fd, abs=1e-10)


def test_relu_values():
    out = ops.relu(Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3))).data.ravel()
    np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])


def test_global_avg_pool():
    assert ops.global_avg_pool(Tensor(np.full((1, 2, 3, 3), 4.5))).data.ravel().tolist() == [4.5, 4.5]
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2), requires_grad=True)
    out = ops.global_avg_pool(x)
    assert out.item() == 2.5
    backward(out)
    np.testing.assert_allclose(x.grad, 0.25)


# ---------------------------------------------------------------------------
# layout ops


def test_concat_shapes_and_roundtrip():
    rng = np.random.default_rng(4)
    a, b = rand(rng, 2, 3, 4, 4), rand(rng, 2, 5, 4, 4)
    out = ops.concat_channels(a, b)
    assert out.shape == (2, 8, 4, 4)
    np.testing.assert_array_equal(ops.slice_channels(out, 0, 3).data, a.data)
    np.testing.assert_array_equal(ops.slice_channels(out, 3, 8).data, b.data)
    empty = Tensor(np.zeros((2, 0, 4, 4)))
    np.testing.assert_array_equal(ops.concat_channels(a, empty).data, a.data)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        ops.concat_channels(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5))))


def test_add_and_scale():
    rng = np.random.default_rng(5)
    x = rand(rng, 1, 2, 3, 3)
    np.testing.assert_array_equal(ops.add(x, Tensor(np.zeros(x.shape))).data, x.data)
    np.testing.assert_allclose(ops.scale(ops.scale(x, 0.1), 10).data, x.data, atol=1e-12)
    with pytest.raises(ShapeError):
        ops.add(x, Tensor(np.zeros((1, 2, 3, 4))))


def test_pixel_shuffle_identity_and_index_formula():
    rng = np.random.default_rng(6)
    x = rand(rng, 1, 4, 2, 2)
    np.testing.assert_array_equal(ops.pixel_shuffle(x, 1).data, x.data)
    y = rand(rng, 2, 8, 3, 5)
    out = ops.pixel_shuffle(y, 2).data
    assert out.shape == (2, 2, 6, 10)
    r = 2
    for n in range(2):
        for c in range(2):
            for h in range(3):
                for w in range(5):
                    for dy in range(r):
                        for dx in range(r):
                            assert out[n, c, r * h + dy, r * w + dx] == y.data[n, c * r * r + dy * r + dx, h, w]


def test_pixel_shuffle_roundtrip_and_error():
    rng = np.random.default_rng(7)
    x = rand(rng, 1, 18, 2, 3)
    back = ops.pixel_unshuffle(ops.pixel_shuffle(x, 3), 3)
    np.testing.assert_array_equal(back.data, x.data)
    with pytest.raises(ShapeError):
        ops.pixel_shuffle(Tensor(np.zeros((1, 3, 2, 2))), 2)


@settings(max_examples=30, deadline=None)
@given(r=st.integers(1, 3), c=st.integers(1, 3), h=st.integers(1, 4), w=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_pixel_shuffle_preserves_multiset(r, c, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((1, c * r * r, h, w))
    out = ops.pixel_shuffle(Tensor(x), r).data
    np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(x.ravel()))


# ---------------------------------------------------------------------------
# bicubic


def keys(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def direct_upscale(img, s):
    """Per-pixel kernel sum with clamped taps (upscaling, no antialias)."""
    h, w = img.shape
    out = np.zeros((h * s, w * s))
    for i in range(h * s):
        for j in range(w * s):
            cy = (i + 0.5) / s - 0.5
            cx = (j + 0.5) / s - 0.5
            acc = 0.0
            for ty in range(int(np.floor(cy)) - 1, int(np.floor(cy)) + 3):
                for tx in range(int(np.floor(cx)) - 1, int(np.floor(cx)) + 3):
                    acc += keys(cy - ty) * keys(cx - tx) * img[min(max(ty, 0), h - 1), min(max(tx, 0), w - 1)]
            out[i, j] = acc
    return out


def test_bicubic_identity_at_scale_one():
    rng = np.random.default_rng(8)
    x = rand(rng, 1, 2, 5, 7)
    np.testing.assert_allclose(ops.bicubic_resize(x, 1).data, x.data, atol=1e-12)


@pytest.mark.parametrize("scale", [2, 3, 0.5, 1 / 3, 1.5])
def test_bicubic_constant_preserved(scale):
    x = Tensor(np.full((1, 1, 12, 12), 0.37))
    out = ops.bicubic_resize(x, scale)
    assert out.shape == (1, 1, round(12 * scale), round(12 * scale))
    np.testing.assert_allclose(out.data, 0.37, atol=1e-9)


def test_bicubic_ramp_upscale_matches_direct_oracle():
    yy, xx = np.mgrid[0:8, 0:8]
    ramp = (0.1 * xx + 0.03 * yy + 0.01 * xx * yy).astype(float)
    out = ops.bicubic_resize(Tensor(ramp[None, None]), 2).data[0, 0]
    np.testing.assert_allclose(out, direct_upscale(ramp, 2), atol=1e-9)


def test_bicubic_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        ops.bicubic_resize(Tensor(np.zeros((1, 1, 4, 4))), 0)


# ---------------------------------------------------------------------------
# backward


def test_backward_linear_and_quadratic():
    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    backward(ops.sum_(ops.scale(x, 3)))
    np.testing.assert_allclose(x.grad, 3.0)
    x.grad = None
    backward(ops.sum_(ops.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_needs_scalar_root():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ops.scale(x, 2))


def test_grad_accumulates_over_two_uses():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    backward(ops.sum_(ops.add(x, x)))
    np.testing.assert_allclose(x.grad, 2.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with no_grad():
        y = ops.scale(x, 2)
    assert not y.requires_grad and y._parents == ()


# ---------------------------------------------------------------------------
# gradient checks on every primitive, 20 seeds each


OP_CASES = PRIMITIVES


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_primitive_gradcheck_20_seeds(name):
    worst = 0.0
    for seed in range(20):
        f, inputs = OP_CASES[name](np.random.default_rng(seed))
        worst = max(worst, gradcheck(f, inputs, seed=seed))
    assert worst < 1e-6, f"{name}: {worst:.3g}"


def test_gradcheck_two_layer_stack():
    rng = np.random.default_rng(11)
    x, w1, b1, w2, b2 = rand(rng, 1, 2, 5, 5), rand(rng, 3, 2, 3, 3), rand(rng, 3), rand(rng, 2, 3, 3, 3), rand(rng, 2)

    def f(x, w1, b1, w2, b2):
        h = ops.leaky_relu(ops.conv2d(x, w1, b1, 1, 1), 0.2)
        return ops.leaky_relu(ops.conv2d(h, w2, b2, 1, 1), 0.2)

    assert gradcheck(f, [x, w1, b1, w2, b2]) < 1e-6


def test_l1_gradient_is_sign_over_numel():
    from din.train import l1_loss

    rng = np.random.default_rng(12)
    p = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    t = Tensor(rng.standard_normal((1, 2, 3, 3)))
    backward(l1_loss(p, t))
    np.testing.assert_allclose(p.grad, np.sign(p.data - t.data) / p.size)
    assert gradcheck(lambda p: l1_loss(p, t), [p]) < 1e-6


def test_finite_forward_on_finite_inputs():
    rng = np.random.default_rng(13)
    x = rand(rng, 1, 2, 6, 6)
    for f in (lambda x: ops.bicubic_resize(x, 3), ops.relu, ops.global_avg_pool):
        assert np.isfinite(f(x).data).all()
