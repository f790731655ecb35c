import numpy as np
import pytest

from advposter.diffcore import (DiffError, PRIMITIVES, ShapeError, Tape, Tensor,
                                grad_check)


def _scalar(tape, t):
    return tape.mean(t) if t.size > 1 else t


def test_tensor_rejects_non_finite():
    with pytest.raises(DiffError):
        Tensor([1.0, np.nan])
    with pytest.raises(DiffError):
        Tensor([np.inf])


def test_relu_definition():
    out = Tape().relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_relu_gradient_flat_region_and_at_zero():
    tape = Tape()
    x = Tensor([-1.0, 0.0, 3.0], requires_grad=True)
    y = tape.sum(tape.relu(x))
    grads = tape.backward(y)
    assert np.array_equal(grads[x], [0.0, 0.0, 1.0])  # 0 at the kink by definition


def test_mean_gradient_is_uniform():
    tape = Tape()
    x = Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True)
    grads = tape.backward(tape.mean(x))
    assert np.allclose(grads[x], 0.25)


def test_bilinear_resize_of_constant_is_constant():
    img = np.full((7, 5, 3), 0.631)
    for out_h, out_w in ((3, 3), (14, 10), (7, 5), (1, 9)):
        out = Tape().bilinear_resize(Tensor(img), out_h, out_w)
        assert out.shape == (out_h, out_w, 3)
        assert np.allclose(out.data, 0.631)


def test_bilinear_resize_identity():
    img = np.random.default_rng(0).uniform(size=(6, 6, 2))
    out = Tape().bilinear_resize(Tensor(img), 6, 6)
    assert np.allclose(out.data, img)


def test_conv2d_all_ones_hand_example():
    # 3x3 ones kernel over 5x5 ones image, stride 1, no padding -> 3x3 nines
    x = Tensor(np.ones((1, 5, 5, 1)))
    w = Tensor(np.ones((3, 3, 1, 1)))
    b = Tensor(np.zeros(1))
    out = Tape().conv2d(x, w, b, stride=1)
    assert out.shape == (1, 3, 3, 1)
    assert np.allclose(out.data, 9.0)


def test_conv2d_stride_output_shape():
    out = Tape().conv2d(Tensor(np.ones((2, 9, 9, 3))),
                        Tensor(np.ones((3, 3, 3, 4))), Tensor(np.zeros(4)), stride=2)
    assert out.shape == (2, 4, 4, 4)


def test_conv2d_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="conv2d"):
        Tape().conv2d(Tensor(np.ones((1, 5, 5, 2))), Tensor(np.ones((3, 3, 1, 1))),
                      Tensor(np.zeros(1)))


def test_affine_shape_mismatch():
    with pytest.raises(ShapeError, match="affine"):
        Tape().affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))),
                      Tensor(np.zeros(5)))


def test_backward_requires_scalar():
    tape = Tape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = tape.relu(x)
    with pytest.raises(DiffError, match="scalar"):
        tape.backward(y)


def test_grad_check_sum_of_squares():
    def f(tape, x):
        return tape.sum(tape.mul(x, x))

    err = grad_check(f, Tensor([1.0, 2.0, 3.0]), step=1e-4)
    assert err < 1e-6


def test_grad_check_constant_function():
    def f(tape, x):
        return tape.scale(tape.sum(tape.mul(x, Tensor(np.zeros(3)))), 1.0)

    assert grad_check(f, Tensor([1.0, 2.0, 3.0])) == 0.0


@pytest.mark.parametrize("op_kind", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(op_kind):
    """Every primitive's backward vs central differences on random inputs
    nudged away from non-smooth points."""
    rng = np.random.default_rng(hash(op_kind) % 2 ** 31)

    def nudged(shape, lo=-1.0, hi=1.0):
        a = rng.uniform(lo, hi, size=shape)
        a[np.abs(a) < 1e-2] += 0.05  # keep clear of relu/abs/min kinks
        return a

    x0 = nudged((4, 5))
    if op_kind in ("add", "sub", "mul"):
        other = Tensor(nudged((4, 5)))
        f = lambda tape, x: tape.mean(tape.apply(op_kind, (x, other)))
    elif op_kind == "scale":
        f = lambda tape, x: tape.mean(tape.scale(x, -1.7))
    elif op_kind in ("abs", "relu", "sigmoid"):
        f = lambda tape, x: tape.mean(tape.apply(op_kind, (x,)))
    elif op_kind == "sqrt":
        x0 = rng.uniform(0.5, 2.0, size=(4, 5))
        f = lambda tape, x: tape.mean(tape.sqrt(x))
    elif op_kind in ("minimum", "maximum"):
        f = lambda tape, x: tape.mean(tape.apply(op_kind, (x,), {"c": 0.21}))
    elif op_kind in ("mean", "sum"):
        f = lambda tape, x: tape.apply(op_kind, (x,))
    elif op_kind == "reshape":
        f = lambda tape, x: tape.mean(tape.reshape(x, (2, 10)))
    elif op_kind == "transpose":
        f = lambda tape, x: tape.mean(tape.transpose(x, (1, 0)))
    elif op_kind == "concat":
        other = Tensor(nudged((4, 5)))
        f = lambda tape, x: tape.mean(tape.concat([x, other], axis=1))
    elif op_kind == "slice":
        f = lambda tape, x: tape.mean(tape.slice(x, (slice(1, 3), slice(0, 4))))
    elif op_kind == "affine":
        w = Tensor(nudged((5, 3)))
        b = Tensor(nudged(3))
        f = lambda tape, x: tape.mean(tape.affine(x, w, b))
    elif op_kind == "conv2d":
        x0 = nudged((2, 6, 6, 3))
        w = Tensor(nudged((3, 3, 3, 2)))
        b = Tensor(nudged(2))
        f = lambda tape, x: tape.mean(tape.conv2d(x, w, b, stride=2))
    elif op_kind == "bilinear_sample":
        x0 = nudged((6, 6, 3))
        ys = rng.uniform(-1.0, 6.0, size=(4, 4))
        xs = rng.uniform(-1.0, 6.0, size=(4, 4))
        f = lambda tape, x: tape.mean(tape.bilinear_sample(x, ys, xs, padding="zeros"))
    elif op_kind == "bilinear_resize":
        x0 = nudged((5, 4, 2))
        f = lambda tape, x: tape.mean(tape.bilinear_resize(x, 9, 7))
    else:
        raise AssertionError(f"unhandled primitive {op_kind}")

    assert grad_check(f, Tensor(x0), step=1e-4) < 1e-4


def test_affine_weight_and_bias_gradients():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(3, 4)))
    w0 = rng.normal(size=(4, 2))
    b0 = rng.normal(size=2)

    def f_w(tape, w):
        return tape.mean(tape.affine(x, w, Tensor(b0)))

    def f_b(tape, b):
        return tape.mean(tape.affine(x, Tensor(w0), b))

    assert grad_check(f_w, Tensor(w0)) < 1e-6
    assert grad_check(f_b, Tensor(b0)) < 1e-6


def test_conv2d_weight_gradients():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 7, 7, 2)))
    w0 = rng.normal(size=(3, 3, 2, 3))

    def f(tape, w):
        return tape.mean(tape.conv2d(x, w, Tensor(np.zeros(3)), stride=2))

    assert grad_check(f, Tensor(w0)) < 1e-6


def test_backward_linearity():
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=6)

    def grad_of(fn):
        tape = Tape()
        x = Tensor(x0, requires_grad=True)
        return tape.backward(fn(tape, x))[x]

    f = lambda tape, x: tape.sum(tape.mul(x, x))
    g = lambda tape, x: tape.sum(tape.sigmoid(x))
    a, b = 2.5, -1.25
    combo = lambda tape, x: tape.add(tape.scale(f(tape, x), a), tape.scale(g(tape, x), b))
    assert np.allclose(grad_of(combo), a * grad_of(f) + b * grad_of(g), atol=1e-12)


def test_forward_determinism_bitwise():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 8, 8, 3))
    w = rng.normal(size=(3, 3, 3, 4))

    def run():
        tape = Tape()
        out = tape.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(4)), stride=2)
        return tape.mean(tape.sigmoid(out)).data.copy()

    assert np.array_equal(run(), run())


def test_tape_reuse_accumulates_shared_inputs():
    # x used twice: d(x*x + x)/dx = 2x + 1
    tape = Tape()
    x = Tensor([1.5], requires_grad=True)
    y = tape.add(tape.mul(x, x), x)
    grads = tape.backward(tape.sum(y))
    assert np.allclose(grads[x], [4.0])


def test_apply_unknown_primitive():
    with pytest.raises(DiffError, match="unknown primitive"):
        Tape().apply("conv3d", (Tensor([1.0]),))


def test_sqrt_gradient_zero_at_zero():
    tape = Tape()
    x = Tensor([0.0, 4.0], requires_grad=True)
    grads = tape.backward(tape.sum(tape.sqrt(x)))
    assert np.allclose(grads[x], [0.0, 0.25])
