"""Autodiff core: op gradients against finite differences, tape semantics,
optimizer arithmetic, and the anti-aliased downsampler."""

import numpy as np
import pytest

from patchloc import tensor as T
from fdcheck import gradcheck, numeric_gradient, relative_error

rng = np.random.default_rng(42)


def test_add_sub_grads():
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    gradcheck(lambda x, y: T.tsum(T.hadamard(T.add(x, y), T.sub(x, y))), (a, b))


def test_mul_scalar_grad():
    a = rng.normal(size=(5,))
    gradcheck(lambda x: T.tsum(T.mul(x, -2.5)), (a,))


def test_hadamard_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.hadamard(T.constant(np.zeros((2, 3))), T.constant(np.zeros((3, 2))))


def test_tsum_axes_grad():
    a = rng.normal(size=(2, 3, 4))
    gradcheck(lambda x: T.tsum(T.hadamard(T.tsum(x, axes=(1,)), T.tsum(x, axes=(1,)))), (a,))


def test_masked_sum_matches_manual():
    a = rng.normal(size=(4, 4))
    mask = (rng.random((4, 4)) > 0.5).astype(float)
    out = T.masked_sum(T.constant(a), mask)
    assert out.item() == pytest.approx((a * mask).sum())
    gradcheck(lambda x: T.masked_sum(x, mask), (a,))


def test_masked_sum_mask_not_differentiated():
    a = rng.normal(size=(3,))
    mask = np.ones(3)
    p = T.parameter(a)
    with T.Tape() as tape:
        loss = T.masked_sum(p, mask)
        tape.backward(loss)
    assert np.allclose(p.grad, mask)


def test_relu_forward_and_subgradient_zero():
    x = T.constant(np.array([-1.0, 0.0, 2.0]))
    assert np.allclose(T.relu(x).data, [0.0, 0.0, 2.0])
    p = T.parameter(np.array([-1.0, 0.0, 2.0]))
    with T.Tape() as tape:
        tape.backward(T.tsum(T.relu(p)))
    assert np.allclose(p.grad, [0.0, 0.0, 1.0])


def test_relu_grad_away_from_breakpoint():
    x = rng.normal(size=(6, 6))
    x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep clear of the kink
    gradcheck(lambda t: T.tsum(T.relu(t)), (x,))


def test_sigmoid_grad_and_saturation():
    x = rng.normal(size=(4, 3))
    gradcheck(lambda t: T.tsum(T.sigmoid(t)), (x,))
    big = T.sigmoid(T.constant(np.array([-800.0, 800.0])))
    assert np.all(np.isfinite(big.data))
    assert big.data[0] == 0.0 and big.data[1] == 1.0


def test_log_floor_grad():
    x = np.array([0.5, 2.0, 1e-310])
    p = T.parameter(x)
    with T.Tape() as tape:
        tape.backward(T.tsum(T.log(p)))
    assert p.grad[2] == 0.0  # floored entry contributes nothing
    assert p.grad[0] == pytest.approx(2.0)
    gradcheck(lambda t: T.tsum(T.log(t)), (np.array([0.3, 1.7, 4.0]),))


def test_logit_clamp_grad():
    p = T.parameter(np.array([0.0, 0.5, 1.0]))
    with T.Tape() as tape:
        tape.backward(T.tsum(T.logit(p)))
    assert p.grad[0] == 0.0 and p.grad[2] == 0.0
    assert p.grad[1] == pytest.approx(4.0)
    gradcheck(lambda t: T.tsum(T.logit(t)), (np.array([0.2, 0.5, 0.9]),))


def _conv_reference(x, w, b, padding):
    """Direct-loop cross-correlation, the independent forward oracle."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i:i + kh, j:j + kw]
            out[:, :, i, j] = np.einsum("ncij,ocij->no", patch, w)
    return out + b[None, :, None, None]


@pytest.mark.parametrize("padding", [0, 1])
def test_conv2d_forward_matches_reference(padding):
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=(4,))
    got = T.conv2d(T.constant(x), T.constant(w), T.constant(b), padding=padding)
    assert np.allclose(got.data, _conv_reference(x, w, b, padding), atol=1e-12)


def test_conv2d_grads():
    x = rng.normal(size=(2, 2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=(3,))
    gradcheck(lambda a, k, c: T.tsum(T.hadamard(T.conv2d(a, k, c, padding=1),
                                                T.conv2d(a, k, c, padding=1))), (x, w, b))


def test_conv2d_channel_mismatch():
    with pytest.raises(T.ShapeError):
        T.conv2d(T.constant(np.zeros((1, 2, 4, 4))), T.constant(np.zeros((1, 3, 3, 3))))


def test_affine_norm_training_grads():
    x = rng.normal(size=(3, 2, 4, 4))
    gamma = rng.normal(size=(2,)) + 1.5
    beta = rng.normal(size=(2,))

    def build(a, g, b):
        state = T.NormState(2)  # fresh state per probe; batch stats drive training mode
        return T.tsum(T.hadamard(T.affine_norm(a, g, b, state, training=True),
                                 T.affine_norm(a, g, b, state, training=True)))

    gradcheck(build, (x, gamma, beta), tol=5e-4)


def test_affine_norm_eval_uses_running_stats():
    state = T.NormState(1)
    state.running_mean[:] = 3.0
    state.running_var[:] = 4.0
    x = T.constant(np.full((1, 1, 2, 2), 5.0))
    out = T.affine_norm(x, T.constant([2.0]), T.constant([1.0]), state, training=False)
    assert np.allclose(out.data, 2.0 * (5.0 - 3.0) / np.sqrt(4.0 + state.eps) + 1.0)


def test_affine_norm_updates_running_stats():
    state = T.NormState(1, momentum=0.1)
    x = np.zeros((2, 1, 2, 2))
    x[0] = 1.0
    T.affine_norm(T.constant(x), T.constant([1.0]), T.constant([0.0]), state, training=True)
    assert state.running_mean[0] == pytest.approx(0.1 * 0.5)
    assert state.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * 0.25)


def test_binomial_kernel_three_taps():
    k = T.binomial_kernel(3)
    assert np.allclose(k, np.outer([0.25, 0.5, 0.25], [0.25, 0.5, 0.25]))
    assert k.sum() == pytest.approx(1.0)


def test_binomial_kernel_rejects_bad_taps():
    with pytest.raises(T.ShapeError):
        T.binomial_kernel(4)


def test_blur_downsample_impulse():
    x = np.zeros((1, 1, 8, 8))
    x[0, 0, 4, 4] = 1.0
    out = T.blur_downsample(T.constant(x), taps=3).data[0, 0]
    assert out[2, 2] == pytest.approx(0.25)  # center tap of [.25,.5,.25] at stride-2 site
    assert out.sum() == pytest.approx(0.25)


def test_blur_downsample_dc_gain_one():
    x = np.full((1, 2, 10, 10), 3.7)
    for taps in (1, 2, 3, 5):
        out = T.blur_downsample(T.constant(x), taps=taps)
        assert np.allclose(out.data, 3.7), f"taps={taps}"


def test_blur_downsample_taps1_is_subsampling():
    x = rng.normal(size=(1, 1, 6, 6))
    out = T.blur_downsample(T.constant(x), taps=1)
    assert np.array_equal(out.data, x[:, :, ::2, ::2])


def test_blur_downsample_odd_extent_rejected():
    with pytest.raises(T.ShapeError):
        T.blur_downsample(T.constant(np.zeros((1, 1, 7, 8))), taps=3)


@pytest.mark.parametrize("taps", [1, 2, 3, 5])
def test_blur_downsample_grads(taps):
    x = rng.normal(size=(2, 2, 8, 8))
    gradcheck(lambda t: T.tsum(T.hadamard(T.blur_downsample(t, taps),
                                          T.blur_downsample(t, taps))), (x,))


def test_adam_single_step_hand_computed():
    p = T.parameter(np.array([1.0, -2.0]))
    state = T.AdamState([p], lr=0.01, weight_decay=0.1)
    g = np.array([0.5, -0.3])
    p.grad = g.copy()
    T.adam_step([p], state)
    # one step, by hand: m-hat = g, v-hat = g^2, then decoupled decay
    expected = np.array([1.0, -2.0])
    mhat = g
    vhat = g * g
    expected = expected - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
    expected = expected - 0.01 * 0.1 * expected
    assert np.allclose(p.data, expected, atol=1e-12)


def test_adam_two_steps_bias_correction():
    p = T.parameter(np.array([0.0]))
    state = T.AdamState([p], lr=0.1, weight_decay=0.0)
    m = v = 0.0
    x = 0.0
    for g in (1.0, -2.0):
        p.grad = np.array([g])
        T.adam_step([p], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        t = state.step_count
        x -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.data[0] == pytest.approx(x, abs=1e-14)


def test_adam_lr_decay_signal():
    p = T.parameter(np.array([0.0]))
    state = T.AdamState([p], lr=1.0, lr_decay=0.95)
    state.decay_lr()
    state.decay_lr()
    assert state.lr == pytest.approx(0.95 ** 2)


def test_adam_requires_matching_params():
    p = T.parameter(np.array([0.0]))
    q = T.parameter(np.array([0.0]))
    state = T.AdamState([p])
    q.grad = np.array([1.0])
    with pytest.raises(T.MissingGradError):
        T.adam_step([q], state)


def test_adam_requires_grads():
    p = T.parameter(np.array([0.0]))
    state = T.AdamState([p])
    with pytest.raises(T.MissingGradError):
        T.adam_step([p], state)


def test_backward_needs_scalar():
    p = T.parameter(np.zeros((2, 2)))
    with T.Tape() as tape:
        out = T.relu(p)
        with pytest.raises(T.TapeError):
            tape.backward(out)


def test_backward_detached_loss():
    p = T.parameter(np.ones(3))
    loss = T.tsum(p)  # no tape active: nothing recorded
    with T.Tape() as tape:
        with pytest.raises(T.TapeError):
            tape.backward(loss)


def test_backward_accumulates_across_calls():
    p = T.parameter(np.array([2.0]))
    with T.Tape() as tape:
        loss = T.tsum(T.hadamard(p, p))
        tape.backward(loss)
        tape.backward(loss)
    assert p.grad[0] == pytest.approx(8.0)  # 2x the single-pass gradient


def test_shared_input_gradient_sums():
    p = T.parameter(np.array([3.0]))
    with T.Tape() as tape:
        loss = T.tsum(T.add(T.hadamard(p, p), p))
        tape.backward(loss)
    assert p.grad[0] == pytest.approx(7.0)


def test_constants_get_no_grad():
    c = T.constant(np.ones(2))
    p = T.parameter(np.ones(2))
    with T.Tape() as tape:
        tape.backward(T.tsum(T.hadamard(c, p)))
    assert c.grad is None and p.grad is not None


def test_nested_tapes_isolate():
    p = T.parameter(np.array([1.0]))
    with T.Tape() as outer:
        a = T.mul(p, 2.0)
        with T.Tape() as inner:
            b = T.mul(p, 3.0)
            inner.backward(T.tsum(b))
        assert p.grad[0] == pytest.approx(3.0)
        outer.backward(T.tsum(a))
    assert p.grad[0] == pytest.approx(5.0)


def test_zero_grads():
    p = T.parameter(np.ones(2))
    p.grad = np.ones(2)
    T.zero_grads([p])
    assert p.grad is None


def test_nonfinite_detection():
    with pytest.raises(T.NonFiniteError), np.errstate(over="ignore"):
        T.mul(T.constant(np.array([1e308])), 10.0)
    prev = T.set_finite_checks(False)
    try:
        with np.errstate(over="ignore"):
            out = T.mul(T.constant(np.array([1e308])), 10.0)
        assert np.isinf(out.data[0])
    finally:
        T.set_finite_checks(prev)


def test_item_requires_scalar():
    with pytest.raises(T.ShapeError):
        T.constant(np.zeros(3)).item()


def test_forward_op_dispatch():
    out = T.forward_op("relu", T.constant(np.array([-1.0, 1.0])))
    assert np.allclose(out.data, [0.0, 1.0])
    with pytest.raises(T.TensorError):
        T.forward_op("not_an_op", T.constant(np.zeros(1)))
