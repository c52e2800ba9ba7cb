"""Kernel semantics and reverse-mode gradients against finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import hire.autodiff as ad
from hire.autodiff import Tensor, ShapeError, backward, no_grad


def central_differences(f, x, step=1e-5):
    """Independent oracle: df/dx of scalar f by central finite differences."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat_x = x.ravel()
    flat_o = out.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + step
        fp = f(x)
        flat_x[i] = orig - step
        fm = f(x)
        flat_x[i] = orig
        flat_o[i] = (fp - fm) / (2.0 * step)
    return out


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------


def test_relu_definition():
    out = Tensor([-1.0, 0.0, 2.0]).relu()
    assert np.array_equal(out.values, [0.0, 0.0, 2.0])


def test_softmax_symmetry():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.values, [1 / 3, 1 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_hadamard_direct():
    out = Tensor([1.0, 2.0]) * Tensor([3.0, 4.0])
    assert np.array_equal(out.values, [3.0, 8.0])


def test_shape_mismatch_names_kernel_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_debug_mode_flags_nonfinite():
    ad.set_debug_checks(True)
    try:
        with pytest.raises(FloatingPointError, match="relu"):
            ad.relu(Tensor([np.nan, 1.0]))
    finally:
        ad.set_debug_checks(False)


def test_concat_then_narrow_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    parts = [Tensor(rng.standard_normal((3, w))) for w in (2, 5, 1)]
    merged = ad.concat(parts, axis=-1)
    start = 0
    for p in parts:
        w = p.shape[-1]
        back = ad.narrow(merged, -1, start, w)
        assert np.array_equal(back.values, p.values)
        start += w


def test_narrow_bounds_error():
    with pytest.raises(ShapeError, match="narrow"):
        ad.narrow(Tensor(np.ones((2, 3))), -1, 2, 2)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_is_distribution_and_shift_invariant(logits):
    t = Tensor(logits)
    s = ad.softmax(t).values
    assert np.all(s >= 0)
    assert abs(s.sum() - 1.0) <= 1e-9
    shifted = ad.softmax(t + 7.25).values
    assert np.max(np.abs(s - shifted)) <= 1e-9


def test_softmax_mask_zeroes_invalid_positions():
    t = Tensor([[5.0, 1.0, 3.0, 2.0]])
    mask = np.array([[True, False, True, False]])
    s = ad.softmax(t, axis=-1, mask=mask).values
    assert s[0, 1] == 0.0 and s[0, 3] == 0.0
    assert abs(s.sum() - 1.0) <= 1e-12


def test_dropout_eval_is_identity_train_preserves_mean():
    x = Tensor(np.full((5, 4), 2.0))
    out = ad.dropout(x, 0.3, None, training=False)
    assert out is x

    rng = np.random.default_rng(123)
    total = np.zeros((5, 4))
    n = 10_000
    for _ in range(n):
        total += ad.dropout(x, 0.3, rng, training=True).values
    mean = total / n
    # inverted scaling keeps the expectation at the input value, within 2%
    assert np.all(np.abs(mean - 2.0) / 2.0 < 0.02)


def test_dropout_rate_validation():
    with pytest.raises(ValueError, match="dropout"):
        ad.dropout(Tensor([1.0]), 1.0, np.random.default_rng(0), training=True)


def test_embedding_rejects_out_of_range_ids():
    table = Tensor(np.ones((4, 3)), requires_grad=True)
    with pytest.raises(ShapeError, match="embedding"):
        ad.embedding(table, np.array([0, 4]))
    with pytest.raises(ShapeError, match="embedding"):
        ad.embedding(table, np.array([], dtype=int))


# ---------------------------------------------------------------------------
# backward contract
# ---------------------------------------------------------------------------


def test_backward_sum_relu():
    x = Tensor([2.0, 3.0], requires_grad=True)
    loss = x.relu().sum()
    backward(loss)
    assert np.array_equal(x.grad, [1.0, 1.0])


def test_backward_softmax_cross_entropy_closed_form():
    # d/dq of -sum(onehot * log_softmax(q)) is softmax(q) - onehot
    q = Tensor([1.0, -2.0, 0.5], requires_grad=True)
    onehot = Tensor([0.0, 1.0, 0.0])
    loss = -(ad.log_softmax(q) * onehot).sum()
    backward(loss)
    expected = ad.softmax(Tensor(q.values)).values - onehot.values
    np.testing.assert_allclose(q.grad, expected, atol=1e-12)


def test_backward_matmul_matches_finite_differences():
    rng = np.random.default_rng(7)
    a0 = rng.standard_normal((3, 4))
    b0 = rng.standard_normal((4, 2))

    a = Tensor(a0, requires_grad=True)
    b = Tensor(b0, requires_grad=True)
    backward((a @ b).sum())

    num_a = central_differences(lambda v: float((v @ b0).sum()), a0)
    num_b = central_differences(lambda v: float((a0 @ v).sum()), b0)
    assert max_rel_err(a.grad, num_a) < 1e-6
    assert max_rel_err(b.grad, num_b) < 1e-6


def test_backward_accumulates_over_multiple_uses():
    x = Tensor([1.5], requires_grad=True)
    loss = (x * 2.0 + x * 3.0).sum()
    backward(loss)
    assert np.allclose(x.grad, [5.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError, match="backward"):
        backward(x.relu())


def test_second_backward_without_new_forward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = x.relu().sum()
    backward(loss)
    with pytest.raises(RuntimeError, match="backward"):
        backward(loss)


def test_backward_on_disconnected_loss_errors():
    loss = Tensor(3.0)
    with pytest.raises(RuntimeError, match="not connected"):
        backward(loss)


def test_no_grad_suppresses_recording():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x.relu().sum()
    assert y._record is None
    with pytest.raises(RuntimeError):
        backward(y)


# ---------------------------------------------------------------------------
# per-kernel gradients vs central differences: 100 random small shapes each
# ---------------------------------------------------------------------------


def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    # weighting exposes off-diagonal Jacobian terms that a plain sum hides
    return (t * Tensor(w)).sum()


def _kernel_cases(rng):
    """Yield (name, f(Tensor)->scalar Tensor, point ndarray) random cases."""
    dims = lambda k: tuple(int(rng.integers(1, 5)) for _ in range(k))

    shape = dims(2)
    w = rng.standard_normal(shape)
    other = rng.standard_normal(shape)
    yield "add", lambda t: _weighted_sum(ad.add(t, Tensor(other)), w), rng.standard_normal(shape)
    yield "sub", lambda t: _weighted_sum(ad.sub(Tensor(other), t), w), rng.standard_normal(shape)
    yield "mul", lambda t: _weighted_sum(ad.mul(t, Tensor(other)), w), rng.standard_normal(shape)

    n, k, m = (int(rng.integers(1, 5)) for _ in range(3))
    right = rng.standard_normal((k, m))
    wmat = rng.standard_normal((n, m))
    yield "matmul", lambda t: _weighted_sum(ad.matmul(t, Tensor(right)), wmat), rng.standard_normal((n, k))

    shape = dims(2)
    w = rng.standard_normal(shape)
    # keep relu/softmax inputs away from ties and kinks
    point = rng.standard_normal(shape)
    point = np.where(np.abs(point) < 0.05, 0.3, point)
    yield "relu", lambda t: _weighted_sum(ad.relu(t), w), point
    yield "tanh", lambda t: _weighted_sum(ad.tanh(t), w), rng.standard_normal(shape)
    yield "sigmoid", lambda t: _weighted_sum(ad.sigmoid(t), w), rng.standard_normal(shape)
    yield "softmax", lambda t: _weighted_sum(ad.softmax(t, axis=-1), w), rng.standard_normal(shape)
    yield "log_softmax", lambda t: _weighted_sum(ad.log_softmax(t, axis=-1), w), rng.standard_normal(shape)
    yield "mean", lambda t: ad.mean_all(t), rng.standard_normal(shape)
    yield "sum", lambda t: ad.sum_all(t), rng.standard_normal(shape)

    rows, width = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    w = rng.standard_normal((rows, width))
    yield "layer_norm", lambda t: _weighted_sum(ad.layer_norm(t), w), rng.standard_normal((rows, width))

    a, b = dims(1)[0], dims(1)[0]
    w = rng.standard_normal((2, a + b))
    other = rng.standard_normal((2, b))
    yield "concat", lambda t: _weighted_sum(ad.concat([t, Tensor(other)], axis=-1), w), rng.standard_normal((2, a))

    width = int(rng.integers(2, 6))
    start = int(rng.integers(0, width - 1))
    size = int(rng.integers(1, width - start + 1))
    w = rng.standard_normal((3, size))
    yield "narrow", lambda t: _weighted_sum(ad.narrow(t, -1, start, size), w), rng.standard_normal((3, width))

    vocab, dim = int(rng.integers(3, 7)), int(rng.integers(1, 4))
    ids = rng.integers(0, vocab, size=4)
    w = rng.standard_normal((4, dim))
    yield "embedding", lambda t: _weighted_sum(ad.embedding(t, ids), w), rng.standard_normal((vocab, dim))

    shape = dims(2)
    w = rng.standard_normal(shape)
    drop_seed = int(rng.integers(0, 2**31))
    # reseeding per call freezes the mask, making f deterministic for the oracle
    yield (
        "dropout",
        lambda t: _weighted_sum(ad.dropout(t, 0.4, np.random.default_rng(drop_seed), training=True), w),
        rng.standard_normal(shape),
    )


KERNELS = [
    "add", "sub", "mul", "matmul", "relu", "tanh", "sigmoid", "softmax",
    "log_softmax", "mean", "sum", "layer_norm", "concat", "narrow",
    "embedding", "dropout",
]


@pytest.mark.parametrize("kernel", KERNELS)
def test_kernel_gradients_match_central_differences(kernel):
    rng = np.random.default_rng(hash(kernel) % 2**32)
    count = 0
    while count < 100:
        for name, f, point in _kernel_cases(rng):
            if name != kernel:
                continue
            count += 1
            x = Tensor(point, requires_grad=True)
            backward(f(x))
            analytic = x.grad if x.grad is not None else np.zeros_like(point)
            with no_grad():
                numeric = central_differences(lambda v: f(Tensor(v, requires_grad=False)).item(), point)
            assert max_rel_err(analytic, numeric) < 1e-4, f"{name} case {count}"
            if count >= 100:
                break


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------


def test_grad_check_sum_of_squares():
    report = ad.grad_check(lambda t: (t * t).sum(), Tensor([1.0, 2.0, 3.0]), tol=1e-8)
    assert report.passed
    assert report.max_rel_error < 1e-8


def test_grad_check_constant_function():
    report = ad.grad_check(lambda t: (t * 0.0).sum(), Tensor([1.0, -2.0]), tol=1e-8)
    assert report.passed
    assert report.max_rel_error == 0.0


def test_grad_check_reports_failure_for_wrong_gradient():
    def broken(t):
        # detach half the graph: analytic grad misses the second use
        y = (t * Tensor(t.values)).sum()
        return y

    report = ad.grad_check(broken, Tensor([1.0, 2.0]), tol=1e-4)
    assert not report.passed
