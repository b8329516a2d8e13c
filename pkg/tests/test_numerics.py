import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from smoe import autograd as ag
from smoe.autograd import (
    GradTape,
    NumericError,
    Tensor,
    cross_entropy_from_logits,
    logsumexp,
    sigmoid,
    stable_softmax,
)
from util_grad import fd_check, tape_value_and_grads

NEG_INF = float("-inf")


# -----------------------------------------------------------------------------
# Worked values (computed by hand, committed as literals)
# -----------------------------------------------------------------------------


def test_softmax_quarter_three_quarters():
    # exp(0) : exp(ln 3) = 1 : 3
    out = stable_softmax(Tensor([0.0, math.log(3.0)])).data
    np.testing.assert_allclose(out, [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_survives_huge_logits():
    out = stable_softmax(Tensor([1000.0, 1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5], rtol=0, atol=0)


def test_softmax_masked_entries_get_exact_zero():
    out = stable_softmax(Tensor([NEG_INF, 0.0, NEG_INF])).data
    assert out[0] == 0.0 and out[2] == 0.0
    assert out[1] == 1.0


def test_logsumexp_worked_values():
    assert abs(logsumexp(Tensor([0.0, math.log(3.0)])).item() - math.log(4.0)) < 1e-15
    assert logsumexp(Tensor([1000.0, 1000.0])).item() == pytest.approx(
        1000.0 + math.log(2.0), abs=1e-12
    )
    assert logsumexp(Tensor([NEG_INF, 3.0])).item() == 3.0


def test_sigmoid_worked_values():
    assert sigmoid(Tensor([0.0])).item() == 0.5
    # sigma(ln 4) = 4/5
    assert abs(sigmoid(Tensor([math.log(4.0)])).item() - 0.8) < 1e-15
    big = sigmoid(Tensor([800.0, -800.0])).data
    assert big[0] == 1.0 and big[1] == 0.0  # saturates, never NaN


def test_cross_entropy_worked_values():
    logits = Tensor([[0.0, math.log(3.0)]])
    # lse = ln 4, so nll(target 1) = ln 4 - ln 3
    assert cross_entropy_from_logits(logits, np.array([1])).item() == pytest.approx(
        math.log(4.0 / 3.0), abs=1e-15
    )
    assert cross_entropy_from_logits(logits, np.array([0])).item() == pytest.approx(
        math.log(4.0), abs=1e-15
    )
    # uniform logits: mean nll is ln V regardless of targets
    uni = Tensor(np.zeros((5, 7)))
    tgt = np.arange(5) % 7
    assert cross_entropy_from_logits(uni, tgt).item() == pytest.approx(
        math.log(7.0), abs=1e-12
    )


def test_error_metrics_worked_values():
    a = np.array([1.0, 2.0])
    b = np.array([1.0, 2.2])
    # elementwise: 0.2 / 2.2; normwise: 0.2 / 2.2 too (max magnitudes agree)
    assert ag.relative_error(a, b) == pytest.approx(0.2 / 2.2, abs=1e-15)
    assert ag.normwise_error(a, b) == pytest.approx(0.2 / 2.2, abs=1e-15)
    # a tiny coordinate blows up the elementwise ratio but not the normwise one
    a = np.array([1.0, 1e-8])
    b = np.array([1.0, 3e-8])
    assert ag.relative_error(a, b) == pytest.approx(2.0 / 3.0, rel=1e-12)
    assert ag.normwise_error(a, b) == pytest.approx(2e-8, rel=1e-12)
    assert ag.relative_error(np.zeros(0), np.zeros(0)) == 0.0
    assert ag.normwise_error(np.zeros(0), np.zeros(0)) == 0.0


def test_cross_entropy_mask_selects_positions():
    logits = Tensor(np.array([[[0.0, math.log(3.0)], [0.0, math.log(3.0)]]]))
    targets = np.array([[1, 0]])
    only_first = cross_entropy_from_logits(logits, targets, mask=np.array([[1.0, 0.0]]))
    assert only_first.item() == pytest.approx(math.log(4.0 / 3.0), abs=1e-15)
    both = cross_entropy_from_logits(logits, targets, mask=np.array([[1.0, 1.0]]))
    expect = 0.5 * (math.log(4.0 / 3.0) + math.log(4.0))
    assert both.item() == pytest.approx(expect, abs=1e-15)


def test_matmul_small_oracle():
    out = ag.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


# -----------------------------------------------------------------------------
# Error contracts
# -----------------------------------------------------------------------------


def test_matmul_inner_mismatch_raises():
    with pytest.raises(ValueError, match="inner extents"):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_logsumexp_empty_axis_raises():
    with pytest.raises(ValueError, match="extent 0"):
        logsumexp(Tensor(np.ones((3, 0))), axis=-1)


def test_softmax_fully_masked_row_raises():
    with pytest.raises(NumericError, match="fully masked"):
        stable_softmax(Tensor([[0.0, 1.0], [NEG_INF, NEG_INF]]))


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        stable_softmax(Tensor([0.0, float("nan")]))


def test_sigmoid_nan_raises():
    with pytest.raises(NumericError):
        sigmoid(Tensor([float("nan")]))


def test_cross_entropy_bad_target_raises():
    with pytest.raises(IndexError):
        cross_entropy_from_logits(Tensor(np.zeros((2, 4))), np.array([0, 4]))


def test_cross_entropy_empty_mask_raises():
    with pytest.raises(ValueError, match="mask"):
        cross_entropy_from_logits(
            Tensor(np.zeros((1, 4))), np.array([0]), mask=np.array([0.0])
        )


def test_take_rows_bad_index_raises():
    with pytest.raises(IndexError):
        ag.take_rows(Tensor(np.ones((3, 2))), np.array([0, 3]))


def test_mixed_dtype_raises():
    with pytest.raises(TypeError, match="mixed dtypes"):
        Tensor(np.ones(2, dtype=np.float32)) + Tensor(np.ones(2))


# -----------------------------------------------------------------------------
# Tape mechanics
# -----------------------------------------------------------------------------


def test_reused_tensor_accumulates():
    x = Tensor([3.0])
    tape = GradTape()
    with tape:
        y = ag.sum_(x * x + x)
    g = tape.backward(y).wrt(x)
    np.testing.assert_allclose(g, [7.0])  # 2x + 1


def test_backward_twice_requires_reset():
    x = Tensor([1.0])
    tape = GradTape()
    with tape:
        y = ag.sum_(x * x)
    tape.backward(y)
    with pytest.raises(RuntimeError, match="reset"):
        tape.backward(y)
    tape.reset()
    with tape:
        z = ag.sum_(x * 3.0)
    np.testing.assert_allclose(tape.backward(z).wrt(x), [3.0])


def test_unreachable_tensor_gets_zeros():
    x = Tensor([1.0, 2.0])
    other = Tensor(np.ones((2, 2)))
    tape = GradTape()
    with tape:
        y = ag.sum_(x * 2.0)
    g = tape.backward(y).wrt(other)
    assert g.shape == (2, 2)
    np.testing.assert_array_equal(g, 0.0)


def test_nonscalar_loss_rejected():
    x = Tensor([1.0, 2.0])
    tape = GradTape()
    with tape:
        y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_tapes_do_not_nest():
    with GradTape():
        with pytest.raises(RuntimeError, match="already active"):
            with GradTape():
                pass


def test_ops_run_fine_without_tape():
    out = stable_softmax(Tensor([1.0, 2.0, 3.0]))
    assert out.data.sum() == pytest.approx(1.0)


def test_float32_pipeline_keeps_dtype():
    x = Tensor(np.linspace(-1, 1, 6).reshape(2, 3), dtype=np.float32)
    w = Tensor(np.ones((3, 2)), dtype=np.float32)
    tape = GradTape()
    with tape:
        loss = ag.sum_(sigmoid(ag.matmul(x, w)))
    assert loss.dtype == np.float32
    g = tape.backward(loss).wrt(w)
    assert g.dtype == np.float32


def _split_halves(t):
    # custom two-output primitive, the same shape the fused kernels use
    n = t.shape[0] // 2
    a, b = Tensor(t.data[:n].copy()), Tensor(t.data[n:].copy())

    def bwd(gs):
        g = np.zeros_like(t.data)
        if gs[0] is not None:
            g[:n] += gs[0]
        if gs[1] is not None:
            g[n:] += gs[1]
        return (g,)

    ag.record((a, b), (t,), bwd)
    return a, b


def test_multi_output_record_both_outputs_used():
    def f(ts):
        a, b = _split_halves(ts[0])
        return ag.sum_(a * a) + ag.sum_(b * 3.0)

    fd_check(f, [np.array([1.0, 2.0, 3.0, 4.0])])


def test_multi_output_record_one_output_unused():
    x = Tensor([1.0, 2.0, 3.0, 4.0])
    tape = GradTape()
    with tape:
        a, _ = _split_halves(x)
        loss = ag.sum_(a * 2.0)
    g = tape.backward(loss).wrt(x)
    np.testing.assert_allclose(g, [2.0, 2.0, 0.0, 0.0])


# -----------------------------------------------------------------------------
# Finite-difference oracle sweeps
# -----------------------------------------------------------------------------

# each entry: name, builder(rng) -> (f, arrays)


def _case_arith(rng):
    a, b, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    b = b + np.sign(b) * 0.5  # keep divisors away from 0

    def f(ts):
        x, y, z = ts
        return ag.sum_((x + y) * z - x / y)

    return f, [a, b, w]


def _case_unary(rng):
    x = rng.uniform(-2.0, 2.0, size=(2, 5))
    w = rng.normal(size=(2, 5))

    def f(ts):
        return ag.sum_((ag.exp(ts[0]) + ag.tanh(ts[0]) + sigmoid(ts[0])) * ts[1])

    return f, [x, w]


def _case_log_power(rng):
    x = rng.uniform(0.5, 3.0, size=(4,))
    w = rng.normal(size=(4,))

    def f(ts):
        return ag.sum_((ag.log(ts[0]) + ts[0] ** 3) * ts[1])

    return f, [x, w]


def _case_matmul(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))

    def f(ts):
        return ag.sum_(ag.matmul(ts[0], ts[1]) ** 2)

    return f, [a, b]


def _case_reductions(rng):
    x = rng.normal(size=(3, 4, 2))
    w = rng.normal(size=(3, 1, 2))

    def f(ts):
        s = ag.sum_(ts[0], axis=1, keepdims=True) * ts[1]
        return ag.mean_(s) + ag.sum_(ag.mean_(ts[0], axis=(0, 2)))

    return f, [x, w]


def _case_shapes(rng):
    x = rng.normal(size=(2, 6))
    w = rng.normal(size=(3, 2, 2))

    def f(ts):
        r = ag.reshape(ts[0], (3, 2, 2))
        t = ag.transpose(r, (1, 0, 2))
        return ag.sum_(t * ag.transpose(ts[1], (1, 0, 2)))

    return f, [x, w]


def _case_getitem(rng):
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(4, 3))

    def f(ts):
        picked = ts[0][np.array([0, 0, 2, 4])]  # repeated row must accumulate
        return ag.sum_(picked * ts[1]) + ag.sum_(ts[0][1:3, :2])

    return f, [x, w]


def _case_take_rows(rng):
    table = rng.normal(size=(6, 3))
    w = rng.normal(size=(2, 4, 3))

    def f(ts):
        ids = np.array([[0, 5, 5, 2], [1, 1, 3, 0]])
        return ag.sum_(ag.take_rows(ts[0], ids) * ts[1])

    return f, [table, w]


def _case_softmax(rng):
    # unit-scale logits: saturated rows push true grads under the FD noise floor
    x = rng.normal(size=(3, 6))
    w = rng.normal(size=(3, 6))

    def f(ts):
        return ag.sum_(stable_softmax(ts[0], axis=-1) * ts[1])

    return f, [x, w]


def _case_logsumexp(rng):
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4,))
    w = w + np.sign(w) * 0.5  # a near-zero row weight hides that row's grads

    def f(ts):
        return ag.sum_(logsumexp(ts[0], axis=-1) * ts[1])

    return f, [x, w]


def _case_cross_entropy(rng):
    logits = rng.normal(size=(3, 4, 7))
    targets = rng.integers(0, 7, size=(3, 4))
    mask = (rng.uniform(size=(3, 4)) < 0.7).astype(np.float64)
    mask[0, 0] = 1.0  # never fully masked

    def f(ts):
        return cross_entropy_from_logits(ts[0], targets, mask=mask)

    return f, [logits]


FD_CASES = [
    _case_arith,
    _case_unary,
    _case_log_power,
    _case_matmul,
    _case_reductions,
    _case_shapes,
    _case_getitem,
    _case_take_rows,
    _case_softmax,
    _case_logsumexp,
    _case_cross_entropy,
]


@pytest.mark.parametrize("case", FD_CASES, ids=lambda c: c.__name__.lstrip("_"))
def test_backward_matches_finite_differences(case):
    # >= 100 seeds spread over the op table; every op sees at least 10
    for seed in range(10):
        f, arrays = case(np.random.default_rng(seed))
        fd_check(f, arrays, tol=1e-6)


def test_exported_ops_many_seeds():
    """Dense seed sweep on the exported ops specifically."""
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        for build in (_case_softmax, _case_logsumexp, _case_cross_entropy, _case_matmul):
            f, arrays = build(rng)
            fd_check(f, arrays, tol=1e-6)


# -----------------------------------------------------------------------------
# Properties
# -----------------------------------------------------------------------------

finite_rows = hnp.arrays(
    dtype=np.float64,
    shape=st.tuples(st.integers(1, 4), st.integers(1, 8)),
    elements=st.floats(-50.0, 50.0),
)


@settings(max_examples=200, deadline=None)
@given(x=finite_rows, c=st.floats(-100.0, 100.0))
def test_softmax_shift_invariance(x, c):
    a = stable_softmax(Tensor(x)).data
    b = stable_softmax(Tensor(x + c)).data
    assert np.max(np.abs(a - b)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(x=finite_rows)
def test_softmax_rows_are_distributions(x):
    out = stable_softmax(Tensor(x)).data
    assert np.all(out >= 0.0) and np.all(out <= 1.0)
    assert np.max(np.abs(out.sum(axis=-1) - 1.0)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(x=finite_rows)
def test_logsumexp_bounds(x):
    lse = logsumexp(Tensor(x), axis=-1).data
    mx = x.max(axis=-1)
    n = x.shape[-1]
    assert np.all(lse >= mx - 1e-12)
    assert np.all(lse <= mx + math.log(n) + 1e-12)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(-700.0, 700.0))
def test_sigmoid_complement(x):
    s = sigmoid(Tensor([x, -x])).data
    assert abs(s[0] + s[1] - 1.0) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(x=finite_rows)
def test_softmax_grad_rows_sum_to_zero(x):
    """d(softmax)/dx projected on any upstream grad sums to 0 per row."""
    w = np.linspace(-1.0, 1.0, x.size).reshape(x.shape)

    def f(ts):
        return ag.sum_(stable_softmax(ts[0], axis=-1) * Tensor(w))

    _, (g,) = tape_value_and_grads(f, [x])
    assert np.max(np.abs(g.sum(axis=-1))) <= 1e-12
