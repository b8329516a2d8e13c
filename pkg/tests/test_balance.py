import numpy as np
import pytest

from smoe import attention as at
from smoe import autograd as ag
from smoe import balance as bl
from smoe import metrics as mx
from smoe.autograd import NumericError, Tensor
from util_grad import fd_check, tape_value_and_grads


def _imp(values):
    return Tensor(np.asarray(values, dtype=np.float64))


# -----------------------------------------------------------------------------
# worked values
# -----------------------------------------------------------------------------


def test_scratch_worked_value():
    loss = bl.aux_loss_scratch([_imp([0.3, 0.1])], lam=1e-4)
    assert loss.item() == pytest.approx(5e-5, rel=1e-12)


def test_scratch_additive_over_layers():
    loss = bl.aux_loss_scratch([_imp([0.3, 0.1]), _imp([0.3, 0.1])], lam=1e-4)
    assert loss.item() == pytest.approx(1e-4, rel=1e-12)


def test_scratch_uniform_is_zero():
    assert bl.aux_loss_scratch([_imp([0.5, 0.5, 0.5])], lam=7.0).item() == 0.0
    assert abs(bl.aux_loss_scratch([_imp([0.4, 0.4, 0.4])], lam=7.0).item()) <= 1e-28


def test_finetune_worked_value():
    imp = _imp([0.9, 0.3, 0.1, 0.2])
    shared = mx.select_top_m_heads(
        mx.HeadImportanceMap(imp.data[None, :], token_count=1), m=1
    )
    assert shared == [[0]]
    loss = bl.aux_loss_finetune([imp], lam=1e-2, shared_sets=shared)
    assert loss.item() == pytest.approx(5e-3, rel=1e-12)


def test_finetune_all_shared_is_zero():
    loss = bl.aux_loss_finetune([_imp([0.9, 0.1])], lam=1.0, shared_sets=[[0, 1]])
    assert loss.item() == 0.0


def test_finetune_routed_uniform_is_zero():
    loss = bl.aux_loss_finetune(
        [_imp([0.9, 0.2, 0.2, 0.2])], lam=1.0, shared_sets=[[0]]
    )
    assert abs(loss.item()) <= 1e-28


def test_finetune_m_zero_equals_scratch_bitwise():
    rng = np.random.default_rng(0)
    for _ in range(10):
        imp = [_imp(rng.uniform(0.05, 1.0, size=5)) for _ in range(3)]
        a = bl.aux_loss_scratch(imp, lam=1e-3).item()
        b = bl.aux_loss_finetune(imp, lam=1e-3, shared_sets=[[], [], []]).item()
        assert a == b


def test_singleton_routed_set_contributes_zero():
    loss = bl.aux_loss_finetune([_imp([0.9, 0.1])], lam=1.0, shared_sets=[[0]])
    assert loss.item() == 0.0


# -----------------------------------------------------------------------------
# validation
# -----------------------------------------------------------------------------


def test_negative_lambda_rejected():
    with pytest.raises(ValueError, match="non-negative"):
        bl.aux_loss_scratch([_imp([0.5, 0.4])], lam=-1e-4)
    with pytest.raises(ValueError, match="non-negative"):
        bl.aux_loss_finetune([_imp([0.5, 0.4])], lam=-1.0, shared_sets=[[]])


def test_balance_config_validation():
    bl.BalanceConfig(lam=1e-4, mode=bl.SCRATCH)
    with pytest.raises(ValueError, match="mode"):
        bl.BalanceConfig(mode="sometimes")
    with pytest.raises(ValueError, match="non-negative"):
        bl.BalanceConfig(lam=-1.0)
    with pytest.raises(ValueError, match="non-negative"):
        bl.BalanceConfig(m=-1)


def test_shared_sets_length_checked():
    with pytest.raises(ValueError, match="per layer"):
        bl.aux_loss_finetune([_imp([0.5, 0.4])], lam=1.0, shared_sets=[[], []])


def test_total_loss_cases():
    base, aux = ag.constant(2.0), ag.constant(5e-5)
    assert bl.total_loss(base, aux).item() == pytest.approx(2.00005, abs=1e-15)
    assert bl.total_loss(base, ag.constant(0.0)).item() == 2.0
    with pytest.raises(NumericError, match="non-finite"):
        bl.total_loss(ag.constant(float("nan")), aux)
    with pytest.raises(NumericError, match="non-finite"):
        bl.total_loss(base, ag.constant(float("inf")))


# -----------------------------------------------------------------------------
# properties and gradients
# -----------------------------------------------------------------------------


def test_scratch_nonnegative_zero_iff_uniform():
    rng = np.random.default_rng(1)
    for _ in range(50):
        imp = rng.uniform(0.01, 1.0, size=4)
        loss = bl.aux_loss_scratch([_imp(imp)], lam=1.0).item()
        assert loss >= 0.0
        if np.ptp(imp) > 1e-6:
            assert loss > 0.0


def test_scratch_scale_invariant_per_layer():
    rng = np.random.default_rng(2)
    imp = rng.uniform(0.05, 1.0, size=(6,))
    base = bl.aux_loss_scratch([_imp(imp)], lam=1.0).item()
    for c in (0.1, 2.0, 40.0):
        scaled = bl.aux_loss_scratch([_imp(imp * c)], lam=1.0).item()
        assert abs(scaled - base) <= 1e-12 * max(1.0, base)


def test_gradient_sign_threshold():
    """d(aux)/dImp_h is positive exactly above mu * (1 + CV^2)."""
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(120):
        imp = rng.uniform(0.05, 1.0, size=int(rng.integers(3, 9)))

        def f(ts):
            return bl.aux_loss_scratch([ts[0]], lam=1.0)

        _, (g,) = tape_value_and_grads(f, [imp])
        fd_check(f, [imp], tol=1e-6)
        mu = imp.mean()
        cv2 = imp.var() / mu**2
        threshold = mu * (1.0 + cv2)
        clear = np.abs(imp - threshold) > 1e-9
        assert np.all((g[clear] > 0) == (imp[clear] > threshold))
        checked += int(clear.sum())
    assert checked >= 100


def test_minibatch_importance_matches_flat_mean():
    rng = np.random.default_rng(4)
    g = rng.uniform(size=(2, 3, 5))
    rec = at.AttentionRecord(gate=Tensor(g), lse=None, sink_weight=None, head_outputs=None)
    (imp,) = bl.minibatch_importance([rec])
    np.testing.assert_allclose(imp.data, g.mean(axis=(0, 2)), atol=1e-15)


def test_finetune_gradients_skip_shared_heads():
    rng = np.random.default_rng(5)
    imp = rng.uniform(0.1, 0.9, size=6)

    def f(ts):
        return bl.aux_loss_finetune([ts[0]], lam=0.5, shared_sets=[[1, 4]])

    _, (g,) = tape_value_and_grads(f, [imp])
    fd_check(f, [imp], tol=1e-6)
    assert g[1] == 0.0 and g[4] == 0.0
    assert np.any(g != 0.0)


@pytest.mark.parametrize("variant", [at.SINK, at.VANILLA, at.GATED])
def test_aux_gradients_reach_attention_params(variant):
    """The loss must move sinks / q,k projections / gate projections."""
    rng = np.random.default_rng(6)
    d_model, n_heads, t_len = 6, 3, 5
    x = rng.normal(size=(2, t_len, d_model)) * 0.7

    def f(ts):
        kw = {}
        if variant == at.SINK:
            kw["sink"] = ts[4]
        if variant == at.GATED:
            kw["w_theta"] = ts[4]
        params = at.AttentionParams(
            w_q=ts[0], w_k=ts[1], w_v=ts[2], w_o=ts[3], n_heads=n_heads, **kw
        )
        _, rec = at.multi_head_forward(Tensor(x), params, variant)
        return bl.aux_loss_scratch(bl.minibatch_importance([rec]), lam=1.0)

    arrays = [rng.normal(size=(d_model, d_model)) * 0.5 for _ in range(4)]
    if variant == at.SINK:
        arrays.append(rng.normal(size=(n_heads,)))
    if variant == at.GATED:
        arrays.append(rng.normal(size=(d_model, n_heads)) * 0.5)
    _, grads = tape_value_and_grads(f, arrays)
    fd_check(f, arrays, tol=1e-4)
    # the parameter that shapes the gate must feel the loss
    target = grads[4] if variant != at.VANILLA else grads[0]
    assert np.max(np.abs(target)) > 1e-8


def test_total_gradient_is_sum_of_component_gradients():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4,))
    w1, w2 = rng.normal(size=(4,)), rng.normal(size=(4,))

    def base_of(t):
        return ag.sum_(t * t * Tensor(w1))

    def aux_of(t):
        return ag.sum_(ag.sigmoid(t) * Tensor(w2))

    _, (g_total,) = tape_value_and_grads(
        lambda ts: bl.total_loss(base_of(ts[0]), aux_of(ts[0])), [x]
    )
    _, (g_base,) = tape_value_and_grads(lambda ts: base_of(ts[0]), [x])
    _, (g_aux,) = tape_value_and_grads(lambda ts: aux_of(ts[0]), [x])
    np.testing.assert_allclose(g_total, g_base + g_aux, atol=1e-12)
