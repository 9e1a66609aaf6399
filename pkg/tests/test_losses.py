import numpy as np
import pytest
from scipy.special import softmax

from cgmm_enhance.exceptions import LossError
from cgmm_enhance.losses import (
    GradModConfig,
    LossGrad,
    beta_scale,
    cg_nll,
    cgmm_nll,
    cgmm_nll_beta,
    component_log_scores,
    mixture_nll,
    mse_loss,
    wta_loss,
)
from cgmm_enhance.posterior import PosteriorParams

SHAPE = (2, 3)
N_INSTANCES = 100
H = 1e-6


def _instance(seed, L):
    rng = np.random.default_rng(seed)
    masks = rng.uniform(0.05, 0.95, (L,) + SHAPE)
    variances = np.exp(rng.uniform(np.log(0.3), np.log(3.0), (L,) + SHAPE))
    logits = rng.standard_normal((L,) + SHAPE)
    S = rng.standard_normal(SHAPE) + 1j * rng.standard_normal(SHAPE)
    X = S + 0.7 * (rng.standard_normal(SHAPE) + 1j * rng.standard_normal(SHAPE))
    return masks, variances, logits, S, X


def _params(masks, variances, logits):
    return PosteriorParams(masks=masks, variances=variances, weights=softmax(logits, axis=0))


def _rel_err(analytic, numeric):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return np.max(np.abs(analytic - numeric)) / scale


def _numeric_grads(value_fn, masks, variances, logits):
    grads = []
    for which in range(3):
        base = [masks, variances, logits]
        out = np.zeros_like(base[which])
        for idx in np.ndindex(base[which].shape):
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[which][idx] += H
            minus[which][idx] -= H
            out[idx] = (value_fn(*plus) - value_fn(*minus)) / (2 * H)
        grads.append(out)
    return grads


def _check_fd(loss_fn, L, seed_offset=0):
    worst = 0.0
    for seed in range(N_INSTANCES):
        masks, variances, logits, S, X = _instance(seed + seed_offset, L)
        _, grad = loss_fn(_params(masks, variances, logits), S, X)
        numeric = _numeric_grads(lambda m, v, z: loss_fn(_params(m, v, z), S, X)[0], masks, variances, logits)
        for analytic, num in zip((grad.d_mask, grad.d_var, grad.d_logit), numeric):
            worst = max(worst, _rel_err(analytic, num))
    return worst


def test_mse_gradient_matches_finite_differences():
    assert _check_fd(mse_loss, L=1) < 1e-5


def test_cg_nll_gradient_matches_finite_differences():
    assert _check_fd(cg_nll, L=1) < 1e-5


@pytest.mark.parametrize("L", [1, 4])
def test_cgmm_nll_gradient_matches_finite_differences(L):
    assert _check_fd(cgmm_nll, L=L, seed_offset=1000) < 1e-5


@pytest.mark.parametrize("beta", [0.0, 0.5, 1.0])
def test_cgmm_nll_beta_gradient_with_frozen_scale(beta):
    g = GradModConfig([beta])
    worst = 0.0
    for seed in range(N_INSTANCES):
        masks, variances, logits, S, X = _instance(2000 + seed, 4)
        _, grad = cgmm_nll_beta(_params(masks, variances, logits), S, X, g)
        frozen = beta_scale(variances, [beta])

        def value(m, v, z):
            return mixture_nll(_params(m, v, z), S, X, scale=frozen)[0]

        numeric = _numeric_grads(value, masks, variances, logits)
        for analytic, num in zip((grad.d_mask, grad.d_var, grad.d_logit), numeric):
            worst = max(worst, _rel_err(analytic, num))
    assert worst < 1e-5


def test_wta_gradient_matches_finite_differences():
    worst = 0.0
    for seed in range(N_INSTANCES):
        masks, _, _, S, X = _instance(3000 + seed, 4)
        K = 1 + seed % 4
        _, grad, winners = wta_loss(masks, S, X, K)
        numeric = np.zeros_like(masks)
        for idx in np.ndindex(masks.shape):
            plus, minus = masks.copy(), masks.copy()
            plus[idx] += H
            minus[idx] -= H
            numeric[idx] = (wta_loss(plus, S, X, K)[0] - wta_loss(minus, S, X, K)[0]) / (2 * H)
        worst = max(worst, _rel_err(grad.d_mask, numeric))
        assert np.all(grad.d_var == 0) and np.all(grad.d_logit == 0)
    assert worst < 1e-5


def test_degeneracy_chain():
    for seed in range(N_INSTANCES):
        masks, variances, logits, S, X = _instance(4000 + seed, 1)
        p = _params(masks, variances, np.zeros_like(logits))
        assert cgmm_nll(p, S, X)[0] == pytest.approx(cg_nll(p, S, X)[0], abs=1e-12)

        unit = PosteriorParams(masks=masks, variances=np.ones_like(variances), weights=np.ones_like(masks))
        assert cg_nll(unit, S, X)[0] == pytest.approx(mse_loss(unit, S, X)[0], abs=1e-12)


def test_unit_variance_mixture_gradient_equals_mse():
    masks, _, _, S, X = _instance(5, 1)
    unit = PosteriorParams(masks=masks, variances=np.ones_like(masks), weights=np.ones_like(masks))
    value_mse, grad_mse = mse_loss(unit, S, X)
    value_mix, grad_mix = cgmm_nll(unit, S, X)
    assert value_mix == pytest.approx(value_mse, abs=1e-15)
    assert np.array_equal(grad_mix.d_mask, grad_mse.d_mask)


def test_beta_zero_is_plain_cgmm():
    masks, variances, logits, S, X = _instance(6, 4)
    p = _params(masks, variances, logits)
    value, grad = cgmm_nll(p, S, X)
    value_b, grad_b = cgmm_nll_beta(p, S, X, GradModConfig([0.0]))
    assert value_b == value
    assert np.array_equal(grad_b.d_mask, grad.d_mask)
    assert np.array_equal(grad_b.d_var, grad.d_var)
    assert np.array_equal(grad_b.d_logit, grad.d_logit)


def test_beta_one_mask_gradient_independent_of_variance():
    masks, variances, logits, S, X = _instance(7, 1)
    p1 = _params(masks, variances, logits)
    p2 = _params(masks, variances * 3.7, logits)
    g = GradModConfig([1.0])
    _, grad1 = cgmm_nll_beta(p1, S, X, g)
    _, grad2 = cgmm_nll_beta(p2, S, X, g)
    assert np.max(np.abs(grad1.d_mask - grad2.d_mask)) <= 1e-12


def test_beta_one_mask_gradient_is_responsibility_weighted_mse():
    masks, variances, logits, S, X = _instance(8, 4)
    p = _params(masks, variances, logits)
    _, grad = cgmm_nll_beta(p, S, X, GradModConfig([1.0]))
    scores = variances * component_log_scores(p, S, X)
    resp = softmax(scores, axis=0)
    rg = 2.0 * np.real(-S * np.conj(X) + masks * np.abs(X) ** 2)
    assert np.allclose(grad.d_mask, resp * rg / X.size, rtol=1e-12, atol=1e-15)


def test_beta_value_matches_naive_logsumexp():
    masks, variances, logits, S, X = _instance(9, 4)
    p = _params(masks, variances, logits)
    betas = [0.0, 0.3, 0.7, 1.0]
    value, _ = cgmm_nll_beta(p, S, X, GradModConfig(betas))
    c = np.array(betas).reshape(-1, 1, 1)
    theta = np.log(p.weights) - np.log(variances) - np.abs(S - masks * X) ** 2 / variances
    naive = -np.mean(np.log(np.sum(np.exp(variances ** c * theta), axis=0)))
    assert value == pytest.approx(naive, abs=1e-12)


def test_grad_mod_config():
    assert np.array_equal(GradModConfig([0.5]).resolve(3), [0.5, 0.5, 0.5])
    assert np.array_equal(GradModConfig([0.1, 0.2]).resolve(2), [0.1, 0.2])
    with pytest.raises(LossError):
        GradModConfig([1.5]).resolve(2)
    with pytest.raises(LossError):
        GradModConfig([0.1, 0.2]).resolve(3)


def test_mse_requires_single_component():
    masks, variances, logits, S, X = _instance(10, 2)
    with pytest.raises(LossError):
        mse_loss(_params(masks, variances, logits), S, X)
    with pytest.raises(LossError):
        cg_nll(_params(masks, variances, logits), S, X)


def test_shape_mismatch_rejected():
    masks, variances, logits, S, X = _instance(11, 1)
    with pytest.raises(LossError):
        mse_loss(_params(masks, variances, logits), S[:, :2], X[:, :2])


def test_variance_below_floor_rejected():
    masks, variances, logits, S, X = _instance(12, 1)
    with pytest.raises(LossError):
        cg_nll(PosteriorParams(masks, variances * 0.0 + 1e-9, np.ones_like(masks)), S, X)


def test_wta_winners_and_zero_gradient_for_losers():
    rng = np.random.default_rng(13)
    S = rng.standard_normal(SHAPE) + 1j * rng.standard_normal(SHAPE)
    X = 2.0 * S
    masks = np.stack([np.full(SHAPE, m) for m in (0.9, 0.5, 0.1, 0.45)])
    value, grad, winners = wta_loss(masks, S, X, K=2)
    assert winners.tolist() == [1, 3]
    assert np.all(grad.d_mask[[0, 2]] == 0.0)
    # 掩码 0.5 恰好是最优解，梯度为零
    assert np.allclose(grad.d_mask[1], 0.0)
    assert np.all(grad.d_mask[3] != 0.0)
    per_hyp = [np.mean(np.abs(S - m * X) ** 2) for m in masks]
    assert value == pytest.approx((per_hyp[1] + per_hyp[3]) / 2)


def test_wta_ties_broken_by_index():
    masks, _, _, S, X = _instance(14, 1)
    same = np.repeat(masks, 3, axis=0)
    _, _, winners = wta_loss(same, S, X, K=2)
    assert winners.tolist() == [0, 1]


def test_wta_full_k_is_mean_mse():
    masks, _, _, S, X = _instance(15, 3)
    value, _, _ = wta_loss(masks, S, X, K=3)
    expected = np.mean([np.mean(np.abs(S - m * X) ** 2) for m in masks])
    assert value == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("K", [0, 4])
def test_wta_k_out_of_range(K):
    masks, _, _, S, X = _instance(16, 3)
    with pytest.raises(LossError):
        wta_loss(masks, S, X, K)


def test_loss_grad_linearity():
    masks, variances, logits, S1, X1 = _instance(17, 2)
    _, _, _, S2, X2 = _instance(18, 2)
    p = _params(masks, variances, logits)
    _, g1 = cgmm_nll(p, S1, X1)
    _, g2 = cgmm_nll(p, S2, X2)
    combo = 0.3 * g1 + g2 * 2.0
    assert combo.value == pytest.approx(0.3 * g1.value + 2.0 * g2.value)
    assert np.allclose(combo.d_var, 0.3 * g1.d_var + 2.0 * g2.d_var, rtol=0, atol=1e-15)
    assert isinstance(LossGrad.zeros_like(p), LossGrad)


def _single_bin(mask, variance, S, X):
    p = PosteriorParams(masks=np.full((1, 1, 1), mask), variances=np.full((1, 1, 1), variance),
                        weights=np.ones((1, 1, 1)))
    return p, np.array([[S]], dtype=np.complex128), np.array([[X]], dtype=np.complex128)


def test_mse_single_bin_by_hand():
    p, S, X = _single_bin(0.0, 1.0, 1.0, 2.0)
    value, grad = mse_loss(p, S, X)
    assert value == 1.0
    assert grad.d_mask[0, 0, 0] == -4.0


def test_cg_nll_variance_gradient_vanishes_at_residual_power():
    # |1 − 0.25·2|² = 0.25
    p, S, X = _single_bin(0.25, 0.25, 1.0, 2.0)
    _, grad = cg_nll(p, S, X)
    assert grad.d_var[0, 0, 0] == pytest.approx(0.0, abs=1e-15)
    p_off, _, _ = _single_bin(0.25, 0.5, 1.0, 2.0)
    assert cg_nll(p_off, S, X)[1].d_var[0, 0, 0] > 0.0


def test_duplicated_components_equal_single_component():
    for seed in range(N_INSTANCES):
        masks, variances, _, S, X = _instance(6000 + seed, 1)
        single = PosteriorParams(masks=masks, variances=variances, weights=np.ones_like(masks))
        doubled = PosteriorParams(masks=np.concatenate([masks, masks]),
                                  variances=np.concatenate([variances, variances]),
                                  weights=np.full((2,) + SHAPE, 0.5))
        assert cgmm_nll(doubled, S, X)[0] == pytest.approx(cg_nll(single, S, X)[0], abs=1e-12)


def test_cgmm_nll_invariant_to_component_order():
    rng = np.random.default_rng(19)
    for seed in range(N_INSTANCES):
        masks, variances, logits, S, X = _instance(7000 + seed, 4)
        perm = rng.permutation(4)
        value, grad = cgmm_nll(_params(masks, variances, logits), S, X)
        value_p, grad_p = cgmm_nll(_params(masks[perm], variances[perm], logits[perm]), S, X)
        assert value_p == pytest.approx(value, abs=1e-12)
        assert np.allclose(grad_p.d_mask, grad.d_mask[perm], rtol=1e-12, atol=1e-15)
        assert np.allclose(grad_p.d_var, grad.d_var[perm], rtol=1e-12, atol=1e-15)
        assert np.allclose(grad_p.d_logit, grad.d_logit[perm], rtol=1e-12, atol=1e-15)


def test_wta_two_hypotheses_by_hand():
    S = np.array([[0.0 + 0j]])
    X = np.array([[1.0 + 0j]])
    masks = np.array([[[1.0]], [[2.0]]])
    value, _, winners = wta_loss(masks, S, X, K=1)
    assert (value, winners.tolist()) == (1.0, [0])
    value, _, winners = wta_loss(masks, S, X, K=2)
    assert (value, winners.tolist()) == (2.5, [0, 1])


def test_wta_value_non_decreasing_in_k():
    for seed in range(N_INSTANCES):
        masks, _, _, S, X = _instance(8000 + seed, 5)
        values = [wta_loss(masks, S, X, K)[0] for K in range(1, 6)]
        assert all(later >= earlier - 1e-12 for earlier, later in zip(values, values[1:]))
