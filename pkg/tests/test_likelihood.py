import math

import numpy as np
import pytest

from lcap import (LongitudinalDataset, ModelParams, grad_hess_beta0i,
                  grad_hess_beta1, neg_hloglik, sample_covariance_set,
                  update_hyperparams)
from lcap.covariance import SAMPLE, CovarianceSet

from conftest import make_block, random_dataset, random_params


def manual_set(ds, matrices):
    return CovarianceSet(
        matrices=np.asarray(matrices, dtype=np.float64),
        kind=SAMPLE,
        weights=np.array([float(b.n_obs) for b in ds.blocks]),
        keys=tuple((b.subject_id, b.visit_index) for b in ds.blocks),
    )


def unit_instance():
    blocks = [make_block("a", 1, np.zeros((2, 2)), [0.0], centered=True)]
    ds = LongitudinalDataset.from_blocks(blocks)
    S = manual_set(ds, [np.eye(2)])
    return ds, S


def test_value_unit_plugin():
    ds, S = unit_instance()
    params = ModelParams(gamma=np.array([1.0, 0.0]), beta0=0.0,
                         beta1=np.zeros(1), beta0i=np.zeros(1), sigma2=1.0)
    parts = neg_hloglik(ds, S, params)
    assert parts.conditional == 1.0
    assert parts.random_effect == 0.0
    assert parts.total == 1.0


def test_value_exact_fit_is_intercept_minimum():
    ds, S = unit_instance()
    s_proj = 3.0
    S = manual_set(ds, [np.diag([3.0, 1.0])])
    b_star = math.log(s_proj)
    params = ModelParams(gamma=np.array([1.0, 0.0]), beta0=b_star,
                         beta1=np.zeros(1), beta0i=np.array([b_star]),
                         sigma2=1.0)
    parts = neg_hloglik(ds, S, params)
    assert parts.conditional == pytest.approx(1.0 * (b_star + 1.0), rel=1e-15)
    for eps in (-1e-3, 1e-3):
        bumped = ModelParams(gamma=params.gamma, beta0=b_star,
                             beta1=params.beta1,
                             beta0i=np.array([b_star + eps]), sigma2=1.0)
        assert neg_hloglik(ds, S, bumped).conditional > parts.conditional


def straight_loop_nhl(ds, matrices, params):
    subj_of = {s: i for i, s in enumerate(ds.subjects)}
    cond = 0.0
    for b, M in zip(ds.blocks, matrices):
        i = subj_of[b.subject_id]
        eta = params.beta0i[i] + float(b.covariates @ params.beta1)
        s = float(params.gamma @ M @ params.gamma)
        cond += (b.n_obs / 2.0) * (eta + s * math.exp(-eta))
    rand = 0.0
    for i in range(ds.n):
        rand += 0.5 * math.log(params.sigma2)
        rand += (params.beta0i[i] - params.beta0) ** 2 / (2.0 * params.sigma2)
    return cond, rand


def test_value_matches_straight_loop(rng):
    for _ in range(10):
        ds = random_dataset(rng, n=3, V=2, T=6, p=3, q=2)
        S = sample_covariance_set(ds)
        params = random_params(rng, ds)
        parts = neg_hloglik(ds, S, params)
        cond, rand = straight_loop_nhl(ds, S.matrices, params)
        assert parts.conditional == pytest.approx(cond, rel=1e-12)
        assert parts.random_effect == pytest.approx(rand, rel=1e-12)
        assert parts.total == parts.conditional + parts.random_effect


def test_sigma2_domain_error(rng):
    ds = random_dataset(rng)
    S = sample_covariance_set(ds)
    params = random_params(rng, ds)
    bad = ModelParams(gamma=params.gamma, beta0=0.0, beta1=params.beta1,
                      beta0i=params.beta0i, sigma2=0.0)
    with pytest.raises(ValueError, match="sigma2"):
        neg_hloglik(ds, S, bad)


def test_grad_beta0i_zero_at_exact_fit():
    ds, _ = unit_instance()
    S = manual_set(ds, [np.diag([math.exp(0.4), 1.0])])
    params = ModelParams(gamma=np.array([1.0, 0.0]), beta0=0.4,
                         beta1=np.zeros(1), beta0i=np.array([0.4]), sigma2=1.0)
    grad, hess = grad_hess_beta0i(ds, S, params, 0)
    assert grad == pytest.approx(0.0, abs=1e-13)
    assert hess > 0.0


def test_grad_beta0i_single_visit_arithmetic():
    ds, _ = unit_instance()
    S = manual_set(ds, [np.diag([3.0, 1.0])])
    params = ModelParams(gamma=np.array([1.0, 0.0]), beta0=0.0,
                         beta1=np.zeros(1), beta0i=np.zeros(1), sigma2=1.0)
    grad, hess = grad_hess_beta0i(ds, S, params, 0)
    assert grad == pytest.approx(-2.0, rel=1e-15)
    assert hess == pytest.approx(4.0, rel=1e-15)


def test_grad_beta1_zero_at_exact_fit(rng):
    ds = random_dataset(rng, n=2, V=2, T=5, p=2, q=2)
    gamma = np.array([1.0, 0.0])
    beta1 = np.array([0.3, -0.6])
    beta0i = np.array([0.2, -0.1])
    subj_of = {s: i for i, s in enumerate(ds.subjects)}
    mats = [np.diag([float(np.exp(beta0i[subj_of[b.subject_id]]
                                  + b.covariates @ beta1)), 1.0])
            for b in ds.blocks]
    S = manual_set(ds, mats)
    params = ModelParams(gamma=gamma, beta0=0.0, beta1=beta1, beta0i=beta0i,
                         sigma2=1.0)
    grad, hess = grad_hess_beta1(ds, S, params)
    assert np.abs(grad).max() < 1e-10
    assert np.allclose(hess, hess.T)


def test_grad_beta1_one_block_arithmetic():
    blocks = [make_block("a", 1, np.zeros((2, 2)), [2.0], centered=True)]
    ds = LongitudinalDataset.from_blocks(blocks)
    S = manual_set(ds, [np.eye(2)])
    params = ModelParams(gamma=np.array([1.0, 0.0]), beta0=0.0,
                         beta1=np.zeros(1), beta0i=np.zeros(1), sigma2=1.0)
    grad, hess = grad_hess_beta1(ds, S, params)
    assert grad[0] == pytest.approx(0.0, abs=1e-15)
    assert hess[0, 0] == pytest.approx(4.0, rel=1e-15)


def nhl_at(ds, S, params, beta0i=None, beta1=None, beta0=None, sigma2=None):
    p = ModelParams(
        gamma=params.gamma,
        beta0=params.beta0 if beta0 is None else beta0,
        beta1=params.beta1 if beta1 is None else beta1,
        beta0i=params.beta0i if beta0i is None else beta0i,
        sigma2=params.sigma2 if sigma2 is None else sigma2,
    )
    return neg_hloglik(ds, S, p).total


def test_derivatives_match_finite_differences(rng):
    """100 random parameter points: analytic gradients match central
    differences of the objective, Hessians match central differences of the
    analytic gradients (relative 1e-6)."""
    h = 1e-6
    checked = 0
    while checked < 100:
        ds = random_dataset(rng, n=3, V=2, T=6, p=3, q=2)
        S = sample_covariance_set(ds)
        for _ in range(5):
            params = random_params(rng, ds)
            i = int(rng.integers(ds.n))
            grad, hess = grad_hess_beta0i(ds, S, params, i)
            e = np.zeros(ds.n)
            e[i] = 1.0
            fd_grad = (nhl_at(ds, S, params, beta0i=params.beta0i + h * e)
                       - nhl_at(ds, S, params, beta0i=params.beta0i - h * e)) / (2 * h)
            assert grad == pytest.approx(fd_grad, rel=1e-6, abs=1e-8)
            gp, _ = grad_hess_beta0i(
                ds, S, ModelParams(gamma=params.gamma, beta0=params.beta0,
                                   beta1=params.beta1,
                                   beta0i=params.beta0i + h * e,
                                   sigma2=params.sigma2), i)
            gm, _ = grad_hess_beta0i(
                ds, S, ModelParams(gamma=params.gamma, beta0=params.beta0,
                                   beta1=params.beta1,
                                   beta0i=params.beta0i - h * e,
                                   sigma2=params.sigma2), i)
            assert hess == pytest.approx((gp - gm) / (2 * h), rel=1e-6)

            grad1, hess1 = grad_hess_beta1(ds, S, params)
            for j in range(ds.q):
                ej = np.zeros(ds.q)
                ej[j] = 1.0
                fd = (nhl_at(ds, S, params, beta1=params.beta1 + h * ej)
                      - nhl_at(ds, S, params, beta1=params.beta1 - h * ej)) / (2 * h)
                assert grad1[j] == pytest.approx(fd, rel=1e-6, abs=1e-8)
                gp1, _ = grad_hess_beta1(
                    ds, S, ModelParams(gamma=params.gamma, beta0=params.beta0,
                                       beta1=params.beta1 + h * ej,
                                       beta0i=params.beta0i,
                                       sigma2=params.sigma2))
                gm1, _ = grad_hess_beta1(
                    ds, S, ModelParams(gamma=params.gamma, beta0=params.beta0,
                                       beta1=params.beta1 - h * ej,
                                       beta0i=params.beta0i,
                                       sigma2=params.sigma2))
                fd_hess_col = (gp1 - gm1) / (2 * h)
                assert np.allclose(hess1[:, j], fd_hess_col,
                                   rtol=1e-6, atol=1e-8)
            checked += 1


def test_hessian_beta0i_always_positive(rng):
    for _ in range(20):
        ds = random_dataset(rng, n=2, V=2, T=4, p=2, q=1)
        S = sample_covariance_set(ds)
        params = random_params(rng, ds, scale=2.0)
        for i in range(ds.n):
            _, hess = grad_hess_beta0i(ds, S, params, i)
            assert hess > 0.0


def test_update_hyperparams_examples():
    assert update_hyperparams(np.array([1.0, 1.0, 1.0])) == (1.0, 0.0)
    assert update_hyperparams(np.array([0.0, 2.0])) == (1.0, 1.0)
    beta0, sigma2 = update_hyperparams(np.array([-1.0, 0.0, 4.0]))
    assert beta0 == pytest.approx(1.0, rel=1e-15)
    assert sigma2 == pytest.approx(14.0 / 3.0, rel=1e-15)


def test_hyperparams_minimize_objective(rng):
    for _ in range(10):
        ds = random_dataset(rng, n=4, V=2, T=5, p=2, q=1)
        S = sample_covariance_set(ds)
        params = random_params(rng, ds)
        beta0, sigma2 = update_hyperparams(params.beta0i)
        assert sigma2 > 0
        base = nhl_at(ds, S, params, beta0=beta0, sigma2=sigma2)
        for eps in (-1e-3, 1e-3):
            assert nhl_at(ds, S, params, beta0=beta0 + eps, sigma2=sigma2) >= base
            assert nhl_at(ds, S, params, beta0=beta0, sigma2=sigma2 + eps) >= base


def test_total_is_sum_of_parts(rng):
    ds = random_dataset(rng)
    S = sample_covariance_set(ds)
    params = random_params(rng, ds)
    parts = neg_hloglik(ds, S, params)
    assert parts.total == parts.conditional + parts.random_effect


def test_overflow_guard_warns(rng):
    ds = random_dataset(rng, n=2, V=1, T=4, p=2, q=1)
    S = sample_covariance_set(ds)
    params = ModelParams(gamma=np.ones(2), beta0=0.0, beta1=np.zeros(1),
                         beta0i=np.array([-800.0, 0.0]), sigma2=1.0)
    with pytest.warns(RuntimeWarning, match="clipping"):
        parts = neg_hloglik(ds, S, params)
    assert np.isfinite(parts.total)
