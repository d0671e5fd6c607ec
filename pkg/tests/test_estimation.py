import math

import numpy as np
import pytest

from lcap import (FitConfig, LongitudinalDataset, ModelParams, SimConfig,
                  center_dataset, dfd, fit_components, fit_single_component,
                  generate_dataset, neg_hloglik, newton_update_fixed_effects,
                  newton_update_intercepts, sample_covariance_set, similarity,
                  shrink_covariances, shrinkage_stats, update_gamma)
from lcap.covariance import SAMPLE, CovarianceSet
from lcap.estimation import _solve_projection

from conftest import exact_cov_block, make_block, random_dataset, random_params


def manual_set(ds, matrices, kind=SAMPLE):
    return CovarianceSet(
        matrices=np.asarray(matrices, dtype=np.float64),
        kind=kind,
        weights=np.array([float(b.n_obs) for b in ds.blocks]),
        keys=tuple((b.subject_id, b.visit_index) for b in ds.blocks),
    )


# ---------------------------------------------------------------- projection


def test_solve_projection_diagonal():
    gamma = _solve_projection(np.diag([1.0, 2.0]), np.eye(2))
    assert np.allclose(gamma, [1.0, 0.0], rtol=0, atol=1e-14)
    assert gamma @ np.diag([1.0, 2.0]) @ gamma == pytest.approx(1.0, rel=1e-14)


def test_solve_projection_degenerate_tie(rng):
    with pytest.warns(RuntimeWarning, match="multiplicity"):
        gamma = _solve_projection(np.eye(3), np.eye(3))
    assert np.allclose(gamma, [1.0, 0.0, 0.0], rtol=0, atol=1e-12)
    M = rng.standard_normal((3, 3))
    H = M @ M.T + 3.0 * np.eye(3)
    with pytest.warns(RuntimeWarning, match="multiplicity"):
        g1 = _solve_projection(H.copy(), H.copy())
    with pytest.warns(RuntimeWarning, match="multiplicity"):
        g2 = _solve_projection(H.copy(), H.copy())
    assert np.array_equal(g1, g2)
    assert g1 @ H @ g1 == pytest.approx(1.0, rel=1e-12)


def test_solve_projection_beats_random_probes(rng):
    p = 6
    M = rng.standard_normal((p, p))
    A = M @ M.T + 0.5 * np.eye(p)
    N = rng.standard_normal((p, p))
    H = N @ N.T + 0.5 * np.eye(p)
    gamma = _solve_projection(A, H)
    best = gamma @ A @ gamma
    for _ in range(1000):
        v = rng.standard_normal(p)
        v /= np.sqrt(v @ H @ v)
        assert best <= v @ A @ v + 1e-10


def test_solve_projection_planted_subspace_grid(rng):
    # bottom 2-dimensional invariant subspace; dense angle grid oracle
    p = 6
    Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    vals = np.array([0.5, 0.9, 3.0, 4.0, 5.0, 6.0])
    A = Q @ np.diag(vals) @ Q.T
    gamma = _solve_projection(A, np.eye(p))
    obj = gamma @ A @ gamma
    angles = np.linspace(0.0, np.pi, 20001)
    span = Q[:, :2]
    grid_objs = [
        (span @ [np.cos(t), np.sin(t)]) @ A @ (span @ [np.cos(t), np.sin(t)])
        for t in angles
    ]
    assert obj <= min(grid_objs) + 1e-10
    assert obj == pytest.approx(0.5, rel=1e-12)


def test_solve_projection_requires_pd_h():
    with pytest.raises(np.linalg.LinAlgError, match="positive definite"):
        _solve_projection(np.eye(2), np.diag([1.0, 0.0]))


def test_solve_projection_sign_canonical(rng):
    for _ in range(20):
        M = rng.standard_normal((4, 4))
        A = M @ M.T + 0.1 * np.eye(4)
        gamma = _solve_projection(A, np.eye(4))
        assert gamma[int(np.argmax(np.abs(gamma)))] > 0


def test_update_gamma_public_surface(rng):
    ds = random_dataset(rng, n=3, V=2, T=8, p=4, q=2)
    S = sample_covariance_set(ds)
    params = random_params(rng, ds)
    stats = shrinkage_stats(ds, S, params)
    shrunk = shrink_covariances(S, stats)
    H = np.eye(4)
    gamma = update_gamma(ds, shrunk, params, H)
    assert gamma @ H @ gamma == pytest.approx(1.0, abs=1e-10)
    # explicit assembly of the weighted quadratic form
    subj_of = {s: i for i, s in enumerate(ds.subjects)}
    A = np.zeros((4, 4))
    for b, M in zip(ds.blocks, shrunk.matrices):
        eta = params.beta0i[subj_of[b.subject_id]] + b.covariates @ params.beta1
        A += 0.5 * b.n_obs * math.exp(-eta) * M
    expected = _solve_projection(A, H)
    assert np.allclose(gamma, expected, rtol=0, atol=1e-12)
    # orthogonal-complement restriction
    basis = [expected]
    gamma2 = update_gamma(ds, shrunk, params, H, orth_basis=basis)
    assert abs(gamma2 @ H @ expected) < 1e-10


# ------------------------------------------------------------ newton updates


def test_newton_intercepts_fixed_point():
    blocks = [make_block("a", 1, np.zeros((2, 2)), [0.0], centered=True)]
    ds = LongitudinalDataset.from_blocks(blocks)
    b_star = 0.25
    S = manual_set(ds, [np.diag([float(np.exp(b_star)), 1.0])])
    params = ModelParams(gamma=np.array([1.0, 0.0]), beta0=b_star,
                         beta1=np.zeros(1), beta0i=np.array([b_star]),
                         sigma2=1.0)
    updated = newton_update_intercepts(ds, S, params)
    assert updated[0] == pytest.approx(b_star, abs=1e-13)


def test_newton_intercepts_scalar_oracle():
    blocks = [make_block("a", 1, np.zeros((2, 2)), [0.0], centered=True)]
    ds = LongitudinalDataset.from_blocks(blocks)
    S = manual_set(ds, [np.diag([math.e, 1.0])])
    sigma2 = 1e6
    params = ModelParams(gamma=np.array([1.0, 0.0]), beta0=0.0,
                         beta1=np.zeros(1), beta0i=np.zeros(1), sigma2=sigma2)
    updated = newton_update_intercepts(ds, S, params)
    g = 1.0 * (1.0 - math.e)
    h = 1.0 * math.e + 1.0 / sigma2
    assert updated[0] == pytest.approx(-g / h, rel=1e-12)
    assert updated[0] == pytest.approx(-(1.0 - math.e) / math.e, rel=1e-3)


def test_newton_updates_never_increase_objective(rng):
    for _ in range(15):
        ds = random_dataset(rng, n=3, V=2, T=6, p=3, q=2)
        S = sample_covariance_set(ds)
        params = random_params(rng, ds, scale=1.5)
        base = neg_hloglik(ds, S, params).total

        b0i = newton_update_intercepts(ds, S, params)
        after = ModelParams(gamma=params.gamma, beta0=params.beta0,
                            beta1=params.beta1, beta0i=b0i,
                            sigma2=params.sigma2)
        assert neg_hloglik(ds, S, after).total <= base

        b1 = newton_update_fixed_effects(ds, S, after)
        after2 = ModelParams(gamma=after.gamma, beta0=after.beta0,
                             beta1=b1, beta0i=after.beta0i,
                             sigma2=after.sigma2)
        assert neg_hloglik(ds, S, after2).total <= neg_hloglik(ds, S, after).total


def test_newton_fixed_effects_scalar_case(rng):
    ds = random_dataset(rng, n=2, V=1, T=5, p=2, q=1)
    S = sample_covariance_set(ds)
    params = random_params(rng, ds)
    updated = newton_update_fixed_effects(ds, S, params)
    # closed-form scalar Newton step
    subj_of = {s: i for i, s in enumerate(ds.subjects)}
    g = 0.0
    h = 0.0
    for b, M in zip(ds.blocks, S.matrices):
        eta = params.beta0i[subj_of[b.subject_id]] + b.covariates @ params.beta1
        s = params.gamma @ M @ params.gamma
        w = 0.5 * b.n_obs * s * math.exp(-eta)
        x = b.covariates[0]
        g += 0.5 * b.n_obs * x - w * x
        h += w * x * x
    assert updated[0] == pytest.approx(params.beta1[0] - g / h, rel=1e-12)


def test_newton_fixed_effects_stationary(rng):
    ds = random_dataset(rng, n=2, V=2, T=5, p=2, q=2)
    gamma = np.array([1.0, 0.0])
    beta1 = np.array([0.4, -0.2])
    beta0i = np.array([0.1, -0.3])
    subj_of = {s: i for i, s in enumerate(ds.subjects)}
    mats = [np.diag([float(np.exp(beta0i[subj_of[b.subject_id]]
                                  + b.covariates @ beta1)), 1.0])
            for b in ds.blocks]
    S = manual_set(ds, mats)
    params = ModelParams(gamma=gamma, beta0=0.0, beta1=beta1,
                         beta0i=beta0i, sigma2=1.0)
    updated = newton_update_fixed_effects(ds, S, params)
    assert np.allclose(updated, beta1, rtol=0, atol=1e-9)


# ------------------------------------------------------------------- fitting


def planted_single_signal(rng, p=5, n=20, V=2, T=500):
    cfg = SimConfig(p=p, n=n, V=V, T=T, signal={2: (1.0, 0.8)},
                    beta0_high=1.0, beta0_low=-1.0, sigma2=0.0, seed=3)
    ds, truth = generate_dataset(cfg, rng)
    return center_dataset(ds), truth


def test_fit_recovers_planted_direction(rng):
    dsc, truth = planted_single_signal(rng)
    fit = fit_single_component(dsc, FitConfig(n_starts=5, seed=0))
    assert similarity(fit.params.gamma, truth.Pi[:, 1]) >= 0.99
    assert fit.converged


def test_more_starts_never_worse(rng):
    dsc, _ = planted_single_signal(rng, p=4, n=8, V=2, T=50)
    one = fit_single_component(dsc, FitConfig(n_starts=1, seed=42))
    ten = fit_single_component(dsc, FitConfig(n_starts=10, seed=42))
    assert ten.objective <= one.objective


def test_not_converged_with_one_iteration(rng):
    ds = center_dataset(random_dataset(rng, n=3, V=2, T=8, p=3, centered=False))
    fit = fit_single_component(ds, FitConfig(n_starts=1, max_outer_iters=1,
                                             seed=0))
    assert fit.converged is False


def test_constraint_satisfied_at_solution(rng):
    ds = center_dataset(random_dataset(rng, n=4, V=2, T=10, p=4, centered=False))
    fit = fit_single_component(ds, FitConfig(n_starts=2, seed=1))
    g = fit.params.gamma
    assert abs(g @ fit.H @ g - 1.0) <= 1e-10


def test_fit_deterministic(rng):
    ds = center_dataset(random_dataset(rng, n=3, V=2, T=8, p=3, centered=False))
    cfg = FitConfig(n_starts=3, seed=7)
    a = fit_single_component(ds, cfg)
    b = fit_single_component(ds, cfg)
    assert np.array_equal(a.params.gamma, b.params.gamma)
    assert np.array_equal(a.params.beta0i, b.params.beta0i)
    assert a.objective == b.objective
    assert np.array_equal(a.objective_trace, b.objective_trace)
    assert a.start_index == b.start_index


def test_objective_trace_recorded(rng):
    ds = center_dataset(random_dataset(rng, n=3, V=2, T=8, p=3, centered=False))
    fit = fit_single_component(ds, FitConfig(n_starts=1, seed=0))
    assert len(fit.objective_trace) >= 2
    assert fit.objective == fit.objective_trace[-1]
    assert fit.n_iter >= len(fit.objective_trace)


# ----------------------------------------------------------------------- dfd


def test_dfd_single_column_is_exactly_one(rng):
    ds = random_dataset(rng, p=3)
    S = sample_covariance_set(ds)
    gamma = rng.standard_normal(3)
    assert dfd(ds, gamma.reshape(-1, 1), S) == 1.0


def test_dfd_common_eigenvectors_give_one():
    blocks = [make_block("a", 1, np.zeros((3, 3)), [0.0], centered=True),
              make_block("a", 2, np.zeros((4, 3)), [0.0], centered=True)]
    ds = LongitudinalDataset.from_blocks(blocks)
    S = manual_set(ds, [np.diag([2.0, 1.0, 0.5]), np.diag([1.0, 3.0, 0.25])])
    G = np.eye(3)[:, :2]
    assert dfd(ds, G, S) == pytest.approx(1.0, abs=1e-15)


def test_dfd_hand_value():
    blocks = [make_block("a", 1, np.zeros((4, 2)), [0.0], centered=True)]
    ds = LongitudinalDataset.from_blocks(blocks)
    S = manual_set(ds, [np.array([[2.0, 1.0], [1.0, 2.0]])])
    assert dfd(ds, np.eye(2), S) == pytest.approx(4.0 / 3.0, rel=1e-12)


def test_dfd_at_least_one_random_instances(rng):
    blocks = [make_block("a", 1, np.zeros((4, 4)), [0.0], centered=True)]
    ds = LongitudinalDataset.from_blocks(blocks)
    for _ in range(200):
        M = rng.standard_normal((4, 4))
        S = manual_set(ds, [M @ M.T + 0.1 * np.eye(4)])
        G = rng.standard_normal((4, 2))
        assert dfd(ds, G, S) >= 1.0 - 1e-12


def test_dfd_singular_projection_error(rng):
    blocks = [make_block("a", 1, np.zeros((4, 3)), [0.0], centered=True)]
    ds = LongitudinalDataset.from_blocks(blocks)
    v = np.array([1.0, 0.0, 0.0])
    S = manual_set(ds, [np.outer(v, v)])
    with pytest.raises(np.linalg.LinAlgError, match="singular"):
        dfd(ds, np.eye(3)[:, :2], S)
    with pytest.raises(ValueError, match="linearly dependent"):
        dfd(ds, np.column_stack([v, v]), S)


# ---------------------------------------------------------------- components


def test_components_two_signals_recovered(rng):
    cfg = SimConfig(p=20, n=100, V=2, T=500, seed=5)
    ds, truth = generate_dataset(cfg, rng)
    dsc = center_dataset(ds)
    del ds
    comps = fit_components(dsc, FitConfig(n_starts=6, seed=2, max_components=2))
    assert comps.k_selected >= 2
    G = comps.gamma_matrix
    sims = sorted(
        max(similarity(G[:, c], truth.Pi[:, j - 1]) for c in range(G.shape[1]))
        for j in (2, 4)
    )
    assert sims[0] >= 0.9


def test_components_max_one(rng):
    ds = center_dataset(random_dataset(rng, n=3, V=2, T=8, p=4, centered=False))
    comps = fit_components(ds, FitConfig(n_starts=2, seed=0, max_components=1))
    assert len(comps.components) == 1
    assert comps.dfd_values.shape == (1,)
    assert comps.dfd_values[0] == 1.0


def test_components_common_eigenbasis_dfd_stays_one(rng):
    blocks = []
    for i in range(4):
        for v in (1, 2):
            lam = np.exp(rng.normal(0.0, 0.4, size=4))
            blocks.append(exact_cov_block(f"s{i}", v, np.diag(lam), 12,
                                          [rng.normal()], rng))
    ds = LongitudinalDataset.from_blocks(blocks)
    comps = fit_components(ds, FitConfig(n_starts=3, seed=0, max_components=4))
    assert len(comps.components) == 4
    assert comps.k_selected == 4
    assert np.all(comps.dfd_values <= 1.0 + 1e-6)


def test_components_h_orthogonal(rng):
    cfg = SimConfig(p=8, n=20, V=2, T=100, seed=9)
    ds, _ = generate_dataset(cfg, rng)
    dsc = center_dataset(ds)
    comps = fit_components(dsc, FitConfig(n_starts=4, seed=0, max_components=3))
    G = comps.gamma_matrix
    H1 = comps.components[0].H
    k = G.shape[1]
    for a in range(k):
        for b in range(a + 1, k):
            assert abs(G[:, a] @ H1 @ G[:, b]) <= 1e-8


def test_all_starts_failing_raises(rng):
    # sample-only mode with rank-deficient pooled covariance: H not PD
    blocks = [make_block("a", v, rng.standard_normal((2, 5)), [0.0])
              for v in (1, 2)]
    ds = center_dataset(LongitudinalDataset.from_blocks(blocks))
    with pytest.raises((RuntimeError, np.linalg.LinAlgError)):
        fit_single_component(ds, FitConfig(n_starts=2, seed=0,
                                           shrinkage="sample"))
