import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from persid import lgss
from persid.domain import PerturbationSequence, group_dataset
from persid.errors import DimensionMismatch, EmptyDataset, NotPSD
from persid.lgss import LgssParams
from persid.policies import PerturbationPolicy, generate_open_loop
from persid.seeding import rng_for

from oracles import dense_loglik, dense_smoothed_means, dense_state_output_map


def seq(u):
    return PerturbationSequence(np.asarray(u, dtype=float).reshape(len(u), -1))


def noiseless(**kw):
    base = dict(A=[[0.0]], B=[[0.0]], C=[[1.0]], Q=[[0.0]], R=[[0.0]], mu0=[0.0], Sigma0=[[0.0]])
    base.update(kw)
    return LgssParams(**base)


def random_instance(rng, n=None, m=None, p=None, T=None):
    n = n or int(rng.integers(1, 4))
    m = m or int(rng.integers(1, 3))
    p = p or int(rng.integers(1, 3))
    T = T if T is not None else int(rng.integers(0, 11))
    params = lgss.random_params(n, m, p, rng)
    Lq = rng.standard_normal((n, n)) * 0.3
    Lr = rng.standard_normal((p, p)) * 0.3
    L0 = rng.standard_normal((n, n)) * 0.5
    params = params.replace(Q=Lq @ Lq.T + 0.05 * np.eye(n), R=Lr @ Lr.T + 0.1 * np.eye(p),
                            mu0=rng.standard_normal(n), Sigma0=L0 @ L0.T + 0.1 * np.eye(n))
    U = rng.uniform(-1, 1, (T, m))
    return params, U


# ---------------------------------------------------------------- simulate


def test_simulate_one_step_noiseless():
    r = lgss.simulate(noiseless(B=[[1.0]]), seq([2.0]), seed=0)
    assert r.outputs.ravel().tolist() == [0.0, 2.0]


def test_simulate_geometric():
    r = lgss.simulate(noiseless(A=[[2.0]], mu0=[1.0]), seq([0.0, 0.0]), seed=0)
    assert r.outputs.ravel().tolist() == [1.0, 2.0, 4.0]


def test_simulate_deterministic(osc_lgss):
    u = seq(np.linspace(-1, 1, 20))
    a = lgss.simulate(osc_lgss, u, 5)
    b = lgss.simulate(osc_lgss, u, 5)
    assert np.array_equal(a.outputs, b.outputs)
    assert not np.array_equal(a.outputs, lgss.simulate(osc_lgss, u, 6).outputs)


def test_simulate_dimension_mismatch(osc_lgss):
    with pytest.raises(DimensionMismatch):
        lgss.simulate(osc_lgss, PerturbationSequence(np.zeros((3, 2))), 0)


def test_batch_rows_match_single_runs(osc_lgss):
    u = seq(np.ones(5))
    Y = lgss.simulate_batch(osc_lgss, u, 3, 9)
    assert Y.shape == (3, 6, 1)


# ------------------------------------------------------------ parameters


def test_rejects_non_psd_noise():
    with pytest.raises(NotPSD):
        LgssParams(A=[[0.5]], B=[[1.0]], C=[[1.0]], Q=[[-1.0]], R=[[1.0]])


def test_tiny_negative_eigenvalues_clamped():
    p = LgssParams(A=[[0.5]], B=[[1.0]], C=[[1.0]], Q=[[-1e-12]], R=[[1.0]])
    assert p.Q[0, 0] == 0.0


def test_rejects_inconsistent_dims():
    with pytest.raises(DimensionMismatch):
        LgssParams(A=np.eye(2), B=[[1.0]], C=[[1.0, 0.0]], Q=np.eye(2), R=[[1.0]])


def test_json_round_trip(osc_lgss):
    back = LgssParams.from_dict(json.loads(json.dumps(osc_lgss.to_dict())))
    for k in ("A", "B", "C", "Q", "R", "mu0", "Sigma0"):
        assert np.array_equal(getattr(back, k), getattr(osc_lgss, k))


# ------------------------------------------------------------------- law


def test_law_deterministic_system():
    law = lgss.trajectory_law(noiseless(B=[[1.0]]), seq([0.7]))
    assert law.mean.tolist() == [0.0, 0.7]
    assert np.all(law.cov == 0)


def test_law_hand_evaluation():
    p = LgssParams(A=[[0.0]], B=[[0.0]], C=[[1.0]], Q=[[1.0]], R=[[1.0]], mu0=[0.0], Sigma0=[[1.0]])
    law = lgss.trajectory_law(p, seq([0.0]))
    assert np.allclose(law.mean, 0)
    assert np.allclose(law.cov, np.diag([2.0, 2.0]), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_law_matches_dense_noise_map(seed):
    params, U = random_instance(rng_for(seed))
    law = lgss.trajectory_law(params, PerturbationSequence(U))
    _, _, my, Gy = dense_state_output_map(params, U)
    assert np.allclose(law.mean, my, atol=1e-10)
    assert np.allclose(law.cov, Gy @ Gy.T, atol=1e-10)


def test_zero_input_hides_b(osc_lgss):
    other = osc_lgss.replace(B=np.array([[-3.0], [2.0]]))
    u = seq(np.zeros(12))
    a, b = lgss.trajectory_law(osc_lgss, u), lgss.trajectory_law(other, u)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov)


# ---------------------------------------------------------- filter/smoother


def test_filter_single_observation():
    p = LgssParams(A=[[0.0]], B=[[0.0]], C=[[1.0]], Q=[[1.0]], R=[[1.0]], mu0=[0.0], Sigma0=[[1.0]])
    res = lgss.kalman_filter(p, np.zeros((0, 1)), [[0.0]])
    assert res.loglik == pytest.approx(-0.5 * np.log(2 * np.pi * 2), abs=1e-14)
    assert res.loglik == pytest.approx(-1.26551, abs=1e-5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_filter_matches_dense_loglik(seed):
    rng = rng_for(seed)
    params, U = random_instance(rng)
    Y = lgss.simulate_batch(params, U, 1, seed)[0]
    assert abs(lgss.kalman_filter(params, U, Y).loglik - dense_loglik(params, U, Y)) < 1e-8


def test_uninformative_observations_leave_prior(osc_lgss):
    p = osc_lgss.replace(R=osc_lgss.R * 1e6)
    U = np.ones((10, 1))
    Y = lgss.simulate_batch(osc_lgss, U, 1, 3)[0]
    f = lgss.kalman_filter(p, U, Y)
    gap = np.linalg.norm(f.filtered_means - f.predicted_means)
    assert gap <= 1e-3 * max(1.0, np.linalg.norm(f.predicted_means))


def test_smoother_at_t0_is_filter(osc_lgss):
    U, Y = np.zeros((0, 1)), np.array([[0.4]])
    f = lgss.kalman_filter(osc_lgss, U, Y)
    s = lgss.kalman_smooth(osc_lgss, U, Y)
    assert np.allclose(s.means, f.filtered_means) and np.allclose(s.covs[0], f.filtered_covs[0])


def test_smoother_matches_dense_conditioning_scalar(scalar_lgss):
    U = np.array([[1.0], [-0.5], [0.2]])
    Y = np.array([[0.3], [1.1], [0.2], [-0.4]])
    s = lgss.kalman_smooth(scalar_lgss, U, Y)
    assert np.max(np.abs(s.means - dense_smoothed_means(scalar_lgss, U, Y))) < 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32))
def test_smoother_matches_dense_conditioning(seed):
    rng = rng_for(seed)
    params, U = random_instance(rng, T=int(rng.integers(1, 8)))
    Y = lgss.simulate_batch(params, U, 1, seed)[0]
    s = lgss.kalman_smooth(params, U, Y)
    assert np.allclose(s.means, dense_smoothed_means(params, U, Y), atol=1e-8)
    f = lgss.kalman_filter(params, U, Y)
    for Pf, Ps in zip(f.filtered_covs, s.covs):
        assert np.linalg.eigvalsh(Pf - Ps).min() > -1e-10


def test_smoother_noiseless_state():
    p = LgssParams(A=[[0.5]], B=[[1.0]], C=[[1.0]], Q=[[0.0]], R=[[1.0]], mu0=[2.0], Sigma0=[[0.0]])
    U = np.array([[1.0], [0.0], [-1.0]])
    s = lgss.kalman_smooth(p, U, np.array([[9.0], [-3.0], [0.0], [4.0]]))
    assert np.allclose(s.means.ravel(), [2.0, 2.0, 1.0, -0.5], atol=1e-12)


# --------------------------------------------------------------------- EM


def _dataset(params, policy, n_rec, T, seed):
    u = generate_open_loop(policy, T, params.m, seed)
    return group_dataset([lgss.simulate(params, u, seed * 1000 + i) for i in range(n_rec)])


def test_em_empty_dataset(scalar_lgss):
    with pytest.raises(EmptyDataset):
        lgss.em_fit(scalar_lgss, group_dataset([]))


def test_em_fixed_point_at_truth_noiseless():
    exact = LgssParams(A=[[0.8]], B=[[1.0]], C=[[1.0]], Q=[[0.0]], R=[[0.0]], mu0=[0.0], Sigma0=[[0.0]])
    data = _dataset(exact, PerturbationPolicy("p", "prbs", switch_prob=0.4), 20, 40, 1)
    # the truth, with noise covariances at the floor
    truth = exact.replace(Q=[[1e-8]], R=[[1e-8]], Sigma0=[[1e-8]])
    fitted, _ = lgss.em_fit(truth, data, max_iter=1, fixed_fields=("mu0", "Sigma0"))
    for k in ("A", "B", "C"):
        assert np.max(np.abs(getattr(fitted, k) - getattr(truth, k))) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_em_trace_nondecreasing(seed, osc_lgss):
    rng = rng_for(seed)
    data = _dataset(osc_lgss, PerturbationPolicy("p", "prbs", switch_prob=0.3), 5, 30, seed)
    init = lgss.random_params(2, 1, 1, rng)
    _, trace = lgss.em_fit(init, data, max_iter=40, tol=0.0)
    d = np.diff(trace)
    assert np.all(d >= -1e-9 * np.maximum(1.0, np.abs(trace[:-1])))


def test_em_fixed_fields_untouched(osc_lgss):
    data = _dataset(osc_lgss, PerturbationPolicy("p", "prbs"), 4, 30, 2)
    init = lgss.random_params(2, 1, 1, rng_for(1))
    fitted, _ = lgss.em_fit(init, data, max_iter=5, fixed_fields=("C", "R"))
    assert np.array_equal(fitted.C, init.C) and np.array_equal(fitted.R, init.R)


def test_em_floors_noise():
    truth = LgssParams(A=[[0.5]], B=[[1.0]], C=[[1.0]], Q=[[0.0]], R=[[0.0]], mu0=[0.0], Sigma0=[[0.0]])
    data = _dataset(truth, PerturbationPolicy("p", "prbs"), 3, 20, 4)
    init = LgssParams(A=[[0.3]], B=[[0.5]], C=[[1.0]], Q=[[0.5]], R=[[0.5]])
    fitted, _ = lgss.em_fit(init, data, max_iter=30, check_monotone=False)
    assert fitted.Q[0, 0] >= 1e-8 and fitted.R[0, 0] >= 1e-8


@pytest.mark.slow
def test_em_recovers_scalar_markov_parameters():
    truth = LgssParams(A=[[0.8]], B=[[1.0]], C=[[1.0]], Q=[[0.1]], R=[[0.1]])
    pol = PerturbationPolicy("p", "prbs", switch_prob=0.3)
    recs = [lgss.simulate(truth, generate_open_loop(pol, 100, 1, i), 10_000 + i) for i in range(200)]
    init = LgssParams(A=[[0.3]], B=[[0.5]], C=[[0.7]], Q=[[1.0]], R=[[1.0]])
    fitted, _ = lgss.em_fit(init, group_dataset(recs), max_iter=300, tol=1e-6)
    got = np.ravel(lgss.markov_parameters(fitted, 5))
    want = np.ravel(lgss.markov_parameters(truth, 5))
    assert np.all(np.abs(got - want) <= 0.1 * np.abs(want))


# ------------------------------------------------------------ diagnostics


def test_controllability_identity_case():
    p = LgssParams(A=np.eye(2), B=[[1.0], [0.0]], C=[[1.0, 0.0]], Q=np.eye(2), R=[[1.0]])
    M, r = lgss.controllability_matrix(p)
    assert M.tolist() == [[1.0, 1.0], [0.0, 0.0]] and r == 1


def test_controllability_shift_case():
    p = LgssParams(A=[[0.0, 1.0], [0.0, 0.0]], B=[[0.0], [1.0]], C=[[1.0, 0.0]], Q=np.eye(2), R=[[1.0]])
    M, r = lgss.controllability_matrix(p)
    assert M.tolist() == [[0.0, 1.0], [1.0, 0.0]] and r == 2


def test_controllability_zero_b():
    p = LgssParams(A=np.eye(2), B=np.zeros((2, 1)), C=[[1.0, 0.0]], Q=np.eye(2), R=[[1.0]])
    assert lgss.controllability_matrix(p)[1] == 0


def test_markov_scalar():
    p = LgssParams(A=[[0.5]], B=[[2.0]], C=[[3.0]], Q=[[1.0]], R=[[1.0]])
    assert np.ravel(lgss.markov_parameters(p, 2)).tolist() == [6.0, 3.0, 1.5]


def test_markov_nilpotent():
    p = LgssParams(A=[[0.0]], B=[[2.0]], C=[[3.0]], Q=[[1.0]], R=[[1.0]])
    assert np.ravel(lgss.markov_parameters(p, 3)).tolist() == [6.0, 0.0, 0.0, 0.0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_markov_similarity_invariant(seed):
    rng = rng_for(seed)
    params = lgss.random_params(3, 2, 2, rng)
    S = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    a = np.array(lgss.markov_parameters(params, 6))
    b = np.array(lgss.markov_parameters(params.transformed(S), 6))
    assert np.max(np.abs(a - b)) < 1e-10 * max(1.0, np.abs(a).max())
