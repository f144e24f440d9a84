import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2

from persid import iohmm
from persid.domain import PerturbationSequence, group_dataset
from persid.errors import EmptyDataset, ExhaustiveInfeasible, InvalidSymbol
from persid.iohmm import IoHmmParams
from persid.seeding import rng_for

from oracles import brute_force_iohmm_loglik


def rand(seed, S=2, U=2, O=3):
    return iohmm.random_params(S, U, O, rng_for(seed))


def rand_inputs(rng, U, T):
    return rng.integers(0, U, T)


def test_single_state_emits_iid():
    p = IoHmmParams(trans=[[[1.0]], [[1.0]]], emit=[[0.2, 0.8]], init=[1.0])
    Y = iohmm.simulate_batch(p, np.zeros(2000, dtype=int), 1, 3)[0]
    assert abs(Y.mean() - 0.8) < 0.03


def test_fully_observed_deterministic_chain():
    cycle = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    p = IoHmmParams(trans=[cycle], emit=np.eye(3), init=[1.0, 0.0, 0.0])
    r = iohmm.simulate(p, np.zeros(6, dtype=int), 0)
    assert r.outputs.tolist() == [0, 1, 2, 0, 1, 2, 0]


def test_simulate_deterministic():
    p = rand(1)
    u = np.array([0, 1, 1, 0, 1])
    a, b = iohmm.simulate(p, u, 7), iohmm.simulate(p, u, 7)
    assert np.array_equal(a.outputs, b.outputs) and a.is_discrete


def test_out_of_range_symbol():
    with pytest.raises(InvalidSymbol):
        iohmm.simulate(rand(1), np.array([0, 2]), 0)
    with pytest.raises(InvalidSymbol):
        iohmm.forward_loglik(rand(1), np.array([0]), np.array([0, 3]))


def test_perturbation_sequence_rounds_to_symbols():
    s = PerturbationSequence(np.array([[0.2], [0.9]]))
    assert iohmm.to_symbols(s, 2).tolist() == [0, 1]


def test_rows_must_be_stochastic():
    with pytest.raises(ValueError):
        IoHmmParams(trans=[[[0.5, 0.4], [0.5, 0.5]]], emit=np.eye(2), init=[0.5, 0.5])


def test_loglik_single_step():
    p = rand(2)
    for y0 in range(3):
        want = np.log(np.sum(p.init * p.emit[:, y0]))
        assert iohmm.forward_loglik(p, np.zeros(0, dtype=int), [y0]) == pytest.approx(want, abs=1e-14)


def test_forward_matches_brute_force_small():
    p = rand(3, S=2)
    u = np.array([1, 0, 1])
    for y in itertools.product(range(3), repeat=4):
        assert abs(iohmm.forward_loglik(p, u, y) - brute_force_iohmm_loglik(p, u, y)) < 1e-10


def test_identical_emission_rows_hide_transitions():
    rng = rng_for(4)
    emit = np.tile([0.1, 0.6, 0.3], (3, 1))
    a = IoHmmParams(trans=rng.dirichlet(np.ones(3), (2, 3)), emit=emit, init=np.full(3, 1 / 3))
    b = IoHmmParams(trans=rng.dirichlet(np.ones(3), (2, 3)), emit=emit, init=np.full(3, 1 / 3))
    u, y = np.array([0, 1, 1, 0]), np.array([2, 1, 0, 1, 1])
    assert iohmm.forward_loglik(a, u, y) == pytest.approx(iohmm.forward_loglik(b, u, y), abs=1e-12)


def test_long_sequence_no_underflow():
    p = rand(5, S=3, O=3)
    u = rand_inputs(rng_for(0), 2, 10_000)
    y = iohmm.simulate(p, u, 1).outputs
    ll = iohmm.forward_loglik(p, u, y)
    assert np.isfinite(ll) and ll < -1000


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.permutations([0, 1, 2]))
def test_label_permutation_invariance(seed, perm):
    p = rand(seed, S=3)
    rng = rng_for(seed + 1)
    u = rand_inputs(rng, 2, 12)
    y = iohmm.simulate(p, u, seed).outputs
    assert abs(iohmm.forward_loglik(p, u, y) - iohmm.forward_loglik(p.permuted(perm), u, y)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_exhaustive_law_normalized_and_consistent(seed):
    rng = rng_for(seed)
    S, O, T = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(0, 5))
    p = iohmm.random_params(S, 2, O, rng)
    u = rand_inputs(rng, 2, T)
    law = iohmm.exhaustive_law(p, u)
    assert law.shape == (O ** (T + 1),)
    assert abs(law.sum() - 1.0) < 1e-9
    for y in itertools.product(range(O), repeat=T + 1):
        assert abs(law[iohmm.sequence_index(y, O)] - np.exp(iohmm.forward_loglik(p, u, y))) < 1e-10


def test_exhaustive_single_state_factorizes():
    p = IoHmmParams(trans=[[[1.0]]], emit=[[0.3, 0.7]], init=[1.0])
    law = iohmm.exhaustive_law(p, np.zeros(2, dtype=int))
    want = [a * b * c for a in (0.3, 0.7) for b in (0.3, 0.7) for c in (0.3, 0.7)]
    assert np.allclose(law, want, atol=1e-15)


def test_exhaustive_infeasible():
    with pytest.raises(ExhaustiveInfeasible):
        iohmm.exhaustive_law(rand(1, O=3), np.zeros(20, dtype=int))


def test_json_round_trip():
    p = rand(9, S=3, U=2, O=2)
    back = IoHmmParams.from_dict(json.loads(json.dumps(p.to_dict())))
    assert np.array_equal(back.trans, p.trans) and np.array_equal(back.emit, p.emit)


# ------------------------------------------------------------ Baum-Welch


def _data(p, n, T, seed):
    rng = rng_for(seed)
    recs = []
    for i in range(n):
        u = rand_inputs(rng, p.n_inputs, T)
        recs.append(iohmm.simulate(p, PerturbationSequence(u[:, None].astype(float)), seed * 7919 + i))
    return group_dataset(recs)


def test_bw_empty():
    with pytest.raises(EmptyDataset):
        iohmm.baum_welch_fit(rand(1), group_dataset([]))


@pytest.mark.parametrize("seed", range(10))
def test_bw_trace_nondecreasing(seed):
    truth = rand(100 + seed, S=2, U=2, O=3)
    data = _data(truth, 10, 20, seed)
    _, trace = iohmm.baum_welch_fit(rand(seed, S=3, U=2, O=3), data, max_iter=50, tol=0.0)
    d = np.diff(trace)
    assert np.all(d >= -1e-9 * np.maximum(1.0, np.abs(trace[:-1])))


def test_bw_single_state_gives_empirical_frequencies():
    truth = IoHmmParams(trans=[[[1.0]]], emit=[[0.2, 0.5, 0.3]], init=[1.0])
    data = _data(truth, 5, 30, 3)
    init = IoHmmParams(trans=[[[1.0]]], emit=[[1 / 3, 1 / 3, 1 / 3]], init=[1.0])
    fitted, _ = iohmm.baum_welch_fit(init, data, max_iter=5)
    ys = np.concatenate([r.outputs for r in data.records])
    freq = np.bincount(ys, minlength=3) / len(ys)
    assert np.allclose(fitted.emit[0], freq, atol=1e-12)


def test_bw_fixed_point_at_truth():
    truth = rand(11, S=2, U=2, O=3)
    data = _data(truth, 500, 10, 5)
    _, trace = iohmm.baum_welch_fit(truth, data, max_iter=1, tol=0.0)
    assert len(trace) == 2
    # Starting at the truth, the total gain is bounded by the likelihood-ratio
    # statistic, asymptotically chi2(d)/2 with d = 9 free parameters; it does
    # not shrink with N, so the bound is absolute rather than per record.
    gain = trace[1] - trace[0]
    assert 0.0 <= gain < 0.5 * chi2.ppf(0.999, 9)
    # a distant start gains far more in one step
    _, far = iohmm.baum_welch_fit(rand(12, S=2, U=2, O=3), data, max_iter=1, tol=0.0)
    assert far[1] - far[0] > 10 * gain


def test_bw_output_stochastic():
    data = _data(rand(12), 5, 15, 6)
    fitted, _ = iohmm.baum_welch_fit(rand(13, S=3), data, max_iter=20)
    assert np.allclose(fitted.trans.sum(-1), 1, atol=1e-12)
    assert np.allclose(fitted.emit.sum(-1), 1, atol=1e-12)
    assert fitted.emit.min() >= 1e-8 * (1 - 1e-9)


def test_floored_normalize():
    out = iohmm.floored_normalize(np.array([[0.0, 1.0, 3.0]]))
    assert np.isclose(out.sum(), 1.0) and out.min() >= 1e-8 * (1 - 1e-12)
    assert np.allclose(out, [1e-8, 0.25 * (1 - 1e-8), 0.75 * (1 - 1e-8)])
