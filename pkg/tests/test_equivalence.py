import csv
import io

import numpy as np
import pytest

from persid import equivalence as eqv
from persid import lgss, systems
from persid.errors import CalibrationUnnecessary, InsufficientReplicates, SplitViolation
from persid.lgss import LgssParams
from persid.policies import PerturbationPolicy, zero_input
from persid.reconstruction import ModelClass
from persid.seeding import rng_for

from conftest import box_domain

TRUTH = LgssParams(A=np.array([[0.8, 0.2], [-0.2, 0.7]]), B=np.array([[1.0], [0.5]]),
                   C=np.array([[1.0, 0.0]]), Q=0.1 * np.eye(2), R=np.array([[0.1]]))
PRBS = PerturbationPolicy("prbs", "prbs", amplitude=1.0, switch_prob=0.3)
SINE = PerturbationPolicy("sine", "sinusoid", amplitude=1.0, frequency=0.05)
ZERO = zero_input()
DOM = box_domain(ids=["prbs", "sine", "zero", "chirp"], T=30)


def test_self_equivalence_exact():
    r = eqv.equivalence_test(TRUTH, TRUTH, [PRBS, SINE], DOM, delta=1e-9, mode=systems.EXACT)
    assert r.sup_value == 0.0 and r.passed
    assert r.sup_value == max(v for _, v, _ in r.per_policy)


@pytest.mark.parametrize("seed", range(20))
def test_self_equivalence_random_instances(seed):
    rng = rng_for(seed)
    th = lgss.random_params(int(rng.integers(1, 4)), 1, int(rng.integers(1, 3)), rng)
    d = box_domain(ids=["prbs", "sine"], p=th.p, T=15)
    r = eqv.equivalence_test(th, th, [PRBS, SINE], d, delta=1e-9, seed=seed)
    assert r.sup_value <= 1e-10 and r.mode == "exact"


def test_zero_input_false_pass():
    doubled = TRUTH.replace(B=2 * TRUTH.B)
    r = eqv.equivalence_test(TRUTH, doubled, [ZERO], DOM, delta=1e-9, mode=systems.EXACT)
    assert r.sup_value <= 1e-10 and r.passed


def test_prbs_exposes_doubled_b():
    doubled = TRUTH.replace(B=2 * TRUTH.B)
    delta = eqv.calibrate_delta(TRUTH, [PRBS], DOM, reps=60, n_calibration=50, seed=1, sequence_seed=2)
    r = eqv.equivalence_test(TRUTH, doubled, [PRBS], DOM, delta=delta, reps=60, seed=3,
                             mode=systems.SAMPLED, sequence_seed=2)
    assert r.sup_value > delta and not r.passed
    exact = eqv.equivalence_test(TRUTH, doubled, [PRBS], DOM, delta=1.0, mode=systems.EXACT)
    assert exact.sup_value > 0.1


def test_split_violation():
    with pytest.raises(SplitViolation):
        eqv.equivalence_test(TRUTH, TRUTH, [PRBS], DOM, delta=0.1, train_policy_ids=["prbs"])


def test_insufficient_replicates():
    with pytest.raises(InsufficientReplicates):
        eqv.equivalence_test(TRUTH, TRUTH, [PRBS], DOM, delta=0.1, reps=10, mode=systems.SAMPLED)


def test_delta_must_be_positive():
    with pytest.raises(ValueError):
        eqv.equivalence_test(TRUTH, TRUTH, [PRBS], DOM, delta=0.0)


def test_adding_policy_never_lowers_sup():
    other = TRUTH.replace(A=TRUTH.A * 0.9)
    one = eqv.equivalence_test(TRUTH, other, [PRBS], DOM, delta=1.0)
    two = eqv.equivalence_test(TRUTH, other, [PRBS, SINE], DOM, delta=1.0)
    assert two.sup_value >= one.sup_value


def test_sampled_mode_reproducible():
    other = TRUTH.replace(A=TRUTH.A * 0.9)
    kw = dict(delta=1.0, reps=30, seed=5, mode=systems.SAMPLED)
    a = eqv.equivalence_test(TRUTH, other, [PRBS, SINE], DOM, **kw)
    b = eqv.equivalence_test(TRUTH, other, [PRBS, SINE], DOM, **kw)
    assert a.per_policy == b.per_policy


def test_report_serialization():
    r = eqv.equivalence_test(TRUTH, TRUTH.replace(A=TRUTH.A * 0.9), [PRBS, SINE], DOM, delta=0.01)
    d = r.to_dict()
    assert d["pass"] == (d["sup_value"] <= d["delta"])
    rows = list(csv.DictReader(io.StringIO(r.to_csv())))
    assert [row["policy_id"] for row in rows] == ["prbs", "sine"]
    assert float(rows[0]["value"]) == r.per_policy[0][1]


# ------------------------------------------------------------ calibration


def test_calibration_exact_mode_refused():
    with pytest.raises(CalibrationUnnecessary):
        eqv.calibrate_delta(TRUTH, [PRBS], DOM, mode=systems.EXACT)


def test_calibration_deterministic():
    a = eqv.calibrate_delta(TRUTH, [PRBS], DOM, reps=30, n_calibration=20, seed=4)
    b = eqv.calibrate_delta(TRUTH, [PRBS], DOM, reps=30, n_calibration=20, seed=4)
    assert a == b > 0


def test_calibration_noiseless_truth_is_zero():
    det = LgssParams(A=[[0.5]], B=[[1.0]], C=[[1.0]], Q=[[0.0]], R=[[0.0]], mu0=[0.0], Sigma0=[[0.0]])
    assert eqv.calibrate_delta(det, [PRBS], DOM, reps=30, n_calibration=20) < 1e-8


@pytest.mark.slow
def test_more_replicates_do_not_widen_delta():
    lo, hi = [], []
    for s in range(10):
        lo.append(eqv.calibrate_delta(TRUTH, [PRBS, SINE], DOM, reps=40, n_calibration=60, seed=s))
        hi.append(eqv.calibrate_delta(TRUTH, [PRBS, SINE], DOM, reps=80, n_calibration=60, seed=s))
    assert np.median(hi) <= np.median(lo)


# ------------------------------------------------------------- intrinsic


def test_intrinsic_singleton_class_is_zero():
    everything = ("A", "B", "C", "Q", "R", "mu0", "Sigma0")
    res = eqv.intrinsic_error(ModelClass("lgss", 2), TRUTH, [SINE], DOM, 1, 0,
                              train_policies=[PRBS], reps_per_policy=3, inits=[TRUTH],
                              fixed_fields=everything, mode=systems.EXACT)
    assert res.epsilon_star_estimate == 0.0


def test_intrinsic_budget_monotone():
    kw = dict(train_policies=[PRBS], reps_per_policy=10, max_iter=15)
    ests = [eqv.intrinsic_error(ModelClass("lgss", 2), TRUTH, [SINE], DOM, k, 3, **kw).epsilon_star_estimate
            for k in (1, 2, 4)]
    assert ests[0] >= ests[1] >= ests[2]


def test_intrinsic_rejects_overlap():
    with pytest.raises(SplitViolation):
        eqv.intrinsic_error(ModelClass("lgss", 2), TRUTH, [SINE], DOM, 1, 0, train_policies=[SINE])


def test_collect_open_loop_groups_replicates():
    data = eqv.collect_open_loop(TRUTH, [PRBS, SINE], DOM, 4, 1)
    assert len(data) == 8 and [len(g) for g in data.groups] == [4, 4]
