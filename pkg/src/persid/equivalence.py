"""Functional-equivalence validation under held-out perturbations."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import discrepancy as disc
from . import systems
from .domain import ExperimentalDomain, PerturbationSequence, group_dataset
from .errors import (
    CalibrationUnnecessary,
    InsufficientReplicates,
    SplitViolation,
)
from .policies import PerturbationPolicy, generate_open_loop
from .reconstruction import LossConfig, ModelClass, fit
from .seeding import derive_seed

MIN_SAMPLED_REPS = 20


@dataclass
class EquivalenceReport:
    per_policy: list  # (policy_id, value, kind)
    sup_value: float
    delta: float
    passed: bool
    replicates_per_policy: int
    mode: str
    seeds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_policy": [{"policy_id": p, "value": v, "kind": k} for p, v, k in self.per_policy],
            "sup_value": self.sup_value,
            "delta": self.delta,
            "pass": self.passed,
            "replicates_per_policy": self.replicates_per_policy,
            "mode": self.mode,
            "seeds": dict(self.seeds),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy_id", "value", "kind", "delta", "pass"])
        for pid, v, k in self.per_policy:
            w.writerow([pid, format(v, ".17g"), k, format(self.delta, ".17g"), int(v <= self.delta)])
        return buf.getvalue()


def realize_sequences(policies: Sequence[PerturbationPolicy], domain: ExperimentalDomain,
                      sequence_seed: int) -> dict:
    """One realized input sequence per policy, from a seed derived per policy id."""
    return {
        p.id: generate_open_loop(p, domain.horizon, domain.input_dim,
                                 derive_seed(sequence_seed, "sequence:" + p.id), domain)
        for p in policies
    }


def _check_split(test_policies, train_policy_ids):
    test_ids = [p.id for p in test_policies]
    shared = set(test_ids) & set(train_policy_ids or ())
    if shared:
        raise SplitViolation(f"policies used for both fitting and validation: {sorted(shared)}")


def equivalence_test(truth, model, test_policies: Sequence[PerturbationPolicy],
                     domain: ExperimentalDomain, delta: float, reps: int = 100, seed: int = 0, *,
                     mode: str = systems.AUTO, train_policy_ids: Sequence[str] = (),
                     sequence_seed: Optional[int] = None, normalization: str = "per_timestep",
                     sample_kind: str = disc.ENERGY) -> EquivalenceReport:
    """Sup over held-out policies of the truth-vs-model trajectory discrepancy.

    The model passes when that sup does not exceed ``delta``.
    """
    _check_split(test_policies, train_policy_ids)
    if not delta > 0:
        raise ValueError("delta must be > 0")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if not test_policies:
        raise ValueError("need at least one test policy")
    sequence_seed = seed if sequence_seed is None else sequence_seed
    seqs = realize_sequences(test_policies, domain, sequence_seed)
    rows, used_modes = [], set()
    for p in test_policies:
        m = systems.resolve_mode(truth, model, seqs[p.id], mode)
        if m == systems.SAMPLED and reps < MIN_SAMPLED_REPS:
            raise InsufficientReplicates(f"sampled comparison needs reps >= {MIN_SAMPLED_REPS}")
        used_modes.add(m)
        r = systems.compare(truth, model, seqs[p.id], reps=reps,
                            seed=derive_seed(seed, "equivalence:" + p.id), mode=m,
                            normalization=normalization, sample_kind=sample_kind)
        rows.append((p.id, r.value, r.kind))
    sup = max(v for _, v, _ in rows)
    return EquivalenceReport(
        per_policy=rows, sup_value=sup, delta=float(delta), passed=bool(sup <= delta),
        replicates_per_policy=int(reps), mode="+".join(sorted(used_modes)),
        seeds={"seed": int(seed), "sequence_seed": int(sequence_seed)},
    )


def calibrate_delta(truth, test_policies: Sequence[PerturbationPolicy], domain: ExperimentalDomain,
                    reps: int = 100, n_calibration: int = 200, quantile: float = 0.95, seed: int = 0, *,
                    mode: str = systems.SAMPLED, sequence_seed: Optional[int] = None,
                    sample_kind: str = disc.ENERGY) -> float:
    """Tolerance from the truth-vs-truth null distribution of the sup discrepancy.

    Each of ``n_calibration`` repetitions draws two independent sample sets
    from the truth for every test policy (same sequences as the test) and
    takes the sup; ``delta`` is the requested empirical quantile.
    """
    if mode != systems.SAMPLED:
        raise CalibrationUnnecessary("exact-law comparisons have no sampling noise to calibrate")
    if not 0.5 < quantile < 1.0:
        raise ValueError("quantile must lie in (0.5, 1)")
    if reps < MIN_SAMPLED_REPS:
        raise InsufficientReplicates(f"sampled comparison needs reps >= {MIN_SAMPLED_REPS}")
    sequence_seed = seed if sequence_seed is None else sequence_seed
    seqs = realize_sequences(test_policies, domain, sequence_seed)
    sups = np.empty(n_calibration)
    for r in range(n_calibration):
        sups[r] = max(
            systems.compare(truth, truth, seqs[p.id], reps=reps,
                            seed=derive_seed(seed, "calibration:" + p.id, r),
                            mode=systems.SAMPLED, sample_kind=sample_kind).value
            for p in test_policies
        )
    return float(np.quantile(sups, quantile))


@dataclass
class IntrinsicErrorResult:
    epsilon_star_estimate: float  # an upper bound: best sup over the starts tried
    best_theta: object
    per_start: list
    fit_reports: list
    best_start: int

    def to_dict(self) -> dict:
        return {
            "epsilon_star_estimate": self.epsilon_star_estimate,
            "best_start": self.best_start,
            "per_start_sup": list(self.per_start),
        }


def collect_open_loop(truth, policies, domain: ExperimentalDomain, reps_per_policy: int, seed: int):
    recs = []
    for p in policies:
        seq = generate_open_loop(p, domain.horizon, domain.input_dim,
                                 derive_seed(seed, "policy:" + p.id), domain)
        for r in range(reps_per_policy):
            recs.append(systems.simulate_record(truth, seq, derive_seed(seed, f"truth:{p.id}", r)))
    return group_dataset(recs, domain)


def intrinsic_error(model_class: ModelClass, truth, test_policies: Sequence[PerturbationPolicy],
                    domain: ExperimentalDomain, fit_budget: int, seed: int, *,
                    train_policies: Sequence[PerturbationPolicy] = (), data=None,
                    reps_per_policy: int = 50, inits: Sequence = None, mode: str = systems.AUTO,
                    reps: int = 100, sequence_seed: Optional[int] = None,
                    normalization: str = "per_timestep", sample_kind: str = disc.ENERGY,
                    max_iter: int = 200, tol: float = 1e-6, fixed_fields: Sequence[str] = (),
                    score_seed: Optional[int] = None, loss_config: Optional[LossConfig] = None):
    """Multi-start estimate of the best achievable held-out sup discrepancy.

    Each start fits by maximum likelihood on the training data, then is
    scored on ``test_policies``; the minimum over starts is returned. Start
    ``i`` and its scoring seeds do not depend on ``fit_budget``, so a larger
    budget can only lower the estimate.
    """
    if not test_policies:
        raise ValueError("need at least one test policy")
    _check_split(test_policies, [p.id for p in train_policies])
    if data is None:
        if not train_policies:
            raise ValueError("need training policies or a dataset")
        data = collect_open_loop(truth, train_policies, domain, reps_per_policy,
                                 derive_seed(seed, "intrinsic:data"))
    sequence_seed = seed if sequence_seed is None else sequence_seed
    score_seed = seed if score_seed is None else score_seed
    seqs = realize_sequences(test_policies, domain, sequence_seed)
    n_starts = len(inits) if inits is not None else fit_budget
    sups, reports = [], []
    for i in range(n_starts):
        init = inits[i] if inits is not None else model_class.random_init(domain, derive_seed(seed, "init", i))
        rep = fit(model_class, init, data, loss_config or LossConfig(), max_iter=max_iter, tol=tol,
                  fixed_fields=fixed_fields)
        vals = []
        for p in test_policies:
            m = systems.resolve_mode(truth, rep.theta_hat, seqs[p.id], mode)
            if m == systems.SAMPLED and reps < MIN_SAMPLED_REPS:
                raise InsufficientReplicates(f"sampled comparison needs reps >= {MIN_SAMPLED_REPS}")
            vals.append(systems.compare(truth, rep.theta_hat, seqs[p.id], reps=reps,
                                        seed=derive_seed(score_seed, "equivalence:" + p.id), mode=m,
                                        normalization=normalization, sample_kind=sample_kind).value)
        sups.append(max(vals))
        reports.append(rep)
    best = int(np.argmin(sups))
    return IntrinsicErrorResult(sups[best], reports[best].theta_hat, sups, reports, best)
