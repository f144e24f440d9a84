"""Discriminatory power of perturbation families over finite model sets.

    Delta(Pi) = min over model pairs of (max over policies in Pi of D)

computed with exact trajectory laws wherever both models admit one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from . import discrepancy as disc
from . import systems
from .domain import ExperimentalDomain
from .equivalence import realize_sequences
from .errors import BudgetExceedsPool, VacuousInf
from .policies import PerturbationPolicy
from .seeding import derive_seed


@dataclass
class DiscriminationReport:
    delta_value: float
    witness_pair: tuple
    witness_policy: str
    pairs: list  # [(i, j), ...] lexicographic
    policy_ids: list
    full_matrix: np.ndarray  # (n_pairs, n_policies)

    @property
    def informative(self) -> bool:
        return self.delta_value > 0.0

    def to_dict(self) -> dict:
        return {
            "delta_value": self.delta_value,
            "informative": self.informative,
            "witness_pair": list(self.witness_pair),
            "witness_policy": self.witness_policy,
            "policy_ids": list(self.policy_ids),
            "full_matrix": [
                {"pair": list(pr), "values": row.tolist()}
                for pr, row in zip(self.pairs, self.full_matrix)
            ],
        }


def _discrepancy_matrix(models, policies, domain, seed, mode, reps, normalization):
    seqs = realize_sequences(policies, domain, seed)
    pairs = list(combinations(range(len(models)), 2))
    M = np.empty((len(pairs), len(policies)))
    for a, (i, j) in enumerate(pairs):
        for b, p in enumerate(policies):
            M[a, b] = systems.compare(
                models[i], models[j], seqs[p.id], reps=reps, mode=mode,
                seed=derive_seed(seed, f"discrimination:{i}:{j}:{p.id}"),
                normalization=normalization,
            ).value
    return pairs, M


def discriminatory_power(models: Sequence, policies: Sequence[PerturbationPolicy],
                         domain: ExperimentalDomain, seed: int = 0, *, mode: str = systems.AUTO,
                         reps: int = 100, normalization: str = "per_timestep") -> DiscriminationReport:
    if len(models) < 2:
        raise VacuousInf("discriminatory power needs at least two models")
    if not policies:
        raise ValueError("need at least one policy")
    pairs, M = _discrepancy_matrix(models, policies, domain, seed, mode, reps, normalization)
    best_policy = M.argmax(axis=1)  # first index on ties
    sup_per_pair = M[np.arange(len(pairs)), best_policy]
    worst = int(np.argmin(sup_per_pair))
    return DiscriminationReport(
        delta_value=float(sup_per_pair[worst]),
        witness_pair=pairs[worst],
        witness_policy=policies[int(best_policy[worst])].id,
        pairs=pairs,
        policy_ids=[p.id for p in policies],
        full_matrix=M,
    )


def select_optimal_family(models: Sequence, candidate_families: Sequence[Sequence[PerturbationPolicy]],
                          domain: ExperimentalDomain, seed: int = 0, **kw):
    """Family with the largest discriminatory power; ties go to the lowest index."""
    if not candidate_families:
        raise ValueError("need at least one candidate family")
    reports = [discriminatory_power(models, fam, domain, seed, **kw) for fam in candidate_families]
    best = 0
    for k, r in enumerate(reports):
        if r.delta_value > reports[best].delta_value:
            best = k
    return best, reports[best]


@dataclass
class AdaptiveDesign:
    policy_ids: list
    separated_pairs: list
    unseparated_pairs: list
    inseparable: bool

    def to_dict(self) -> dict:
        return {
            "policy_ids": list(self.policy_ids),
            "separated_pairs": [list(p) for p in self.separated_pairs],
            "unseparated_pairs": [list(p) for p in self.unseparated_pairs],
            "inseparable": self.inseparable,
        }


def greedy_adaptive_design(models: Sequence, policy_pool: Sequence[PerturbationPolicy], k: int,
                           domain: ExperimentalDomain, seed: int = 0, *, tau: float = 0.0,
                           mode: str = systems.AUTO, reps: int = 100,
                           normalization: str = "per_timestep") -> AdaptiveDesign:
    """Pick up to ``k`` policies that separate as many model pairs as possible.

    Each round takes the unused policy maximizing the minimum discrepancy over
    the pairs not yet separated; a pair counts as separated once a chosen
    policy's discrepancy for it exceeds ``tau``. Stops early when every pair
    is separated.
    """
    if k > len(policy_pool):
        raise BudgetExceedsPool(f"budget {k} exceeds pool of {len(policy_pool)}")
    if len(models) < 2:
        raise VacuousInf("design needs at least two models")
    pairs, M = _discrepancy_matrix(models, policy_pool, domain, seed, mode, reps, normalization)
    open_pairs = list(range(len(pairs)))
    unused = list(range(len(policy_pool)))
    chosen = []
    while len(chosen) < k and open_pairs:
        scores = [M[open_pairs, b].min() for b in unused]
        pick = unused[int(np.argmax(scores))]
        chosen.append(pick)
        unused.remove(pick)
        open_pairs = [a for a in open_pairs if not M[a, pick] > tau]
    separated = [pairs[a] for a in range(len(pairs)) if a not in open_pairs]
    # a pair no pool policy can separate makes the model set inseparable
    inseparable = any(not np.any(M[a] > tau) for a in open_pairs)
    return AdaptiveDesign(
        policy_ids=[policy_pool[b].id for b in chosen],
        separated_pairs=separated,
        unseparated_pairs=[pairs[a] for a in open_pairs],
        inseparable=inseparable,
    )
