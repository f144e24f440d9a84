"""Uniform access to the two model classes and to opaque sample sources.

A *system* is an :class:`~persid.lgss.LgssParams`, an
:class:`~persid.iohmm.IoHmmParams`, or a callable
``source(sequence, reps, seed) -> (reps, d) array`` that can only be sampled.
"""

from __future__ import annotations

from typing import Callable, Union

import numpy as np

from . import discrepancy as disc
from . import iohmm, lgss
from .domain import PerturbationSequence
from .errors import ExhaustiveInfeasible
from .seeding import derive_seed

System = Union[lgss.LgssParams, iohmm.IoHmmParams, Callable]

EXACT, SAMPLED, AUTO = "exact", "sampled", "auto"


def model_kind(system) -> str:
    if isinstance(system, lgss.LgssParams):
        return "lgss"
    if isinstance(system, iohmm.IoHmmParams):
        return "iohmm"
    if callable(system):
        return "source"
    raise TypeError(f"not a system: {type(system).__name__}")


def exact_law(system, seq: PerturbationSequence):
    """Exact trajectory law, or ``None`` when the system has none we can compute."""
    kind = model_kind(system)
    if kind == "lgss":
        return lgss.trajectory_law(system, seq)
    if kind == "iohmm":
        try:
            return iohmm.exhaustive_law(system, seq)
        except ExhaustiveInfeasible:
            return None
    return None


def sample(system, seq: PerturbationSequence, reps: int, seed: int) -> np.ndarray:
    """``reps`` stacked trajectories as an ``(reps, d)`` float array."""
    kind = model_kind(system)
    if kind == "lgss":
        return lgss.simulate_batch(system, seq, reps, seed).reshape(reps, -1)
    if kind == "iohmm":
        Y = iohmm.simulate_batch(system, seq, reps, seed)
        return disc.one_hot(Y, system.n_obs)
    out = np.asarray(system(seq, reps, seed), dtype=float)
    return out.reshape(reps, -1)


def simulate_record(system, seq: PerturbationSequence, seed: int, truth_tag: str = None):
    kind = model_kind(system)
    if kind == "lgss":
        return lgss.simulate(system, seq, seed, truth_tag)
    if kind == "iohmm":
        return iohmm.simulate(system, seq, seed, truth_tag)
    raise TypeError("sample sources cannot produce individual records")


def resolve_mode(a, b, seq: PerturbationSequence, mode: str = AUTO) -> str:
    if mode not in (EXACT, SAMPLED, AUTO):
        raise ValueError(f"unknown comparison mode {mode!r}")
    if mode != AUTO:
        return mode
    ka, kb = model_kind(a), model_kind(b)
    if ka == kb == "lgss":
        return EXACT
    if ka == kb == "iohmm" and a.n_obs ** (seq.horizon + 1) <= iohmm.EXHAUSTIVE_LIMIT:
        return EXACT
    return SAMPLED


def compare(a, b, seq: PerturbationSequence, *, reps: int = 100, seed: int = 0,
            mode: str = AUTO, normalization: str = "per_timestep",
            sample_kind: str = disc.ENERGY) -> disc.DiscrepancyResult:
    """Discrepancy between the trajectory laws of ``a`` and ``b`` under ``seq``.

    Exact mode uses Gaussian W2 (LGSS) or exhaustive TV (IO-HMM); sampled
    mode draws ``reps`` trajectories per side from seeds derived from
    ``seed`` and applies ``sample_kind``.
    """
    mode = resolve_mode(a, b, seq, mode)
    if mode == EXACT:
        la, lb = exact_law(a, seq), exact_law(b, seq)
        if la is None or lb is None:
            raise ValueError("exact comparison needs two systems with computable laws")
        if isinstance(la, lgss.GaussianTrajectoryLaw) and isinstance(lb, lgss.GaussianTrajectoryLaw):
            return disc.gaussian_w2(la, lb, normalization=normalization)
        if isinstance(la, np.ndarray) and isinstance(lb, np.ndarray):
            return disc.tv_exhaustive(la, lb)
        raise ValueError("exact comparison across model classes is undefined")
    xs = sample(a, seq, reps, derive_seed(seed, "side:a"))
    ys = sample(b, seq, reps, derive_seed(seed, "side:b"))
    return disc.sample_discrepancy(xs, ys, sample_kind)
