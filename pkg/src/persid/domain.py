"""Core data model: experimental domain, perturbation sequences, trajectories,
datasets and train/test policy splits.

Time indexing: a record over horizon ``T`` holds ``T`` input rows
(``u_0 .. u_{T-1}``) and ``T + 1`` output rows (``y_0 .. y_T``); ``u_t`` drives
the transition into ``x_{t+1}``. All matrices are time-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import HeterogeneousDataset, OutOfBounds, SplitInfeasible
from .seeding import rng_for

CONTINUOUS = "continuous"
DISCRETE = "discrete"


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class OutputSpace:
    """Output space descriptor: ``continuous`` reals or a ``discrete`` alphabet."""

    kind: str = CONTINUOUS
    size: Optional[int] = None

    @property
    def is_discrete(self) -> bool:
        return self.kind == DISCRETE


@dataclass(frozen=True)
class ExperimentalDomain:
    input_dim: int
    output_dim: int
    input_bounds: tuple
    horizon: int
    policy_family_ids: tuple
    output_space: OutputSpace = OutputSpace()

    def __post_init__(self):
        object.__setattr__(
            self, "input_bounds", tuple((float(lo), float(hi)) for lo, hi in self.input_bounds)
        )
        object.__setattr__(self, "policy_family_ids", tuple(self.policy_family_ids))

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.input_bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for b in self.input_bounds])

    def clamp(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.lower, self.upper)

    def contains(self, values) -> bool:
        v = np.asarray(values, dtype=float)
        return bool(np.all(v >= self.lower) and np.all(v <= self.upper))


def validate_domain(domain: ExperimentalDomain) -> list[str]:
    """Return every invariant violation of ``domain``; an empty list means valid."""
    problems = []
    if domain.input_dim < 1:
        problems.append(f"input_dim must be >= 1, got {domain.input_dim}")
    if domain.output_dim < 1:
        problems.append(f"output_dim must be >= 1, got {domain.output_dim}")
    if domain.horizon < 1:
        problems.append(f"horizon must be >= 1, got {domain.horizon}")
    if len(domain.input_bounds) != domain.input_dim:
        problems.append(
            f"{len(domain.input_bounds)} input bounds for input_dim {domain.input_dim}"
        )
    for j, (lo, hi) in enumerate(domain.input_bounds):
        if lo > hi:
            problems.append(f"lo > hi at dim {j}")
    ids = domain.policy_family_ids
    if not ids:
        problems.append("Π_𝒟 empty")
    elif len(set(ids)) != len(ids):
        problems.append("duplicate policy ids in Π_𝒟")
    os_ = domain.output_space
    if os_.kind not in (CONTINUOUS, DISCRETE):
        problems.append(f"unknown output space kind {os_.kind!r}")
    elif os_.is_discrete and (os_.size is None or os_.size < 1):
        problems.append("discrete output space needs a positive alphabet size")
    return problems


@dataclass(frozen=True, eq=False)
class PerturbationSequence:
    values: np.ndarray
    policy_id: str = ""
    seed: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        object.__setattr__(self, "values", _frozen(v))

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def input_dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    inputs: PerturbationSequence
    outputs: np.ndarray
    truth_tag: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        y = np.asarray(self.outputs)
        if y.ndim == 1:
            y = _frozen(y, dtype=np.int64)
        else:
            y = _frozen(y)
        if y.shape[0] != self.inputs.horizon + 1:
            raise ValueError(
                f"outputs must have T+1={self.inputs.horizon + 1} rows, got {y.shape[0]}"
            )
        object.__setattr__(self, "outputs", y)

    @property
    def is_discrete(self) -> bool:
        return self.outputs.ndim == 1

    @property
    def output_dim(self) -> int:
        return 1 if self.is_discrete else self.outputs.shape[1]

    @property
    def horizon(self) -> int:
        return self.inputs.horizon


@dataclass(frozen=True, eq=False)
class Dataset:
    records: tuple = ()
    groups: tuple = ()  # tuple of index tuples, in first-appearance order

    def __len__(self) -> int:
        return len(self.records)

    @property
    def is_discrete(self) -> bool:
        return bool(self.records) and self.records[0].is_discrete

    @property
    def input_dim(self) -> int:
        return self.records[0].inputs.input_dim

    @property
    def output_dim(self) -> int:
        return self.records[0].output_dim

    def policy_ids(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.inputs.policy_id not in seen:
                seen.append(r.inputs.policy_id)
        return seen

    def batches(self):
        """Yield ``(indices, U, Y)`` with records stacked per distinct horizon.

        ``U`` has shape ``(k, T, m)`` and ``Y`` ``(k, T+1, p)`` (or ``(k, T+1)``
        of symbols for discrete data). Horizons appear in first-seen order.
        """
        by_T: dict[int, list[int]] = {}
        for i, r in enumerate(self.records):
            by_T.setdefault(r.horizon, []).append(i)
        for T, idx in by_T.items():
            U = np.stack([self.records[i].inputs.values for i in idx])
            Y = np.stack([self.records[i].outputs for i in idx])
            yield idx, U, Y

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return group_dataset([self.records[i] for i in indices])


def group_dataset(records: Sequence[TrajectoryRecord], domain: ExperimentalDomain = None) -> Dataset:
    """Group records whose input matrices are bit-identical.

    When ``domain`` is given every input sequence is checked against its box.
    """
    records = tuple(records)
    if not records:
        return Dataset()
    m, p = records[0].inputs.input_dim, records[0].output_dim
    kind = records[0].is_discrete
    groups: dict[tuple, list[int]] = {}
    for i, r in enumerate(records):
        if (r.inputs.input_dim, r.output_dim, r.is_discrete) != (m, p, kind):
            raise HeterogeneousDataset(
                f"record {i} has (m={r.inputs.input_dim}, p={r.output_dim}); expected (m={m}, p={p})"
            )
        if domain is not None and not domain.contains(r.inputs.values):
            raise OutOfBounds(f"record {i} ({r.inputs.policy_id}) leaves the input box")
        key = (r.inputs.values.shape, r.inputs.values.tobytes())
        groups.setdefault(key, []).append(i)
    return Dataset(records=records, groups=tuple(tuple(g) for g in groups.values()))


@dataclass(frozen=True)
class PerturbationSplit:
    train_policy_ids: tuple
    test_policy_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "train_policy_ids", tuple(self.train_policy_ids))
        object.__setattr__(self, "test_policy_ids", tuple(self.test_policy_ids))

    def overlap(self) -> set:
        return set(self.train_policy_ids) & set(self.test_policy_ids)


def make_split(domain: ExperimentalDomain, test_fraction: float, seed: int) -> PerturbationSplit:
    ids = list(domain.policy_family_ids)
    if len(ids) < 2:
        raise SplitInfeasible(f"need at least 2 policy families, got {len(ids)}")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = max(1, int(round(test_fraction * len(ids))))
    n_test = min(n_test, len(ids) - 1)
    order = rng_for(seed).permutation(len(ids))
    test_idx = set(order[:n_test].tolist())
    # keep declaration order within each side
    test = [p for i, p in enumerate(ids) if i in test_idx]
    train = [p for i, p in enumerate(ids) if i not in test_idx]
    return PerturbationSplit(train, test)
