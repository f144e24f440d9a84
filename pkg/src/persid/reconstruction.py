"""Estimation objective and fit dispatch.

The empirical loss is

    L_N(theta) = (1/N) sum_i D(P_emp_i, P_theta(. | u_i)) + lambda * Omega(theta)

With one trajectory per perturbation the empirical law ``P_emp_i`` is a
single point, so fitting uses the negative log-likelihood as ``D``; the
distributional form is available for data with replicate groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import discrepancy as disc
from . import iohmm, lgss, systems
from .domain import Dataset, ExperimentalDomain, group_dataset
from .errors import EmptyDataset, SingletonGroups
from .policies import PerturbationPolicy, generate_open_loop
from .seeding import derive_seed, rng_for

NLL, DISTRIBUTIONAL = "nll", "distributional"


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.0
    regularizer: str = "none"  # "none" | "ridge"
    loss_mode: str = NLL
    distributional_kind: str = disc.ENERGY

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.regularizer not in ("none", "ridge"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.loss_mode not in (NLL, DISTRIBUTIONAL):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(
            lam=float(d.get("lambda", 0.0)),
            regularizer=d.get("regularizer", "none"),
            loss_mode=d.get("loss_mode", NLL),
            distributional_kind=d.get("distributional_kind", disc.ENERGY),
        )


@dataclass(frozen=True)
class ModelClass:
    """A parametric family: LGSS of a given state dimension, or an IO-HMM."""

    kind: str  # "lgss" | "iohmm"
    state_dim: int
    n_inputs: Optional[int] = None  # iohmm input alphabet
    n_obs: Optional[int] = None  # iohmm output alphabet

    @classmethod
    def from_dict(cls, d: dict) -> "ModelClass":
        return cls(kind=d["kind"], state_dim=int(d["state_dim"]),
                   n_inputs=d.get("n_inputs"), n_obs=d.get("n_obs"))

    def random_init(self, domain: ExperimentalDomain, seed: int):
        rng = rng_for(seed)
        if self.kind == "lgss":
            return lgss.random_params(self.state_dim, domain.input_dim, domain.output_dim, rng)
        if self.kind == "iohmm":
            U = self.n_inputs or int(round(domain.input_bounds[0][1])) + 1
            O = self.n_obs or domain.output_space.size
            return iohmm.random_params(self.state_dim, U, O, rng)
        raise ValueError(f"unknown model class {self.kind!r}")


@dataclass
class FitReport:
    theta_hat: object
    final_loss: float
    trace: list
    iterations: int
    converged: bool
    loglik_trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model": systems.model_kind(self.theta_hat),
            "theta_hat": self.theta_hat.to_dict(),
            "final_loss": self.final_loss,
            "trace": list(self.trace),
            "iterations": self.iterations,
            "converged": self.converged,
        }


def ridge_penalty(theta) -> float:
    """Sum of squared entries of the dynamics / observation matrices."""
    if isinstance(theta, lgss.LgssParams):
        mats = (theta.A, theta.B, theta.C)
    else:
        mats = (theta.trans, theta.emit)
    return float(sum(np.sum(M * M) for M in mats))


def _penalty(theta, config: LossConfig) -> float:
    if config.regularizer == "ridge" and config.lam > 0:
        return config.lam * ridge_penalty(theta)
    return 0.0


def record_logliks(theta, data: Dataset) -> np.ndarray:
    if isinstance(theta, lgss.LgssParams):
        return lgss.dataset_loglik(theta, data)
    return np.array([iohmm.forward_loglik(theta, r.inputs, r.outputs) for r in data.records])


def empirical_loss(theta, data: Dataset, config: LossConfig = LossConfig(), seed: int = 0) -> float:
    if len(data) == 0:
        raise EmptyDataset("empirical loss of an empty dataset")
    if config.loss_mode == NLL:
        ll = record_logliks(theta, data)
        return -math.fsum(ll) / len(data) + _penalty(theta, config)
    groups = [g for g in data.groups if len(g) > 1]
    if not groups:
        raise SingletonGroups("every perturbation has one trajectory; use the nll loss")
    terms = []
    for gi, g in enumerate(groups):
        recs = [data.records[i] for i in g]
        if data.is_discrete:
            emp = disc.one_hot(np.stack([r.outputs for r in recs]), theta.n_obs)
        else:
            emp = np.stack([r.outputs.ravel() for r in recs])
        model = systems.sample(theta, recs[0].inputs, len(g), derive_seed(seed, "loss:group", gi))
        terms.append(disc.sample_discrepancy(emp, model, config.distributional_kind).value)
    return float(np.mean(terms)) + _penalty(theta, config)


def fit(model_class, init, data: Dataset, loss_config: LossConfig = LossConfig(),
        max_iter: int = 200, tol: float = 1e-6, fixed_fields: Sequence[str] = ()) -> FitReport:
    """Minimize the NLL loss by EM (LGSS) or Baum-Welch (IO-HMM).

    With a ridge penalty the LGSS matrices ``A, B, C`` are shrunk by
    ``1 / (1 + lambda)`` after every M-step: one unit-step proximal update,
    exact only at ``lambda = 0``.
    """
    kind = model_class.kind if isinstance(model_class, ModelClass) else str(model_class)
    if loss_config.loss_mode != NLL:
        raise ValueError("only the nll loss can be optimized; distributional loss is for evaluation")
    if len(data) == 0:
        raise EmptyDataset("fit needs at least one record")
    N = len(data)
    iter_loss = []
    record = lambda th, ll: iter_loss.append(-ll / N + _penalty(th, loss_config))
    ridge = loss_config.regularizer == "ridge" and loss_config.lam > 0
    if kind == "lgss":
        opts = lgss.EmOptions(
            max_iter=max_iter, tol=tol, fixed_fields=tuple(fixed_fields),
            shrink=1.0 / (1.0 + loss_config.lam) if ridge else 1.0,
            check_monotone=not ridge,
        )
        theta, lltrace = lgss.em_fit(init, data, opts, on_iter=record)
    elif kind == "iohmm":
        if ridge:
            raise ValueError("ridge shrinkage is not defined for stochastic matrices")
        opts = iohmm.BaumWelchOptions(max_iter=max_iter, tol=tol)
        theta, lltrace = iohmm.baum_welch_fit(init, data, opts, on_iter=record)
    else:
        raise ValueError(f"unknown model class {kind!r}")
    iterations = len(lltrace) - 1
    converged = len(lltrace) > 1 and abs(lltrace[-1] - lltrace[-2]) < tol
    return FitReport(theta_hat=theta, final_loss=iter_loss[-1], trace=iter_loss,
                     iterations=iterations, converged=converged, loglik_trace=list(lltrace))


@dataclass(frozen=True)
class ConsistencyRow:
    n: int
    discrepancy: float
    iterations: int

    def to_dict(self) -> dict:
        return {"N": self.n, "discrepancy": self.discrepancy, "iterations": self.iterations}


def consistency_probe(model_class, truth, policies: Sequence[PerturbationPolicy], Ns: Sequence[int],
                      seed: int, domain: ExperimentalDomain, *, probe_policies=None, init=None,
                      max_iter: int = 200, tol: float = 1e-6,
                      normalization: str = "per_timestep", fixed_fields: Sequence[str] = ()) -> list:
    """Fit on growing datasets and report the law discrepancy to the truth.

    Record ``i`` of a size-``N`` dataset uses policy ``i mod len(policies)``;
    the probe sup runs over ``probe_policies`` (default: ``policies``).
    ``init`` defaults to the truth, isolating estimation error from
    optimizer error.
    """
    probes = list(probe_policies or policies)
    T, m = domain.horizon, domain.input_dim
    seqs = {p.id: generate_open_loop(p, T, m, derive_seed(seed, "sequence:" + p.id), domain)
            for p in list(policies) + probes}
    start = truth if init is None else init
    rows = []
    for N in Ns:
        if N <= 0:
            raise EmptyDataset(f"consistency probe needs N >= 1, got {N}")
        recs = [
            systems.simulate_record(truth, seqs[policies[i % len(policies)].id],
                            derive_seed(seed, f"consistency:{N}", i))
            for i in range(N)
        ]
        rep = fit(model_class, start, group_dataset(recs), max_iter=max_iter, tol=tol,
                  fixed_fields=fixed_fields)
        sup = max(
            systems.compare(truth, rep.theta_hat, seqs[p.id], mode=systems.EXACT,
                            normalization=normalization).value
            for p in probes
        )
        rows.append(ConsistencyRow(int(N), float(sup), int(rep.iterations)))
    return rows
