"""Perturbation policy families.

Open-loop kinds are pure functions of ``(policy, T, m, seed)``; the
``adaptive_feedback`` kind closes the loop through :func:`adaptive_step`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .domain import ExperimentalDomain, PerturbationSequence
from .errors import ConfigError, DimensionMismatch, InvalidHorizon, RequiresFeedback
from .seeding import rng_for

OPEN_LOOP_KINDS = ("constant", "step", "sinusoid", "chirp", "prbs", "uniform_random")
KINDS = OPEN_LOOP_KINDS + ("adaptive_feedback",)


@dataclass(frozen=True, eq=False)
class PerturbationPolicy:
    id: str
    kind: str
    amplitude: float = 1.0
    step_time: int = 0
    frequency: float = 0.1
    f0: float = 0.01
    f1: float = 0.25
    switch_prob: float = 0.5
    gain: Optional[np.ndarray] = None
    setpoint: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.gain is not None:
            object.__setattr__(self, "gain", np.atleast_2d(np.asarray(self.gain, dtype=float)))
        if self.setpoint is not None:
            object.__setattr__(self, "setpoint", np.atleast_1d(np.asarray(self.setpoint, dtype=float)))

    @property
    def is_adaptive(self) -> bool:
        return self.kind == "adaptive_feedback"

    def to_dict(self) -> dict:
        d = {"id": self.id, "kind": self.kind, "amplitude": self.amplitude}
        if self.kind == "step":
            d["step_time"] = self.step_time
        elif self.kind == "sinusoid":
            d["frequency"] = self.frequency
        elif self.kind == "chirp":
            d.update(f0=self.f0, f1=self.f1)
        elif self.kind == "prbs":
            d["switch_prob"] = self.switch_prob
        elif self.kind == "adaptive_feedback":
            d["gain"] = self.gain.tolist()
            d["setpoint"] = self.setpoint.tolist()
        return d


def policy_from_dict(d: dict) -> PerturbationPolicy:
    """Build a policy from its scenario-JSON form; unknown kinds are rejected."""
    if "id" not in d or "kind" not in d:
        raise ConfigError(f"policy needs 'id' and 'kind': {d!r}")
    kw = {"id": str(d["id"]), "kind": d["kind"]}
    for key in ("amplitude", "frequency", "f0", "f1", "switch_prob"):
        if key in d:
            kw[key] = float(d[key])
    if "step_time" in d:
        kw["step_time"] = int(d["step_time"])
    if "gain" in d:
        kw["gain"] = d["gain"]
    if "setpoint" in d:
        kw["setpoint"] = d["setpoint"]
    if kw["kind"] == "adaptive_feedback" and ("gain" not in kw or "setpoint" not in kw):
        raise ConfigError(f"adaptive policy {kw['id']!r} needs 'gain' and 'setpoint'")
    return PerturbationPolicy(**kw)


def validate_policy(policy: PerturbationPolicy, domain: ExperimentalDomain = None) -> list[str]:
    problems = []
    if policy.kind == "prbs" and not 0.0 < policy.switch_prob < 1.0:
        problems.append("prbs switch_prob must lie in (0, 1)")
    if policy.kind == "sinusoid" and policy.frequency <= 0:
        problems.append("sinusoid frequency must be > 0")
    if policy.kind == "chirp" and (policy.f0 <= 0 or policy.f1 <= 0):
        problems.append("chirp frequencies must be > 0")
    if domain is not None and policy.kind != "uniform_random":
        a = abs(policy.amplitude)
        lo, hi = domain.lower, domain.upper
        reach_lo = 0.0 if policy.kind in ("constant", "step") and policy.amplitude >= 0 else -a
        reach_hi = 0.0 if policy.kind in ("constant", "step") and policy.amplitude < 0 else a
        if policy.kind in OPEN_LOOP_KINDS and (np.any(reach_lo < lo) or np.any(reach_hi > hi)):
            problems.append(f"amplitude {policy.amplitude} leaves the input box")
    return problems


def generate_open_loop(
    policy: PerturbationPolicy,
    horizon: int,
    m: int,
    seed: int,
    domain: ExperimentalDomain = None,
) -> PerturbationSequence:
    """Realize an open-loop policy as a ``horizon x m`` input matrix.

    When ``domain`` is supplied values are clamped to its box; for
    ``uniform_random`` the box also defines the sampling interval (otherwise
    ``[-amplitude, amplitude]``).
    """
    if policy.is_adaptive:
        raise RequiresFeedback(f"policy {policy.id!r} is adaptive and needs output feedback")
    if horizon <= 0:
        raise InvalidHorizon(f"horizon must be >= 1, got {horizon}")
    T, a = int(horizon), float(policy.amplitude)
    t = np.arange(T, dtype=float)[:, None]
    ones = np.ones((T, m))
    kind = policy.kind
    if kind == "constant":
        u = a * ones
    elif kind == "step":
        u = np.where(t < policy.step_time, 0.0, a) * ones
    elif kind == "sinusoid":
        u = a * np.sin(2 * np.pi * policy.frequency * t) * ones
    elif kind == "chirp":
        f_inst = policy.f0 + (policy.f1 - policy.f0) * t / (2 * T)
        u = a * np.sin(2 * np.pi * f_inst * t) * ones
    elif kind == "prbs":
        rng = rng_for(seed)
        start = np.where(rng.random(m) < 0.5, -1.0, 1.0)
        flips = rng.random((T - 1, m)) < policy.switch_prob
        # sign at t is the start sign times (-1)^(flips so far)
        parity = np.concatenate([np.zeros((1, m)), np.cumsum(flips, axis=0) % 2])
        u = a * start * (1.0 - 2.0 * parity)
    else:  # uniform_random
        rng = rng_for(seed)
        if domain is not None:
            lo, hi = domain.lower, domain.upper
        else:
            lo, hi = -abs(a) * np.ones(m), abs(a) * np.ones(m)
        u = lo + (hi - lo) * rng.random((T, m))
    if domain is not None:
        u = domain.clamp(u)
    return PerturbationSequence(u, policy_id=policy.id, seed=int(seed))


def adaptive_step(
    policy: PerturbationPolicy,
    t: int,
    history_outputs,
    domain: ExperimentalDomain = None,
) -> np.ndarray:
    """``u_t = clamp(K (y* - y_t))`` from the latest observed output row."""
    if not policy.is_adaptive:
        raise ValueError(f"policy {policy.id!r} is open-loop")
    hist = np.asarray(history_outputs, dtype=float)
    if hist.ndim == 1:
        hist = hist[:, None]
    if hist.shape[0] < 1:
        raise ValueError("history must contain at least y_0")
    y_t = hist[min(t, hist.shape[0] - 1)]
    K, ystar = policy.gain, policy.setpoint
    if K.shape[1] != y_t.shape[0] or ystar.shape[0] != y_t.shape[0]:
        raise DimensionMismatch(
            f"gain is {K.shape[0]}x{K.shape[1]}, setpoint {ystar.shape[0]}, output {y_t.shape[0]}"
        )
    u = K @ (ystar - y_t)
    if domain is not None:
        u = domain.clamp(u)
    return u


def zero_input(policy_id: str = "zero") -> PerturbationPolicy:
    return PerturbationPolicy(id=policy_id, kind="constant", amplitude=0.0)
