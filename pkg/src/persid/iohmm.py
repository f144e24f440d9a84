"""Input-conditioned discrete hidden Markov models.

Hidden state ``x_t`` in ``{0..S-1}``, input symbol ``u_t`` in ``{0..U-1}``,
output symbol ``y_t`` in ``{0..O-1}``:

    x_0 ~ init,  x_{t+1} ~ trans[u_t][x_t, :],  y_t ~ emit[x_t, :]

Only transitions depend on the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .domain import Dataset, PerturbationSequence, TrajectoryRecord
from .errors import (
    DimensionMismatch,
    EmptyDataset,
    ExhaustiveInfeasible,
    InvalidSymbol,
    MonotonicityViolation,
)
from .seeding import rng_for

PROB_FLOOR = 1e-8
EXHAUSTIVE_LIMIT = 10**6


@dataclass(frozen=True, eq=False)
class IoHmmParams:
    trans: np.ndarray  # (U, S, S), row-stochastic per input symbol
    emit: np.ndarray  # (S, O)
    init: np.ndarray  # (S,)

    def __post_init__(self):
        trans = np.asarray(self.trans, dtype=float)
        if trans.ndim == 2:
            trans = trans[None]
        emit = np.atleast_2d(np.asarray(self.emit, dtype=float))
        init = np.atleast_1d(np.asarray(self.init, dtype=float))
        S = init.shape[0]
        if trans.shape[1:] != (S, S) or emit.shape[0] != S:
            raise DimensionMismatch(
                f"trans {trans.shape}, emit {emit.shape}, init {init.shape} disagree on S"
            )
        for name, arr in (("trans", trans), ("emit", emit), ("init", init)):
            if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=-1) - 1.0) > 1e-12):
                raise ValueError(f"{name} rows must be probability vectors")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.init.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.trans.shape[0]

    @property
    def n_obs(self) -> int:
        return self.emit.shape[1]

    def permuted(self, perm) -> "IoHmmParams":
        """Relabel hidden states; new state ``i`` is old state ``perm[i]``."""
        perm = np.asarray(perm)
        return IoHmmParams(
            trans=self.trans[:, perm][:, :, perm], emit=self.emit[perm], init=self.init[perm]
        )

    def to_dict(self) -> dict:
        return {
            "S": self.n_states, "U": self.n_inputs, "O": self.n_obs,
            "trans": self.trans.tolist(), "emit": self.emit.tolist(), "init": self.init.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IoHmmParams":
        S, U, O = int(d["S"]), int(d["U"]), int(d["O"])
        trans = np.asarray(d["trans"], dtype=float).reshape(U, S, S)
        emit = np.asarray(d["emit"], dtype=float).reshape(S, O)
        init = np.asarray(d["init"], dtype=float).reshape(S)
        return cls(trans=trans, emit=emit, init=init)


def random_params(S: int, U: int, O: int, rng: np.random.Generator, concentration: float = 1.0) -> IoHmmParams:
    a = np.full(S, concentration)
    return IoHmmParams(
        trans=rng.dirichlet(a, size=(U, S)),
        emit=rng.dirichlet(np.full(O, concentration), size=S),
        init=rng.dirichlet(a),
    )


def to_symbols(u, n_inputs: int) -> np.ndarray:
    """Map an input sequence (symbols or a ``T x 1`` real matrix) to ints.

    Values of a :class:`PerturbationSequence` (real policy output, already
    clamped to the domain box) are rounded to the nearest symbol; raw arrays
    must hold integers.
    """
    if isinstance(u, PerturbationSequence):
        arr = np.rint(u.values[:, 0]).astype(np.int64)
    else:
        arr = np.asarray(u)
        if arr.ndim == 2:
            arr = arr[:, 0]
        if arr.size and np.issubdtype(arr.dtype, np.floating) and np.any(arr != np.rint(arr)):
            raise InvalidSymbol("input symbols must be integers")
        arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_inputs):
        raise InvalidSymbol(f"input symbols must lie in [0, {n_inputs})")
    return arr


def _check_obs(params: IoHmmParams, y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[:, 0]
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= params.n_obs):
        raise InvalidSymbol(f"output symbols must lie in [0, {params.n_obs})")
    return y


def _draw(cdf_rows: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw; ``cdf_rows[i]`` is the cumulative row for sample ``i``."""
    idx = (cdf_rows < uniforms[:, None]).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


class Stepper:
    """Pre-drawn uniforms for ``reps`` runs of length ``T`` (see ``lgss.Stepper``)."""

    def __init__(self, params: IoHmmParams, T: int, reps: int, seed: int):
        rng = rng_for(seed)
        self.params = params
        self.u0 = rng.random(reps)
        self.ue = rng.random((reps, T + 1))
        self.ut = rng.random((reps, T))
        self.cinit = np.cumsum(params.init)
        self.cemit = np.cumsum(params.emit, axis=1)
        self.ctrans = np.cumsum(params.trans, axis=2)

    def initial(self) -> np.ndarray:
        return _draw(np.broadcast_to(self.cinit, (len(self.u0), len(self.cinit))), self.u0)

    def emit(self, x: np.ndarray, t: int) -> np.ndarray:
        return _draw(self.cemit[x], self.ue[:, t])

    def advance(self, x: np.ndarray, u_t: int, t: int) -> np.ndarray:
        return _draw(self.ctrans[u_t][x], self.ut[:, t])


def simulate_batch(params: IoHmmParams, u, reps: int, seed: int) -> np.ndarray:
    """``reps`` output symbol sequences, shape ``(reps, T+1)``."""
    us = to_symbols(u, params.n_inputs)
    T = len(us)
    st = Stepper(params, T, reps, seed)
    Y = np.empty((reps, T + 1), dtype=np.int64)
    x = st.initial()
    for t in range(T + 1):
        Y[:, t] = st.emit(x, t)
        if t < T:
            x = st.advance(x, us[t], t)
    return Y


def simulate(params: IoHmmParams, u, seed: int, truth_tag: str = None) -> TrajectoryRecord:
    if not isinstance(u, PerturbationSequence):
        u = PerturbationSequence(np.asarray(u, dtype=float))
    Y = simulate_batch(params, u, 1, seed)[0]
    return TrajectoryRecord(inputs=u, outputs=Y, truth_tag=truth_tag, seed=int(seed))


def _forward(params: IoHmmParams, us: np.ndarray, ys: np.ndarray):
    """Scaled forward pass. Returns (alpha_hat, scale factors)."""
    T1 = len(ys)
    S = params.n_states
    alpha = np.empty((T1, S))
    c = np.empty(T1)
    a = params.init * params.emit[:, ys[0]]
    for t in range(T1):
        if t > 0:
            a = (alpha[t - 1] @ params.trans[us[t - 1]]) * params.emit[:, ys[t]]
        c[t] = a.sum()
        if c[t] <= 0.0:
            alpha[t:] = 0.0
            c[t:] = 0.0
            return alpha, c
        alpha[t] = a / c[t]
    return alpha, c


def forward_loglik(params: IoHmmParams, u, y) -> float:
    us = to_symbols(u, params.n_inputs)
    ys = _check_obs(params, y)
    if len(ys) != len(us) + 1:
        raise DimensionMismatch("outputs need exactly one more time step than inputs")
    _, c = _forward(params, us, ys)
    if np.any(c <= 0.0):
        return -math.inf
    return float(np.log(c).sum())


def exhaustive_law(params: IoHmmParams, u) -> np.ndarray:
    """Probability of every output sequence, lexicographic with ``y_0`` most significant."""
    us = to_symbols(u, params.n_inputs)
    T1, O = len(us) + 1, params.n_obs
    if O ** T1 > EXHAUSTIVE_LIMIT:
        raise ExhaustiveInfeasible(f"{O}^{T1} output sequences exceed {EXHAUSTIVE_LIMIT}")
    # joint[prefix, state] = P(y_{0:t} = prefix, x_t = state)
    joint = params.emit.T * params.init[None, :]  # (O, S)
    for t in range(1, T1):
        pred = joint @ params.trans[us[t - 1]]  # (O^t, S)
        joint = (pred[:, None, :] * params.emit.T[None, :, :]).reshape(-1, params.n_states)
    return joint.sum(axis=1)


def sequence_index(y, n_obs: int) -> int:
    idx = 0
    for s in y:
        idx = idx * n_obs + int(s)
    return idx


# ------------------------------------------------------------------ Baum-Welch


@dataclass
class BaumWelchOptions:
    max_iter: int = 200
    tol: float = 1e-8
    floor: float = PROB_FLOOR
    check_monotone: bool = True


def floored_normalize(counts: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    """Maximize ``sum(c log p)`` over the simplex with ``p >= floor``, row-wise.

    The solution is ``p_j = max(floor, c_j / lam)`` with ``lam`` fixed by
    normalization; entries pushed to the floor are found by repeated passes.
    Rows without counts become uniform.
    """
    counts = np.asarray(counts, dtype=float)
    flat = counts.reshape(-1, counts.shape[-1])
    out = np.empty_like(flat)
    K = flat.shape[1]
    for i, c in enumerate(flat):
        total = c.sum()
        if total <= 0.0:
            out[i] = 1.0 / K
            continue
        clamped = np.zeros(K, dtype=bool)
        while True:
            free_mass = 1.0 - floor * clamped.sum()
            free_total = c[~clamped].sum()
            p = np.where(clamped, floor, c * free_mass / free_total)
            newly = (~clamped) & (p < floor)
            if not newly.any():
                break
            clamped |= newly
        out[i] = p
    return out.reshape(counts.shape)


def _e_step(params: IoHmmParams, data: Dataset):
    S, U, O = params.n_states, params.n_inputs, params.n_obs
    init_c = np.zeros(S)
    trans_c = np.zeros((U, S, S))
    emit_c = np.zeros((S, O))
    lls = np.empty(len(data))
    for i, rec in enumerate(data.records):
        us = to_symbols(rec.inputs, U)
        ys = _check_obs(params, rec.outputs)
        alpha, c = _forward(params, us, ys)
        if np.any(c <= 0.0):
            lls[i] = -math.inf
            continue
        lls[i] = np.log(c).sum()
        T1 = len(ys)
        beta = np.empty((T1, S))
        beta[-1] = 1.0
        for t in range(T1 - 2, -1, -1):
            beta[t] = params.trans[us[t]] @ (params.emit[:, ys[t + 1]] * beta[t + 1]) / c[t + 1]
        gamma = alpha * beta
        init_c += gamma[0]
        np.add.at(emit_c.T, ys, gamma)
        for t in range(T1 - 1):
            xi = (alpha[t][:, None] * params.trans[us[t]]
                  * (params.emit[:, ys[t + 1]] * beta[t + 1])[None, :]) / c[t + 1]
            trans_c[us[t]] += xi
    return init_c, trans_c, emit_c, float(math.fsum(lls))


def baum_welch_fit(init: IoHmmParams, data: Dataset, opts: BaumWelchOptions = None, on_iter=None, **kw):
    """EM for the IO-HMM; returns ``(params, loglik_trace)``.

    Transition rows are re-estimated per input symbol; rows of symbols that
    never occur keep their previous values.
    """
    opts = opts or BaumWelchOptions(**kw)
    if len(data) == 0:
        raise EmptyDataset("baum_welch_fit needs at least one record")
    if not data.is_discrete:
        raise ValueError("baum_welch_fit needs discrete outputs")
    params, trace = init, []
    for it in range(opts.max_iter + 1):
        init_c, trans_c, emit_c, ll = _e_step(params, data)
        trace.append(ll)
        if on_iter is not None:
            on_iter(params, ll)
        if it > 0:
            change = trace[-1] - trace[-2]
            if opts.check_monotone and change < -1e-9 * max(1.0, abs(trace[-2])):
                raise MonotonicityViolation(f"log-likelihood fell by {-change:.3e} at iteration {it}")
            if abs(change) < opts.tol:
                break
        if it == opts.max_iter:
            break
        trans = params.trans.copy()
        for sym in range(params.n_inputs):
            seen = trans_c[sym].sum(axis=1) > 0
            if seen.any():
                trans[sym][seen] = floored_normalize(trans_c[sym][seen], opts.floor)
        params = IoHmmParams(
            trans=trans,
            emit=floored_normalize(emit_c, opts.floor),
            init=floored_normalize(init_c, opts.floor),
        )
    return params, trace

