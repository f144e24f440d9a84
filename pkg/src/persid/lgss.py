"""Linear Gaussian state-space models.

    x_{t+1} = A x_t + B u_t + w_t,   w_t ~ N(0, Q)
    y_t     = C x_t + v_t,           v_t ~ N(0, R)
    x_0     ~ N(mu0, Sigma0)

Filtering and smoothing run on *batches* of records that share a horizon:
the covariance recursions do not depend on the data, so they are computed
once per batch and only the means are propagated per record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np
from scipy import linalg as sla

from .domain import Dataset, PerturbationSequence, TrajectoryRecord
from .errors import (
    DimensionMismatch,
    EmptyDataset,
    MonotonicityViolation,
    NotPSD,
    NumericalFailure,
)
from .seeding import rng_for

PSD_TOL = 1e-10
COV_FLOOR = 1e-8
LOG2PI = math.log(2.0 * math.pi)
FIELDS = ("A", "B", "C", "Q", "R", "mu0", "Sigma0")


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _clamp_psd(M: np.ndarray, name: str, floor: float = 0.0) -> np.ndarray:
    """Symmetrize and clamp eigenvalues to ``floor``; reject clearly indefinite input."""
    M = _sym(np.asarray(M, dtype=float))
    if M.size == 0:
        return M
    w, V = np.linalg.eigh(M)
    scale = max(1.0, float(np.max(np.abs(w))))
    if w.min() < -PSD_TOL * scale:
        raise NotPSD(f"{name} has eigenvalue {w.min():.3e}")
    if w.min() >= floor and floor == 0.0:
        return M
    return _sym((V * np.maximum(w, floor)) @ V.T)


def psd_sqrt(M: np.ndarray) -> np.ndarray:
    """Symmetric square root via eigendecomposition, small negatives clamped."""
    w, V = np.linalg.eigh(_sym(M))
    return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T


@dataclass(frozen=True, eq=False)
class LgssParams:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    mu0: Optional[np.ndarray] = None
    Sigma0: Optional[np.ndarray] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        try:
            B = np.asarray(self.B, dtype=float).reshape(n, -1)
            C = np.asarray(self.C, dtype=float)
            C = C.reshape(-1, n) if C.ndim < 2 else C
            p = C.shape[0]
            mu0 = np.zeros(n) if self.mu0 is None else np.asarray(self.mu0, dtype=float).reshape(n)
            S0 = np.eye(n) if self.Sigma0 is None else np.asarray(self.Sigma0, dtype=float).reshape(n, n)
            Q = np.asarray(self.Q, dtype=float).reshape(n, n)
            R = np.asarray(self.R, dtype=float).reshape(p, p)
        except ValueError as exc:
            raise DimensionMismatch(f"inconsistent LGSS dimensions for n={n}: {exc}") from exc
        if A.shape != (n, n) or C.shape[1] != n:
            raise DimensionMismatch(f"A is {A.shape}, C is {C.shape}")
        vals = dict(
            A=A, B=B, C=C,
            Q=_clamp_psd(Q, "Q"), R=_clamp_psd(R, "R"),
            mu0=mu0, Sigma0=_clamp_psd(S0, "Sigma0"),
        )
        for k, v in vals.items():
            v = np.array(v, copy=True)
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def replace(self, **changes) -> "LgssParams":
        return replace(self, **changes)

    def transformed(self, S: np.ndarray) -> "LgssParams":
        """Similarity transform ``x -> S x``; the input-output law is unchanged."""
        S = np.asarray(S, dtype=float)
        Si = np.linalg.inv(S)
        return LgssParams(
            A=S @ self.A @ Si, B=S @ self.B, C=self.C @ Si,
            Q=S @ self.Q @ S.T, R=self.R,
            mu0=S @ self.mu0, Sigma0=S @ self.Sigma0 @ S.T,
        )

    def to_dict(self) -> dict:
        d = {"n": self.n, "m": self.m, "p": self.p}
        for k in FIELDS:
            d[k] = getattr(self, k).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LgssParams":
        n, m, p = int(d["n"]), int(d["m"]), int(d["p"])
        kw = {}
        shapes = dict(A=(n, n), B=(n, m), C=(p, n), Q=(n, n), R=(p, p), mu0=(n,), Sigma0=(n, n))
        for k, shape in shapes.items():
            if k in d and d[k] is not None:
                arr = np.asarray(d[k], dtype=float)
                if arr.size != int(np.prod(shape)):
                    raise DimensionMismatch(f"{k} has {arr.size} entries, expected shape {shape}")
                kw[k] = arr.reshape(shape)
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class GaussianTrajectoryLaw:
    """Joint law of the stacked outputs ``(y_0, ..., y_T)``, time-major."""

    mean: np.ndarray
    cov: np.ndarray
    horizon: int
    output_dim: int


@dataclass(frozen=True, eq=False)
class FilterResult:
    loglik: float
    filtered_means: np.ndarray
    filtered_covs: list
    predicted_means: np.ndarray
    predicted_covs: list


@dataclass(frozen=True, eq=False)
class SmoothResult:
    means: np.ndarray
    covs: list
    cross_covs: list  # Cov(x_{t+1}, x_t | y), t = 0..T-1
    loglik: float


def _inputs(u) -> np.ndarray:
    if isinstance(u, PerturbationSequence):
        return u.values
    u = np.asarray(u, dtype=float)
    return u[:, None] if u.ndim == 1 else u


def _check_dims(params: LgssParams, U: np.ndarray, Y: np.ndarray = None):
    if U.shape[-1] != params.m and U.shape[-2] > 0:
        raise DimensionMismatch(f"input has {U.shape[-1]} channels, B expects {params.m}")
    if Y is not None:
        if Y.shape[-1] != params.p:
            raise DimensionMismatch(f"output has {Y.shape[-1]} channels, C expects {params.p}")
        if Y.shape[-2] != U.shape[-2] + 1:
            raise DimensionMismatch("outputs need exactly one more time step than inputs")


# ---------------------------------------------------------------- simulation


class Stepper:
    """Draws all noise for ``reps`` replicate runs of length ``T`` up front.

    The recursion itself is advanced by the caller one step at a time, so an
    open-loop simulation and a closed-loop run consume identical noise.
    """

    def __init__(self, params: LgssParams, T: int, reps: int, seed: int):
        rng = rng_for(seed)
        n, p = params.n, params.p
        self.params = params
        self.e0 = rng.standard_normal((reps, n))
        self.w = rng.standard_normal((reps, T, n))
        self.v = rng.standard_normal((reps, T + 1, p))
        self.L0 = psd_sqrt(params.Sigma0)
        self.Lq = psd_sqrt(params.Q)
        self.Lr = psd_sqrt(params.R)

    def initial(self) -> np.ndarray:
        return self.params.mu0 + self.e0 @ self.L0.T

    def emit(self, x: np.ndarray, t: int) -> np.ndarray:
        return x @ self.params.C.T + self.v[:, t] @ self.Lr.T

    def advance(self, x: np.ndarray, u_t: np.ndarray, t: int) -> np.ndarray:
        P = self.params
        return x @ P.A.T + u_t @ P.B.T + self.w[:, t] @ self.Lq.T


def simulate_batch(params: LgssParams, u, reps: int, seed: int) -> np.ndarray:
    """``reps`` independent output trajectories, shape ``(reps, T+1, p)``."""
    U = _inputs(u)
    _check_dims(params, U)
    T = U.shape[0]
    st = Stepper(params, T, reps, seed)
    Y = np.empty((reps, T + 1, params.p))
    x = st.initial()
    for t in range(T + 1):
        Y[:, t] = st.emit(x, t)
        if t < T:
            x = st.advance(x, U[t][None, :], t)
    return Y


def simulate(params: LgssParams, u: PerturbationSequence, seed: int, truth_tag: str = None) -> TrajectoryRecord:
    if not isinstance(u, PerturbationSequence):
        u = PerturbationSequence(u)
    Y = simulate_batch(params, u, 1, seed)[0]
    return TrajectoryRecord(inputs=u, outputs=Y, truth_tag=truth_tag, seed=int(seed))


# ------------------------------------------------------------ trajectory law


def trajectory_law(params: LgssParams, u) -> GaussianTrajectoryLaw:
    """Exact Gaussian law of ``y_{0:T}`` given the inputs.

    Uses ``Cov(x_s, x_t) = P_s (A^{t-s})^T`` for ``s <= t``.
    """
    U = _inputs(u)
    _check_dims(params, U)
    A, B, C, Q, R = params.A, params.B, params.C, params.Q, params.R
    T, n, p = U.shape[0], params.n, params.p
    means = np.empty((T + 1, n))
    Ps = np.empty((T + 1, n, n))
    means[0], Ps[0] = params.mu0, params.Sigma0
    for t in range(T):
        means[t + 1] = A @ means[t] + B @ U[t]
        Ps[t + 1] = _sym(A @ Ps[t] @ A.T + Q)
    d = p * (T + 1)
    mean = (means @ C.T).reshape(d)
    cov = np.zeros((d, d))
    for s in range(T + 1):
        cross = Ps[s]  # Cov(x_s, x_t) for t = s, s+1, ...
        for t in range(s, T + 1):
            blk = C @ cross @ C.T
            if t == s:
                blk = blk + R
                cov[s * p:(s + 1) * p, s * p:(s + 1) * p] = _sym(blk)
            else:
                cov[s * p:(s + 1) * p, t * p:(t + 1) * p] = blk
                cov[t * p:(t + 1) * p, s * p:(s + 1) * p] = blk.T
            cross = cross @ A.T
    return GaussianTrajectoryLaw(mean=mean, cov=cov, horizon=T, output_dim=p)


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Dense multivariate normal log-density (Cholesky based)."""
    L = np.linalg.cholesky(cov)
    z = sla.solve_triangular(L, x - mean, lower=True)
    return float(-0.5 * (len(x) * LOG2PI + z @ z) - np.log(np.diag(L)).sum())


# ------------------------------------------------------------------- filters


def _chol(S: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * max(1.0, float(np.trace(S)) / len(S))
        try:
            return np.linalg.cholesky(S + jitter * np.eye(len(S)))
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure("innovation covariance is not positive definite") from exc


@dataclass
class _BatchFilter:
    mf: np.ndarray  # (k, T+1, n) filtered means
    mp: np.ndarray  # (k, T+1, n) predicted means
    Pf: np.ndarray  # (T+1, n, n)
    Pp: np.ndarray  # (T+1, n, n)
    loglik: np.ndarray  # (k,)


def _filter_batch(params: LgssParams, U: np.ndarray, Y: np.ndarray) -> _BatchFilter:
    A, B, C, Q, R = params.A, params.B, params.C, params.Q, params.R
    k, T1, p = Y.shape
    T, n = T1 - 1, params.n
    I = np.eye(n)
    mf = np.empty((k, T1, n))
    mp = np.empty((k, T1, n))
    Pf = np.empty((T1, n, n))
    Pp = np.empty((T1, n, n))
    ll = np.full(k, -0.5 * p * LOG2PI * T1)
    m, P = np.broadcast_to(params.mu0, (k, n)).copy(), params.Sigma0.copy()
    for t in range(T1):
        mp[:, t], Pp[t] = m, P
        S = _sym(C @ P @ C.T + R)
        L = _chol(S)
        e = Y[:, t] - m @ C.T
        z = sla.solve_triangular(L, e.T, lower=True)
        ll -= 0.5 * np.einsum("ij,ij->j", z, z) + np.log(np.diag(L)).sum()
        K = sla.cho_solve((L, True), C @ P).T  # P C^T S^{-1}
        m = m + e @ K.T
        IKC = I - K @ C
        P = _sym(IKC @ P @ IKC.T + K @ R @ K.T)
        mf[:, t], Pf[t] = m, P
        if t < T:
            m = m @ A.T + U[:, t] @ B.T
            P = _sym(A @ P @ A.T + Q)
    return _BatchFilter(mf, mp, Pf, Pp, ll)


def _smooth_batch(params: LgssParams, U: np.ndarray, Y: np.ndarray):
    f = _filter_batch(params, U, Y)
    A = params.A
    T1 = Y.shape[1]
    ms = f.mf.copy()
    Ps = f.Pf.copy()
    cross = np.empty((max(T1 - 1, 0),) + f.Pf.shape[1:])
    for t in range(T1 - 2, -1, -1):
        APf = A @ f.Pf[t]  # = (Pf A^T)^T
        try:
            J = np.linalg.solve(f.Pp[t + 1], APf).T
        except np.linalg.LinAlgError:
            J = (np.linalg.pinv(f.Pp[t + 1], hermitian=True) @ APf).T
        ms[:, t] = f.mf[:, t] + (ms[:, t + 1] - f.mp[:, t + 1]) @ J.T
        Ps[t] = _sym(f.Pf[t] + J @ (Ps[t + 1] - f.Pp[t + 1]) @ J.T)
        cross[t] = Ps[t + 1] @ J.T
    return ms, Ps, cross, f.loglik


def kalman_filter(params: LgssParams, u, y) -> FilterResult:
    U, Y = _inputs(u), np.asarray(y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    _check_dims(params, U, Y)
    f = _filter_batch(params, U[None], Y[None])
    return FilterResult(
        loglik=float(f.loglik[0]),
        filtered_means=f.mf[0],
        filtered_covs=list(f.Pf),
        predicted_means=f.mp[0],
        predicted_covs=list(f.Pp),
    )


def kalman_smooth(params: LgssParams, u, y) -> SmoothResult:
    """Rauch-Tung-Striebel smoother with lag-one cross covariances."""
    U, Y = _inputs(u), np.asarray(y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    _check_dims(params, U, Y)
    ms, Ps, cross, ll = _smooth_batch(params, U[None], Y[None])
    return SmoothResult(means=ms[0], covs=list(Ps), cross_covs=list(cross), loglik=float(ll[0]))


def dataset_loglik(params: LgssParams, data: Dataset) -> np.ndarray:
    """Per-record log-likelihoods, in record order."""
    out = np.empty(len(data))
    for idx, U, Y in data.batches():
        _check_dims(params, U, Y)
        out[idx] = _filter_batch(params, U, Y).loglik
    return out


# ------------------------------------------------------------------------ EM


@dataclass
class EmOptions:
    max_iter: int = 200
    tol: float = 1e-6
    fixed_fields: tuple = ()
    # proximal ridge shrink of A, B, C after each M-step (1 = none)
    shrink: float = 1.0
    check_monotone: bool = True


@dataclass
class _Stats:
    Sxx: np.ndarray  # sum over transitions of E[x_t x_t']
    Sx1x1: np.ndarray
    Sx1x: np.ndarray
    Sxu: np.ndarray
    Sx1u: np.ndarray
    Suu: np.ndarray
    n_trans: int
    Sxx_all: np.ndarray  # over all observation times
    Syx: np.ndarray
    Syy: np.ndarray
    n_obs: int
    m0: list
    P0_sum: np.ndarray
    n_rec: int
    loglik: float


def _e_step(params: LgssParams, data: Dataset) -> _Stats:
    n, m, p = params.n, params.m, params.p
    z = lambda *s: np.zeros(s)
    st = _Stats(z(n, n), z(n, n), z(n, n), z(n, m), z(n, m), z(m, m), 0,
                z(n, n), z(p, n), z(p, p), 0, [], z(n, n), 0, 0.0)
    logliks = np.empty(len(data))
    m0 = np.empty((len(data), n))
    for idx, U, Y in data.batches():
        _check_dims(params, U, Y)
        ms, Ps, cross, ll = _smooth_batch(params, U, Y)
        logliks[idx] = ll
        k, T1 = Y.shape[0], Y.shape[1]
        T = T1 - 1
        x0, x1 = ms[:, :T], ms[:, 1:]
        st.Sxx += k * Ps[:T].sum(0) + np.einsum("kti,ktj->ij", x0, x0)
        st.Sx1x1 += k * Ps[1:].sum(0) + np.einsum("kti,ktj->ij", x1, x1)
        st.Sx1x += k * cross.sum(0) + np.einsum("kti,ktj->ij", x1, x0)
        st.Sxu += np.einsum("kti,ktj->ij", x0, U)
        st.Sx1u += np.einsum("kti,ktj->ij", x1, U)
        st.Suu += np.einsum("kti,ktj->ij", U, U)
        st.n_trans += k * T
        st.Sxx_all += k * Ps.sum(0) + np.einsum("kti,ktj->ij", ms, ms)
        st.Syx += np.einsum("kti,ktj->ij", Y, ms)
        st.Syy += np.einsum("kti,ktj->ij", Y, Y)
        st.n_obs += k * T1
        m0[idx] = ms[:, 0]
        st.P0_sum += k * Ps[0]
        st.n_rec += k
    st.m0 = m0
    # index-ordered reduction keeps the total bit-stable
    st.loglik = float(math.fsum(logliks))
    return st


def _solve_right(S: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``M S^{-1}`` for symmetric PSD ``S``; minimum-norm if singular."""
    try:
        L = np.linalg.cholesky(S)
        return sla.cho_solve((L, True), M.T).T
    except np.linalg.LinAlgError:
        return M @ np.linalg.pinv(S, hermitian=True)


def _m_step(params: LgssParams, st: _Stats, fixed: set) -> LgssParams:
    n, m = params.n, params.m
    A, B, C = params.A, params.B, params.C
    Q, R, mu0, S0 = params.Q, params.R, params.mu0, params.Sigma0
    if st.n_trans > 0:
        if "A" not in fixed and "B" not in fixed:
            Szz = np.block([[st.Sxx, st.Sxu], [st.Sxu.T, st.Suu]])
            W = _solve_right(Szz, np.hstack([st.Sx1x, st.Sx1u]))
            A, B = W[:, :n], W[:, n:]
        elif "A" not in fixed:
            A = _solve_right(st.Sxx, st.Sx1x - B @ st.Sxu.T)
        elif "B" not in fixed and m > 0:
            B = _solve_right(st.Suu, st.Sx1u - A @ st.Sxu)
        if "Q" not in fixed:
            W = np.hstack([A, B])
            Szz = np.block([[st.Sxx, st.Sxu], [st.Sxu.T, st.Suu]])
            Sx1z = np.hstack([st.Sx1x, st.Sx1u])
            Qn = st.Sx1x1 - W @ Sx1z.T - Sx1z @ W.T + W @ Szz @ W.T
            Q = _clamp_eig(Qn / st.n_trans, COV_FLOOR)
    if "C" not in fixed:
        C = _solve_right(st.Sxx_all, st.Syx)
    if "R" not in fixed:
        Rn = st.Syy - C @ st.Syx.T - st.Syx @ C.T + C @ st.Sxx_all @ C.T
        R = _clamp_eig(Rn / st.n_obs, COV_FLOOR)
    if "mu0" not in fixed:
        mu0 = st.m0.mean(axis=0)
    if "Sigma0" not in fixed:
        d = st.m0 - mu0
        S0 = _clamp_eig((st.P0_sum + d.T @ d) / st.n_rec, 0.0)
    return LgssParams(A=A, B=B, C=C, Q=Q, R=R, mu0=mu0, Sigma0=S0)


def _clamp_eig(M: np.ndarray, floor: float) -> np.ndarray:
    w, V = np.linalg.eigh(_sym(M))
    return _sym((V * np.maximum(w, floor)) @ V.T)


def em_fit(init: LgssParams, data: Dataset, opts: EmOptions = None, on_iter=None, **kw):
    """Maximum-likelihood fit by expectation-maximization.

    Returns ``(params, loglik_trace)``; ``loglik_trace[k]`` is the total
    log-likelihood of the k-th iterate and the last entry belongs to the
    returned parameters. ``on_iter(params, loglik)`` is called once per
    evaluated iterate.
    """
    opts = opts or EmOptions(**kw)
    if len(data) == 0:
        raise EmptyDataset("em_fit needs at least one record")
    fixed = set(opts.fixed_fields)
    unknown = fixed - set(FIELDS)
    if unknown:
        raise ValueError(f"unknown fixed fields {sorted(unknown)}")
    params, trace = init, []
    for it in range(opts.max_iter + 1):
        st = _e_step(params, data)
        trace.append(st.loglik)
        if on_iter is not None:
            on_iter(params, st.loglik)
        if it > 0:
            change = trace[-1] - trace[-2]
            if opts.check_monotone and change < -1e-9 * max(1.0, abs(trace[-2])):
                raise MonotonicityViolation(
                    f"log-likelihood fell by {-change:.3e} at iteration {it}"
                )
            if abs(change) < opts.tol:
                break
        if it == opts.max_iter:
            break
        params = _m_step(params, st, fixed)
        if opts.shrink != 1.0:
            params = params.replace(
                A=params.A * opts.shrink if "A" not in fixed else params.A,
                B=params.B * opts.shrink if "B" not in fixed else params.B,
                C=params.C * opts.shrink if "C" not in fixed else params.C,
            )
    return params, trace


# ---------------------------------------------------------- diagnostics


def controllability_matrix(params: LgssParams):
    """``[B, AB, ..., A^{n-1} B]`` and its numerical rank."""
    A, B = params.A, params.B
    n = params.n
    blocks, blk = [], B
    for _ in range(n):
        blocks.append(blk)
        blk = A @ blk
    Cm = np.hstack(blocks) if blocks else np.zeros((n, 0))
    if Cm.size == 0:
        return Cm, 0
    s = np.linalg.svd(Cm, compute_uv=False)
    if s[0] == 0.0:
        return Cm, 0
    rank = int(np.sum(s > n * s[0] * 1e-12))
    return Cm, rank


def markov_parameters(params: LgssParams, k_max: int) -> list:
    """Impulse-response matrices ``C A^k B`` for ``k = 0..k_max``."""
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    out, AkB = [], params.B
    for _ in range(k_max + 1):
        out.append(params.C @ AkB)
        AkB = params.A @ AkB
    return out


def random_params(n: int, m: int, p: int, rng: np.random.Generator, radius: float = 0.8,
                  noise: float = 0.5) -> LgssParams:
    """A random stable system, used for multi-start initialization and tests."""
    A = rng.standard_normal((n, n))
    rho = max(np.abs(np.linalg.eigvals(A)).max(), 1e-12)
    A = A * (radius * rng.uniform(0.5, 1.0) / rho)
    B = rng.standard_normal((n, m))
    C = rng.standard_normal((p, n))
    return LgssParams(A=A, B=B, C=C, Q=noise * np.eye(n), R=noise * np.eye(p),
                      mu0=np.zeros(n), Sigma0=np.eye(n))
