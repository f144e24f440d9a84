"""Discrepancies between trajectory distributions.

Exact laws: closed-form Gaussian 2-Wasserstein and total variation over an
enumerated discrete law. Samples: biased (V-statistic) RBF-kernel MMD² and
energy distance. Sample sets are ``(n, d)`` arrays of stacked trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import DimensionMismatch, EmptySample, NotPSD, SupportMismatch

PSD_TOL = 1e-10

GAUSSIAN_W2 = "gaussian_w2"
MMD = "mmd"
ENERGY = "energy"
TV_EXHAUSTIVE = "tv_exhaustive"


@dataclass(frozen=True)
class DiscrepancyResult:
    value: float
    kind: str
    normalization: str = "raw"
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"value": self.value, "kind": self.kind,
                "normalization": self.normalization, "metadata": dict(self.metadata)}


def _sqrtm_psd(M: np.ndarray, name: str) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if w.size and w.min() < -PSD_TOL * max(1.0, float(np.abs(w).max())):
        raise NotPSD(f"{name} has eigenvalue {w.min():.3e}")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def gaussian_w2(a, b, normalization: str = "raw") -> DiscrepancyResult:
    """2-Wasserstein distance between Gaussian laws (objects with ``mean``/``cov``).

    ``per_timestep`` divides by ``sqrt(T + 1)`` (needs ``a.horizon``).
    """
    ma, mb = np.atleast_1d(a.mean), np.atleast_1d(b.mean)
    Sa, Sb = np.atleast_2d(a.cov), np.atleast_2d(b.cov)
    if ma.shape != mb.shape or Sa.shape != Sb.shape or Sa.shape != (ma.size, ma.size):
        raise DimensionMismatch(f"laws of dimension {ma.size} and {mb.size}")
    if np.array_equal(ma, mb) and np.array_equal(Sa, Sb):
        value = 0.0
        _sqrtm_psd(Sa, "first covariance")
    else:
        ra = _sqrtm_psd(Sa, "first covariance")
        _sqrtm_psd(Sb, "second covariance")
        cross = _sqrtm_psd(ra @ Sb @ ra, "cross term")
        dm = ma - mb
        bures = np.trace(Sa) + np.trace(Sb) - 2.0 * np.trace(cross)
        value = float(np.sqrt(max(dm @ dm + bures, 0.0)))
    if normalization == "per_timestep":
        value /= np.sqrt(getattr(a, "horizon", ma.size - 1) + 1)
    elif normalization != "raw":
        raise ValueError(f"unknown normalization {normalization!r}")
    return DiscrepancyResult(value, GAUSSIAN_W2, normalization, {"dim": int(ma.size)})


def _samples(xs, ys):
    X = np.asarray(xs, dtype=float)
    Y = np.asarray(ys, dtype=float)
    X = X.reshape(len(X), -1) if X.size else X.reshape(0, 0)
    Y = Y.reshape(len(Y), -1) if Y.size else Y.reshape(0, 0)
    if len(X) == 0 or len(Y) == 0:
        raise EmptySample("both sample sets must be non-empty")
    if X.shape[1] != Y.shape[1]:
        raise DimensionMismatch(f"sample vectors of length {X.shape[1]} and {Y.shape[1]}")
    return X, Y


def median_bandwidth(X: np.ndarray, Y: np.ndarray) -> float:
    pooled = np.vstack([X, Y])
    d = pdist(pooled) if len(pooled) > 1 else np.zeros(1)
    med = float(np.median(d))
    return med if med > 0 else 1.0


def mmd2_biased(xs, ys, bandwidth="median") -> DiscrepancyResult:
    X, Y = _samples(xs, ys)
    sigma = median_bandwidth(X, Y) if bandwidth == "median" else float(bandwidth)
    g = 1.0 / (2.0 * sigma**2)
    kxx = np.exp(-g * cdist(X, X, "sqeuclidean")).mean()
    kyy = np.exp(-g * cdist(Y, Y, "sqeuclidean")).mean()
    kxy = np.exp(-g * cdist(X, Y, "sqeuclidean")).mean()
    value = max(float(kxx + kyy - 2.0 * kxy), 0.0)
    return DiscrepancyResult(value, MMD, "raw", {"n_x": len(X), "n_y": len(Y), "bandwidth": sigma})


def energy_distance(xs, ys) -> DiscrepancyResult:
    X, Y = _samples(xs, ys)
    exy = cdist(X, Y).mean()
    exx = cdist(X, X).mean()
    eyy = cdist(Y, Y).mean()
    value = max(float(2.0 * exy - exx - eyy), 0.0)
    return DiscrepancyResult(value, ENERGY, "raw", {"n_x": len(X), "n_y": len(Y)})


def tv_exhaustive(a, b) -> DiscrepancyResult:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise SupportMismatch(f"supports of size {a.size} and {b.size}")
    for name, v in (("first", a), ("second", b)):
        if abs(v.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} law sums to {v.sum()!r}, not 1")
    value = min(0.5 * float(np.abs(a - b).sum()), 1.0)
    return DiscrepancyResult(value, TV_EXHAUSTIVE, "raw", {"support": int(a.size)})


def one_hot(Y: np.ndarray, n_obs: int) -> np.ndarray:
    """Encode ``(n, T+1)`` symbol sequences as ``(n, (T+1) * n_obs)`` indicator vectors."""
    Y = np.asarray(Y, dtype=np.int64)
    out = np.zeros(Y.shape + (n_obs,))
    np.put_along_axis(out, Y[..., None], 1.0, axis=-1)
    return out.reshape(len(Y), -1)


def sample_discrepancy(xs, ys, kind: str = ENERGY) -> DiscrepancyResult:
    if kind == ENERGY:
        return energy_distance(xs, ys)
    if kind == MMD:
        return mmd2_biased(xs, ys)
    raise ValueError(f"{kind!r} is not a sample-based discrepancy")
