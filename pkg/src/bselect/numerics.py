"""Small dense linear-algebra and probability kernels used by every other module.

All arrays are float64. Every function is pure given its inputs (plus an
explicit seed where sampling is involved), so concurrent use requires no
locking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, IndexOutOfRange, NotPositiveDefinite

# Diagonal boosts tried (scaled by the mean diagonal) when a factorization
# fails at the requested jitter; running-average accumulators can drift a
# hair below PSD.
JITTER_LADDER = (1e-10, 1e-8, 1e-6)


@dataclass(frozen=True)
class LowerTriangular:
    """Cholesky factor L with L @ L.T equal to the factored matrix."""

    entries: np.ndarray

    def __post_init__(self):
        if not np.all(np.diag(self.entries) > 0):
            raise NotPositiveDefinite("factor diagonal must be strictly positive")

    @property
    def n(self) -> int:
        return self.entries.shape[0]


def cholesky(matrix, jitter: float = 0.0) -> LowerTriangular:
    """Factor a symmetric PSD matrix as L @ L.T with `jitter` added to the diagonal.

    If the factorization fails at the requested jitter, the ladder in
    JITTER_LADDER (relative to the mean diagonal magnitude) is walked before
    raising NotPositiveDefinite.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {m.shape}")
    if m.size:
        tol = 1e-10 * max(1.0, float(np.abs(m).max()))
        if float(np.abs(m - m.T).max()) > tol:
            raise ValueError("matrix is not symmetric within 1e-10 relative")
    scale = float(np.mean(np.abs(np.diag(m)))) if m.size else 1.0
    if scale == 0.0:
        scale = 1.0
    eye = np.eye(m.shape[0])
    for boost in (jitter,) + tuple(jitter + r * scale for r in JITTER_LADDER):
        try:
            ell = np.linalg.cholesky(m + boost * eye if boost else m)
        except np.linalg.LinAlgError:
            continue
        return LowerTriangular(ell)
    raise NotPositiveDefinite(
        f"matrix of size {m.shape[0]} is not positive definite even with jitter"
    )


def solve_psd(factor: LowerTriangular, b):
    """Solve (L L^T) x = b given the Cholesky factor L.

    `b` may be a vector or a matrix of stacked right-hand sides (columns).
    """
    ell = factor.entries
    b = np.asarray(b, dtype=float)
    if b.shape[0] != ell.shape[0]:
        raise DimensionMismatch(
            f"right-hand side of length {b.shape[0]} does not match factor size {ell.shape[0]}"
        )
    z = solve_triangular(ell, b, lower=True)
    return solve_triangular(ell.T, z, lower=False)


def sample_gaussian(mean, cov, count: int, seed) -> np.ndarray:
    """Draw `count` i.i.d. samples from N(mean, cov); rows are samples.

    Deterministic for a fixed seed. A cov that is exactly zero yields copies
    of the mean (degenerate Gaussian); otherwise cov is factored with
    `cholesky`, whose failure propagates.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (mean.size, mean.size):
        raise DimensionMismatch(
            f"covariance shape {cov.shape} does not match mean of length {mean.size}"
        )
    if count < 1:
        raise ValueError("need at least one sample")
    if not cov.any():
        return np.tile(mean, (count, 1))
    ell = cholesky(cov).entries
    z = np.random.default_rng(seed).standard_normal((count, mean.size))
    return mean + z @ ell.T


def logsumexp(a, axis=None):
    """log(sum(exp(a))) with max-subtraction; inputs are assumed finite."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.item())
    return np.squeeze(out, axis=axis)


def log_softmax(f, axis=-1):
    """Entrywise f_j - log(sum_j exp(f_j)) along `axis`, max-subtracted for stability."""
    f = np.asarray(f, dtype=float)
    shifted = f - np.max(f, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax_ce_grad(f, label: int) -> np.ndarray:
    """Gradient of -log p(label | f) w.r.t. the logits: softmax(f) - onehot(label)."""
    f = np.asarray(f, dtype=float)
    k = f.shape[-1]
    if not 0 <= label < k:
        raise IndexOutOfRange(f"label {label} outside [0, {k})")
    p = np.exp(log_softmax(f))
    p[label] -= 1.0
    return p
