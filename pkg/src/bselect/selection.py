"""Per-candidate scoring rules and the top-k filter.

The main scorer combines three terms for a candidate (x, y):

    alpha * mean_s log p(y | f_s)            posterior expected log-likelihood
  + (1 - alpha) * ref_lp                     reference predictor log-likelihood
  - log mean_s p(y | f_s)                    redundancy penalty (log-space)

with f_s Monte-Carlo logit samples from the current posterior predictive.
All probability aggregation happens through log-sum-exp; raw logits are
never exponentiated directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BatchTooSmall, ConfigError
from .numerics import log_softmax, logsumexp, softmax_ce_grad

METHODS = ("bayesian", "uniform", "train_loss", "grad_norm", "grad_norm_is", "irreducible")


@dataclass(frozen=True)
class SelectorConfig:
    method: str = "bayesian"
    alpha: float = 0.2
    mc_samples: int = 100

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown selection method {self.method!r}; choose from {METHODS}")
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mc_samples < 1:
            raise ConfigError(f"mc_samples must be at least 1, got {self.mc_samples}")


@dataclass
class ScoreVector:
    """Per-candidate scores aligned to the candidate batch."""

    scores: np.ndarray
    method: str
    weights: np.ndarray | None = None  # importance weights, sampling methods only


def score_bayesian(label: int, mc_logits, ref_lp: float, alpha: float) -> float:
    """Score one candidate from its (S, k) Monte-Carlo logit samples."""
    lp = log_softmax(np.atleast_2d(np.asarray(mc_logits, dtype=float)), axis=-1)[:, label]
    s = lp.shape[0]
    expected_log = float(lp.mean())
    log_expected = float(logsumexp(lp) - np.log(s))
    return alpha * expected_log + (1.0 - alpha) * float(ref_lp) - log_expected


def score_bayesian_batch(labels, mc_logits, ref_lp, alpha: float):
    """Vectorized scorer over a candidate batch.

    mc_logits has shape (n, S, k). Returns (scores, expected_log, log_expected)
    so callers can audit the per-candidate Jensen gap.
    """
    labels = np.asarray(labels, dtype=int)
    mc_logits = np.asarray(mc_logits, dtype=float)
    n, s, _ = mc_logits.shape
    lsm = log_softmax(mc_logits, axis=-1)
    lp = np.take_along_axis(lsm, labels[:, None, None], axis=-1)[:, :, 0]  # (n, S)
    expected_log = lp.mean(axis=1)
    log_expected = logsumexp(lp, axis=1) - np.log(s)
    scores = alpha * expected_log + (1.0 - alpha) * np.asarray(ref_lp, dtype=float) - log_expected
    return scores, expected_log, log_expected


def score_train_loss(label: int, logit_row) -> float:
    """-log p(label | logits); higher means harder."""
    return float(-log_softmax(np.asarray(logit_row, dtype=float))[label])


def score_grad_norm(label: int, logit_row, feat_row) -> float:
    """Last-layer gradient-norm statistic ||softmax - onehot|| * ||h||."""
    g = softmax_ce_grad(np.asarray(logit_row, dtype=float), label)
    return float(np.linalg.norm(g) * np.linalg.norm(np.asarray(feat_row, dtype=float)))


def score_irreducible(label: int, logit_row, holdout_lp: float) -> float:
    """Training loss minus the holdout model's loss on the same point."""
    return score_train_loss(label, logit_row) + float(holdout_lp)


def sample_grad_norm_is(scores, n_select: int, seed):
    """Draw n_select indices without replacement, probability proportional to score.

    Returns (indices, importance_weights) with weight_i = 1 / (n * p_i), the
    reweighting used in the importance-sampled training loss. All-zero scores
    (or fewer positive scores than n_select) fall back to a uniform draw.
    """
    scores = np.asarray(scores, dtype=float)
    n = scores.shape[0]
    if n_select > n:
        raise BatchTooSmall(f"cannot select {n_select} of {n} candidates")
    if np.any(scores < 0):
        raise ValueError("gradient-norm scores must be nonnegative")
    total = scores.sum()
    if total <= 0 or np.count_nonzero(scores) < n_select:
        probs = np.full(n, 1.0 / n)
    else:
        probs = scores / total
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=n_select, replace=False, p=probs)
    weights = 1.0 / (n * probs[idx])
    return idx, weights


def top_k(scores, n_select: int) -> np.ndarray:
    """Indices of the n_select largest scores, descending; ties break to lower index."""
    scores = np.asarray(scores, dtype=float)
    n = scores.shape[0]
    if n_select > n:
        raise BatchTooSmall(f"cannot select {n_select} of {n} candidates")
    order = np.lexsort((np.arange(n), -scores))
    return order[:n_select]
