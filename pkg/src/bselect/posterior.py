"""Online last-layer Laplace posterior with Kronecker-factored curvature.

Two small accumulators track running means of feature outer products
(feat_moment, d x d) and output-gradient outer products (grad_moment, k x k)
over the selected sub-batches, updated by exponential moving average. The
curvature factors are

    V = sqrt(n_e) * feat_moment + sqrt(tau0) * I
    U = sqrt(n_e) * grad_moment + sqrt(tau0) * I

with n_e an effective data count standing in for the number of observed
examples, and tau0 the isotropic prior precision. The head-weight posterior
is the matrix-variate Gaussian with row covariance V^-1 and column covariance
U^-1 centered at the current head, which pushes forward through the linear
head to a Gaussian over the logits of an input with features h:

    mean = current logits,  covariance = (h^T V^-1 h) * U^-1.

Scoring a candidate batch only needs one factorization of V and U per step;
PosteriorSnapshot packages that so per-candidate work is a pair of matmuls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatch, InvalidHyperparameter, ShapeMismatch
from .numerics import LowerTriangular, cholesky, solve_psd


@dataclass
class LaplaceState:
    feat_moment: np.ndarray  # (d, d) EMA of h h^T means
    grad_moment: np.ndarray  # (k, k) EMA of g g^T means
    prior_precision: float  # tau0
    effective_count: float  # n_e
    ema_decay: float  # beta in [0, 1)
    step: int = 0

    def to_state(self) -> dict:
        return {
            "feat_moment": self.feat_moment.tolist(),
            "grad_moment": self.grad_moment.tolist(),
            "prior_precision": self.prior_precision,
            "effective_count": self.effective_count,
            "ema_decay": self.ema_decay,
            "step": self.step,
        }

    @classmethod
    def from_state(cls, state: dict) -> "LaplaceState":
        return cls(
            feat_moment=np.asarray(state["feat_moment"], dtype=float),
            grad_moment=np.asarray(state["grad_moment"], dtype=float),
            prior_precision=float(state["prior_precision"]),
            effective_count=float(state["effective_count"]),
            ema_decay=float(state["ema_decay"]),
            step=int(state["step"]),
        )


@dataclass(frozen=True)
class PredictiveGaussian:
    """Per-input logit distribution N(mean, scale * base_cov)."""

    mean: np.ndarray  # (k,)
    scale: float  # h^T V^-1 h, nonnegative
    base_cov: np.ndarray  # (k, k) = U^-1, SPD


def init_laplace(prior_precision, effective_count, feature_dim, num_classes, ema_decay=0.99):
    if not prior_precision > 0:
        raise InvalidHyperparameter(f"prior precision must be positive, got {prior_precision}")
    if not effective_count > 0:
        raise InvalidHyperparameter(f"effective count must be positive, got {effective_count}")
    if not 0 <= ema_decay < 1:
        raise InvalidHyperparameter(f"EMA decay must lie in [0, 1), got {ema_decay}")
    return LaplaceState(
        feat_moment=np.zeros((feature_dim, feature_dim)),
        grad_moment=np.zeros((num_classes, num_classes)),
        prior_precision=float(prior_precision),
        effective_count=float(effective_count),
        ema_decay=float(ema_decay),
    )


def update_curvature(state: LaplaceState, batch_features, batch_ce_grads) -> LaplaceState:
    """EMA update from one selected sub-batch evaluated at the pre-update parameters.

    new = beta * old + (1 - beta) * mean_i outer(v_i, v_i); both accumulators
    are re-symmetrized after the update so round-off cannot break symmetry.
    """
    feats = np.atleast_2d(np.asarray(batch_features, dtype=float))
    grads = np.atleast_2d(np.asarray(batch_ce_grads, dtype=float))
    n = feats.shape[0]
    if n == 0:
        raise EmptyBatch("curvature update needs at least one example")
    if grads.shape[0] != n:
        raise ShapeMismatch(f"{n} feature rows but {grads.shape[0]} gradient rows")
    if feats.shape[1] != state.feat_moment.shape[0]:
        raise ShapeMismatch(
            f"feature width {feats.shape[1]} != accumulator size {state.feat_moment.shape[0]}"
        )
    if grads.shape[1] != state.grad_moment.shape[0]:
        raise ShapeMismatch(
            f"gradient width {grads.shape[1]} != accumulator size {state.grad_moment.shape[0]}"
        )
    beta = state.ema_decay
    state.feat_moment *= beta
    state.feat_moment += (1.0 - beta) * (feats.T @ feats) / n
    state.feat_moment[:] = (state.feat_moment + state.feat_moment.T) / 2
    state.grad_moment *= beta
    state.grad_moment += (1.0 - beta) * (grads.T @ grads) / n
    state.grad_moment[:] = (state.grad_moment + state.grad_moment.T) / 2
    state.step += 1
    return state


def factors(state: LaplaceState):
    """Curvature factors (V, U); SPD for any positive prior precision."""
    root_n = np.sqrt(state.effective_count)
    root_tau = np.sqrt(state.prior_precision)
    d = state.feat_moment.shape[0]
    k = state.grad_moment.shape[0]
    v = root_n * state.feat_moment + root_tau * np.eye(d)
    u = root_n * state.grad_moment + root_tau * np.eye(k)
    return v, u


@dataclass(frozen=True)
class PosteriorSnapshot:
    """Factorizations of (V, U) frozen at one step; safe to share across candidates."""

    v_factor: LowerTriangular
    u_inv: np.ndarray  # (k, k)
    u_inv_factor: np.ndarray  # lower L with L L^T = u_inv

    def scale_batch(self, feats) -> np.ndarray:
        """h^T V^-1 h for every row h of feats (clipped at zero)."""
        feats = np.atleast_2d(np.asarray(feats, dtype=float))
        solved = solve_psd(self.v_factor, feats.T)  # (d, n)
        return np.maximum(np.einsum("nd,dn->n", feats, solved), 0.0)

    def sample_logits_batch(self, means, scales, count, rng) -> np.ndarray:
        """(n, count, k) Gaussian logit samples, one row of means/scales per candidate."""
        means = np.asarray(means, dtype=float)
        z = rng.standard_normal((means.shape[0], count, means.shape[1]))
        spread = z @ self.u_inv_factor.T
        return means[:, None, :] + np.sqrt(scales)[:, None, None] * spread


def snapshot(state: LaplaceState) -> PosteriorSnapshot:
    v, u = factors(state)
    u_factor = cholesky(u)
    u_inv = solve_psd(u_factor, np.eye(u.shape[0]))
    u_inv = (u_inv + u_inv.T) / 2
    return PosteriorSnapshot(
        v_factor=cholesky(v),
        u_inv=u_inv,
        u_inv_factor=cholesky(u_inv).entries,
    )


def predictive(state: LaplaceState, feats, mean_logits) -> PredictiveGaussian:
    """Closed-form logit distribution for one input: N(f, (h^T V^-1 h) * U^-1)."""
    snap = snapshot(state)
    scale = float(snap.scale_batch(np.asarray(feats, dtype=float)[None, :])[0])
    return PredictiveGaussian(
        mean=np.asarray(mean_logits, dtype=float),
        scale=scale,
        base_cov=snap.u_inv,
    )


def sample_logits(pred: PredictiveGaussian, count: int, seed) -> np.ndarray:
    """`count` draws mean + sqrt(scale) * L z with L the factor of base_cov."""
    if count < 1:
        raise ValueError("need at least one sample")
    ell = cholesky(pred.base_cov).entries
    z = np.random.default_rng(seed).standard_normal((count, pred.mean.size))
    return pred.mean + np.sqrt(pred.scale) * (z @ ell.T)
