"""Independent brute-force references for the quantities the selection rule
approximates.

Three families of checks:

* Grid-exact Bayesian logistic regression (at most 3 parameters): the joint
  posterior predictive log p(y | x, holdout, train) is integrated by a dense
  tensor-product grid in log-space, with a mandatory grid-refinement check,
  and compared against the two Jensen lower bounds and their convex mixtures.
* The exact dense last-layer generalized Gauss-Newton matrix, assembled from
  per-sample feature/softmax-Hessian Kronecker blocks.
* A fidelity report quantifying how far the Kronecker-factored EMA curvature
  and its closed-form predictive covariance sit from the exact-GGN versions.
  No pass/fail threshold: the factorization is an approximation, and this
  measures it.

Everything here is deliberately independent of the production code paths it
validates (fresh formulas, numpy inverses instead of shared solvers).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundViolation, DimensionLimit, GridTooCoarse

# Points per axis by parameter count; refinement doubles these. A flat 401
# would make 3-parameter refinement passes (802^3 grid points) infeasible.
DEFAULT_POINTS = {1: 401, 2: 401, 3: 61}
GRID_HALF_WIDTH_SDS = 6.0
CHUNK_SIZE = 262_144


@dataclass(frozen=True)
class BoundCase:
    """One logistic-regression scenario: prior, train set, holdout set, query."""

    prior_precision: float
    train_x: np.ndarray  # (n_train, p)
    train_y: np.ndarray  # (n_train,) in {0, 1}
    holdout_x: np.ndarray
    holdout_y: np.ndarray
    query_x: np.ndarray  # (p,)
    query_y: int

    @property
    def n_params(self) -> int:
        return self.query_x.shape[0]


class _StreamingLse:
    """log-sum-exp over chunked values, with optional weighted sums of extras."""

    def __init__(self, n_extras: int = 0):
        self.shift = -np.inf
        self.total = 0.0
        self.extras = np.zeros(n_extras)

    def add(self, log_values, extras=()):
        m = float(log_values.max())
        if m > self.shift:
            rescale = np.exp(self.shift - m) if np.isfinite(self.shift) else 0.0
            self.total *= rescale
            self.extras *= rescale
            self.shift = m
        w = np.exp(log_values - self.shift)
        self.total += float(w.sum())
        for i, g in enumerate(extras):
            self.extras[i] += float(w @ g)

    @property
    def logsum(self) -> float:
        return self.shift + np.log(self.total)

    def expectation(self, i: int) -> float:
        return float(self.extras[i] / self.total)


def _iter_grid(axes, chunk_size=CHUNK_SIZE):
    sizes = [len(a) for a in axes]
    total = int(np.prod(sizes))
    for start in range(0, total, chunk_size):
        idx = np.arange(start, min(start + chunk_size, total))
        coords = np.unravel_index(idx, sizes)
        yield np.stack([axes[d][coords[d]] for d in range(len(axes))], axis=1)


def _loglik(theta, xs, ys):
    """Sum over (x, y) of log sigma((2y-1) * theta.x), per grid row."""
    if xs.shape[0] == 0:
        return np.zeros(theta.shape[0])
    signed = xs * (2.0 * ys - 1.0)[:, None]
    z = theta @ signed.T
    return -np.logaddexp(0.0, -z).sum(axis=1)


def _grid_quantities(case: BoundCase, points_per_axis: int) -> dict:
    """Exact joint predictive and both lower bounds from one grid pass."""
    p = case.n_params
    half = GRID_HALF_WIDTH_SDS / np.sqrt(case.prior_precision)
    axes = [np.linspace(-half, half, points_per_axis)] * p

    qx = case.query_x[None, :]
    qy = np.array([case.query_y], dtype=float)

    joint = _StreamingLse()
    joint_q = _StreamingLse()
    post_train = _StreamingLse(n_extras=2)  # E[ll_query], E[ll_holdout]
    post_train_h = _StreamingLse()
    post_hold = _StreamingLse(n_extras=2)  # E[ll_query], E[ll_train]
    post_hold_t = _StreamingLse()

    for theta in _iter_grid(axes):
        log_prior = -0.5 * case.prior_precision * np.sum(theta**2, axis=1)
        ll_train = _loglik(theta, case.train_x, case.train_y)
        ll_hold = _loglik(theta, case.holdout_x, case.holdout_y)
        ll_query = _loglik(theta, qx, qy)
        base_train = log_prior + ll_train
        base_hold = log_prior + ll_hold
        base_joint = base_train + ll_hold
        joint.add(base_joint)
        joint_q.add(base_joint + ll_query)
        post_train.add(base_train, extras=(ll_query, ll_hold))
        post_train_h.add(base_train + ll_hold)
        post_hold.add(base_hold, extras=(ll_query, ll_train))
        post_hold_t.add(base_hold + ll_train)

    exact = joint_q.logsum - joint.logsum
    log_p_hold_given_train = post_train_h.logsum - post_train.logsum
    lower_train = (
        post_train.expectation(0) + post_train.expectation(1) - log_p_hold_given_train
    )
    log_p_train_given_hold = post_hold_t.logsum - post_hold.logsum
    lower_hold = post_hold.expectation(0) + post_hold.expectation(1) - log_p_train_given_hold
    return {"exact": exact, "lower_train": lower_train, "lower_hold": lower_hold}


def _refined_quantities(case: BoundCase, points_per_axis=None, tol=1e-6) -> dict:
    """Grid quantities with the mandatory doubling refinement check."""
    if case.n_params not in DEFAULT_POINTS:
        raise ValueError(f"grid integration supports at most 3 parameters, got {case.n_params}")
    n = points_per_axis or DEFAULT_POINTS[case.n_params]
    coarse = _grid_quantities(case, n)
    fine = _grid_quantities(case, 2 * n)
    delta = max(abs(coarse[k] - fine[k]) for k in coarse)
    if delta > tol:
        raise GridTooCoarse(
            f"doubling {n} points/axis moved results by {delta:.3e} > {tol:.1e}"
        )
    fine["refinement_delta"] = delta
    return fine


def grid_posterior_predictive(case: BoundCase, points_per_axis=None, tol=1e-6) -> float:
    """Quadrature-exact log p(query_y | query_x, holdout, train)."""
    return _refined_quantities(case, points_per_axis, tol)["exact"]


def check_lower_bounds(
    case: BoundCase,
    alphas=(0.0, 0.25, 0.5, 0.75, 1.0),
    points_per_axis=None,
    tol=1e-6,
) -> dict:
    """Assert exact >= every alpha-mixture of the two lower bounds.

    alpha weights the train-posterior bound; alpha=1 and alpha=0 recover the
    two pure bounds. Returns a report with all values and the worst margin;
    raises BoundViolation with the offending terms if any margin < -tol.
    """
    q = _refined_quantities(case, points_per_axis, tol)
    mixtures = {
        float(a): float(a * q["lower_train"] + (1 - a) * q["lower_hold"]) for a in alphas
    }
    margins = {a: q["exact"] - v for a, v in mixtures.items()}
    worst_alpha = min(margins, key=margins.get)
    report = {
        "n_params": case.n_params,
        "exact": q["exact"],
        "lower_train": q["lower_train"],
        "lower_hold": q["lower_hold"],
        "mixtures": mixtures,
        "min_margin": margins[worst_alpha],
        "refinement_delta": q["refinement_delta"],
    }
    if margins[worst_alpha] < -tol:
        raise BoundViolation(
            f"exact {q['exact']:.9f} < mixture {mixtures[worst_alpha]:.9f} "
            f"at alpha={worst_alpha} (margin {margins[worst_alpha]:.3e})"
        )
    return report


def random_case(seed, n_params=None, max_points=8) -> BoundCase:
    """A randomized small logistic scenario; labels are mostly model-consistent
    with a fraction flipped so hard/mislabeled queries are represented."""
    rng = np.random.default_rng(seed)
    p = int(n_params) if n_params else int(rng.choice([1, 1, 2, 2, 3]))
    tau0 = float(rng.uniform(0.5, 2.0))
    theta_true = rng.standard_normal(p)
    scale = rng.uniform(0.3, 1.2)

    def draw(n):
        x = rng.standard_normal((n, p)) * scale
        probs = 1.0 / (1.0 + np.exp(-x @ theta_true))
        y = (rng.uniform(size=n) < probs).astype(float)
        flip = rng.uniform(size=n) < 0.2
        y[flip] = 1.0 - y[flip]
        return x, y

    n_train = int(rng.integers(1, max_points + 1))
    n_hold = int(rng.integers(0, max_points + 1))
    train_x, train_y = draw(n_train)
    holdout_x, holdout_y = draw(n_hold)
    query_x, query_y = draw(1)
    return BoundCase(
        prior_precision=tau0,
        train_x=train_x,
        train_y=train_y,
        holdout_x=holdout_x,
        holdout_y=holdout_y,
        query_x=query_x[0],
        query_y=int(query_y[0]),
    )


def run_bounds_sweep(n_cases=100, seed=0, tol=1e-6) -> list:
    """check_lower_bounds over seeded random cases; any violation raises."""
    return [check_lower_bounds(random_case((seed, i)), tol=tol) for i in range(n_cases)]


def softmax_hessian(logit_row) -> np.ndarray:
    """Exact Hessian of -log softmax at the logits: diag(p) - p p^T."""
    f = np.asarray(logit_row, dtype=float)
    e = np.exp(f - f.max())
    p = e / e.sum()
    return np.diag(p) - np.outer(p, p)


def full_ggn_last_layer(pairs, prior_precision: float, feature_dim=None, num_classes=None):
    """Exact dense GGN of the head weights: tau0 I + sum_i kron(h h^T, Lambda).

    `pairs` holds (features, logits) per sample; vec layout is row-major over
    the (d, k) head, i.e. index a*k + b for weight (a, b). With no pairs the
    result is the prior alone, and the dimensions must be given explicitly.
    """
    pairs = list(pairs)
    if pairs:
        d = np.asarray(pairs[0][0]).shape[0]
        k = np.asarray(pairs[0][1]).shape[0]
    elif feature_dim and num_classes:
        d, k = int(feature_dim), int(num_classes)
    else:
        raise ValueError("empty history: pass feature_dim and num_classes")
    if d * k > 256:
        raise DimensionLimit(f"dense GGN capped at 256 weights, got {d * k}")
    ggn = prior_precision * np.eye(d * k)
    for h, f in pairs:
        h = np.asarray(h, dtype=float)
        ggn += np.kron(np.outer(h, h), softmax_hessian(f))
    return ggn


@dataclass(frozen=True)
class FidelityReport:
    frobenius_gap: float  # ||kron - full||_F / ||full||_F
    predictive_gaps: np.ndarray  # per-probe relative covariance gaps
    kron: np.ndarray
    full: np.ndarray


def kfac_fidelity(history, prior_precision, effective_count, probe_features=None):
    """Gap between the Kronecker-factored curvature and the exact GGN.

    `history` holds (features, logits, label) triples. The factored side
    accumulates the feature and loss-gradient second moments exactly as the
    online estimator does (means, square-root count/prior split); the exact
    side is tau0 I + n_e * mean_i kron(h h^T, Lambda_i). Reported, not
    thresholded.
    """
    history = list(history)
    if history:
        d = np.asarray(history[0][0]).shape[0]
        k = np.asarray(history[0][1]).shape[0]
    elif probe_features is not None:
        probe_features = np.atleast_2d(np.asarray(probe_features, dtype=float))
        d = probe_features.shape[1]
        k = 2
    else:
        raise ValueError("need history or probes to fix dimensions")
    if d * k > 256:
        raise DimensionLimit(f"dense GGN capped at 256 weights, got {d * k}")

    feat_moment = np.zeros((d, d))
    grad_moment = np.zeros((k, k))
    full = prior_precision * np.eye(d * k)
    for h, f, y in history:
        h = np.asarray(h, dtype=float)
        f = np.asarray(f, dtype=float)
        e = np.exp(f - f.max())
        p = e / e.sum()
        g = p.copy()
        g[int(y)] -= 1.0
        feat_moment += np.outer(h, h)
        grad_moment += np.outer(g, g)
        full += (effective_count / len(history)) * np.kron(
            np.outer(h, h), np.diag(p) - np.outer(p, p)
        )
    if history:
        feat_moment /= len(history)
        grad_moment /= len(history)

    v = np.sqrt(effective_count) * feat_moment + np.sqrt(prior_precision) * np.eye(d)
    u = np.sqrt(effective_count) * grad_moment + np.sqrt(prior_precision) * np.eye(k)
    # Expanded form of kron(v, u); keeps the tau0*I block exact so the
    # zero-data gap is identically zero instead of an ulp.
    kron = (
        effective_count * np.kron(feat_moment, grad_moment)
        + np.sqrt(effective_count * prior_precision)
        * (np.kron(feat_moment, np.eye(k)) + np.kron(np.eye(d), grad_moment))
        + prior_precision * np.eye(d * k)
    )
    frobenius_gap = float(np.linalg.norm(kron - full) / np.linalg.norm(full))

    if probe_features is None:
        probe_features = np.stack([np.asarray(h, dtype=float) for h, _, _ in history])
    probe_features = np.atleast_2d(np.asarray(probe_features, dtype=float))
    full_inv = np.linalg.inv(full)
    v_inv = np.linalg.inv(v)
    u_inv = np.linalg.inv(u)
    gaps = []
    for h in probe_features:
        basis = np.kron(h[:, None], np.eye(k))
        cov_exact = basis.T @ full_inv @ basis
        cov_kfac = float(h @ v_inv @ h) * u_inv
        gaps.append(np.linalg.norm(cov_kfac - cov_exact) / np.linalg.norm(cov_exact))
    return FidelityReport(
        frobenius_gap=frobenius_gap,
        predictive_gaps=np.asarray(gaps),
        kron=kron,
        full=full,
    )
