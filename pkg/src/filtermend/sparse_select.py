"""KL-weighted Lasso by coordinate descent, regularization paths, lambda choice, OLS refit.

The objective is the unnormalised squared-error sum plus a weighted L1 term,

    sum_i (y_i - b0 - x_i . b)^2 + lam * sum_j w_j |b~_j|

where ``b~_j = b_j * scale_j`` is the coefficient of the standardized
predictor (zero mean, unit population variance).  The solver works on the
Gram matrix of the standardized predictors, so one ``p x p`` system serves
every response column drawn from the same rows.
"""
import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .divergence import build_histogram, kl_divergence
from .errors import CollinearityError, UnreconstructableError

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-3
DEFAULT_TOL = 1e-7
DEFAULT_MAX_SWEEPS = 10000
DEFAULT_KKT_TOL = 1e-6
OLS_JITTER = 1e-10


def soft_threshold(z, gamma):
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return float(np.sign(z) * max(abs(z) - gamma, 0.0))


def kl_weights(kl_scores, floor=WEIGHT_FLOOR):
    return np.maximum(np.asarray(kl_scores, dtype=np.float64), floor)


def _debug_enabled():
    return os.environ.get("FILTERMEND_DEBUG", "0") not in ("0", "", "false")


@dataclass(eq=False)
class GramSystem:
    """Sufficient statistics of a centered, standardized least-squares problem."""

    n: int
    mean: np.ndarray
    scale: np.ndarray
    gram: np.ndarray
    c: np.ndarray
    yy: float
    ybar: float

    @classmethod
    def from_data(cls, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        mean, scale, Xs = standardize(X)
        yc = y - y.mean()
        return cls(X.shape[0], mean, scale, Xs.T @ Xs, Xs.T @ yc, float(yc @ yc), float(y.mean()))

    @classmethod
    def shared(cls, X):
        """System with no response yet; pair with :meth:`for_column`."""
        X = np.asarray(X, dtype=np.float64)
        mean, scale, Xs = standardize(X)
        p = X.shape[1]
        return cls(X.shape[0], mean, scale, Xs.T @ Xs, np.zeros(p), 0.0, 0.0)

    def for_column(self, l):
        """Response = predictor column ``l`` itself, reusing the Gram matrix."""
        s = self.scale[l]
        return GramSystem(
            self.n, self.mean, self.scale, self.gram, self.gram[:, l] * s, float(self.gram[l, l] * s * s),
            float(self.mean[l]),
        )

    def restrict(self, columns):
        """Keep only the listed predictor columns (response unchanged)."""
        idx = np.asarray(columns, dtype=np.intp)
        return GramSystem(
            self.n, self.mean[idx], self.scale[idx], self.gram[np.ix_(idx, idx)], self.c[idx], self.yy, self.ybar
        )


def standardize(X):
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    safe = np.where(scale > 0, scale, 1.0)
    Xs = (X - mean) / safe
    Xs[:, scale == 0] = 0.0
    return mean, scale, Xs


@dataclass(eq=False)
class LassoProblem:
    X: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    lam: float
    system: GramSystem = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if self.X.ndim != 2 or self.X.shape[0] < 1 or self.X.shape[1] < 1:
            raise ValueError("X must be a non-empty n x p matrix")
        if self.y.shape[0] != self.X.shape[0]:
            raise ValueError("y length does not match the rows of X")
        if self.weights.shape[0] != self.X.shape[1]:
            raise ValueError("need one weight per predictor")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.weights))):
            raise ValueError("non-finite values in the Lasso problem")
        if np.any(self.weights <= 0):
            raise ValueError("all penalty weights must be positive")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError("lambda must be finite and non-negative")
        if self.system is None:
            self.system = GramSystem.from_data(self.X, self.y)

    @property
    def standardized(self):
        safe = np.where(self.system.scale > 0, self.system.scale, 1.0)
        Xs = (self.X - self.system.mean) / safe
        Xs[:, self.system.scale == 0] = 0.0
        return Xs


@dataclass(eq=False)
class LassoSolution:
    beta: np.ndarray
    beta0: float
    lam: float
    active_set: tuple
    iterations: int
    converged: bool
    beta_std: np.ndarray = field(repr=False, default=None)
    objective_trace: np.ndarray = field(repr=False, default=None)

    def predict(self, X):
        return np.asarray(X, dtype=np.float64) @ self.beta + self.beta0


def objective(X, y, beta, beta0, lam, weights):
    """Raw-scale objective; the penalty acts on standardized coefficients."""
    X = np.asarray(X, dtype=np.float64)
    r = np.asarray(y, dtype=np.float64) - beta0 - X @ beta
    scale = X.std(axis=0)
    return float(r @ r + lam * np.sum(np.asarray(weights) * np.abs(beta) * scale))


def _destandardize(system, beta_std):
    safe = np.where(system.scale > 0, system.scale, 1.0)
    beta = np.where(system.scale > 0, beta_std / safe, 0.0)
    beta0 = system.ybar - float(system.mean @ beta)
    return beta, beta0


def solve_system(system, weights, lam, beta_init=None, tol=DEFAULT_TOL, max_sweeps=DEFAULT_MAX_SWEEPS,
                 kkt_tol=DEFAULT_KKT_TOL):
    p = system.c.shape[0]
    start = np.zeros(p) if beta_init is None else np.asarray(beta_init, dtype=np.float64)
    beta_std, sweeps, converged, trace = kernels.cd_solve(
        system.gram, system.c, np.asarray(weights, dtype=np.float64), float(lam), start, system.yy,
        int(max_sweeps), float(tol), float(kkt_tol),
    )
    if _debug_enabled() and trace.size > 1:
        slack = 1e-10 * max(1.0, abs(trace[0]))
        assert np.all(np.diff(trace) <= slack), "objective increased during a coordinate-descent sweep"
    if not converged:
        log.warning("coordinate descent hit %d sweeps without converging at lambda=%g", sweeps, lam)
    beta, beta0 = _destandardize(system, beta_std)
    active = tuple(int(j) for j in np.flatnonzero(beta_std))
    return LassoSolution(beta, beta0, float(lam), active, int(sweeps), bool(converged), beta_std, trace)


def weighted_lasso(problem, beta_init=None, tol=DEFAULT_TOL, max_sweeps=DEFAULT_MAX_SWEEPS,
                   kkt_tol=DEFAULT_KKT_TOL):
    """Minimise the weighted Lasso objective by cyclic coordinate descent.

    ``beta_init`` is a warm start in standardized units.
    """
    return solve_system(problem.system, problem.weights, problem.lam, beta_init, tol, max_sweeps, kkt_tol)


def lasso(X, y, lam, **kwargs):
    """Plain (unit-weight) Lasso."""
    X = np.asarray(X, dtype=np.float64)
    return weighted_lasso(LassoProblem(X, y, np.ones(X.shape[1]), lam), **kwargs)


def kkt_violation(system, weights, lam, beta_std):
    """Largest KKT residual of a standardized-space solution (0 means optimal)."""
    g2 = 2.0 * (system.c - system.gram @ beta_std)
    thresh = lam * np.asarray(weights)
    zero = beta_std == 0
    v_zero = np.maximum(np.abs(g2[zero]) - thresh[zero], 0.0)
    v_act = np.abs(g2[~zero] - thresh[~zero] * np.sign(beta_std[~zero]))
    return float(max(v_zero.max(initial=0.0), v_act.max(initial=0.0)))


def lambda_max(system, weights):
    return float(np.max(np.abs(2.0 * system.c) / np.asarray(weights)))


@dataclass(eq=False)
class LambdaPath:
    lambdas: np.ndarray
    solutions: list
    holdout_mse: np.ndarray = None
    recon_kl: np.ndarray = None
    score: np.ndarray = None
    system: GramSystem = field(default=None, repr=False)

    def __len__(self):
        return len(self.solutions)


def lambda_path(X, y, weights, grid_size=50, ratio=1e-3, system=None, **solver_kw):
    """Warm-started solutions on a log-spaced grid from lambda_max down to ratio * lambda_max."""
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    if system is None:
        system = GramSystem.from_data(X, y)
    weights = np.asarray(weights, dtype=np.float64)
    p = system.c.shape[0]
    if system.yy <= 0.0 or not np.any(system.c):
        beta, beta0 = _destandardize(system, np.zeros(p))
        sol = LassoSolution(beta, beta0, 0.0, (), 0, True, np.zeros(p), np.array([system.yy]))
        return LambdaPath(np.array([0.0]), [sol], system=system)
    lmax = lambda_max(system, weights)
    lambdas = np.geomspace(lmax, lmax * ratio, int(grid_size))
    solutions = []
    warm = np.zeros(p)
    for lam in lambdas:
        sol = solve_system(system, weights, lam, warm, **solver_kw)
        warm = sol.beta_std
        solutions.append(sol)
    return LambdaPath(lambdas, solutions, system=system)


def refit_active(system, active, jitter=OLS_JITTER):
    """Least-squares refit restricted to ``active``, solved from the Gram statistics.

    Returns raw-scale ``(beta, beta0)`` over all predictors, zero off the set.
    """
    idx = np.asarray(active, dtype=np.intp)
    g = system.gram[np.ix_(idx, idx)].copy()
    g[np.diag_indices(idx.size)] += jitter
    beta_std = np.zeros(system.c.shape[0])
    beta_std[idx] = np.linalg.solve(g, system.c[idx])
    return _destandardize(system, beta_std)


def select_lambda(path, source_holdout, target_samples, source_hist, delta_l, weight_floor=WEIGHT_FLOOR,
                  smoothing=1.0, predictors=None, relaxed=False):
    """Index of the grid point minimising holdout error plus reconstruction divergence.

    ``err = MSE(holdout) / var(y_holdout)`` and
    ``div = KL(hist(target predictions) || source_hist) / max(delta_l, floor)``.
    Points with an empty active set are skipped; ties go to the larger lambda.
    ``predictors`` optionally maps path coefficients to columns of the inputs.
    With ``relaxed`` each active set is scored by its least-squares refit (the
    reconstruction that is actually deployed) instead of the shrunken fit.
    """
    X_h, y_h = source_holdout
    X_h = np.asarray(X_h, dtype=np.float64)
    y_h = np.asarray(y_h, dtype=np.float64).ravel()
    X_t = np.asarray(target_samples, dtype=np.float64)
    if y_h.size == 0:
        raise ValueError("holdout set is empty")
    if X_t.shape[0] == 0:
        raise ValueError("no target samples")
    if predictors is not None:
        X_h = X_h[:, predictors]
        X_t = X_t[:, predictors]
    var = float(np.var(y_h))
    if var <= 0:
        var = 1.0
    denom = max(float(delta_l), weight_floor)
    m = len(path)
    mse = np.full(m, np.nan)
    kls = np.full(m, np.nan)
    score = np.full(m, np.inf)
    if relaxed and path.system is None:
        raise ValueError("relaxed selection needs a path that carries its Gram system")
    refits = {}
    for k, sol in enumerate(path.solutions):
        if not sol.active_set:
            continue
        if relaxed:
            if sol.active_set not in refits:
                refits[sol.active_set] = refit_active(path.system, sol.active_set)
            beta, beta0 = refits[sol.active_set]
            pred_h, pred_t = X_h @ beta + beta0, X_t @ beta + beta0
        else:
            pred_h, pred_t = sol.predict(X_h), sol.predict(X_t)
        resid = y_h - pred_h
        mse[k] = float(resid @ resid) / y_h.size
        recon = build_histogram(pred_t, source_hist.bin_edges, smoothing)
        kls[k] = kl_divergence(recon, source_hist)
        score[k] = mse[k] / var + kls[k] / denom
    path.holdout_mse, path.recon_kl, path.score = mse, kls, score
    if not np.any(np.isfinite(score)):
        raise UnreconstructableError("filter unreconstructable at this grid: every active set is empty")
    return int(np.argmin(score))


def _collinear_columns(Xc):
    norms = np.sqrt(np.sum(Xc * Xc, axis=0))
    scale = max(float(norms.max()), 1.0)
    flat = np.flatnonzero(norms <= 1e-12 * scale)
    if flat.size:
        return [int(j) for j in flat]
    Z = Xc / norms
    evals, evecs = np.linalg.eigh(Z.T @ Z)
    small = evals < 1e-10 * max(float(evals.max()), 1.0)
    if not np.any(small):
        return []
    involved = np.any(np.abs(evecs[:, small]) > 1e-3, axis=1)
    return [int(j) for j in np.flatnonzero(involved)]


def ols_refit(X_selected, y, jitter=OLS_JITTER):
    """Least squares with intercept via jittered normal equations.

    Returns ``(coefficients, intercept)``.
    """
    X = np.asarray(X_selected, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    n, k = X.shape
    if k < 1:
        raise ValueError("need at least one selected predictor")
    if n <= k:
        raise ValueError(f"need more rows than predictors (n={n}, k={k})")
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    bad = _collinear_columns(Xc)
    if bad:
        raise CollinearityError(f"selected columns {bad} are collinear (with each other or the intercept)", bad)
    gram = Xc.T @ Xc
    gram[np.diag_indices(k)] += jitter
    coef = np.linalg.solve(gram, Xc.T @ (y - ym))
    return coef, float(ym - xm @ coef)


def write_path_csv(path, fh_or_path):
    own = isinstance(fh_or_path, (str, os.PathLike))
    fh = open(fh_or_path, "w", newline="") if own else fh_or_path
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lambda", "n_active", "holdout_mse", "recon_kl", "score"])
        for k, sol in enumerate(path.solutions):
            def fmt(arr):
                return "nan" if arr is None or not np.isfinite(arr[k]) else f"{arr[k]:.6f}"

            writer.writerow([f"{path.lambdas[k]:.6f}", len(sol.active_set), fmt(path.holdout_mse),
                             fmt(path.recon_kl), fmt(path.score)])
    finally:
        if own:
            fh.close()
