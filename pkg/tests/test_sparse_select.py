import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import Lasso

from filtermend.divergence import build_histogram
from filtermend.errors import CollinearityError, UnreconstructableError
from filtermend.sparse_select import (
    GramSystem,
    LambdaPath,
    LassoProblem,
    LassoSolution,
    kkt_violation,
    lambda_max,
    lambda_path,
    lasso,
    objective,
    ols_refit,
    refit_active,
    select_lambda,
    soft_threshold,
    weighted_lasso,
    write_path_csv,
)

from oracles import fista_weighted_lasso, random_instance


def test_soft_threshold():
    assert soft_threshold(3.0, 1.0) == 2.0
    assert soft_threshold(-3.0, 1.0) == -2.0
    assert soft_threshold(0.5, 1.0) == 0.0
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)


def test_problem_validation():
    X = np.ones((4, 2))
    with pytest.raises(ValueError):
        LassoProblem(X, np.ones(3), np.ones(2), 1.0)
    with pytest.raises(ValueError):
        LassoProblem(X, np.ones(4), np.array([1.0, 0.0]), 1.0)
    with pytest.raises(ValueError):
        LassoProblem(X, np.ones(4), np.ones(2), -1.0)
    with pytest.raises(ValueError):
        LassoProblem(X, np.array([1.0, np.nan, 0, 0]), np.ones(2), 1.0)


def test_matches_proximal_gradient_oracle(rng):
    worst = 0.0
    for _ in range(20):
        X, y = random_instance(rng)
        w = rng.uniform(0.1, 3.0, X.shape[1])
        prob = LassoProblem(X, y, w, 1.0)
        lam = lambda_max(prob.system, w) * rng.uniform(0.02, 0.6)
        prob.lam = lam
        sol = weighted_lasso(prob)
        beta, beta0 = fista_weighted_lasso(X, y, w, lam)
        worst = max(worst, np.max(np.abs(sol.beta - beta)), abs(sol.beta0 - beta0))
        assert sol.converged
        assert kkt_violation(prob.system, w, lam, sol.beta_std) <= 1e-6
    assert worst <= 1e-5


def test_plain_lasso_matches_sklearn(rng):
    for _ in range(10):
        X, y = random_instance(rng)
        n = X.shape[0]
        Z = (X - X.mean(0)) / X.std(0)
        sys_ = GramSystem.from_data(X, y)
        lam = lambda_max(sys_, np.ones(X.shape[1])) * rng.uniform(0.05, 0.5)
        ours = lasso(X, y, lam)
        ref = Lasso(alpha=lam / (2 * n), tol=1e-14, max_iter=1_000_000).fit(Z, y)
        assert np.max(np.abs(ours.beta_std - ref.coef_)) <= 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 20.0))
def test_equal_weights_rescale_lambda(seed, c):
    rng = np.random.default_rng(seed)
    X, y = random_instance(rng, (30, 80), (3, 12))
    sys_ = GramSystem.from_data(X, y)
    lam = lambda_max(sys_, np.ones(X.shape[1])) * 0.3
    a = weighted_lasso(LassoProblem(X, y, np.full(X.shape[1], c), lam, sys_))
    b = weighted_lasso(LassoProblem(X, y, np.ones(X.shape[1]), c * lam, sys_))
    assert np.max(np.abs(a.beta - b.beta)) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    X, y = random_instance(rng, (30, 80), (3, 10))
    w = rng.uniform(0.2, 2.0, X.shape[1])
    perm = rng.permutation(X.shape[1])
    lam = lambda_max(GramSystem.from_data(X, y), w) * 0.2
    a = weighted_lasso(LassoProblem(X, y, w, lam))
    b = weighted_lasso(LassoProblem(X[:, perm], y, w[perm], lam))
    assert np.max(np.abs(a.beta[perm] - b.beta)) <= 1e-6


def test_objective_monotone_and_debug_flag(rng, monkeypatch):
    monkeypatch.setenv("FILTERMEND_DEBUG", "1")
    X, y = random_instance(rng)
    w = rng.uniform(0.5, 2.0, X.shape[1])
    prob = LassoProblem(X, y, w, 1.0)
    prob.lam = lambda_max(prob.system, w) * 0.1
    sol = weighted_lasso(prob)
    assert np.all(np.diff(sol.objective_trace) <= 1e-10 * sol.objective_trace[0])
    # the trace's last value is the raw objective at the solution
    assert objective(X, y, sol.beta, sol.beta0, prob.lam, w) == pytest.approx(sol.objective_trace[-1], rel=1e-9)


def test_lambda_max_zeroes_everything(rng):
    X, y = random_instance(rng)
    w = rng.uniform(0.5, 2.0, X.shape[1])
    prob = LassoProblem(X, y, w, 0.0)
    prob.lam = lambda_max(prob.system, w)
    assert not weighted_lasso(prob).active_set
    prob.lam *= 0.99
    assert len(weighted_lasso(prob).active_set) == 1


def test_path_shape_and_ends(rng):
    X = rng.normal(size=(150, 5))
    y = X @ [1.0, -1.0, 0.5, 0.0, 2.0] + rng.normal(scale=0.1, size=150)
    path = lambda_path(X, y, np.ones(5), grid_size=50, ratio=1e-4)
    assert len(path) == 50
    assert np.all(np.diff(path.lambdas) < 0)
    assert path.solutions[0].active_set == ()
    ols = np.linalg.lstsq(np.column_stack([X, np.ones(150)]), y, rcond=None)[0]
    assert np.max(np.abs(path.solutions[-1].beta - ols[:5])) <= 1e-3


def test_doubling_weight_halves_entry_lambda():
    # orthogonal design: predictor j enters at 2 |c_j| / w_j
    X = np.array([[1, 1], [-1, 1], [1, -1], [-1, -1], [1, 1], [-1, 1], [1, -1], [-1, -1]], float)
    y = X @ [3.0, 1.0] + 0.25
    sys_ = GramSystem.from_data(X, y)

    def entry(w0):
        w = np.array([w0, 1.0])
        lo, hi = 0.0, lambda_max(sys_, w) * 4
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if weighted_lasso(LassoProblem(X, y, w, mid, sys_)).beta_std[0] != 0.0:
                lo = mid
            else:
                hi = mid
        return hi

    e1, e2 = entry(1.0), entry(2.0)
    assert e1 == pytest.approx(2 * abs(sys_.c[0]), rel=1e-9)
    assert e2 / e1 == pytest.approx(0.5, rel=1e-9)


def test_degenerate_response_gives_single_empty_solution():
    X = np.random.default_rng(0).normal(size=(20, 3))
    path = lambda_path(X, np.full(20, 4.0), np.ones(3))
    assert len(path) == 1 and path.solutions[0].active_set == ()
    assert path.solutions[0].beta0 == 4.0


def _solution(beta, beta0=0.0):
    beta = np.asarray(beta, float)
    return LassoSolution(beta, beta0, 0.0, tuple(np.flatnonzero(beta)), 1, True, beta)


def test_select_lambda_dominance_and_forced_choice(rng):
    X = rng.normal(size=(400, 2))
    y = X[:, 0]
    src_hist = build_histogram(y, np.linspace(-5, 5, 33))
    good, poor = _solution([1.0, 0.0]), _solution([0.2, 0.0])
    path = LambdaPath(np.array([3.0, 2.0, 1.0]), [_solution([0.0, 0.0]), poor, good])
    assert select_lambda(path, (X, y), X, src_hist, 0.1) == 2
    assert np.isinf(path.score[0])
    forced = LambdaPath(np.array([2.0, 1.0]), [_solution([0.0, 0.0]), poor])
    assert select_lambda(forced, (X, y), X, src_hist, 0.1) == 1
    empty = LambdaPath(np.array([1.0]), [_solution([0.0, 0.0])])
    with pytest.raises(UnreconstructableError):
        select_lambda(empty, (X, y), X, src_hist, 0.1)


def test_select_lambda_ties_go_to_larger_lambda(rng):
    X = rng.normal(size=(200, 2))
    y = X[:, 0]
    h = build_histogram(y, np.linspace(-5, 5, 17))
    s = _solution([1.0, 0.0])
    path = LambdaPath(np.array([2.0, 1.0]), [s, _solution([1.0, 0.0])])
    assert select_lambda(path, (X, y), X, h, 0.1) == 0


def test_select_lambda_identical_domains_reduces_to_mse(rng):
    X = rng.normal(size=(3000, 4))
    y = X @ [1.0, 0.5, 0.0, 0.0] + rng.normal(scale=0.3, size=3000)
    Xh, yh = X[2000:], y[2000:]
    path = lambda_path(X[:2000], y[:2000], np.ones(4), grid_size=20)
    h = build_histogram(y[:2000], np.linspace(y.min(), y.max(), 65))
    # target == source: a huge delta makes the divergence term a near-constant
    k = select_lambda(path, (Xh, yh), Xh, h, delta_l=1e9)
    mse = [np.inf if not s.active_set else np.mean((yh - s.predict(Xh)) ** 2) for s in path.solutions]
    assert k == int(np.argmin(mse))


def test_relaxed_selection_scores_refits(rng):
    X = rng.normal(size=(500, 3))
    y = X @ [2.0, 1.0, 0.0] + rng.normal(scale=0.1, size=500)
    path = lambda_path(X, y, np.ones(3), grid_size=10)
    h = build_histogram(y, np.linspace(y.min(), y.max(), 33))
    select_lambda(path, (X, y), X, h, 0.5, relaxed=True)
    for k, s in enumerate(path.solutions):
        if s.active_set:
            beta, beta0 = refit_active(path.system, s.active_set)
            mse = np.mean((y - X @ beta - beta0) ** 2)
            assert path.holdout_mse[k] == pytest.approx(mse, rel=1e-9)
    with pytest.raises(ValueError):
        select_lambda(LambdaPath(path.lambdas, path.solutions), (X, y), X, h, 0.5, relaxed=True)


def test_refit_active_matches_lstsq(rng):
    X = rng.normal(size=(100, 4)) * [1, 3, 0.5, 2] + 1.0
    y = X @ [1.0, -2.0, 0.0, 0.5] + 0.7 + rng.normal(scale=0.01, size=100)
    beta, beta0 = refit_active(GramSystem.from_data(X, y), (0, 1, 3))
    ref = np.linalg.lstsq(np.column_stack([X[:, [0, 1, 3]], np.ones(100)]), y, rcond=None)[0]
    np.testing.assert_allclose(beta[[0, 1, 3]], ref[:3], atol=1e-8)
    assert beta[2] == 0.0 and beta0 == pytest.approx(ref[3], abs=1e-8)


def test_ols_hand_instance():
    X = np.array([[1, 0], [0, 1], [1, 1], [2, 0], [0, 2], [1, 2]], float)
    y = 2 * X[:, 0] + 3 * X[:, 1] + 1
    coef, icpt = ols_refit(X, y)
    np.testing.assert_allclose(coef, [2.0, 3.0], atol=1e-9)
    assert icpt == pytest.approx(1.0, abs=1e-9)


def test_ols_exact_fit_and_orthogonality(rng):
    X = rng.normal(size=(60, 3))
    y = X @ [0.3, -1.0, 2.0] - 4.0
    coef, icpt = ols_refit(X, y)
    assert np.linalg.norm(y - X @ coef - icpt) <= 1e-8
    y2 = y + rng.normal(size=60)
    coef, icpt = ols_refit(X, y2)
    r = y2 - X @ coef - icpt
    Xc = X - X.mean(0)
    assert np.max(np.abs(Xc.T @ r)) <= 1e-6 * np.linalg.norm(Xc) * np.linalg.norm(y2)


def test_ols_rejects_degenerate_designs(rng):
    with pytest.raises(CollinearityError) as info:
        ols_refit(np.column_stack([rng.normal(size=10), np.full(10, 2.0)]), rng.normal(size=10))
    assert tuple(info.value.columns) == (1,)
    a = rng.normal(size=20)
    with pytest.raises(CollinearityError) as info:
        ols_refit(np.column_stack([a, rng.normal(size=20), 2 * a]), rng.normal(size=20))
    assert set(info.value.columns) >= {0, 2}
    with pytest.raises(ValueError):
        ols_refit(np.ones((2, 2)), np.ones(2))


def test_path_csv(rng, tmp_path):
    X = rng.normal(size=(300, 3))
    y = X[:, 0] + rng.normal(scale=0.1, size=300)
    path = lambda_path(X, y, np.ones(3), grid_size=6)
    select_lambda(path, (X, y), X, build_histogram(y, np.linspace(-4, 4, 17)), 0.2)
    write_path_csv(path, tmp_path / "p.csv")
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["lambda", "n_active", "holdout_mse", "recon_kl", "score"]
    assert len(rows) == 7 and rows[1][2] == "nan"
    assert len(rows[2][0].split(".")[1]) == 6


def test_cheap_self_copy_is_selected_alone(rng):
    X = rng.normal(size=(120, 6))
    y = X[:, 1] - X[:, 4] + rng.normal(size=120)
    X[:, 3] = y
    w = np.full(6, 1e3)
    w[3] = 1e-3
    prob = LassoProblem(X, y, w, 1.0)
    prob.lam = 1e-3 * lambda_max(prob.system, w)
    sol = weighted_lasso(prob)
    assert sol.active_set == (3,)
    assert sol.beta[3] == pytest.approx(1.0, abs=1e-2)
