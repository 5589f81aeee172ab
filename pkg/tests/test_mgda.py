import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize

from scoredistill.mgda import pair_alpha, pareto_stationarity_gap, solve_mgda_n, solve_mgda_pair

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def grid_min_norm(g1, g2, n=1001):
    beta = np.linspace(0, 1, n)[:, None]
    return np.linalg.norm(beta * g1 + (1 - beta) * g2, axis=1).min()


def slsqp_min_norm(G):
    n = len(G)
    M = np.array(G) @ np.array(G).T
    res = minimize(
        lambda w: w @ M @ w,
        np.full(n, 1.0 / n),
        jac=lambda w: 2 * M @ w,
        bounds=[(0, 1)] * n,
        constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1}],
        method="SLSQP",
        options={"ftol": 1e-15, "maxiter": 500},
    )
    return np.sqrt(max(res.fun, 0.0))


def test_textbook_cases():
    # orthogonal unit vectors: midpoint
    a, a_hat, clamped = pair_alpha(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert a == pytest.approx(0.5) and not clamped
    # g1 shorter and aligned: all weight on g1
    a, a_hat, clamped = pair_alpha(np.array([1.0, 0.0]), np.array([3.0, 0.0]))
    assert a == 1.0 and a_hat > 1 and clamped
    # opposite vectors: zero is in the hull
    sol = solve_mgda_pair(np.array([2.0, 0.0]), np.array([-1.0, 0.0]))
    assert sol.norm == pytest.approx(0.0, abs=1e-15)
    assert sol.alpha == pytest.approx(1 / 3)


def test_degenerate_pairs():
    g = np.array([1.0, 2.0])
    a, a_hat, clamped = pair_alpha(g, g.copy())
    assert a == 0.5 and not clamped
    sol = solve_mgda_pair(np.zeros(3), np.zeros(3))
    assert sol.stationary and sol.norm == 0.0 and tuple(sol.weights) == (0.5, 0.5)
    with pytest.raises(ValueError):
        solve_mgda_pair(np.zeros(2), np.zeros(3))


@settings(max_examples=300, deadline=None)
@given(n=st.integers(1, 16).flatmap(lambda d: st.tuples(arrays(np.float64, d, elements=finite), arrays(np.float64, d, elements=finite))))
def test_pair_properties(n):
    g1, g2 = n
    sol = solve_mgda_pair(g1, g2)
    w = np.asarray(sol.weights)
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)
    assert sol.norm <= min(np.linalg.norm(g1), np.linalg.norm(g2)) + 1e-9
    assert sol.norm <= grid_min_norm(g1, g2) + 1e-9 * max(1.0, np.linalg.norm(g1), np.linalg.norm(g2))
    if not sol.stationary:
        d = sol.direction
        scale = max(1.0, np.linalg.norm(g1), np.linalg.norm(g2)) ** 2
        assert d @ g1 >= d @ d - 1e-9 * scale
        assert d @ g2 >= d @ d - 1e-9 * scale


def test_frank_wolfe_matches_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(300):
        d = int(rng.integers(2, 64))
        g1, g2 = rng.normal(size=d), rng.normal(size=d)
        if rng.random() < 0.3:
            g2 = g2 + 3 * g1
        fw = solve_mgda_n([g1, g2])
        cf = solve_mgda_pair(g1, g2)
        assert fw.norm == pytest.approx(cf.norm, abs=1e-6)
        np.testing.assert_allclose(fw.direction, cf.direction, atol=1e-5)


def test_frank_wolfe_matches_slsqp():
    rng = np.random.default_rng(1)
    for _ in range(60):
        n, d = int(rng.integers(2, 7)), int(rng.integers(2, 12))
        G = list(rng.normal(size=(n, d)) + rng.normal(size=d))
        sol = solve_mgda_n(G)
        assert np.all(sol.weights >= -1e-15) and sol.weights.sum() == pytest.approx(1.0)
        assert sol.norm <= slsqp_min_norm(G) + 1e-6
        assert pareto_stationarity_gap(G, sol.weights) == pytest.approx(sol.norm)


def test_n_objective_stationary_and_kkt():
    # three vectors at 120 degrees surround the origin
    G = [np.array([np.cos(a), np.sin(a)]) for a in (0, 2 * np.pi / 3, 4 * np.pi / 3)]
    sol = solve_mgda_n(G)
    assert sol.norm < 1e-5
    np.testing.assert_allclose(sol.weights, 1 / 3, atol=1e-4)
    # KKT: every gradient with positive weight has g.d == ||d||^2; the rest are >=
    rng = np.random.default_rng(4)
    G = list(rng.normal(size=(5, 3)) + np.array([2.0, 0, 0]))
    sol = solve_mgda_n(G)
    dd = sol.direction @ sol.direction
    for w, g in zip(sol.weights, G):
        assert g @ sol.direction >= dd - 1e-8
        if w > 1e-6:
            assert g @ sol.direction == pytest.approx(dd, abs=1e-7)


def test_single_gradient_and_errors():
    g = np.array([3.0, 4.0])
    sol = solve_mgda_n([g])
    assert sol.norm == pytest.approx(5.0) and sol.weights.tolist() == [1.0]
    with pytest.raises(ValueError):
        solve_mgda_n([])
    with pytest.raises(ValueError):
        solve_mgda_n([np.zeros(2), np.zeros(3)])
    with pytest.raises(ValueError):
        pareto_stationarity_gap([g, g], np.array([0.7, 0.7]))
