import numpy as np
import pytest

from robusto import mma, oracle
from robusto.material import MaterialParams
from robusto.pipeline import DesignProblem


def quadratic(x):
    return mma.Evaluation(float(x @ x), 2 * x, float(1 - x.sum()), -np.ones(2))


def test_first_asymptotes():
    s = mma.update_asymptotes(mma.MmaState(np.array([0.5]), 0.001, 1.0))
    assert s.low[0] == pytest.approx(0.5 - 0.4995, abs=1e-15)
    assert s.upp[0] == pytest.approx(0.5 + 0.4995, abs=1e-15)
    assert np.all(s.low < s.x) and np.all(s.x < s.upp)


def test_asymptote_expansion_and_contraction():
    cfg = mma.MmaConfig()
    s = mma.MmaState(np.array([0.50, 0.50]), 0.0, 1.0)
    s.xold2, s.xold1 = np.array([0.40, 0.40]), np.array([0.45, 0.55])
    s.x = np.array([0.50, 0.50])
    s.low, s.upp = s.xold1 - 0.1, s.xold1 + 0.1
    s.iteration = 2
    mma.update_asymptotes(s, cfg)
    # Coordinate 0 moved monotonically (gap x1.2); coordinate 1 reversed (gap x0.7).
    np.testing.assert_allclose(s.x - s.low, [0.12, 0.07], rtol=1e-12)
    np.testing.assert_allclose(s.upp - s.x, [0.12, 0.07], rtol=1e-12)


def test_asymptote_clamp():
    s = mma.MmaState(np.array([0.5]), 0.0, 1.0)
    s.xold2, s.xold1, s.x = np.array([0.3]), np.array([0.4]), np.array([0.5])
    s.low, s.upp = np.array([-100.0]), np.array([100.0])
    s.iteration = 5
    mma.update_asymptotes(s)
    assert s.x[0] - s.low[0] == pytest.approx(10.0)
    s.xold2, s.xold1 = np.array([0.6]), np.array([0.4])
    s.low, s.upp = s.xold1 - 1e-6, s.xold1 + 1e-6
    mma.update_asymptotes(s)
    assert s.upp[0] - s.x[0] == pytest.approx(0.01)


def test_zero_gradient_keeps_point():
    x = np.array([0.3, 0.6, 0.9])
    low, upp = x - 0.5, x + 0.5
    xn, info = mma.solve_subproblem(x, np.zeros(3), -1.0, np.ones(3) / 3, low, upp, 0.0, 1.0)
    np.testing.assert_allclose(xn, x, atol=1e-14)
    assert info.lam == 0.0


def test_subproblem_contracts():
    rng = np.random.default_rng(0)
    n = 50
    x = rng.uniform(0.1, 0.9, n)
    dv = np.full(n, 1 / n)
    g = x.mean() - 0.5
    grad = -rng.uniform(0.5, 2, n)
    low, upp = x - 0.3, x + 0.3
    xn, info = mma.solve_subproblem(x, grad, g, dv, low, upp, 0.01, 1.0, move_limit=0.2)
    assert info.bracket_ok
    assert np.max(np.abs(xn - x)) <= 0.2 + 1e-15
    assert np.all(xn >= 0.01) and np.all(xn <= 1.0)
    # Feasible for the linearized volume constraint.
    assert g + dv @ (xn - x) <= 1e-6
    # Monotone approximate constraint in the multiplier (bisection is valid).
    lams = np.geomspace(1e-3, 1e3, 40)
    vals = []
    for lam in lams:
        ux, xl = upp - x, x - low
        p0, q0 = mma._approx_terms(grad, ux, xl, 0.99, 1e-5)
        p1, q1 = mma._approx_terms(dv, ux, xl, 0.99, 1e-5)
        y = (np.sqrt(p0 + lam * p1) * low + np.sqrt(q0 + lam * q1) * upp) / (
            np.sqrt(p0 + lam * p1) + np.sqrt(q0 + lam * q1))
        y = np.clip(y, np.maximum.reduce([np.full(n, 0.01), low + 0.1 * xl, x - 0.2]),
                    np.minimum.reduce([np.ones(n), upp - 0.1 * ux, x + 0.2]))
        vals.append(np.sum(p1 / (upp - y) + q1 / (y - low)))
    assert np.all(np.diff(vals) <= 1e-12)


@pytest.mark.parametrize("x0", [[0.9, 0.2], [1.0, 1.0], [0.3, 0.8]])
def test_two_variable_problem(x0):
    x, hist = mma.run(quadratic, np.array(x0), 0.0, 1.0, mma.MmaConfig(change_tol=1e-5))
    np.testing.assert_allclose(x, [0.5, 0.5], atol=1e-4)
    assert len(hist) - 1 <= 30
    assert all(np.isfinite(r["objective"]) for r in hist)


def test_conservative_mode_converges():
    x, hist = mma.run(quadratic, np.array([0.9, 0.2]), 0.0, 1.0,
                      mma.MmaConfig(change_tol=1e-5, conservative=True))
    np.testing.assert_allclose(x, [0.5, 0.5], atol=1e-4)


def test_converged_start_stops_quickly():
    x, hist = mma.run(quadratic, np.array([0.5, 0.5]), 0.0, 1.0)
    assert len(hist) - 1 <= 2


def test_zero_iterations_returns_start():
    x0 = np.array([0.2, 0.7])
    x, hist = mma.run(quadratic, x0, 0.0, 1.0, mma.MmaConfig(max_iters=0))
    assert np.array_equal(x, x0) and len(hist) == 1


def test_callback_errors_carry_iteration():
    calls = []

    def bad(x):
        calls.append(1)
        if len(calls) > 2:
            raise RuntimeError("boom")
        return quadratic(x)

    with pytest.raises(mma.MmaError, match="iteration 2"):
        mma.run(bad, np.array([0.9, 0.2]), 0.0, 1.0)


def test_simp_cantilever_60x30():
    P = DesignProblem.cantilever(60, 30, params=MaterialParams(E0=1.0, ED=1.0))
    x, hist = mma.run(P.nominal, np.full(P.n, 0.5), *P.bounds)
    obj = np.array([r["objective"] for r in hist])
    assert np.all(np.diff(obj[3:]) <= 1e-9 * obj[3:-1])
    assert abs(hist[-1]["volume"] - 0.5) <= 1e-4
    for rec in hist[1:]:
        assert rec["volume"] <= 0.5 + 1e-6
    ref = oracle.nominal_simp(60, 30, params=MaterialParams(E0=1.0, ED=1.0))
    assert abs(obj[-1] - ref.compliance) / ref.compliance < 0.05
