import numpy as np
import pytest

from robusto import adjoint, filters, oracle
from robusto.fem import FEModel, LoadCase, StructuredGrid, cantilever
from robusto.inner import DefectConstraints, KKTSystem, solve_inner
from robusto.material import MaterialParams


def setup(nx, ny, params=MaterialParams(), radius=1.5, mean_norm="material", seed=0):
    g = StructuredGrid.from_domain(nx, ny, 2.0, 1.0)
    m = FEModel(g, cantilever(g), params)
    filt = filters.build(g, radius)
    x = np.random.default_rng(seed).uniform(0.3, 1.0, g.n_elem)
    return m, filt, x


def worst_case(m, filt, x, D=0.02, mean_norm="material", tol=1e-12):
    rho = filt.apply(x)
    cons = DefectConstraints.build(m, rho, D, mean_norm)
    return solve_inner(m, rho, cons, tol=tol), cons, rho


@pytest.mark.parametrize("mean_norm", ["material", "domain"])
def test_gradient_matches_central_differences(mean_norm):
    m, filt, x = setup(4, 2)
    if mean_norm == "domain":
        x = np.random.default_rng(1).uniform(0.97, 1.0, 8)
    sol, cons, rho = worst_case(m, filt, x, mean_norm=mean_norm)
    grad = adjoint.compliance_gradient(m, filt, sol, cons, rho)
    probes = np.arange(8)
    fd = oracle.fd_gradient(lambda z: worst_case(m, filt, z, mean_norm=mean_norm)[0].compliance,
                            x, probes, 1e-6)
    assert np.max(np.abs(grad - fd) / np.abs(fd)) < 1e-5


def test_fd_step_sweep_has_small_minimum():
    m, filt, x = setup(4, 2, seed=2)
    sol, cons, rho = worst_case(m, filt, x)
    grad = adjoint.compliance_gradient(m, filt, sol, cons, rho)
    probes = [0, 3, 5]

    def J(z):
        return worst_case(m, filt, z)[0].compliance

    errors = [np.max(np.abs(oracle.fd_gradient(J, x, probes, h) - grad[probes]) /
                     np.abs(grad[probes])) for h in (1e-5, 1e-6, 1e-7)]
    assert min(errors) < 1e-5


def test_no_fluctuation_reduces_to_simp_gradient():
    flat = MaterialParams(E0=1.0, ED=1.0)
    m, filt, x = setup(8, 4, params=flat)
    sol, cons, rho = worst_case(m, filt, x)
    grad = adjoint.compliance_gradient(m, filt, sol, cons, rho)
    u = m.solve(rho, 0.5)
    simp = filt.chain_rule(-flat.p * rho ** (flat.p - 1) * flat.E0 * m.unit_energies(u))
    np.testing.assert_allclose(grad, simp, rtol=1e-8)


def test_symmetric_gradient_for_symmetric_problem():
    g = StructuredGrid(6, 4)
    force = np.zeros(g.n_dofs)
    left, right = g.node(0, np.arange(5)), g.node(6, np.arange(5))
    force[2 * g.node(6, 2)] = 1.0        # axial pull at the right mid-node
    load = LoadCase(np.concatenate([2 * left, 2 * left + 1]), force)
    m = FEModel(g, load, MaterialParams())
    filt = filters.build(g, 1.5)
    x = np.full(g.n_elem, 0.6)
    rho = filt.apply(x)
    cons = DefectConstraints.build(m, rho, 0.02)
    sol = solve_inner(m, rho, cons, tol=1e-12)
    grad = adjoint.compliance_gradient(m, filt, sol, cons, rho)
    img = g.to_image(grad)
    np.testing.assert_allclose(img, img[::-1], rtol=1e-9, atol=1e-9 * np.abs(img).max())


def test_adjoint_system_residual():
    m, filt, x = setup(4, 2, seed=3)
    sol, cons, rho = worst_case(m, filt, x)
    kkt = KKTSystem(m, cons, sol.delta, sol.u[m.load.free_dofs], [sol.lam_mean, sol.lam_var],
                    sol.mu, delta_c=sol.delta_c)
    w = np.concatenate(kkt.solve(m.f, np.zeros(8), np.zeros(2)))
    A = kkt.matrix()
    rhs = np.concatenate([m.f, np.zeros(10)])
    assert abs(A - A.T).max() == 0.0
    assert np.linalg.norm(A.T @ w - rhs) <= 1e-8 * np.linalg.norm(rhs)


def test_first_order_taylor_slope():
    m, filt, x = setup(6, 3, seed=4)
    sol, cons, rho = worst_case(m, filt, x)
    J0 = sol.compliance
    grad = adjoint.compliance_gradient(m, filt, sol, cons, rho)
    d = np.random.default_rng(5).standard_normal(x.size)
    hs = np.array([4e-3, 2e-3, 1e-3, 5e-4])
    rem = [abs(worst_case(m, filt, x + h * d)[0].compliance - J0 - h * grad @ d) for h in hs]
    slope = np.polyfit(np.log(hs), np.log(rem), 1)[0]
    assert 1.8 <= slope <= 2.2


def test_volume_gradient():
    g = StructuredGrid(5, 4)
    ident = filters.build(g, 0.5)
    np.testing.assert_allclose(adjoint.volume_gradient(ident, g), np.full(20, 1 / 20), rtol=1e-15)
    filt = filters.build(g, 2.2)
    gv = adjoint.volume_gradient(filt, g)
    assert gv.sum() == pytest.approx(1.0, abs=1e-12)
    rng = np.random.default_rng(6)
    x, dx = rng.uniform(0.2, 1, 20), rng.standard_normal(20)

    def vol(z):
        return g.volumes @ filt.apply(z) / g.domain_volume

    h = 1e-3
    assert (vol(x + h * dx) - vol(x - h * dx)) / (2 * h) == pytest.approx(gv @ dx, abs=1e-10)


def test_unconverged_solution_is_rejected():
    m, filt, x = setup(4, 2)
    sol, cons, rho = worst_case(m, filt, x)
    sol.kkt_residual_inf = 1e-3
    with pytest.raises(adjoint.SensitivityError):
        adjoint.compliance_gradient(m, filt, sol, cons, rho)
