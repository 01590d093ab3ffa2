"""Design sensitivities of the worst-case compliance.

The outer objective ``J = f.u`` depends on the densities only through the
solution ``z = (u, delta, lam_mean, lam_var)`` of the inner optimality
system ``R(z; rho) = 0``.  Implicit differentiation gives::

    dJ/drho = -w . dR/drho,    with   (dR/dz)^T w = dJ/dz = (f, 0, 0, 0).

The inner objective value is not ``J`` (barrier terms and the doubled
potential energy differ), so the envelope theorem does not apply and the
full adjoint solve is required.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import FEModel, StructuredGrid
from .filters import FilterOperator
from .inner import DefectConstraints, InnerSolution, KKTSystem
from .material import effective_modulus, simp_scale_derivative


class SensitivityError(RuntimeError):
    pass


@dataclass
class SensitivityReport:
    grad_compliance: np.ndarray
    grad_volume: np.ndarray
    fd_check: dict | None = field(default=None)


def compliance_gradient_physical(model: FEModel, sol: InnerSolution, constraints: DefectConstraints,
                                 rho_phys, converged_tol=1e-8):
    """Gradient of ``f.u`` with respect to the physical (filtered) densities."""
    if not sol.kkt_residual_inf <= converged_tol:
        raise SensitivityError(
            f"inner solution not converged (KKT residual {sol.kkt_residual_inf:.3e})")
    free = model.load.free_dofs
    # Exact Jacobian: no primal-dual bound multipliers.
    kkt = KKTSystem(model, constraints, sol.delta, sol.u[free], [sol.lam_mean, sol.lam_var],
                    sol.mu, delta_c=sol.delta_c)
    n = constraints.n
    w_u, w_d, w_l = kkt.solve(model.f, np.zeros(n), np.zeros(2))
    if not (np.all(np.isfinite(w_u)) and np.all(np.isfinite(w_d))):
        raise SensitivityError("adjoint system is singular")

    p = model.params
    ds = simp_scale_derivative(rho_phys, p)
    E = effective_modulus(sol.delta, p)
    w_e = model.smap.element_values(w_u)
    grad = 2.0 * ds * E * np.einsum("ei,ei->e", w_e, kkt.Ku_e)
    grad += w_d * ds * kkt.dE * kkt.qbar

    # Mean-constraint weights a_k = v_k s_k / W_norm depend on rho; with the
    # material normalization W_norm couples all elements (rank-one term).
    x = sol.lam_mean * w_d + w_l[0] * sol.delta
    coupled = x - (constraints.a @ x if constraints.mean_norm == "material" else 0.0)
    grad += ds * constraints.volumes / constraints.w_norm * coupled
    return -grad


def compliance_gradient(model: FEModel, filt: FilterOperator, sol: InnerSolution,
                        constraints: DefectConstraints, rho_phys):
    """Gradient of the worst-case compliance with respect to design densities."""
    return filt.chain_rule(compliance_gradient_physical(model, sol, constraints, rho_phys))


def nominal_gradient_physical(model: FEModel, u, rho_phys, delta=0.5):
    """Classical SIMP sensitivity ``-p rho^(p-1) E(delta) u_e.Kbar.u_e`` at fixed defects."""
    p = model.params
    return -simp_scale_derivative(rho_phys, p) * effective_modulus(delta, p) * model.unit_energies(u)


def volume_gradient(filt: FilterOperator, grid: StructuredGrid):
    """Gradient of ``sum(v * rho_phys) / |Omega|`` with respect to design densities."""
    return filt.chain_rule(grid.volumes / grid.domain_volume)
