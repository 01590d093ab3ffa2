"""Objective and constraint callbacks for the outer optimizer.

``DesignProblem`` bundles the mesh, load, material, filter and constraint
settings.  Its two evaluators map a design vector to an
:class:`robusto.mma.Evaluation`:

* :meth:`DesignProblem.nominal` solves the state at the uniform defect
  field ``delta = 0.5`` (classical SIMP);
* :meth:`DesignProblem.robust` solves the barrier-smoothed worst case,
  warm-started from the previous call, and differentiates it by the
  adjoint method.

The volume constraint ``mean_v(rho_phys) - V <= 0`` acts on the filtered
field in both cases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import adjoint, filters
from .fem import FEModel, LoadCase, StructuredGrid, cantilever
from .inner import DefectConstraints, InnerSolution, nominal_compliance, solve_inner
from .material import MaterialParams
from .mma import Evaluation

logger = logging.getLogger(__name__)


@dataclass
class InnerSettings:
    mu_star: float = 1e-6
    kkt_tol: float = 1e-10
    max_newton: int = 100
    solver: str = "schur"


class DesignProblem:
    """Cantilever-type design problem on a structured grid.

    Parameters
    ----------
    grid, load, params
        Mesh, supports/loads and material.
    radius : float
        Filter radius in element widths.
    volfrac : float
        Allowed volume fraction of the filtered densities.
    D : float
        Defect budget; unused by the nominal evaluator.
    mean_norm : {"material", "domain"}
        Normalization of the defect mean constraint.
    """

    def __init__(self, grid: StructuredGrid, load: LoadCase, params: MaterialParams,
                 radius: float, volfrac: float = 0.5, D: float = 0.02, mean_norm="material",
                 inner: InnerSettings | None = None, method="direct"):
        self.grid = grid
        self.load = load
        self.params = params
        self.model = FEModel(grid, load, params, method)
        self.filter = filters.build(grid, radius)
        self.volfrac = volfrac
        self.D = D
        self.mean_norm = mean_norm
        self.inner = inner or InnerSettings()
        self.dg = adjoint.volume_gradient(self.filter, grid)
        self.last_inner: InnerSolution | None = None

    @classmethod
    def cantilever(cls, nx, ny, width=2.0, height=1.0, params=None, radius=None, **kw):
        grid = StructuredGrid.from_domain(nx, ny, width, height)
        radius = 7.0 * nx / 400.0 if radius is None else radius
        return cls(grid, cantilever(grid), params or MaterialParams(), radius, **kw)

    @property
    def n(self):
        return self.grid.n_elem

    @property
    def bounds(self):
        return self.params.rho_min, 1.0

    def physical(self, x):
        return np.clip(self.filter.apply(x), self.params.rho_min, 1.0)

    def volume(self, rho_phys):
        return float(self.grid.volumes @ rho_phys / self.grid.domain_volume)

    def constraints(self, rho_phys, D=None):
        return DefectConstraints.build(self.model, rho_phys, self.D if D is None else D,
                                       self.mean_norm)

    def nominal(self, x) -> Evaluation:
        rho = self.physical(x)
        u = self.model.solve(rho, 0.5)
        c = float(self.load.force @ u)
        grad = self.filter.chain_rule(adjoint.nominal_gradient_physical(self.model, u, rho))
        vol = self.volume(rho)
        info = {"worst_case_compliance": np.nan, "volume": vol, "inner_newton_iters": 0,
                "inner_kkt_residual": np.nan}
        return Evaluation(c, grad, vol - self.volfrac, self.dg.copy(), info)

    def solve_worst_case(self, rho_phys, D=None, warm_start=None, tol=None):
        cons = self.constraints(rho_phys, D)
        s = self.inner
        sol = solve_inner(self.model, rho_phys, cons, mu_star=s.mu_star, warm_start=warm_start,
                          tol=s.kkt_tol if tol is None else tol, max_newton=s.max_newton,
                          solver=s.solver)
        return sol, cons

    def robust(self, x) -> Evaluation:
        rho = self.physical(x)
        sol, cons = self.solve_worst_case(rho, warm_start=self.last_inner)
        self.last_inner = sol
        grad = adjoint.compliance_gradient(self.model, self.filter, sol, cons, rho)
        vol = self.volume(rho)
        info = {"worst_case_compliance": sol.compliance, "volume": vol,
                "inner_newton_iters": sol.newton_iters, "inner_kkt_residual": sol.kkt_residual_inf,
                "equilibrium_residual": sol.equilibrium_residual}
        return Evaluation(sol.compliance, grad, vol - self.volfrac, self.dg.copy(), info)

    def reference_compliance(self, rho_phys):
        """Compliance at the plain uniform defect field ``delta = 0.5``."""
        return nominal_compliance(self.model, rho_phys, 0.5)
