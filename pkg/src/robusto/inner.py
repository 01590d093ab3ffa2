"""Worst-case defect distribution for a fixed design.

For densities ``rho`` the adversary picks defects ``delta`` that maximize the
compliance.  Written with the principle of minimum potential energy this is
the joint minimization over ``(delta, u)`` of::

    -2 f.u + sum_e rho_e^p E(delta_e) u_e.Kbar.u_e
        - mu * sum_e (log delta_e + log(1 - delta_e))

subject to a weighted mean and a weighted variance equality on ``delta``.
The log-barrier removes the box constraints, so the optimality system is a
smooth set of equations.  It is solved by damped Newton; the same (symmetric)
Jacobian is reused by the adjoint in :mod:`robusto.adjoint`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import FEModel, SolverError, center_translation
from .material import check_rho, effective_modulus, effective_modulus_derivatives, simp_scale

logger = logging.getLogger(__name__)

FRACTION_TO_BOUNDARY = 0.995
WARM_CLAMP = 1e-4


class InfeasibleBudgetError(ValueError):
    """The mean and variance equalities admit no point strictly inside the box."""


class InnerSolverError(RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass
class DefectConstraints:
    """Mean and variance equalities on the defect field.

    ``sum(a * delta) = mean_target`` with ``a = v * rho^p / W_norm`` and
    ``sum(b * (delta - 0.5)**2) = D`` with ``b = v / |Omega|``.

    ``mean_norm="material"`` sets ``W_norm = sum(v * rho^p)`` (a weighted
    mean over the effective material); ``"domain"`` uses ``|Omega|``.
    """

    volumes: np.ndarray
    simp: np.ndarray
    D: float
    mean_norm: str = "material"
    mean_target: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.D < 0.25:
            raise InfeasibleBudgetError(f"defect budget D must lie in (0, 0.25), got {self.D}")
        if self.mean_norm not in ("material", "domain"):
            raise ValueError(f"mean_norm must be 'material' or 'domain', got {self.mean_norm!r}")

    @classmethod
    def build(cls, model: FEModel, rho_phys, D, mean_norm="material"):
        simp = check_rho(rho_phys, model.params) ** model.params.p
        return cls(model.grid.volumes, simp, float(D), mean_norm)

    @property
    def n(self):
        return self.volumes.size

    @property
    def domain_volume(self):
        return float(self.volumes.sum())

    @property
    def w_norm(self):
        if self.mean_norm == "material":
            return float(self.volumes @ self.simp)
        return self.domain_volume

    @property
    def a(self):
        return self.volumes * self.simp / self.w_norm

    @property
    def b(self):
        return self.volumes / self.domain_volume

    def residuals(self, delta):
        return np.array([
            self.a @ delta - self.mean_target,
            self.b @ (delta - 0.5) ** 2 - self.D,
        ])


def project_feasible(constraints: DefectConstraints, pattern):
    """Return ``0.5 + c + alpha * pattern`` satisfying both equalities.

    The offset ``c`` is fixed by the mean constraint as a linear function of
    ``alpha``; the variance constraint is then a quadratic in ``alpha`` whose
    largest root is taken.
    """
    a, b, D = constraints.a, constraints.b, constraints.D
    s = np.asarray(pattern, dtype=float)
    A = a.sum()
    c0 = (constraints.mean_target - 0.5 * A) / A
    k = (a @ s) / A
    t = s - k
    qa, qb, qc = b @ t**2, 2.0 * c0 * (b @ t), c0**2 * b.sum() - D
    if qa <= 1e-300:
        raise InfeasibleBudgetError("defect pattern cannot carry any variance at the required mean")
    disc = qb**2 - 4.0 * qa * qc
    if disc < 0.0:
        raise InfeasibleBudgetError("variance equality unreachable at the required mean")
    alpha = (-qb + np.sqrt(disc)) / (2.0 * qa)
    delta = 0.5 + c0 + alpha * t
    if np.any(delta <= 0.0) or np.any(delta >= 1.0):
        raise InfeasibleBudgetError(
            f"feasible start leaves the box: delta in [{delta.min():.4g}, {delta.max():.4g}]")
    return delta


def initialize_feasible(constraints: DefectConstraints, energies=None):
    """Strictly interior defect field from a +-1 pattern.

    With ``energies`` the pattern weakens the elements above the median
    energy, which picks the better of the two isolated feasible points when
    ``n = 2``; otherwise the pattern alternates.
    """
    if constraints.n < 2:
        raise InfeasibleBudgetError("need at least two elements to satisfy both equalities")
    pattern = np.where(np.arange(constraints.n) % 2 == 0, -1.0, 1.0)
    if energies is not None:
        q = np.asarray(energies, dtype=float)
        signed = np.sign(q - np.median(q))
        if np.count_nonzero(signed > 0) and np.count_nonzero(signed < 0):
            pattern = np.where(signed == 0, pattern, signed)
    return project_feasible(constraints, pattern)


@dataclass
class InnerSolution:
    delta: np.ndarray
    u: np.ndarray
    lam_mean: float
    lam_var: float
    mu: float
    kkt_residual_inf: float
    newton_iters: int
    compliance: float = np.nan
    equilibrium_residual: float = np.nan
    delta_c: np.ndarray = field(default=None, repr=False)
    z_l: np.ndarray = field(default=None, repr=False)
    z_u: np.ndarray = field(default=None, repr=False)
    kkt: "KKTSystem" = field(default=None, repr=False)

    def __post_init__(self):
        if self.delta_c is None:
            self.delta_c = 1.0 - self.delta


def worst_case_compliance(sol: InnerSolution) -> float:
    return sol.compliance


class KKTSystem:
    """Residual and Jacobian of the barrier problem at one point.

    Unknowns are ordered ``(u_free, delta, lam_mean, lam_var)``.  Without
    bound multipliers the Jacobian is the exact derivative of the residual.
    Given ``z_l, z_u`` (estimates of ``mu/delta`` and ``mu/(1-delta)``) the
    barrier curvature ``mu/delta^2`` is replaced by the primal-dual
    ``z/delta``, which is what the Newton iteration uses.
    """

    def __init__(self, model: FEModel, constraints: DefectConstraints, delta, u_free,
                 lam, mu, solver="schur", delta_c=None, z_l=None, z_u=None):
        self.model = model
        self.cons = constraints
        self.delta = np.asarray(delta, dtype=float)
        # 1 - delta carried separately keeps full relative precision near delta = 1.
        self.delta_c = 1.0 - self.delta if delta_c is None else np.asarray(delta_c, dtype=float)
        self.u_free = np.asarray(u_free, dtype=float)
        self.lam = np.asarray(lam, dtype=float)
        self.mu = float(mu)
        self.solver = solver
        self.z_l = self.mu / self.delta if z_l is None else np.asarray(z_l, dtype=float)
        self.z_u = self.mu / self.delta_c if z_u is None else np.asarray(z_u, dtype=float)
        self.shift = 0.0
        self._evaluate()
        self._factor = None

    def _evaluate(self):
        m, cons, d, dc = self.model, self.cons, self.delta, self.delta_c
        params = m.params
        self.s = cons.simp
        self.E = effective_modulus(d, params)
        self.dE, self.d2E = effective_modulus_derivatives(d, params)
        ue = center_translation(m.smap.element_values(self.u_free))
        self.Ku_e = ue @ m.Ke  # (n, 8): Kbar u_e
        self.qbar = np.einsum("ei,ei->e", ue, self.Ku_e)
        self.K = m.stiffness(self.s * self.E)
        a, b = cons.a, cons.b
        self.G = np.stack([a, 2.0 * b * (d - 0.5)], axis=1)
        self.r_u = 2.0 * (self.K @ self.u_free - m.f)
        self.barrier_grad = -self.mu * (1.0 / d - 1.0 / dc)
        self.r_d = self.s * self.dE * self.qbar + self.barrier_grad + self.G @ self.lam
        self.r_c = cons.residuals(d)
        self.elastic_dd = self.s * self.d2E * self.qbar
        self.other_dd = self.z_l / d + self.z_u / dc + 2.0 * self.lam[1] * b
        self.Dg = self.elastic_dd + self.other_dd
        # Coupling columns: d r_u / d delta_e = 2 s_e E'_e Kbar u_e on element e.
        self.C_e = (2.0 * self.s * self.dE)[:, None] * self.Ku_e

    @property
    def residual(self):
        return np.concatenate([self.r_u, self.r_d, self.r_c])

    @property
    def residual_inf(self):
        return float(np.abs(self.residual).max())

    @property
    def residual_norm(self):
        return float(np.linalg.norm(self.residual))

    def C_matvec(self, x_delta):
        """``C @ x_delta`` into the reduced u-space."""
        return self.model.smap.scatter_add(self.C_e * x_delta[:, None])

    def CT_matvec(self, x_u):
        """``C.T @ x_u`` per element."""
        xe = self.model.smap.element_values(x_u)
        return np.einsum("ei,ei->e", self.C_e, xe)

    def matrix(self, shift=0.0) -> sp.csc_matrix:
        """Full bordered Jacobian as a sparse matrix (delta block shifted by ``shift``)."""
        m = self.model.smap
        n = self.cons.n
        rows = m.redof.ravel()
        cols = np.repeat(np.arange(n), 8)
        keep = rows >= 0
        C = sp.csc_matrix((self.C_e.ravel()[keep], (rows[keep], cols[keep])),
                          shape=(m.shape[0], n))
        G = sp.csc_matrix(self.G)
        return sp.bmat([
            [2.0 * self.K, C, None],
            [C.T, sp.diags(self.Dg + shift), G],
            [None, G.T, sp.csc_matrix((2, 2))],
        ], format="csc")

    def factor(self, shift=0.0):
        """Factor the Jacobian by eliminating the diagonal delta block.

        Returns a tuple ``(Dg, lu, Y, M2, inertia_ok)`` where ``lu`` factors
        the Schur complement ``S = 2K - C Dg^-1 C^T`` and ``M2`` is the 2x2
        border system.  ``inertia_ok`` reports whether the Jacobian has the
        inertia of a strict local minimizer (all primal directions positive,
        two negative multiplier directions).
        """
        cached = self._factor
        if cached is not None and cached[0] == shift:
            return cached[1]
        smap, Ke = self.model.smap, self.model.Ke
        Dg = self.Dg + shift
        if np.any(Dg == 0.0):
            Dg = np.where(Dg == 0.0, 1e-300, Dg)
        w = 4.0 * (self.s * self.dE) ** 2 / Dg
        stack = (2.0 * self.s * self.E)[:, None, None] * Ke[None] \
            - w[:, None, None] * np.einsum("ei,ej->eij", self.Ku_e, self.Ku_e)
        try:
            lu = spla.splu(smap.assemble(stack), permc_spec="MMD_AT_PLUS_A",
                           diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise SolverError(f"KKT factorization failed: {exc}") from exc
        DinvG = self.G / Dg[:, None]
        Y = lu.solve(np.column_stack([self.C_matvec(DinvG[:, 0]), self.C_matvec(DinvG[:, 1])]))
        CtY = np.column_stack([self.CT_matvec(Y[:, 0]), self.CT_matvec(Y[:, 1])])
        M2 = -(DinvG.T @ CtY) - self.G.T @ DinvG
        M2 = 0.5 * (M2 + M2.T)
        n_neg = int(np.sum(Dg < 0) + np.sum(lu.U.diagonal() < 0))
        eig = np.linalg.eigvalsh(M2)
        inertia_ok = n_neg <= 2 and int(np.sum(eig > 0)) == n_neg and np.all(eig != 0)
        out = (Dg, lu, Y, M2, inertia_ok)
        self._factor = (shift, out)
        return out

    def solve(self, r_u, r_d, r_c, shift=0.0):
        """Solve ``J x = r`` for a block right-hand side; returns ``(x_u, x_delta, x_lam)``."""
        if self.solver == "full":
            nu, n = self.u_free.size, self.cons.n
            x = spla.splu(self.matrix(shift)).solve(np.concatenate([r_u, r_d, r_c]))
            return x[:nu], x[nu:nu + n], x[nu + n:]
        Dg, lu, Y, M2, _ = self.factor(shift)
        Dinv_rd = r_d / Dg
        y0 = lu.solve(r_u - self.C_matvec(Dinv_rd))
        DinvG = self.G / Dg[:, None]
        rhs2 = r_c - self.G.T @ Dinv_rd + DinvG.T @ self.CT_matvec(y0)
        x_l = np.linalg.solve(M2, rhs2)
        x_u = y0 + Y @ x_l
        x_d = Dinv_rd - (self.CT_matvec(x_u) + self.G @ x_l) / Dg
        return x_u, x_d, x_l

    def inertia_shift(self, max_tries=30):
        """Smallest tried shift of the delta block giving minimizer inertia."""
        if self.factor(0.0)[4]:
            return 0.0
        shift = 1e-4 * max(float(np.abs(self.Dg).mean()), 1e-300)
        for _ in range(max_tries):
            if self.factor(shift)[4]:
                return shift
            shift *= 10.0
        raise InnerSolverError("could not correct KKT inertia", best=self)

    def newton_step(self):
        self.shift = self.inertia_shift()
        return self.solve(-self.r_u, -self.r_d, -self.r_c, self.shift)


def inner_objective(model: FEModel, rho_phys, delta, u, mu):
    """Barrier objective; ``u`` is the full displacement vector."""
    delta = np.asarray(delta, dtype=float)
    if np.any(delta <= 0.0) or np.any(delta >= 1.0):
        raise ValueError("inner objective needs delta strictly inside (0, 1)")
    p = model.params
    s = check_rho(rho_phys, p) ** p.p
    energy = (s * effective_modulus(delta, p)) @ model.unit_energies(u)
    barrier = np.sum(np.log(delta) + np.log1p(-delta))
    return float(-2.0 * model.load.force @ u + energy - mu * barrier)


def kkt_residual(model: FEModel, sol: InnerSolution, constraints: DefectConstraints, mu=None):
    """Residual vector ``(u-block, delta-block, constraints)`` and its infinity norm."""
    mu = sol.mu if mu is None else mu
    k = KKTSystem(model, constraints, sol.delta, sol.u[model.load.free_dofs],
                  [sol.lam_mean, sol.lam_var], mu, delta_c=sol.delta_c)
    r = k.residual
    return r, float(np.abs(r).max())


def _multiplier_estimate(kkt: KKTSystem):
    r0 = kkt.r_d - kkt.G @ kkt.lam
    lam, *_ = np.linalg.lstsq(kkt.G, -r0, rcond=None)
    return lam


def _max_step(delta, delta_c, step):
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = np.where(step < 0, -FRACTION_TO_BOUNDARY * delta / step, np.inf)
        hi = np.where(step > 0, FRACTION_TO_BOUNDARY * delta_c / step, np.inf)
    return float(min(1.0, lo.min(), hi.min()))


def _merit(kkt: KKTSystem, penalty):
    """Barrier objective plus an l1 penalty on the equality residuals."""
    phi = -2.0 * kkt.model.f @ kkt.u_free + (kkt.s * kkt.E) @ kkt.qbar \
        - kkt.mu * np.sum(np.log(kkt.delta) + np.log(kkt.delta_c))
    return float(phi + penalty * np.abs(kkt.r_c).sum())


def _bound_multiplier_step(kkt: KKTSystem, dd):
    mu, d, dc = kkt.mu, kkt.delta, kkt.delta_c
    dz_l = mu / d - kkt.z_l - (kkt.z_l / d) * dd
    dz_u = mu / dc - kkt.z_u + (kkt.z_u / dc) * dd
    return dz_l, dz_u


def _safeguard(z, slack, mu, kappa=1e10):
    return np.clip(z, mu / (kappa * slack), kappa * mu / slack)


def _newton(model, cons, kkt: KKTSystem, tol, max_iter, counter, final=True):
    """Damped primal-dual Newton at fixed mu until ``residual_inf <= tol``.

    A trial step is accepted when it passes an Armijo test on the l1 merit
    function, or (with unmodified inertia) sufficiently reduces the KKT
    residual norm.
    """
    penalty = 0.0
    while kkt.residual_inf > tol:
        if counter[0] >= max_iter:
            raise InnerSolverError(
                f"inner Newton hit {max_iter} iterations at residual {kkt.residual_inf:.3e}",
                best=kkt)
        du, dd, dl = kkt.newton_step()
        penalty = max(penalty, 1.5 * np.abs(kkt.lam + dl).max() + 1e-8)
        grad_phi = kkt.r_u @ du + (kkt.r_d - kkt.G @ kkt.lam) @ dd
        slope = grad_phi - penalty * np.abs(kkt.r_c).sum()
        merit0 = _merit(kkt, penalty)
        base = kkt.residual_norm
        alpha = _max_step(kkt.delta, kkt.delta_c, dd)
        dz_l, dz_u = _bound_multiplier_step(kkt, dd)
        alpha_z = min(_max_step(kkt.z_l, np.inf, dz_l), _max_step(kkt.z_u, np.inf, dz_u))
        trial = None
        for _ in range(40):
            d_new, dc_new = kkt.delta + alpha * dd, kkt.delta_c - alpha * dd
            trial = KKTSystem(model, cons, d_new, kkt.u_free + alpha * du,
                              kkt.lam + alpha * dl, kkt.mu, kkt.solver, delta_c=dc_new,
                              z_l=_safeguard(kkt.z_l + alpha_z * dz_l, d_new, kkt.mu),
                              z_u=_safeguard(kkt.z_u + alpha_z * dz_u, dc_new, kkt.mu))
            if kkt.shift == 0.0 and trial.residual_norm <= (1.0 - 1e-4 * alpha) * base:
                break
            if slope < 0 and _merit(trial, penalty) <= merit0 + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
        counter[0] += 1
        logger.debug("newton mu=%.1e res=%.3e shift=%.2e alpha=%.3e", kkt.mu, kkt.residual_inf,
                     kkt.shift, alpha)
        if final and trial.residual_norm >= base and kkt.residual_inf < 100 * tol:
            # Roundoff floor reached just above tol; further steps cannot help.
            logger.debug("inner Newton stalled at %.3e", kkt.residual_inf)
            break
        kkt = trial
    return kkt


def solve_inner(model: FEModel, rho_phys, constraints: DefectConstraints, mu_star=1e-6,
                warm_start: InnerSolution | None = None, tol=1e-10, max_newton=100,
                mu_init=1e-2, mu_factor=10.0, solver="schur") -> InnerSolution:
    """Solve the barrier-smoothed worst-case problem for densities ``rho_phys``.

    Cold starts run a barrier continuation from ``mu_init`` down to
    ``mu_star``; warm starts reuse ``(delta, u, lambda)`` of a previous
    solution and run at ``mu_star`` directly.
    """
    cons = constraints
    free = model.load.free_dofs
    start = None
    cold = True
    if warm_start is not None:
        try:
            pattern = np.clip(warm_start.delta, WARM_CLAMP, 1.0 - WARM_CLAMP) - 0.5
            start = (project_feasible(cons, pattern), warm_start.u[free],
                     np.array([warm_start.lam_mean, warm_start.lam_var]))
            z0 = (warm_start.z_l, warm_start.z_u)
            mu = mu_star
            cold = False
        except InfeasibleBudgetError:
            logger.info("warm start could not be re-projected; cold start instead")
            start = None
    if start is None:
        u_nom = model.solve(rho_phys, 0.5)
        q = model.unit_energies(u_nom) * simp_scale(rho_phys, model.params)
        delta0 = initialize_feasible(cons, q)
        u0 = model.solve(rho_phys, delta0)[free]
        mu = max(mu_init, mu_star)
        start = (delta0, u0, np.zeros(2))
        z0 = (None, None)

    kkt = KKTSystem(model, cons, *start, mu=mu, solver=solver, z_l=z0[0], z_u=z0[1])
    if cold:
        kkt = KKTSystem(model, cons, kkt.delta, kkt.u_free, _multiplier_estimate(kkt), mu, solver)
    counter = [0]
    while True:
        final = mu <= mu_star * (1 + 1e-12)
        kkt = _newton(model, cons, kkt, tol if final else max(tol, 10.0 * mu), max_newton,
                      counter, final)
        if final:
            break
        mu = max(mu_star, mu / mu_factor)
        kkt = KKTSystem(model, cons, kkt.delta, kkt.u_free, kkt.lam, mu, solver, kkt.delta_c,
                        kkt.z_l, kkt.z_u)

    u = model.load.expand(kkt.u_free)
    f = model.f
    eq_res = np.linalg.norm(kkt.K @ kkt.u_free - f) / np.linalg.norm(f)
    return InnerSolution(
        delta=kkt.delta, u=u, lam_mean=float(kkt.lam[0]), lam_var=float(kkt.lam[1]),
        mu=mu, kkt_residual_inf=kkt.residual_inf, newton_iters=counter[0],
        compliance=float(model.load.force @ u), equilibrium_residual=float(eq_res),
        delta_c=kkt.delta_c, z_l=kkt.z_l, z_u=kkt.z_u, kkt=kkt,
    )


def nominal_compliance(model: FEModel, rho_phys, delta=0.5) -> float:
    """Compliance at a fixed defect field (plain state solve, no constraints)."""
    u = model.solve(rho_phys, delta)
    return float(model.load.force @ u)
