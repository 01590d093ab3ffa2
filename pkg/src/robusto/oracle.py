"""Independent reference implementations used for verification.

Nothing here imports the production assembly, filter or solver code: the
element matrix is integrated with a 3x3 Gauss rule, systems are assembled
densely (tiny instances) or through plain COO triplets (nominal SIMP), and
the worst case over defects is found by enumerating the feasible set.
Agreement with the production path is therefore evidence rather than a
tautology.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .material import MaterialParams


class OracleError(RuntimeError):
    pass


# --------------------------------------------------------------------- FEM

def _constitutive(E, nu, plane):
    if plane == "strain":
        c = E / ((1 + nu) * (1 - 2 * nu))
        return c * np.array([[1 - nu, nu, 0], [nu, 1 - nu, 0], [0, 0, (1 - 2 * nu) / 2]])
    c = E / (1 - nu**2)
    return c * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])


def q4_stiffness(w, h, nu, plane="strain", order=3):
    """Unit-modulus Q4 stiffness, nodes counter-clockwise from bottom-left."""
    pts, wts = np.polynomial.legendre.leggauss(order)
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    C = _constitutive(1.0, nu, plane)
    K = np.zeros((8, 8))
    for xi, wx in zip(pts, wts):
        for eta, wy in zip(pts, wts):
            dN = 0.25 * np.array([corners[:, 0] * (1 + corners[:, 1] * eta),
                                  corners[:, 1] * (1 + corners[:, 0] * xi)])
            dx, dy = dN[0] * 2 / w, dN[1] * 2 / h
            B = np.zeros((3, 8))
            B[0, 0::2], B[1, 1::2] = dx, dy
            B[2, 0::2], B[2, 1::2] = dy, dx
            K += wx * wy * (w * h / 4) * B.T @ C @ B
    return K


def _element_dofs(nx, ny):
    out = np.empty((nx * ny, 8), dtype=np.int64)
    for ix in range(nx):
        for iy in range(ny):
            n0 = ix * (ny + 1) + iy
            nodes = [n0, n0 + ny + 1, n0 + ny + 2, n0 + 1]
            out[ix * ny + iy] = np.ravel([[2 * k, 2 * k + 1] for k in nodes])
    return out


def _modulus(delta, p: MaterialParams):
    return 1.0 / ((1 - delta) / p.E0 + delta / p.ED)


@dataclass
class TinyInstance:
    """A small structured mesh with explicit loads and supports.

    DOF numbering: node ``ix*(ny+1)+iy`` owns DOFs ``2*node`` (x) and
    ``2*node+1`` (y); element ``ix*ny+iy``.
    """

    name: str
    nx: int
    ny: int
    width: float
    height: float
    fixed: np.ndarray
    force: np.ndarray
    params: MaterialParams = field(default_factory=MaterialParams)

    def __post_init__(self):
        if 2 * (self.nx + 1) * (self.ny + 1) > 50:
            raise OracleError(f"{self.name}: tiny instances are limited to 50 DOFs")
        self.edofs = _element_dofs(self.nx, self.ny)
        self.Ke = q4_stiffness(self.width / self.nx, self.height / self.ny,
                               self.params.nu, self.params.plane_model)
        self.free = np.setdiff1d(np.arange(self.force.size), self.fixed)

    @property
    def n_elem(self):
        return self.nx * self.ny

    @property
    def elem_volume(self):
        return self.width * self.height / self.n_elem

    def stiffness(self, rho, delta):
        K = np.zeros((self.force.size, self.force.size))
        scale = np.asarray(rho, dtype=float) ** self.params.p * _modulus(np.asarray(delta, float),
                                                                        self.params)
        for e, dofs in enumerate(self.edofs):
            K[np.ix_(dofs, dofs)] += scale[e] * self.Ke
        return K

    def energies(self, u):
        ue = u[self.edofs]
        return np.einsum("ei,ij,ej->e", ue, self.Ke, ue)


def tip_loaded(nx, ny, width=None, height=None, params=None, name=None):
    """Cantilever clamped on the left with a unit downward load at the bottom-right node."""
    width = float(nx if width is None else width)
    height = float(ny if height is None else height)
    n_dof = 2 * (nx + 1) * (ny + 1)
    left = np.arange(ny + 1)
    fixed = np.sort(np.concatenate([2 * left, 2 * left + 1]))
    force = np.zeros(n_dof)
    force[2 * (nx * (ny + 1)) + 1] = -1.0
    return TinyInstance(name or f"tip_{nx}x{ny}", nx, ny, width, height, fixed, force,
                        params or MaterialParams())


def dense_solve(inst: TinyInstance, rho, delta):
    """Solve ``K u = f`` densely; returns the full displacement and compliance."""
    K = inst.stiffness(rho, delta)
    free = inst.free
    try:
        u_free = sla.solve(K[np.ix_(free, free)], inst.force[free], assume_a="pos")
    except (sla.LinAlgError, ValueError) as exc:
        raise OracleError(f"{inst.name}: singular stiffness ({exc})") from exc
    u = np.zeros(inst.force.size)
    u[free] = u_free
    return u, float(inst.force @ u)


# ------------------------------------------------------------- worst case

def constraint_weights(inst: TinyInstance, rho, mean_norm="material"):
    v = np.full(inst.n_elem, inst.elem_volume)
    omega = v.sum()
    s = np.asarray(rho, dtype=float) ** inst.params.p
    norm = (v * s).sum() if mean_norm == "material" else omega
    return v * s / norm, v / omega


def feasible_defects(inst: TinyInstance, rho, D, resolution=720, mean_norm="material"):
    """Sample ``{a.delta = 0.5, b.(delta-0.5)^2 = D, 0 <= delta <= 1}``.

    In coordinates ``z = sqrt(b) (delta - 0.5)`` the set is a sphere of
    radius ``sqrt(D)`` cut by a hyperplane: two points for ``n = 2``, a
    circle for ``n = 3`` (``resolution`` samples) and a 2-sphere for
    ``n = 4`` (``resolution x resolution`` angle grid).
    """
    a, b = constraint_weights(inst, rho, mean_norm)
    n = a.size
    if not 2 <= n <= 4:
        raise OracleError("enumeration supports 2 to 4 elements")
    if not 0 < D < 0.25:
        raise OracleError(f"D={D} outside (0, 0.25)")
    sb = np.sqrt(b)
    normal = a / sb
    c = 0.5 - 0.5 * a.sum()
    center = c * normal / (normal @ normal)
    r2 = D - center @ center
    if r2 < 0:
        raise OracleError("defect budget unattainable under the mean constraint")
    radius = np.sqrt(r2)
    # Orthonormal basis of the hyperplane's direction space.
    q, _ = np.linalg.qr(np.column_stack([normal, np.eye(n)]))
    basis = q[:, 1:n]
    if n == 2:
        coords = np.array([[1.0], [-1.0]])
    elif n == 3:
        t = np.linspace(0, 2 * np.pi, resolution, endpoint=False)
        coords = np.column_stack([np.cos(t), np.sin(t)])
    else:
        th = np.linspace(0, np.pi, resolution)
        ph = np.linspace(0, 2 * np.pi, resolution, endpoint=False)
        T, P = np.meshgrid(th, ph, indexing="ij")
        coords = np.column_stack([np.sin(T).ravel() * np.cos(P).ravel(),
                                  np.sin(T).ravel() * np.sin(P).ravel(), np.cos(T).ravel()])
    z = center + radius * coords @ basis.T
    delta = 0.5 + z / sb
    keep = np.all((delta >= 0) & (delta <= 1), axis=1)
    if not keep.any():
        raise OracleError("no sampled defect field satisfies the box bounds")
    return delta[keep]


def brute_force_worst_case(inst: TinyInstance, rho, D, resolution=720, mean_norm="material"):
    """Maximize compliance over sampled feasible defect fields.

    Ties are broken toward the lowest candidate index.
    """
    cands = feasible_defects(inst, rho, D, resolution, mean_norm)
    values = np.array([dense_solve(inst, rho, d)[1] for d in cands])
    k = int(np.argmax(values))
    return cands[k], float(values[k])


def barrier_gap_bound(mu, n, domain_volume):
    """Allowance between the barrier-smoothed and exact worst case."""
    return 10.0 * mu * n / domain_volume


# ------------------------------------------------------------ gradients

def fd_gradient(callback: Callable[[np.ndarray], float], rho, probes, h=1e-6):
    """Central differences ``(J(rho + h e_i) - J(rho - h e_i)) / 2h`` at ``probes``."""
    if not 1e-8 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-8, 1e-4]")
    rho = np.asarray(rho, dtype=float)
    out = np.empty(len(probes))
    for k, i in enumerate(probes):
        xp, xm = rho.copy(), rho.copy()
        xp[i] += h
        xm[i] -= h
        out[k] = (callback(xp) - callback(xm)) / (2 * h)
    return out


# ---------------------------------------------------------- nominal SIMP

def _filter_matrix(nx, ny, ew, eh, radius_phys):
    ix, iy = np.divmod(np.arange(nx * ny), ny)
    cx, cy = (ix + 0.5) * ew, (iy + 0.5) * eh
    rows, cols, vals = [], [], []
    for e in range(nx * ny):
        d = np.hypot(cx - cx[e], cy - cy[e])
        w = radius_phys - d
        (nb,) = np.nonzero(w > 1e-12 * radius_phys)
        rows.append(np.full(nb.size, e))
        cols.append(nb)
        vals.append(w[nb] / w[nb].sum())
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(nx * ny, nx * ny))


@dataclass
class NominalResult:
    rho: np.ndarray
    rho_phys: np.ndarray
    compliance: float
    iterations: int
    history: list


def nominal_simp(nx, ny, width=2.0, height=1.0, volfrac=0.5, radius=None,
                 params: MaterialParams | None = None, delta=0.5, load_extent=0.05,
                 max_iters=300, change_tol=1e-3, move=0.2):
    """Optimality-criteria SIMP on the left-clamped cantilever.

    Uses its own element matrix, COO assembly, cone filter and OC update,
    with the volume constraint on filtered densities and a fixed uniform
    defect field ``delta``.
    """
    params = params or MaterialParams()
    ew, eh = width / nx, height / ny
    radius = 7.0 * nx / 400.0 if radius is None else radius
    H = _filter_matrix(nx, ny, ew, eh, radius * ew)
    Ke = q4_stiffness(ew, eh, params.nu, params.plane_model)
    edofs = _element_dofs(nx, ny)
    n_dof = 2 * (nx + 1) * (ny + 1)
    f = np.zeros(n_dof)
    k = max(1, int(round(load_extent * ny)))
    for j in range(k):
        for iy in (j, j + 1):
            f[2 * (nx * (ny + 1) + iy) + 1] -= 0.5 / k
    fixed = np.concatenate([2 * np.arange(ny + 1), 2 * np.arange(ny + 1) + 1])
    free = np.setdiff1d(np.arange(n_dof), fixed)
    iK = np.repeat(edofs, 8, axis=1).ravel()
    jK = np.tile(edofs, (1, 8)).ravel()
    E = float(_modulus(np.float64(delta), params))

    x = np.full(nx * ny, volfrac)
    history = []
    c = np.nan
    it = 0
    for it in range(max_iters + 1):
        xp = H @ x
        s = xp ** params.p * E
        K = sp.coo_matrix((np.outer(s, Ke.ravel()).ravel(), (iK, jK)), shape=(n_dof, n_dof)).tocsc()
        u = np.zeros(n_dof)
        u[free] = spla.spsolve(K[free][:, free], f[free])
        ue = u[edofs]
        q = np.einsum("ei,ij,ej->e", ue, Ke, ue)
        c = float(f @ u)
        history.append(c)
        if it == max_iters:
            break
        dc = H.T @ (-params.p * xp ** (params.p - 1) * E * q)
        dv = H.T @ np.ones_like(x)
        lo, hi = 0.0, 1e9
        lo_x, hi_x = np.maximum(params.rho_min, x - move), np.minimum(1.0, x + move)
        while (hi - lo) / (hi + lo) > 1e-10:
            lam = 0.5 * (lo + hi)
            xn = np.clip(x * np.sqrt(np.maximum(-dc, 0) / (lam * dv)), lo_x, hi_x)
            if (H @ xn).mean() > volfrac:
                lo = lam
            else:
                hi = lam
        change = np.max(np.abs(xn - x))
        x = xn
        if change < change_tol:
            xp = H @ x
            s = xp ** params.p * E
            K = sp.coo_matrix((np.outer(s, Ke.ravel()).ravel(), (iK, jK)),
                              shape=(n_dof, n_dof)).tocsc()
            u = np.zeros(n_dof)
            u[free] = spla.spsolve(K[free][:, free], f[free])
            c = float(f @ u)
            history.append(c)
            it += 1
            break
    return NominalResult(x, H @ x, c, it, history)
