"""Structured Q4 plane elasticity: mesh, assembly, state solve.

Numbering conventions
---------------------
Nodes are numbered column-major, ``node = ix * (ny + 1) + iy`` with ``iy``
counted from the bottom edge.  Elements follow the same convention,
``e = ix * ny + iy``.  Each node carries two DOFs ``(2 node, 2 node + 1)``
for the x- and y-displacement.  Element nodes are ordered counter-clockwise
starting at the lower-left corner.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .material import (
    MaterialParams,
    check_delta,
    check_rho,
    effective_modulus,
    plane_tensor,
)

logger = logging.getLogger(__name__)

GAUSS_2 = (-1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0))


class SolverError(RuntimeError):
    """Factorization failure or solver non-convergence."""

    def __init__(self, message, residual=None):
        super().__init__(message if residual is None else f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class StructuredGrid:
    nx: int
    ny: int
    elem_w: float = 1.0
    elem_h: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"grid needs nx, ny >= 1, got {self.nx}x{self.ny}")
        if not (self.elem_w > 0 and self.elem_h > 0):
            raise ValueError("element dimensions must be positive")

    @classmethod
    def from_domain(cls, nx, ny, width, height):
        return cls(int(nx), int(ny), width / nx, height / ny)

    @property
    def n_elem(self):
        return self.nx * self.ny

    @property
    def n_nodes(self):
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_dofs(self):
        return 2 * self.n_nodes

    @property
    def elem_volume(self):
        return self.elem_w * self.elem_h

    @property
    def volumes(self):
        return np.full(self.n_elem, self.elem_volume)

    @property
    def domain_volume(self):
        return self.n_elem * self.elem_volume

    def node(self, ix, iy):
        return ix * (self.ny + 1) + iy

    def element(self, ix, iy):
        return ix * self.ny + iy

    @functools.cached_property
    def edof(self):
        """(n_elem, 8) global DOF indices of every element."""
        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        ix, iy = ix.ravel(), iy.ravel()
        corners = np.stack([
            self.node(ix, iy),
            self.node(ix + 1, iy),
            self.node(ix + 1, iy + 1),
            self.node(ix, iy + 1),
        ], axis=1)
        edof = np.empty((self.n_elem, 8), dtype=np.int64)
        edof[:, 0::2] = 2 * corners
        edof[:, 1::2] = 2 * corners + 1
        return edof

    @functools.cached_property
    def centroids(self):
        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        return np.stack([(ix.ravel() + 0.5) * self.elem_w, (iy.ravel() + 0.5) * self.elem_h], axis=1)

    def to_image(self, values):
        """Reshape an element field to an (ny, nx) array, row 0 at the bottom."""
        return np.asarray(values).reshape(self.nx, self.ny).T

    def from_image(self, image):
        return np.asarray(image).T.ravel()


@dataclass
class LoadCase:
    fixed_dofs: np.ndarray
    force: np.ndarray

    def __post_init__(self):
        self.fixed_dofs = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        self.force = np.asarray(self.force, dtype=float)
        if self.fixed_dofs.size == 0:
            raise ValueError("load case needs at least one fixed DOF")
        if not np.any(self.force):
            raise ValueError("load case needs a nonzero force")
        if np.any(self.force[self.fixed_dofs] != 0.0):
            raise ValueError("force must vanish on fixed DOFs")

    @functools.cached_property
    def free_dofs(self):
        mask = np.ones(self.force.size, dtype=bool)
        mask[self.fixed_dofs] = False
        return np.flatnonzero(mask)

    @property
    def f_free(self):
        return self.force[self.free_dofs]

    def expand(self, u_free):
        """Embed a reduced displacement into the full DOF vector."""
        u = np.zeros(self.force.size)
        u[self.free_dofs] = u_free
        return u


def cantilever(grid: StructuredGrid, load_extent=0.05, magnitude=1.0, mirror=False) -> LoadCase:
    """Cantilever clamped on the left edge, downward line load at the bottom right.

    The load is uniform over the lowest ``load_extent`` fraction of the right
    edge (at least one element edge) and lumped consistently to the nodes.
    ``mirror=True`` puts an upward load at the top right instead, which is the
    mirror image about the horizontal mid-line.
    """
    force = np.zeros(grid.n_dofs)
    k = max(1, int(round(load_extent * grid.ny)))
    per_segment = magnitude / k
    for j in range(k):
        for iy in (j, j + 1):
            if mirror:
                node = grid.node(grid.nx, grid.ny - iy)
                force[2 * node + 1] += 0.5 * per_segment
            else:
                node = grid.node(grid.nx, iy)
                force[2 * node + 1] -= 0.5 * per_segment
    left = grid.node(0, np.arange(grid.ny + 1))
    fixed = np.concatenate([2 * left, 2 * left + 1])
    return LoadCase(fixed, force)


def _shape_gradients(xi, eta, w, h):
    """B matrix (3x8) and Jacobian determinant of a w x h rectangle at (xi, eta)."""
    dN_dxi = 0.25 * np.array([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
    dN_deta = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
    dN_dx = dN_dxi * (2.0 / w)
    dN_dy = dN_deta * (2.0 / h)
    B = np.zeros((3, 8))
    B[0, 0::2] = dN_dx
    B[1, 1::2] = dN_dy
    B[2, 0::2] = dN_dy
    B[2, 1::2] = dN_dx
    return B, 0.25 * w * h


def element_stiffness_template(grid: StructuredGrid, params: MaterialParams) -> np.ndarray:
    """Unit-modulus Q4 element stiffness by 2x2 Gauss quadrature (unit thickness)."""
    C = plane_tensor(params)
    Ke = np.zeros((8, 8))
    for xi in GAUSS_2:
        for eta in GAUSS_2:
            B, detJ = _shape_gradients(xi, eta, grid.elem_w, grid.elem_h)
            Ke += B.T @ C @ B * detJ
    return 0.5 * (Ke + Ke.T)


class ScatterMap:
    """Precomputed map from stacked element matrices to a reduced CSC matrix.

    Entries touching fixed DOFs are dropped, which is Dirichlet elimination by
    row/column removal.  Summation uses ``np.bincount`` in a fixed order, so
    assembly is deterministic.
    """

    def __init__(self, grid: StructuredGrid, fixed_dofs):
        self.grid = grid
        mask = np.ones(grid.n_dofs, dtype=bool)
        mask[np.asarray(fixed_dofs, dtype=np.int64)] = False
        self.free = np.flatnonzero(mask)
        reduced = np.full(grid.n_dofs, -1, dtype=np.int64)
        reduced[self.free] = np.arange(self.free.size)
        self.redof = reduced[grid.edof]  # (n, 8), -1 on fixed DOFs
        rows = np.repeat(self.redof, 8, axis=1).ravel()
        cols = np.tile(self.redof, (1, 8)).ravel()
        self.keep = (rows >= 0) & (cols >= 0)
        m = self.free.size
        # Recover the slot of every kept entry in the canonical CSC layout.
        key = cols[self.keep] * m + rows[self.keep]
        uniq, self.slot = np.unique(key, return_inverse=True)
        self.indices = (uniq % m).astype(np.int32)
        col_of = uniq // m
        self.indptr = np.searchsorted(col_of, np.arange(m + 1)).astype(np.int32)
        self.shape = (m, m)

    def assemble(self, ke_stack) -> sp.csc_matrix:
        """Sum an (n, 8, 8) stack of element matrices into the reduced matrix."""
        vals = np.asarray(ke_stack).reshape(-1)[self.keep]
        data = np.bincount(self.slot, weights=vals, minlength=self.indices.size)
        return sp.csc_matrix((data, self.indices, self.indptr), shape=self.shape)

    def assemble_scaled(self, Ke, scale) -> sp.csc_matrix:
        return self.assemble(scale[:, None, None] * Ke[None, :, :])

    def element_values(self, u_free):
        """Gather reduced displacements into an (n, 8) array, zero on fixed DOFs."""
        padded = np.append(u_free, 0.0)
        return padded[self.redof]

    def scatter_add(self, elem_vectors):
        """Sum an (n, 8) array of element vectors into a reduced vector."""
        mask = self.redof >= 0
        return np.bincount(self.redof[mask], weights=elem_vectors[mask], minlength=self.shape[0])


@functools.lru_cache(maxsize=16)
def _scatter_cached(grid, fixed_key):
    return ScatterMap(grid, np.frombuffer(fixed_key, dtype=np.int64))


def scatter_map(grid: StructuredGrid, load: LoadCase) -> ScatterMap:
    return _scatter_cached(grid, load.fixed_dofs.tobytes())


@dataclass
class SparseSpdSystem:
    """Reduced stiffness matrix with a lazily computed factorization."""

    K: sp.csc_matrix
    free_dofs: np.ndarray
    method: str = "direct"
    _factor: object = field(default=None, repr=False)

    @property
    def dim(self):
        return self.K.shape[0]

    def factor(self):
        if self._factor is None:
            try:
                self._factor = spla.splu(
                    self.K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True},
                )
            except RuntimeError as exc:
                raise SolverError(f"factorization failed: {exc}") from exc
        return self._factor

    def solve(self, rhs, rtol=1e-10):
        rhs = np.asarray(rhs, dtype=float)
        if self.method == "direct":
            x = self.factor().solve(rhs)
        elif self.method == "cg":
            x = _pcg(self.K, rhs, rtol)
        else:
            raise ValueError(f"unknown solver method {self.method!r}")
        if not np.all(np.isfinite(x)):
            raise SolverError("solve produced non-finite values; is the structure supported?")
        return x


def _pcg(K, rhs, rtol):
    import pyamg

    nrm = np.linalg.norm(rhs)
    if nrm == 0.0:
        return np.zeros_like(rhs)
    ml = pyamg.smoothed_aggregation_solver(K.tocsr(), B=None, symmetry="symmetric")
    M = ml.aspreconditioner(cycle="V")
    x, info = spla.cg(K, rhs, rtol=0.1 * rtol, atol=0.0, maxiter=5000, M=M)
    res = np.linalg.norm(K @ x - rhs) / nrm
    if info != 0 or res > rtol:
        raise SolverError("preconditioned CG did not converge", res)
    return x


def element_scale(rho_phys, delta, params: MaterialParams):
    """Per-element modulus factor ``rho**p * E(delta)``."""
    return check_rho(rho_phys, params) ** params.p * effective_modulus(delta, params)


def assemble(grid, load, rho_phys, delta, params, method="direct") -> SparseSpdSystem:
    """Assemble the reduced global stiffness ``sum_e rho_e^p E(delta_e) Kbar``."""
    rho_phys = check_rho(rho_phys, params)
    delta = check_delta(np.broadcast_to(delta, rho_phys.shape))
    Ke = element_stiffness_template(grid, params)
    K = scatter_map(grid, load).assemble_scaled(Ke, element_scale(rho_phys, delta, params))
    return SparseSpdSystem(K, load.free_dofs, method)


def solve_state(system: SparseSpdSystem, load: LoadCase, rtol=1e-10) -> np.ndarray:
    """Solve ``K u = f``; returns the full displacement vector (zeros on fixed DOFs)."""
    f = load.f_free
    u = system.solve(f, rtol)
    nf = np.linalg.norm(f)
    res = np.linalg.norm(system.K @ u - f) / nf if nf > 0 else np.linalg.norm(system.K @ u)
    if res > rtol:
        raise SolverError("state solve missed residual target", res)
    return load.expand(u)


def compliance(load: LoadCase, u) -> float:
    return float(load.force @ u)


def element_energies(grid, rho_phys, delta, u, params) -> np.ndarray:
    """Per-element strain energies ``u_e^T (rho_e^p E(delta_e) Kbar) u_e``."""
    Ke = element_stiffness_template(grid, params)
    return element_scale(rho_phys, delta, params) * unit_energies(grid, Ke, u)


def center_translation(ue):
    """Remove each element's mean x/y translation from (n, 8) displacements.

    ``Kbar`` annihilates rigid translations, so energies and ``Kbar u_e`` are
    unchanged; subtracting them first avoids cancellation when the
    displacements are large compared with the strains.
    """
    ue = np.array(ue, dtype=float, copy=True)
    ue[:, 0::2] -= ue[:, 0::2].mean(axis=1, keepdims=True)
    ue[:, 1::2] -= ue[:, 1::2].mean(axis=1, keepdims=True)
    return ue


def unit_energies(grid, Ke, u) -> np.ndarray:
    """``u_e^T Kbar u_e`` for every element, from the full displacement vector."""
    ue = center_translation(np.asarray(u)[grid.edof])
    return np.einsum("ei,ij,ej->e", ue, Ke, ue)


class FEModel:
    """Grid, load case and material bundled with the cached assembly data."""

    def __init__(self, grid: StructuredGrid, load: LoadCase, params: MaterialParams, method="direct"):
        self.grid = grid
        self.load = load
        self.params = params
        self.method = method
        self.Ke = element_stiffness_template(grid, params)
        self.smap = scatter_map(grid, load)

    @property
    def f(self):
        return self.load.f_free

    def stiffness(self, scale) -> sp.csc_matrix:
        return self.smap.assemble_scaled(self.Ke, scale)

    def system(self, rho_phys, delta) -> SparseSpdSystem:
        delta = np.broadcast_to(delta, np.shape(rho_phys))
        return SparseSpdSystem(self.stiffness(element_scale(rho_phys, delta, self.params)),
                               self.load.free_dofs, self.method)

    def solve(self, rho_phys, delta):
        """Full displacement vector for the given densities and defects."""
        return solve_state(self.system(rho_phys, delta), self.load)

    def unit_energies(self, u):
        return unit_energies(self.grid, self.Ke, u)
