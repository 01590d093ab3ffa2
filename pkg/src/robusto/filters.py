"""Linearly decaying (cone) density filter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .fem import StructuredGrid


@dataclass
class FilterOperator:
    """Row-stochastic sparse weight matrix ``W`` with ``rho_phys = W @ rho``.

    Attributes
    ----------
    radius : float
        Filter radius in element lengths.
    W : scipy.sparse.csr_matrix
        Weights ``max(0, r - d_ij)`` normalized per row; truncated
        neighborhoods at the domain boundary are renormalized.
    """

    radius: float
    W: sp.csr_matrix

    def __post_init__(self):
        self.WT = self.W.T.tocsr()

    @property
    def neighbors(self):
        return np.split(self.W.indices, self.W.indptr[1:-1])

    def apply(self, rho_design):
        return self.W @ np.asarray(rho_design, dtype=float)

    def chain_rule(self, grad_wrt_phys):
        return self.WT @ np.asarray(grad_wrt_phys, dtype=float)


def build(grid: StructuredGrid, radius: float) -> FilterOperator:
    """Build the cone filter; ``radius`` is measured in element widths.

    Distances are between element centroids in physical units, so on
    non-square elements the neighborhood is an ellipse in index space.
    """
    n = grid.n_elem
    r_phys = radius * grid.elem_w
    if r_phys <= min(grid.elem_w, grid.elem_h):
        return FilterOperator(radius, sp.identity(n, format="csr"))
    pts = grid.centroids
    tree = cKDTree(pts)
    # Centroid distances on a grid are exact multiples; shave to keep d < r strict.
    pairs = tree.query_pairs(r_phys * (1 - 1e-12), output_type="ndarray")
    d = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
    w = r_phys - d
    rows = np.concatenate([np.arange(n), pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([np.arange(n), pairs[:, 1], pairs[:, 0]])
    vals = np.concatenate([np.full(n, r_phys), w, w])
    H = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    H.sort_indices()
    W = sp.diags(1.0 / np.asarray(H.sum(axis=1)).ravel()) @ H
    return FilterOperator(radius, W.tocsr())


def apply(op: FilterOperator, rho_design):
    return op.apply(rho_design)


def chain_rule(op: FilterOperator, grad_wrt_phys):
    return op.chain_rule(grad_wrt_phys)
