"""Defect-interpolated, SIMP-penalized isotropic elasticity.

The element constitutive matrix is ``rho**p * E(delta) * C1`` where ``C1`` is
the unit-modulus plane tensor and ``E(delta)`` interpolates harmonically
between the stiff modulus ``E0`` (delta = 0) and the weak modulus ``ED``
(delta = 1).  Because ``1 / E(delta)`` is affine in delta, the potential
energy is jointly convex in (delta, u).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BOUND_TOL = 1e-12


class DomainError(ValueError):
    """Argument outside the admissible interval."""


@dataclass(frozen=True)
class MaterialParams:
    """Material data, normalized so that ``E0`` is usually 1.

    Parameters
    ----------
    E0, ED : float
        Largest and smallest Young's moduli of the fluctuating material.
    nu : float
        Poisson's ratio.
    p : float
        SIMP penalization exponent.
    rho_min : float
        Lower bound of the pseudo-density.
    plane_model : {"strain", "stress"}
        2D reduction of the isotropic tensor.
    """

    E0: float = 1.0
    ED: float = 0.75
    nu: float = 0.3
    p: float = 5.0
    rho_min: float = 1e-2
    plane_model: str = "strain"

    def __post_init__(self):
        errors = []
        if not 0.0 < self.ED <= self.E0:
            errors.append(f"need 0 < ED <= E0, got ED={self.ED}, E0={self.E0}")
        if not 0.0 <= self.nu < 0.5:
            errors.append(f"need 0 <= nu < 0.5, got nu={self.nu}")
        if not self.p >= 1.0:
            errors.append(f"need p >= 1, got p={self.p}")
        if not 0.0 < self.rho_min < 1.0:
            errors.append(f"need 0 < rho_min < 1, got rho_min={self.rho_min}")
        if self.plane_model not in ("strain", "stress"):
            errors.append(f"plane_model must be 'strain' or 'stress', got {self.plane_model!r}")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def compliance_gap(self) -> float:
        """``1/ED - 1/E0``, the slope of ``1/E(delta)``."""
        return 1.0 / self.ED - 1.0 / self.E0


def _clamp(x, lo, hi, name):
    x = np.asarray(x, dtype=float)
    if np.any(x < lo - BOUND_TOL) or np.any(x > hi + BOUND_TOL):
        raise DomainError(f"{name} outside [{lo}, {hi}]: range [{x.min()}, {x.max()}]")
    return np.clip(x, lo, hi)


def check_delta(delta):
    return _clamp(delta, 0.0, 1.0, "delta")


def check_rho(rho, params: MaterialParams):
    return _clamp(rho, params.rho_min, 1.0, "rho")


def effective_modulus(delta, params: MaterialParams):
    """Harmonic interpolation ``((1 - delta)/E0 + delta/ED)**-1``.

    Accepts scalars or arrays; returns the same shape.
    """
    d = check_delta(delta)
    return 1.0 / ((1.0 - d) / params.E0 + d / params.ED)


def effective_modulus_derivatives(delta, params: MaterialParams):
    """First and second derivative of :func:`effective_modulus` in delta."""
    E = effective_modulus(delta, params)
    c = params.compliance_gap
    return -c * E**2, 2.0 * c**2 * E**3


def simp_scale(rho, params: MaterialParams):
    """Penalized density ``rho**p``."""
    return check_rho(rho, params) ** params.p


def simp_scale_derivative(rho, params: MaterialParams):
    r = check_rho(rho, params)
    return params.p * r ** (params.p - 1.0)


def plane_tensor(params: MaterialParams) -> np.ndarray:
    """Unit-modulus 3x3 constitutive matrix in Voigt notation (xx, yy, xy)."""
    nu = params.nu
    if params.plane_model == "strain":
        c = 1.0 / ((1.0 + nu) * (1.0 - 2.0 * nu))
        return c * np.array([
            [1.0 - nu, nu, 0.0],
            [nu, 1.0 - nu, 0.0],
            [0.0, 0.0, (1.0 - 2.0 * nu) / 2.0],
        ])
    c = 1.0 / (1.0 - nu**2)
    return c * np.array([
        [1.0, nu, 0.0],
        [nu, 1.0, 0.0],
        [0.0, 0.0, (1.0 - nu) / 2.0],
    ])
