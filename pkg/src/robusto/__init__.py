"""Topology optimization robust against worst-case local stiffness defects.

Submodules
----------
material    defect-dependent modulus and SIMP scaling
fem         structured Q4 mesh, assembly and state solves
filters     cone density filter
inner       barrier Newton solver for the worst-case defect field
adjoint     sensitivities of the worst-case compliance
mma         outer optimizer (moving asymptotes)
oracle      independent reference implementations for verification
pipeline    objective/constraint callbacks
config, outputs, app, cli
            configuration, artifacts and run modes
"""

from .material import MaterialParams

__version__ = "0.1.0"
__all__ = ["MaterialParams", "__version__"]
