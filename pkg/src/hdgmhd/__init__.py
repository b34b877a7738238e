"""Arbitrary-order HDG solver for steady, thermally coupled incompressible MHD
with globally divergence-free velocity and magnetic fields."""
from .exceptions import HDGError, InternalError, NonConvergenceError, SingularSystemError
from .forms import PhysicalParameters
from .mesh import SimplicialMesh, build_unit_cube_mesh, build_unit_square_mesh

__version__ = "0.1.0"

__all__ = [
    "HDGError",
    "InternalError",
    "NonConvergenceError",
    "PhysicalParameters",
    "SimplicialMesh",
    "SingularSystemError",
    "build_unit_cube_mesh",
    "build_unit_square_mesh",
]
