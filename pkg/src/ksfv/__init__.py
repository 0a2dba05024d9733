"""Finite volume solver for Keller-Segel chemotaxis with cross-diffusion."""
from .mesh import Mesh, build_cartesian
from .dspace import Field
from .scheme import ModelParams, PicardConfig, State, TimeGrid, picard_advance, run

__all__ = ["Mesh", "build_cartesian", "Field", "ModelParams", "PicardConfig", "State", "TimeGrid",
           "picard_advance", "run"]
__version__ = "0.1.0"
