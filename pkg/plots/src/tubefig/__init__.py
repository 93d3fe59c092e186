"""Figure rendering for tube-MPC CSV logs."""

from .csvio import RoaTable, SchemaError, Trajectory, load_roa, load_trajectory, load_tubes
from .render import FigureSpec, main, render

__all__ = ["RoaTable", "SchemaError", "Trajectory", "load_roa", "load_trajectory",
           "load_tubes", "FigureSpec", "main", "render"]
