"""Two-view depth and relative pose by likelihood ascent over a correlation pyramid."""

from .geometry import DepthMap, Intrinsics, PoseSE3
from .solver import Solution, SolverConfig, solve
from .synth import SceneSpec, gen_scene

__all__ = ["DepthMap", "Intrinsics", "PoseSE3", "SceneSpec", "Solution", "SolverConfig", "gen_scene", "solve"]
__version__ = "0.1.0"
