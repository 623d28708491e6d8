"""Planar articulated rigid-body dynamics with ground contact.

The hot stepping kernel has two interchangeable backends: a Cython extension
(built by setup.py) and a pure-numpy fallback. The compiled backend is used
automatically when importable; set FALLGUARD_PURE_PYTHON=1 to force the
fallback. `benchmarks/bench_physics.py` compares the two.
"""

from .engine import Engine, HAVE_KERNEL, active_backend
from .types import (
    CollisionGeometry,
    ContactEvent,
    FrameReadout,
    ModelArrays,
    PhysicsDivergence,
    SimState,
    StepReadout,
    WorldParams,
)

__all__ = [
    "Engine",
    "HAVE_KERNEL",
    "active_backend",
    "CollisionGeometry",
    "ContactEvent",
    "FrameReadout",
    "ModelArrays",
    "PhysicsDivergence",
    "SimState",
    "StepReadout",
    "WorldParams",
]
