"""Input validation shared by the estimators."""
from __future__ import annotations

import numpy as np

from .approx import LinearArchitecture
from .explore import Trajectory


def check_trajectory(traj) -> Trajectory:
    if not isinstance(traj, Trajectory):
        raise TypeError(f"expected a Trajectory, got {type(traj).__name__}")
    if len(traj) == 0:
        raise ValueError("trajectory is empty")
    for name in ("x", "u", "c", "x_next"):
        if not np.all(np.isfinite(getattr(traj, name))):
            raise ValueError(f"trajectory field {name!r} has non-finite entries")
    return traj


def check_architecture(arch) -> LinearArchitecture:
    if not isinstance(arch, LinearArchitecture):
        raise TypeError("architecture must be a LinearArchitecture instance")
    return arch


def check_theta(theta, arch: LinearArchitecture) -> np.ndarray:
    theta = np.asarray(theta, float)
    if theta.shape != (arch.d,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({arch.d},)")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta has non-finite entries")
    return theta
