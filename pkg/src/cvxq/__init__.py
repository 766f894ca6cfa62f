"""Convex formulations of Q-learning with linear function approximation."""
__version__ = "0.1.0"

from .algos import (DQN, LPQL, BatchConvexQLearning, ConvexQLearning, InfeasibleProgram, NotConverged,
                    PrimalDualBCQL, RunRecord, ZapBCQL, projected_bellman_residual)
from .approx import BinnedBasis, FeatureTableBasis, FunctionBasis, QuadBasis
from .env import FiniteSystem, LqrSystem, MountainCarSystem, random_finite_system
from .explore import Trajectory, rollout

__all__ = ["DQN", "LPQL", "BatchConvexQLearning", "ConvexQLearning", "InfeasibleProgram", "NotConverged",
           "PrimalDualBCQL", "RunRecord", "ZapBCQL", "projected_bellman_residual", "BinnedBasis",
           "FeatureTableBasis", "FunctionBasis", "QuadBasis", "FiniteSystem", "LqrSystem",
           "MountainCarSystem", "random_finite_system", "Trajectory", "rollout"]
