"""Mountain Car data generation, fitting and evaluation.

``MountainCarConfig()`` is the reduced desk-scale instance (200 bins, 4 000
samples, advantage-cell aggregation); ``MountainCarConfig.full()`` is the
800-bin, quadratic-enriched, per-sample-constraint instance, which is slow.
"""
from __future__ import annotations

import dataclasses
import time
from typing import Optional

import numpy as np

from .algos import ConvexQLearning
from .approx import BinnedBasis
from .env import MountainCarSystem
from .explore import RelayPolicy, SinusoidProbe, Trajectory, cycle_starts, grid_starts, rollout
from .losses import binned_advantage_zeta, binned_pair_zeta
from .oracles import mountain_car_reference, mountain_car_time_to_goal


@dataclasses.dataclass
class MountainCarConfig:
    n_z: int = 10
    n_v: int = 20
    enrich: bool = False
    N: int = 4000
    relay_gain: float = 0.2
    probe_period: float = 10.0
    probe_amplitude: float = 1.0
    episode_len: Optional[int] = 20
    start_grid: tuple = (10, 20)
    start_seed: int = 0
    zeta: str = "advantage_cell"     # advantage_cell | bin_input | per_sample
    kappa_be: float = 1.0
    mu: str = "visited"
    tie_break: str = "random"
    policy_seed: int = 0
    n_eval_starts: int = 10
    max_steps: int = 1000
    solver_tol: float = 1e-9
    max_iter: int = 50000
    cache_dir: Optional[str] = None

    @classmethod
    def full(cls, **kw):
        base = dict(n_z=40, n_v=20, enrich=True, N=10_000, zeta="per_sample", start_grid=(40, 20),
                    max_iter=200_000)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown mountain car options: {sorted(unknown)}")
        d = dict(d)
        if "start_grid" in d:
            d["start_grid"] = tuple(d["start_grid"])
        return cls(**d)


def standard_starts(n=10) -> np.ndarray:
    """Rest states spread along the road, z in [-1.1, 0.3]."""
    return np.column_stack([np.linspace(-1.1, 0.3, n), np.zeros(n)])


def architecture(cfg: MountainCarConfig) -> BinnedBasis:
    return BinnedBasis(cfg.n_z, cfg.n_v, enrich=cfg.enrich)


def mountain_car_data(cfg: MountainCarConfig, sys: Optional[MountainCarSystem] = None) -> Trajectory:
    """Relay exploration with restarts on a shuffled start grid.

    The run is truncated after its last goal arrival so that every retained
    episode fragment is either complete or cut by the episode cap.
    """
    sys = sys or MountainCarSystem()
    nz, nv = cfg.start_grid
    lo = (sys.z_min + 0.05, -sys.v_bar + 0.005)
    hi = (sys.z_goal - 0.05, sys.v_bar - 0.005)
    starts = grid_starts(lo, hi, (nz, nv), seed=cfg.start_seed)
    w = 2 * np.pi * np.sqrt([2.0, 3.0, 5.0]) / cfg.probe_period
    probe = SinusoidProbe(w, cfg.probe_amplitude / 3.0, 0.0)
    traj = rollout(sys, RelayPolicy(cfg.relay_gain), probe, standard_starts(1)[0], cfg.N,
                   restart=cycle_starts(starts, cfg.episode_len))
    arrivals = np.flatnonzero(traj.x_next[:, 0] >= sys.z_goal)
    if arrivals.size == 0:
        raise RuntimeError("exploration never reached the goal; the value function is unanchored")
    return traj.window(0, int(arrivals[-1]) + 1)


def _zeta(cfg, arch):
    if cfg.zeta == "advantage_cell":
        return binned_advantage_zeta(arch)
    if cfg.zeta == "bin_input":
        return binned_pair_zeta(arch)
    if cfg.zeta == "per_sample":
        return "per_sample"
    raise ValueError(f"unknown zeta option {cfg.zeta!r}")


def fit_mountain_car(traj: Trajectory, cfg: MountainCarConfig) -> ConvexQLearning:
    arch = architecture(cfg)
    est = ConvexQLearning(arch, cfg.mu, _zeta(cfg, arch), None, kappa_be=cfg.kappa_be,
                          constraint_mode="advantage_cone", solver_tol=cfg.solver_tol,
                          max_iter=cfg.max_iter)
    return est.fit(traj)


def bin_relative_errors(est, traj: Trajectory, ref) -> np.ndarray:
    """|mean J - mean J_ref| / mean J_ref over the samples of each visited bin."""
    arch = est.architecture
    b = arch.bin_index(traj.x)
    Jt, Jr = est.value(traj.x), ref(traj.x)
    out = []
    for bb in np.unique(b[b >= 0]):
        m = b == bb
        r = Jr[m].mean()
        if r > 0:
            out.append(abs(Jt[m].mean() - r) / r)
    return np.asarray(out)


def evaluate_mountain_car(est, traj: Trajectory, cfg: MountainCarConfig, ref=None,
                          sys: Optional[MountainCarSystem] = None) -> dict:
    sys = sys or MountainCarSystem()
    ref = ref if ref is not None else mountain_car_reference(sys, cache_dir=cfg.cache_dir)
    rng = np.random.default_rng(cfg.policy_seed)

    def policy(x):
        return est.policy(np.atleast_2d(x), cfg.tie_break, rng)[0]

    steps = [mountain_car_time_to_goal(sys, policy, s, cfg.max_steps)
             for s in standard_starts(cfg.n_eval_starts)]
    errs = bin_relative_errors(est, traj, ref)
    return dict(status=est.solution_.status, residuals=dict(est.solution_.residuals),
                steps_to_goal=steps, all_reached=all(s is not None for s in steps),
                median_rel_error=float(np.median(errs)), max_rel_error=float(errs.max()),
                visited_bins=int(errs.size), n_samples=len(traj))


def run_mountain_car(cfg: Optional[MountainCarConfig] = None, sys=None):
    """(estimator, trajectory, report) for one configuration."""
    cfg = cfg or MountainCarConfig()
    sys = sys or MountainCarSystem()
    t0 = time.perf_counter()
    traj = mountain_car_data(cfg, sys)
    est = fit_mountain_car(traj, cfg)
    t_fit = time.perf_counter() - t0
    report = evaluate_mountain_car(est, traj, cfg, sys=sys)
    report["fit_seconds"] = t_fit
    return est, traj, report


def value_surface(est, sys: Optional[MountainCarSystem] = None, n_z=60, n_v=40) -> np.ndarray:
    """Rows (z, v, J) on a regular grid below the goal line."""
    sys = sys or MountainCarSystem()
    z = np.linspace(sys.z_min, sys.z_goal, n_z, endpoint=False)
    v = np.linspace(-sys.v_bar, sys.v_bar, n_v)
    Z, V = np.meshgrid(z, v, indexing="ij")
    X = np.column_stack([Z.ravel(), V.ravel()])
    return np.column_stack([X, est.value(X)])
