"""Ground truth: value iteration, Riccati iteration, gridded LQR program, certificates."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.stats import qmc

from .approx import quad_features, sym_from_vech, vech_index
from .env import FiniteSystem, LqrSystem, MountainCarSystem
from .qp import QuadraticProgram, solve_qp


class OracleError(RuntimeError):
    pass


class GridTooSparse(OracleError):
    """The direction grid leaves the gridded program unbounded."""


# -- finite systems --------------------------------------------------------------

def value_iteration(sys: FiniteSystem, tol=1e-12, max_iter=100000):
    """Return (J, Q, policy) for J = min_u c + gamma J(F) on a FiniteSystem.

    Iterates from J = 0, which increases monotonically to J.  Inadmissible
    pairs carry Q = inf.  Unbounded growth means some state cannot reach the
    equilibrium at finite cost.
    """
    nxt, c = sys.next_state, sys.cost_table
    gamma = sys.discount
    cmask = np.where(sys.admissible, c, np.inf)
    nX = nxt.shape[0]
    cmax = float(c[sys.admissible].max()) if sys.admissible.any() else 0.0
    bound = cmax / (1 - gamma) if gamma < 1 else nX * cmax
    J = np.zeros(nX)
    for it in range(max_iter):
        Q = cmask + gamma * J[nxt]
        Jn = Q.min(axis=1)
        if np.any(Jn > bound * (1 + 1e-9) + 1e-9):
            raise OracleError("value iteration diverges: some state cannot reach the equilibrium")
        if np.max(np.abs(Jn - J)) <= tol:
            J = Jn
            break
        J = Jn
    else:
        raise OracleError("value iteration did not converge")
    Q = cmask + gamma * J[nxt]
    return J, Q, np.argmin(Q, axis=1)


def bellman_residual(sys: FiniteSystem, J) -> float:
    Q = np.where(sys.admissible, sys.cost_table, np.inf) + sys.discount * np.asarray(J)[sys.next_state]
    return float(np.max(np.abs(Q.min(axis=1) - J)))


@dataclasses.dataclass
class DplpReport:
    feasible: bool
    max_violation_upper: float   # max of Q - c - J(F), should be <= 0
    max_violation_lower: float   # max of J - Q, should be <= 0
    dominated: bool              # J <= J_opt pointwise
    max_excess: float            # max of J - J_opt
    optimal: bool                # J == J_opt
    pin_violation: float = 0.0   # |J(x_e)|
    max_violation_relaxed: Optional[float] = None
    feasible_relaxed: Optional[bool] = None


def dplp_certificate(sys: FiniteSystem, J, Q, rho=None, tol=1e-9) -> DplpReport:
    """Check (J, Q) against the dynamic-programming LP constraints and J <= J_opt.

    Feasibility includes J(x_e) = 0; without it J_opt + k satisfies every
    other constraint whenever the equilibrium is a zero-cost fixed point.
    """
    J = np.asarray(J, float)
    Q = np.asarray(Q, float)
    adm = sys.admissible
    gamma = sys.discount
    cont = gamma * J[sys.next_state]
    up = np.where(adm, Q - sys.cost_table - cont, -np.inf).max()
    lo = np.where(adm, J[:, None] - Q, -np.inf).max()
    pin = abs(float(J[sys.xe]))
    Jopt, _, _ = value_iteration(sys)
    excess = float(np.max(J - Jopt))
    rep = DplpReport(bool(up <= tol and lo <= tol and pin <= tol), float(up), float(lo), excess <= tol, excess,
                     bool(np.max(np.abs(J - Jopt)) <= tol), pin)
    if rho is not None:
        rel = np.where(adm, Q - (1 - rho) * sys.cost_table - cont, -np.inf).max()
        rep.max_violation_relaxed = float(rel)
        rep.feasible_relaxed = bool(rel <= tol and lo <= tol and pin <= tol)
    return rep


# -- LQR ---------------------------------------------------------------------------

def riccati_solve(lqr: LqrSystem, tol=1e-12, max_iter=100000, return_iterates=False):
    """Iterate M <- S + F'MF - F'MG (R + G'MG)^{-1} G'MF from M = 0."""
    F, G, S, R = lqr.F, lqr.G, lqr.S, lqr.R
    g = lqr.discount
    M = np.zeros_like(F)
    its = [M]
    for _ in range(max_iter):
        FtMG = g * F.T @ M @ G
        Mn = S + g * F.T @ M @ F - FtMG @ np.linalg.solve(R + g * G.T @ M @ G, FtMG.T)
        Mn = 0.5 * (Mn + Mn.T)
        if return_iterates:
            its.append(Mn)
        if not np.all(np.isfinite(Mn)) or np.abs(Mn).max() > 1e15:
            raise OracleError("Riccati iteration diverges: (F, G) not stabilizable or (F, H) not detectable")
        if np.max(np.abs(Mn - M)) <= tol * max(1.0, np.abs(Mn).max()):
            M = Mn
            break
        M = Mn
    else:
        raise OracleError("Riccati iteration did not converge")
    return (M, its) if return_iterates else M


def are_residual(lqr: LqrSystem, M) -> float:
    F, G, S, R = lqr.F, lqr.G, lqr.S, lqr.R
    g = lqr.discount
    FtMG = g * F.T @ M @ G
    rhs = S + g * F.T @ M @ F - FtMG @ np.linalg.solve(R + g * G.T @ M @ G, FtMG.T)
    return float(np.max(np.abs(rhs - M)))


def lqr_q_matrices(M, lqr: LqrSystem):
    """(M_J, M_Q) on z = (x, u): M_J = diag(M, 0), M_Q = diag(S, R) + Xi' M Xi, Xi = [F G]."""
    M = np.atleast_2d(np.asarray(M, float))
    n, m = lqr.state_dim, lqr.input_dim
    Xi = np.hstack([lqr.F, lqr.G])
    Mc = np.zeros((n + m, n + m))
    Mc[:n, :n], Mc[n:, n:] = lqr.S, lqr.R
    MQ = Mc + lqr.discount * Xi.T @ M @ Xi
    MJ = np.zeros((n + m, n + m))
    MJ[:n, :n] = M
    return MJ, 0.5 * (MQ + MQ.T)


def sphere_directions(k: int, count: int) -> np.ndarray:
    """Deterministic, roughly uniform unit vectors in R^k (half-sphere suffices)."""
    if k == 1:
        return np.ones((1, 1))
    if k == 2:
        t = np.pi * (np.arange(count) + 0.5) / count
        return np.column_stack([np.cos(t), np.sin(t)])
    from scipy.stats import norm

    u = qmc.Halton(d=k, scramble=False).random(count + 1)[1:]
    Z = norm.ppf(np.clip(u, 1e-9, 1 - 1e-9))
    return Z / np.linalg.norm(Z, axis=1, keepdims=True)


def _gridded_lp(lqr, Z, tol, warm=None):
    n, m = lqr.state_dim, lqr.input_dim
    Xi = np.hstack([lqr.F, lqr.G])
    Mc = np.zeros((n + m, n + m))
    Mc[:n, :n], Mc[n:, n:] = lqr.S, lqr.R
    # z'(M_Q - M_J)z = z'Mc z + vech(M).(phi(gamma^0.5 Xi z) - phi(x)) >= 0
    Y = np.sqrt(lqr.discount) * Z @ Xi.T
    A = -(quad_features(Y) - quad_features(Z[:, :n]))
    b = np.einsum("ki,ij,kj->k", Z, Mc, Z)
    # maximize trace(M): minimize -sum of diagonal coordinates
    obj = np.array([-1.0 if i == j else 0.0 for i, j in vech_index(n)])
    k = len(obj)
    prob = QuadraticProgram(sp.csr_matrix((k, k)), obj, A_in=A, b_in=b)
    if warm is not None:
        x0, y0 = warm
        warm = (x0, np.concatenate([y0, np.zeros(len(b) - len(y0))]))
    return solve_qp(prob, tol=tol, max_iter=200000, warm_start=warm)


def lqr_sdp_gridded(lqr: LqrSystem, directions=None, tol=1e-10, n_directions=64, refine=True,
                    max_refine=50, check_rank=True, refine_tol=1e-10):
    """Maximize trace(M) subject to z'(M_Q(M) - M_J(M))z >= 0 on a direction grid.

    With ``refine`` the grid is augmented by the most negative eigenvector of
    M_Q - M_J until its smallest eigenvalue is above -refine_tol (relative); the result
    then solves the semidefinite program up to solver accuracy.
    Returns (M_hat, info).
    """
    n, m = lqr.state_dim, lqr.input_dim
    Z = sphere_directions(n + m, n_directions) if directions is None else np.atleast_2d(np.asarray(directions, float))
    if check_rank and np.linalg.matrix_rank(quad_features(Z)) < (n + m) * (n + m + 1) // 2:
        raise GridTooSparse("direction grid does not span the symmetric matrices on (x, u)")
    info = {"rounds": 0, "n_constraints": len(Z)}
    warm = None
    for rnd in range(max_refine + 1):
        sol = _gridded_lp(lqr, Z, tol, warm)
        if sol.status == "unbounded":
            raise GridTooSparse("gridded program is unbounded; densify the direction grid")
        if not sol.optimal:
            raise OracleError(f"gridded program not solved: {sol.status}")
        M = sym_from_vech(sol.x, n)
        MJ, MQ = lqr_q_matrices(M, lqr)
        w, V = np.linalg.eigh(MQ - MJ)
        info.update(rounds=rnd, min_eig=float(w[0]), n_constraints=len(Z), status=sol.status)
        if not refine or w[0] >= -refine_tol * max(1.0, np.abs(MQ).max()):
            break
        Z = np.vstack([Z, V[:, 0]])
        warm = (sol.x, sol.dual_in)
    return M, info


# -- Mountain Car reference ---------------------------------------------------------

@dataclasses.dataclass
class GridValue:
    """Value function tabulated on a rectangular grid with bilinear interpolation."""

    z: np.ndarray
    v: np.ndarray
    J: np.ndarray  # (len(z), len(v))
    z_goal: float = 0.5
    meta: dict = dataclasses.field(default_factory=dict)

    def weights(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        zc = np.clip(X[:, 0], self.z[0], self.z[-1])
        vc = np.clip(X[:, 1], self.v[0], self.v[-1])
        iz = np.clip(np.searchsorted(self.z, zc, side="right") - 1, 0, len(self.z) - 2)
        iv = np.clip(np.searchsorted(self.v, vc, side="right") - 1, 0, len(self.v) - 2)
        tz = (zc - self.z[iz]) / (self.z[iz + 1] - self.z[iz])
        tv = (vc - self.v[iv]) / (self.v[iv + 1] - self.v[iv])
        nv = len(self.v)
        idx = np.column_stack([iz * nv + iv, iz * nv + iv + 1, (iz + 1) * nv + iv, (iz + 1) * nv + iv + 1])
        w = np.column_stack([(1 - tz) * (1 - tv), (1 - tz) * tv, tz * (1 - tv), tz * tv])
        goal = X[:, 0] >= self.z_goal
        w[goal] = 0.0
        return idx, w

    def __call__(self, X):
        idx, w = self.weights(X)
        return np.sum(self.J.ravel()[idx] * w, axis=1)

    def save(self, path):
        with open(path, "wb") as fh:
            np.savez(fh, z=self.z, v=self.v, J=self.J, z_goal=self.z_goal, meta=json.dumps(self.meta))

    @classmethod
    def load(cls, path):
        with np.load(path) as f:
            return cls(f["z"], f["v"], f["J"], float(f["z_goal"]), json.loads(str(f["meta"])))


def _grid_points(lo, hi, s):
    k0, k1 = int(np.ceil(lo / s - 1e-9)), int(np.floor(hi / s + 1e-9))
    pts = np.arange(k0, k1 + 1) * s
    if pts[0] > lo + 1e-12:
        pts = np.concatenate([[lo], pts])
    if pts[-1] < hi - 1e-12:
        pts = np.concatenate([pts, [hi]])
    return pts


def mountain_car_reference(sys: MountainCarSystem = None, s_z=0.041, s_v=0.001, tol=1e-9,
                           max_iter=20000, cache_dir=None) -> GridValue:
    """Minimum time-to-goal by value iteration on an interpolated grid model.

    Grid points sit at integer multiples of (s_z, s_v), with the box edges
    added.  Successors are evaluated with the exact dynamics and the value at
    off-grid successors is bilinearly interpolated.
    """
    sys = sys or MountainCarSystem()
    params = dict(s_z=s_z, s_v=s_v, tol=tol, sys=dataclasses.asdict(sys))
    key = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:16]
    cache_dir = cache_dir if cache_dir is not None else os.environ.get("CVXQ_CACHE")
    if cache_dir:
        path = Path(cache_dir) / f"mc_reference_{key}.npz"
        if path.exists():
            ref = GridValue.load(path)
            if ref.meta.get("key") == key:
                return ref
    zg = _grid_points(sys.z_min, sys.z_goal, s_z)
    zg = zg[zg < sys.z_goal]
    vg = _grid_points(-sys.v_bar, sys.v_bar, s_v)
    Zs, Vs = np.meshgrid(zg, vg, indexing="ij")
    S = np.column_stack([Zs.ravel(), Vs.ravel()])
    nS = len(S)
    tmp = GridValue(zg, vg, np.zeros((len(zg), len(vg))), sys.z_goal)
    T = []
    for u in sys.inputs[:, 0]:
        Sn = sys.step_many(S, u)
        idx, w = tmp.weights(Sn)
        rows = np.repeat(np.arange(nS), 4)
        T.append(sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(nS, nS)))
    J = np.zeros(nS)
    for it in range(max_iter):
        Jn = 1.0 + np.minimum(T[0] @ J, T[1] @ J)
        if np.max(np.abs(Jn - J)) <= tol:
            J = Jn
            break
        J = Jn
    else:
        raise OracleError("Mountain Car value iteration did not converge")
    ref = GridValue(zg, vg, J.reshape(len(zg), len(vg)), sys.z_goal,
                    {"key": key, "s_z": s_z, "s_v": s_v, "iterations": it + 1})
    if cache_dir:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        ref.save(Path(cache_dir) / f"mc_reference_{key}.npz")
    return ref


def mountain_car_time_to_goal(sys: MountainCarSystem, policy, x0, max_steps=1000):
    """Steps until the goal under ``policy``; None if not reached."""
    x = np.asarray(x0, float)
    for k in range(max_steps):
        if sys.at_goal(x):
            return k
        x = sys.step(x, policy(x))
    return k + 1 if sys.at_goal(x) else None
