"""Convex Q-learning algorithms and the DQN baseline.

Every algorithm is an estimator with ``fit(traj)``; fitted estimators expose
``theta_``, ``record_`` and the evaluation methods ``predict`` (Q), ``value``
(J) and ``policy`` (greedy input).  The ``run_*`` functions wrap them for
config-driven use and return ``(theta, record)``.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
import warnings
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from ._validation import check_architecture, check_trajectory
from .approx import LinearArchitecture, QuadBasis, _as_2d
from .explore import Trajectory
from .losses import (BatchLossData, BatchWindow, MuMeasure, PerSampleZeta,
                     WatkinsZeta, ZetaSpec, assemble_batch, equal_windows, td_watkins_batch)
from .qp import (OPTIMAL, QpSolution, QuadraticProgram, prox_step, primal_dual_step,
                 solve_qp, zap_gain_update)

logger = logging.getLogger(__name__)


class InfeasibleProgram(RuntimeError):
    """The convex program has no feasible point (or is unbounded)."""

    def __init__(self, msg, solution: Optional[QpSolution] = None):
        super().__init__(msg)
        self.solution = solution


class NotConverged(RuntimeError):
    """The solver stopped at its iteration limit."""


class NonLipschitzRegion(UserWarning):
    """Parameter lies where the Watkins vector field is far from Lipschitz."""


# -- run records -------------------------------------------------------------------

@dataclasses.dataclass
class RunRecord:
    """Per-step diagnostics of an iterative run (one row per batch update)."""

    step: list = dataclasses.field(default_factory=list)
    epoch: list = dataclasses.field(default_factory=list)
    alpha: list = dataclasses.field(default_factory=list)
    mu_J: list = dataclasses.field(default_factory=list)
    E_be: list = dataclasses.field(default_factory=list)
    E_plus: list = dataclasses.field(default_factory=list)
    z_min: list = dataclasses.field(default_factory=list)
    theta_change: list = dataclasses.field(default_factory=list)
    lambda_norm: list = dataclasses.field(default_factory=list)
    wall_time: list = dataclasses.field(default_factory=list)
    thetas: list = dataclasses.field(default_factory=list)   # end-of-epoch snapshots
    lambdas: list = dataclasses.field(default_factory=list)
    status: str = "ok"

    COLUMNS = ("step", "epoch", "alpha", "mu_J", "E_be", "E_plus", "z_min", "theta_change",
               "lambda_norm", "wall_time")

    def append(self, **row):
        for k in self.COLUMNS:
            getattr(self, k).append(float(row.get(k, np.nan)))

    def __len__(self):
        return len(self.step)

    def table(self, include_time=True) -> np.ndarray:
        cols = [c for c in self.COLUMNS if include_time or c != "wall_time"]
        return np.column_stack([np.asarray(getattr(self, c), float) for c in cols]) if len(self) else \
            np.zeros((0, len(cols)))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for i in range(len(self)):
                w.writerow([repr(getattr(self, c)[i]) for c in self.COLUMNS])


# -- helpers ---------------------------------------------------------------------

def _resolve_mu(mu, traj: Trajectory) -> Optional[MuMeasure]:
    if mu is None or isinstance(mu, MuMeasure):
        return mu
    if isinstance(mu, str):
        if mu == "visited":
            pts = np.unique(np.vstack([traj.x, traj.x_next]), axis=0)
            return MuMeasure.uniform(pts)
        raise ValueError(f"unknown mu spec {mu!r}")
    return MuMeasure.uniform(np.asarray(mu, float))


def _resolve_zeta(zeta, arch, traj) -> Optional[ZetaSpec]:
    if zeta is None or isinstance(zeta, ZetaSpec):
        return zeta
    if zeta == "watkins":
        return WatkinsZeta(arch)
    if zeta == "per_sample":
        return PerSampleZeta(len(traj))
    raise ValueError(f"unknown zeta spec {zeta!r}")


def _windows(traj, n_batches, windows):
    if windows is not None:
        return [w if isinstance(w, BatchWindow) else BatchWindow(*w) for w in windows]
    return equal_windows(len(traj), n_batches)


def _unique_rows(D):
    D = D.toarray() if sp.issparse(D) else np.asarray(D)
    U, inv, cnt = np.unique(D, axis=0, return_inverse=True, return_counts=True)
    return U, cnt


def _plus_tensor(data: BatchLossData):
    """Rows R with J - Q = R theta: shape (r, k, d) with k = 1 (variant Q) or n_inputs."""
    if data.plus_variant == "Q":
        D = data.plus_rows.toarray() if sp.issparse(data.plus_rows) else np.asarray(data.plus_rows)
        return D[:, None, :]
    arch = data.arch
    if arch.inputs is None:
        raise ValueError("the min-Q positivity penalty needs a finite input set")
    X = data.X
    PJ = arch.psi_J(X)
    PJ = PJ.toarray() if sp.issparse(PJ) else PJ
    out = []
    for u in arch.inputs:
        Pu = arch.psi(X, np.tile(u, (len(X), 1)))
        out.append(PJ - (Pu.toarray() if sp.issparse(Pu) else Pu))
    return np.stack(out, axis=1)


def _minimize_pwq(H, g, R, weight, theta0, max_iter=100, tol=1e-12):
    """Minimize 1/2 t'Ht + g't + weight * sum_k max(max_j R[k,j] t, 0)^2 by semismooth Newton."""
    theta = np.asarray(theta0, float).copy()
    r = R.shape[0]

    def parts(t):
        v = R @ t                      # (r, k)
        j = np.argmax(v, axis=1)
        a = v[np.arange(r), j]
        act = a > 0
        Ra = R[np.arange(r), j][act]   # active rows
        f = 0.5 * t @ H @ t + g @ t + weight * np.sum(a[act] ** 2)
        grad = H @ t + g + 2 * weight * Ra.T @ a[act]
        return f, grad, Ra

    f, grad, Ra = parts(theta)
    for _ in range(max_iter):
        Hs = H + 2 * weight * Ra.T @ Ra
        try:
            step = -scipy.linalg.solve(Hs, grad, assume_a="sym")
        except (np.linalg.LinAlgError, ValueError):
            step = -np.linalg.lstsq(Hs, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = theta + t * step
            fc, gc, Rc = parts(cand)
            if fc <= f + 1e-4 * t * grad @ step or t < 1e-12:
                break
            t *= 0.5
        theta, f, grad, Ra = cand, fc, gc, Rc
        if np.max(np.abs(grad)) <= tol * max(1.0, np.max(np.abs(g))):
            break
    return theta


def _program(data: BatchLossData, *, kappa_be, kappa_plus, galerkin, tol_galerkin, plus_constraint,
             tol_plus, cone_lo=None, prox=None, extra_linear=None) -> QuadraticProgram:
    """Quadratic program for one (pooled or batch) data set.

    Variables are theta, followed by slacks for the positivity penalty when
    kappa_plus > 0.  ``prox = (theta_n, alpha, W)`` adds (1/2alpha)||theta - theta_n||_W^2.
    """
    d = data.d
    H = 2 * kappa_be * data.P
    lin = data.objective + 2 * kappa_be * data.q
    if extra_linear is not None:
        lin = lin + extra_linear
    if prox is not None:
        th_n, alpha, W = prox
        if np.isfinite(alpha):
            Wm = np.eye(d) if W is None else W
            H = H + Wm / alpha
            lin = lin - Wm @ th_n / alpha
    A_eq = b_eq = None
    A_in, b_in = [], []
    if galerkin is not None and data.Z is not None:
        if galerkin == "eq":
            A_eq, b_eq = data.Z, data.b_z
        elif galerkin == "ineq":
            # b_z - Z theta >= -Tol
            A_in.append(data.Z)
            b_in.append(data.b_z + tol_galerkin)
        else:
            raise ValueError("galerkin must be 'eq', 'ineq' or None")
    if plus_constraint and data.Zp is not None:
        A_in.append(data.Zp)
        b_in.append(np.full(data.Zp.shape[0], tol_plus))
    lo = cone_lo
    n_slack = 0
    if kappa_plus > 0:
        R = _plus_tensor(data)
        r, k, _ = R.shape
        rows, cnt = _unique_rows(R.reshape(r, k * d))
        R = rows.reshape(-1, k, d)
        n_slack = R.shape[0]
        Hs = np.zeros((d + n_slack, d + n_slack))
        Hs[:d, :d] = H
        Hs[d:, d:] = np.diag(2 * kappa_plus * cnt / r)
        H = Hs
        lin = np.concatenate([lin, np.zeros(n_slack)])
        # slack s_i >= R[i, j] theta for all j, s_i >= 0
        blocks = []
        for j in range(k):
            B = np.zeros((n_slack, d + n_slack))
            B[:, :d] = R[:, j, :]
            B[:, d:] = -np.eye(n_slack)
            blocks.append(B)
        pad = lambda M: None if M is None else np.hstack([np.asarray(M), np.zeros((M.shape[0], n_slack))])
        A_eq = pad(A_eq)
        A_in = [pad(np.asarray(M)) for M in A_in] + blocks
        b_in = b_in + [np.zeros(n_slack)] * k
        lo = np.concatenate([np.full(d, -np.inf) if lo is None else lo, np.zeros(n_slack)])
    A_in_m = np.vstack(A_in) if A_in else None
    b_in_v = np.concatenate(b_in) if b_in else None
    H = 0.5 * (H + H.T)
    return QuadraticProgram(H, lin, A_eq=A_eq, b_eq=b_eq, A_in=A_in_m, b_in=b_in_v, lo=lo)


def _cone_lo(arch, use_cone):
    if not use_cone:
        return None
    if isinstance(arch.constraint, str) and arch.constraint == "advantage":
        return arch.box()[0]
    if isinstance(arch.constraint, str):
        raise ValueError("architecture has no cone constraint")
    return None


def _custom_cone(arch, use_cone):
    if use_cone and not isinstance(arch.constraint, str):
        Y = arch.constraint_matrix
        return Y.toarray(), np.zeros(Y.shape[0])
    return None, None


# -- estimator base ------------------------------------------------------------------

class _QEstimator(BaseEstimator):
    """Shared evaluation methods."""

    def _arch(self) -> LinearArchitecture:
        return check_architecture(self.architecture)

    def predict(self, X, U):
        return self._arch().Q(self.theta_, X, U)

    def value(self, X):
        arch = self._arch()
        if arch.d_J in (None, 0):
            return arch.min_Q(self.theta_, X)[1]
        return arch.J(self.theta_, X)

    def policy(self, X, tie_break="first", random_state=None):
        arch = self._arch()
        X = _as_2d(X, arch.state_dim)
        if tie_break != "first":
            j = arch.greedy_index(self.theta_, X, tie_break, random_state)
        else:
            j, _ = arch.min_Q(self.theta_, X)
        return arch.inputs[j] if arch.inputs is not None else j

    def bellman_error(self, traj: Trajectory) -> float:
        """Mean-square Watkins temporal difference on ``traj``."""
        return float(np.mean(td_watkins_batch(self._arch(), self.theta_, traj,
                                              getattr(self, "gamma", 1.0)) ** 2))

    def score(self, traj, y=None):
        return -self.bellman_error(traj)


# -- one-shot programs ---------------------------------------------------------------

class LPQL(_QEstimator):
    """maximize <mu, J> subject to z(theta) = 0 and z+(theta) <= 0."""

    def __init__(self, architecture=None, mu=None, zeta="watkins", zeta_plus=None, cone=False,
                 gamma=1.0, solver_tol=1e-9, max_iter=50000):
        self.architecture = architecture
        self.mu = mu
        self.zeta = zeta
        self.zeta_plus = zeta_plus
        self.cone = cone
        self.gamma = gamma
        self.solver_tol = solver_tol
        self.max_iter = max_iter

    def fit(self, traj, y=None):
        traj = check_trajectory(traj)
        arch = self._arch()
        t0 = time.perf_counter()
        data = assemble_batch(arch, None, traj, _resolve_mu(self.mu, traj), 0.0, 0.0,
                              zeta=_resolve_zeta(self.zeta, arch, traj),
                              zeta_plus=_resolve_zeta(self.zeta_plus, arch, traj),
                              gamma=self.gamma)
        prob = _program(data, kappa_be=0.0, kappa_plus=0.0, galerkin="eq" if data.Z is not None else None,
                        tol_galerkin=0.0, plus_constraint=True, tol_plus=0.0,
                        cone_lo=_cone_lo(arch, self.cone))
        _add_custom_cone(prob, arch, self.cone)
        sol = solve_qp(prob, tol=self.solver_tol, max_iter=self.max_iter)
        self._finish(sol, data, t0)
        return self

    def _finish(self, sol, data, t0):
        self.solution_ = sol
        self.data_ = data
        d = data.d
        self.theta_ = sol.x[:d].copy()
        rec = RunRecord(status=sol.status)
        rec.append(step=1, epoch=1, alpha=np.inf, mu_J=data.mu_vec @ self.theta_, E_be=data.E_be(self.theta_),
                   E_plus=data.E_plus(self.theta_) if data.plus_rows is not None else np.nan,
                   z_min=np.min(data.z(self.theta_)) if data.Z is not None else np.nan,
                   theta_change=np.nan, lambda_norm=np.nan, wall_time=time.perf_counter() - t0)
        rec.thetas.append(self.theta_.copy())
        self.record_ = rec
        if sol.status in ("infeasible", "unbounded"):
            raise InfeasibleProgram(f"program is {sol.status}; KKT residuals {sol.residuals}", sol)
        if sol.status != OPTIMAL:
            raise NotConverged(f"solver stopped with status {sol.status}; residuals {sol.residuals}")


def _add_custom_cone(prob: QuadraticProgram, arch, use_cone):
    Y, z = _custom_cone(arch, use_cone)
    if Y is None:
        return
    n = prob.n
    Yp = sp.hstack([sp.csr_matrix(Y), sp.csr_matrix((Y.shape[0], n - Y.shape[1]))]).tocsr()
    prob.A_in = sp.vstack([prob.A_in, Yp]).tocsr()
    prob.b_in = np.concatenate([prob.b_in, z])


_MODES = {
    # galerkin, cone, positivity penalty allowed
    "penalty": ("eq", False, True),
    "hard_galerkin": ("ineq", False, True),
    "advantage_cone": ("ineq", True, False),
}


class ConvexQLearning(LPQL):
    """One-shot CQL: minimize -<mu,J> + k_be E_be + k_plus E_plus under the chosen constraints.

    constraint_mode:
      "penalty"         z(theta) = 0, z+(theta) <= Tol, positivity penalty;
      "hard_galerkin"   z(theta) >= -Tol, z+(theta) <= Tol, positivity penalty;
      "advantage_cone"  z(theta) >= -Tol and theta_A >= 0 (no positivity penalty).
    """

    def __init__(self, architecture=None, mu=None, zeta="watkins", zeta_plus=None, kappa_be=1.0,
                 kappa_plus=0.0, Tol=0.0, constraint_mode="penalty", plus_variant="Q", gamma=1.0,
                 solver_tol=1e-9, max_iter=50000):
        self.architecture = architecture
        self.mu = mu
        self.zeta = zeta
        self.zeta_plus = zeta_plus
        self.kappa_be = kappa_be
        self.kappa_plus = kappa_plus
        self.Tol = Tol
        self.constraint_mode = constraint_mode
        self.plus_variant = plus_variant
        self.gamma = gamma
        self.solver_tol = solver_tol
        self.max_iter = max_iter

    def fit(self, traj, y=None):
        traj = check_trajectory(traj)
        arch = self._arch()
        if self.constraint_mode not in _MODES:
            raise ValueError(f"unknown constraint mode {self.constraint_mode!r}")
        if self.kappa_be < 0 or self.kappa_plus < 0:
            raise ValueError("penalty weights must be non-negative")
        galerkin, cone, plus_ok = _MODES[self.constraint_mode]
        kappa_plus = self.kappa_plus if plus_ok else 0.0
        t0 = time.perf_counter()
        data = assemble_batch(arch, None, traj, _resolve_mu(self.mu, traj), self.kappa_be, kappa_plus,
                              self.plus_variant, zeta=_resolve_zeta(self.zeta, arch, traj),
                              zeta_plus=_resolve_zeta(self.zeta_plus, arch, traj) if plus_ok else None,
                              gamma=self.gamma)
        prob = _program(data, kappa_be=self.kappa_be, kappa_plus=kappa_plus,
                        galerkin=galerkin if data.Z is not None else None, tol_galerkin=self.Tol,
                        plus_constraint=plus_ok, tol_plus=self.Tol, cone_lo=_cone_lo(arch, cone))
        _add_custom_cone(prob, arch, cone)
        sol = solve_qp(prob, tol=self.solver_tol, max_iter=self.max_iter)
        self.program_ = prob
        self._finish(sol, data, t0)
        return self


# -- batch algorithms ------------------------------------------------------------------

class BatchConvexQLearning(_QEstimator):
    """BCQL: theta_{n+1} = argmin E_n(theta) + (1/2 alpha_{n+1}) ||theta - theta_n||^2.

    Batches cycle through ``windows`` (default: ``n_batches`` equal windows)
    for ``n_epochs`` passes; alpha_n = alpha1 / (n + alpha_offset) over the
    global update count n.  With ``cone`` the advantage cone is imposed.
    """

    def __init__(self, architecture=None, mu=None, kappa_be=1.0, kappa_plus=0.0, plus_variant="Q",
                 n_batches=20, windows=None, n_epochs=1, alpha1=1.0, alpha_offset=0.0, theta0=None,
                 cone=False, gamma=1.0, record_every_epoch=True):
        self.architecture = architecture
        self.mu = mu
        self.kappa_be = kappa_be
        self.kappa_plus = kappa_plus
        self.plus_variant = plus_variant
        self.n_batches = n_batches
        self.windows = windows
        self.n_epochs = n_epochs
        self.alpha1 = alpha1
        self.alpha_offset = alpha_offset
        self.theta0 = theta0
        self.cone = cone
        self.gamma = gamma
        self.record_every_epoch = record_every_epoch

    def _alpha(self, n):
        return self.alpha1 / (n + self.alpha_offset)

    def _batches(self, traj, arch, zeta=None):
        mu = _resolve_mu(self.mu, traj)
        wins = _windows(traj, self.n_batches, self.windows)
        return [assemble_batch(arch, w, traj, mu, self.kappa_be, self.kappa_plus, self.plus_variant,
                               zeta=zeta, gamma=self.gamma) for w in wins]

    def _init_theta(self, arch):
        th = np.zeros(arch.d) if self.theta0 is None else np.asarray(self.theta0, float).copy()
        if th.shape != (arch.d,):
            raise ValueError("theta0 has the wrong dimension")
        return th

    def _step(self, data, theta, alpha, arch, W=None):
        lo, hi = (arch.box() if _cone_lo(arch, self.cone) is not None else (None, None))
        if self.kappa_plus > 0:
            if lo is None:
                Wm = np.eye(data.d) if W is None else W
                H = 2 * self.kappa_be * data.P + Wm / alpha
                g = data.objective + 2 * self.kappa_be * data.q - Wm @ theta / alpha
                R = _plus_tensor(data)
                return _minimize_pwq(H, g, R, self.kappa_plus / data.r, theta)
            prob = _program(data, kappa_be=self.kappa_be, kappa_plus=self.kappa_plus, galerkin=None,
                            tol_galerkin=0.0, plus_constraint=False, tol_plus=0.0, cone_lo=lo,
                            prox=(theta, alpha, W))
            sol = solve_qp(prob, tol=1e-10, warm_start=np.concatenate([theta, np.zeros(prob.n - data.d)]))
            return sol.x[:data.d]
        return prox_step(self.kappa_be * data.P, self.kappa_be * data.q, theta, alpha, W,
                         linear=data.objective, lo=lo, hi=hi)

    def fit(self, traj, y=None):
        traj = check_trajectory(traj)
        arch = self._arch()
        t0 = time.perf_counter()
        batches = self._batches(traj, arch)
        theta = self._init_theta(arch)
        rec = RunRecord()
        n = 0
        for ep in range(1, self.n_epochs + 1):
            for data in batches:
                n += 1
                alpha = self._alpha(n)
                new = self._step(data, theta, alpha, arch)
                rec.append(step=n, epoch=ep, alpha=alpha, mu_J=data.mu_vec @ new, E_be=data.E_be(new),
                           E_plus=data.E_plus(new), theta_change=np.max(np.abs(new - theta)),
                           wall_time=time.perf_counter() - t0)
                theta = new
            if self.record_every_epoch:
                rec.thetas.append(theta.copy())
        self.theta_ = theta
        self.record_ = rec
        self.batches_ = batches
        return self


class ZapBCQL(BatchConvexQLearning):
    """BCQL with a matrix gain tracking the loss Hessian: W_{n+1} = W_n + beta (A_{n+1} - W_n)."""

    def __init__(self, architecture=None, mu=None, kappa_be=1.0, kappa_plus=0.0, plus_variant="Q",
                 n_batches=20, windows=None, n_epochs=1, alpha1=1.0, alpha_offset=0.0, theta0=None,
                 cone=False, gamma=1.0, record_every_epoch=True, eta=0.85, ridge=1e-8):
        super().__init__(architecture, mu, kappa_be, kappa_plus, plus_variant, n_batches, windows,
                         n_epochs, alpha1, alpha_offset, theta0, cone, gamma, record_every_epoch)
        self.eta = eta
        self.ridge = ridge

    def _hessian(self, data, theta):
        A = 2 * self.kappa_be * data.P
        if self.kappa_plus > 0:
            R = _plus_tensor(data)
            v = R @ theta
            j = np.argmax(v, axis=1)
            act = v[np.arange(len(j)), j] > 0
            Ra = R[np.arange(len(j)), j][act]
            A = A + 2 * self.kappa_plus / data.r * Ra.T @ Ra
        return A

    def fit(self, traj, y=None):
        traj = check_trajectory(traj)
        arch = self._arch()
        t0 = time.perf_counter()
        batches = self._batches(traj, arch)
        theta = self._init_theta(arch)
        W = np.eye(arch.d)
        rec = RunRecord()
        n = 0
        for ep in range(1, self.n_epochs + 1):
            for data in batches:
                n += 1
                alpha = self._alpha(n)
                beta = min(1.0, alpha ** self.eta)
                W = zap_gain_update(W, self._hessian(data, theta), beta)
                Wr = W + self.ridge * np.eye(arch.d)
                new = self._step(data, theta, alpha, arch, Wr)
                rec.append(step=n, epoch=ep, alpha=alpha, mu_J=data.mu_vec @ new, E_be=data.E_be(new),
                           E_plus=data.E_plus(new), theta_change=np.max(np.abs(new - theta)),
                           wall_time=time.perf_counter() - t0)
                theta = new
            if self.record_every_epoch:
                rec.thetas.append(theta.copy())
        self.theta_, self.record_, self.gain_, self.batches_ = theta, rec, W, batches
        return self


class PrimalDualBCQL(BatchConvexQLearning):
    """pd-BCQL over the cone theta_A >= 0 with multipliers for z_n(theta) >= 0.

    theta_{n+1} = argmin_cone -<mu,J> + k E_n(theta) - lam_n' z_n(theta) + (1/2alpha)||theta - theta_n||^2
    lam_{n+1}   = clip(lam_n - alpha z_n(theta_{n+1}), 0, lam_max)

    ``lam_max=None`` uses ``lam_max_factor`` times the largest multiplier of a
    pilot one-shot solve on the pooled data.
    """

    def __init__(self, architecture=None, mu=None, zeta=None, kappa_be=1.0, n_batches=20, windows=None,
                 n_epochs=1, alpha1=1.0, alpha_offset=0.0, theta0=None, lam0=None, lam_max=None,
                 lam_max_factor=10.0, gamma=1.0, record_every_epoch=True):
        super().__init__(architecture, mu, kappa_be, 0.0, "Q", n_batches, windows, n_epochs, alpha1,
                         alpha_offset, theta0, True, gamma, record_every_epoch)
        self.zeta = zeta
        self.lam0 = lam0
        self.lam_max = lam_max
        self.lam_max_factor = lam_max_factor

    def pilot(self, traj):
        """One-shot solve of the limiting program on pooled data: (theta, multipliers)."""
        arch = self._arch()
        est = ConvexQLearning(arch, self.mu, self.zeta, None, self.kappa_be, 0.0, 0.0, "advantage_cone",
                              gamma=self.gamma, solver_tol=1e-9)
        est.fit(traj)
        return est.theta_, est.solution_.dual_in[:est.data_.Z.shape[0]]

    def fit(self, traj, y=None):
        traj = check_trajectory(traj)
        arch = self._arch()
        if _cone_lo(arch, True) is None:
            raise ValueError("pd-BCQL needs an architecture with the advantage cone")
        t0 = time.perf_counter()
        zeta = _resolve_zeta(self.zeta, arch, traj)
        if zeta is None:
            raise ValueError("pd-BCQL needs an eligibility specification")
        if isinstance(zeta, PerSampleZeta):
            raise ValueError("per-sample eligibility changes dimension across batches; use keyed indicators")
        batches = self._batches(traj, arch, zeta)
        dz = batches[0].Z.shape[0]
        if self.lam_max is None:
            _, duals = self.pilot(traj)
            lam_max = np.full(dz, self.lam_max_factor * max(float(np.max(duals, initial=0.0)), 1e-8))
        else:
            lam_max = np.broadcast_to(np.asarray(self.lam_max, float), (dz,)).copy()
        self.lam_max_ = lam_max
        theta = np.zeros(arch.d) if self.theta0 is None else np.asarray(self.theta0, float).copy()
        theta = np.maximum(theta, arch.box()[0])
        lam = np.zeros(dz) if self.lam0 is None else np.clip(np.asarray(self.lam0, float), 0, lam_max)
        lo, hi = arch.box()
        rec = RunRecord()
        n = 0
        for ep in range(1, self.n_epochs + 1):
            for data in batches:
                n += 1
                alpha = self._alpha(n)
                new, lam = primal_dual_step(data, theta, lam, alpha, lam_max, kappa=self.kappa_be, lo=lo, hi=hi)
                rec.append(step=n, epoch=ep, alpha=alpha, mu_J=data.mu_vec @ new, E_be=data.E_be(new),
                           z_min=np.min(data.z(new)), theta_change=np.max(np.abs(new - theta)),
                           lambda_norm=np.linalg.norm(lam), wall_time=time.perf_counter() - t0)
                theta = new
            if self.record_every_epoch:
                rec.thetas.append(theta.copy())
                rec.lambdas.append(lam.copy())
        self.theta_, self.lambda_, self.record_, self.batches_ = theta, lam, rec, batches
        return self


class DQN(_QEstimator):
    """theta_{n+1} = argmin k E_n(theta; theta_n) + (1/alpha_{n+1}) ||theta - theta_n||^2.

    E_n uses the frozen target min_u Q^{theta_n}(x(k+1)).  ``step_schedule`` is
    "harmonic" (alpha1 / n) or "constant" (alpha1); alpha1 = inf drops the
    regularizer (fitted Q iteration).
    """

    def __init__(self, architecture=None, kappa_be=1.0, alpha1=1.0, step_schedule="harmonic",
                 n_batches=20, windows=None, n_epochs=1, theta0=None, gamma=1.0, ridge=1e-10,
                 tol=0.0, record_every_epoch=True):
        self.architecture = architecture
        self.kappa_be = kappa_be
        self.alpha1 = alpha1
        self.step_schedule = step_schedule
        self.n_batches = n_batches
        self.windows = windows
        self.n_epochs = n_epochs
        self.theta0 = theta0
        self.gamma = gamma
        self.ridge = ridge
        self.tol = tol
        self.record_every_epoch = record_every_epoch

    def value(self, X):
        # DQN only identifies Q; the J/advantage split of the parameter is free
        return self._arch().min_Q(self.theta_, X)[1]

    def _alpha(self, n):
        if self.step_schedule == "constant":
            return self.alpha1
        if self.step_schedule == "harmonic":
            return self.alpha1 / n
        raise ValueError("step_schedule must be 'constant' or 'harmonic'")

    def fit(self, traj, y=None):
        traj = check_trajectory(traj)
        arch = self._arch()
        t0 = time.perf_counter()
        wins = _windows(traj, self.n_batches, self.windows)
        feats = []
        for w in wins:
            sub = traj.window(w.start, w.stop)
            Psi = arch.psi(sub.x, sub.u)
            Psi = Psi.toarray() if sp.issparse(Psi) else np.asarray(Psi)
            feats.append((sub, Psi, Psi.T @ Psi / len(sub)))
        theta = np.zeros(arch.d) if self.theta0 is None else np.asarray(self.theta0, float).copy()
        rec = RunRecord()
        self.ridge_used_ = False
        n = 0
        for ep in range(1, self.n_epochs + 1):
            ep_change = 0.0
            for sub, Psi, G in feats:
                n += 1
                alpha = self._alpha(n)
                _, qmin = arch.min_Q(theta, sub.x_next)
                target = sub.c + self.gamma * qmin
                rhs = self.kappa_be * Psi.T @ target / len(sub)
                H = self.kappa_be * G
                if np.isfinite(alpha):
                    H = H + np.eye(arch.d) / alpha
                    rhs = rhs + theta / alpha
                try:
                    c_, low = scipy.linalg.cho_factor(H)
                    new = scipy.linalg.cho_solve((c_, low), rhs)
                except np.linalg.LinAlgError:
                    if not self.ridge_used_:
                        logger.warning("singular normal equations in DQN; using ridge %.1e", self.ridge)
                    self.ridge_used_ = True
                    new = scipy.linalg.solve(H + self.ridge * np.eye(arch.d), rhs, assume_a="sym")
                resid = target - Psi @ new
                change = np.max(np.abs(new - theta))
                ep_change = max(ep_change, change)
                rec.append(step=n, epoch=ep, alpha=alpha, E_be=np.mean(resid ** 2), theta_change=change,
                           wall_time=time.perf_counter() - t0)
                theta = new
            if self.record_every_epoch:
                rec.thetas.append(theta.copy())
            if self.tol and ep_change <= self.tol:
                break
        self.theta_, self.record_ = theta, rec
        return self


# -- certificates --------------------------------------------------------------------

def projected_bellman_residual(traj: Trajectory, arch: LinearArchitecture, theta, zeta=None,
                               gamma=1.0) -> np.ndarray:
    """Ergodic average of D_{k+1}(theta) zeta_k with the Watkins temporal difference.

    ``zeta`` defaults to psi(x(k), u(k)), the gradient of Q in theta.  For
    quadratic architectures a warning flags parameters where the input block
    of M_Q is nearly singular.
    """
    traj = check_trajectory(traj)
    theta = np.asarray(theta, float)
    if isinstance(arch, QuadBasis):
        _, MQ = arch.matrices(theta)
        MG = MQ[arch.n:, arch.n:]
        ev = np.linalg.eigvalsh(MG)
        if ev[0] < 1e-3 * max(1.0, np.abs(MQ).max()):
            warnings.warn(f"input block eigenvalue {ev[0]:.2e}: min-Q vector field is not Lipschitz here",
                          NonLipschitzRegion)
    D = td_watkins_batch(arch, theta, traj, gamma)
    Z = arch.psi(traj.x, traj.u) if zeta is None else _resolve_zeta(zeta, arch, traj).matrix(arch, traj)
    return np.asarray(Z.T @ D).ravel() / len(traj)


def kkt_certificate(est) -> dict:
    """KKT residuals of a fitted one-shot estimator's program."""
    return dict(est.solution_.residuals)


# -- functional wrappers --------------------------------------------------------------

def _make(cls, arch, config):
    cfg = dict(config or {})
    return cls(architecture=arch, **cfg)


def run_lpql(traj, arch, config=None):
    est = _make(LPQL, arch, config).fit(traj)
    return est.theta_, est.record_


def run_cql(traj, arch, config=None):
    est = _make(ConvexQLearning, arch, config).fit(traj)
    return est.theta_, est.record_


def run_bcql(traj, arch, config=None):
    est = _make(BatchConvexQLearning, arch, config).fit(traj)
    return est.theta_, est.record_


def run_zap_bcql(traj, arch, config=None):
    est = _make(ZapBCQL, arch, config).fit(traj)
    return est.theta_, est.record_


def run_pd_bcql(traj, arch, config=None):
    est = _make(PrimalDualBCQL, arch, config).fit(traj)
    return (est.theta_, est.lambda_), est.record_


def run_dqn(traj, arch, config=None):
    est = _make(DQN, arch, config).fit(traj)
    return est.theta_, est.record_


ALGORITHMS = {
    "lpql": LPQL,
    "cql": ConvexQLearning,
    "bcql": BatchConvexQLearning,
    "zap_bcql": ZapBCQL,
    "pd_bcql": PrimalDualBCQL,
    "dqn": DQN,
}
