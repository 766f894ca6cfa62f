"""Average-cost Markov decision processes.

Q-function normalized by a pmf nu on X x U:

    Q(x,u) = c(x,u) + sum_x' P_u(x,x') min_u' Q(x',u') - delta <nu, Q>,

whose solution gives eta = delta <nu, Q> and the relative value function
h(x) = min_u Q(x,u).  The learning loss replaces the next-state value by a
conditional expectation h_{k+1|k}, approximated in one of four ways
(``CondExpEstimator``).
"""
from __future__ import annotations

import itertools
import logging
import warnings
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .algos import BatchConvexQLearning
from .approx import FeatureTableBasis, LinearArchitecture
from .env import FiniteSystem
from .explore import Trajectory
from .losses import BatchLossData, BatchWindow, MuMeasure, ZetaSpec

logger = logging.getLogger(__name__)


class NotControllable(ValueError):
    """Some state cannot be reached from another under any policy."""


class NotErgodic(ValueError):
    """The chain under the policy has no unique stationary law."""


class Mdp:
    """Finite MDP with transition tensor P[u, x, x'] and cost table c[x, u]."""

    def __init__(self, P, cost, nu=None, delta: float = 1.0, check_controllable: bool = True):
        P = np.asarray(P, float)
        cost = np.asarray(cost, float)
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise ValueError("P must have shape (n_inputs, n_states, n_states)")
        nU, nX, _ = P.shape
        if np.any(P < 0) or not np.allclose(P.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("each row of P_u must be a pmf")
        if cost.shape != (nX, nU):
            raise ValueError(f"cost must have shape {(nX, nU)}")
        if nu is None:
            nu = np.zeros((nX, nU))
            nu[0, 0] = 1.0
        nu = np.asarray(nu, float)
        if nu.shape != (nX, nU) or np.any(nu < 0) or not np.isclose(nu.sum(), 1.0):
            raise ValueError("nu must be a pmf on X x U")
        if delta <= 0:
            raise ValueError("delta must be positive")
        self.P, self.cost, self.nu, self.delta = P, cost, nu, float(delta)
        if check_controllable:
            self.check_controllable()

    n_states = property(lambda self: self.P.shape[1])
    n_inputs = property(lambda self: self.P.shape[0])

    @classmethod
    def from_finite_system(cls, sys: FiniteSystem, **kw) -> "Mdp":
        """Deterministic MDP with P_u(x, F(x,u)) = 1."""
        nX, nU = sys.next_state.shape
        P = np.zeros((nU, nX, nX))
        for u in range(nU):
            P[u, np.arange(nX), sys.next_state[:, u]] = 1.0
        return cls(P, sys.cost_table, **kw)

    @property
    def deterministic(self) -> bool:
        return bool(np.all((self.P == 0) | (self.P == 1)))

    def check_controllable(self):
        reach = (self.P.max(axis=0) > 0) | np.eye(self.n_states, dtype=bool)
        R = reach.astype(int)
        for _ in range(int(np.ceil(np.log2(max(self.n_states, 2)))) + 1):
            R = ((R @ R) > 0).astype(int)
        if not np.all(R):
            bad = np.argwhere(R == 0)[0]
            raise NotControllable(f"state {bad[1]} unreachable from state {bad[0]}")

    def policy_matrix(self, policy) -> np.ndarray:
        """(n_states, n_inputs) probabilities from a deterministic index array or a matrix."""
        pol = np.asarray(policy)
        if pol.ndim == 1:
            M = np.zeros((self.n_states, self.n_inputs))
            M[np.arange(self.n_states), pol.astype(int)] = 1.0
            return M
        if pol.shape != (self.n_states, self.n_inputs) or not np.allclose(pol.sum(axis=1), 1):
            raise ValueError("randomized policy must be a row-stochastic (n_states, n_inputs) matrix")
        return pol.astype(float)

    def chain(self, policy) -> np.ndarray:
        M = self.policy_matrix(policy)
        return np.einsum("xu,uxy->xy", M, self.P)

    def bellman_operator(self, Q) -> np.ndarray:
        """c + P_u min Q - delta <nu, Q>."""
        h = Q.min(axis=1)
        return self.cost + np.einsum("uxy,y->xu", self.P, h) - self.delta * np.sum(self.nu * Q)

    def residual(self, Q) -> float:
        return float(np.max(np.abs(self.bellman_operator(Q) - Q)))

    def simulate(self, policy, x0: int, N: int, seed=0) -> Trajectory:
        """Sample path; ``policy`` as for ``policy_matrix``.  States and inputs are stored as indices."""
        rng = np.random.default_rng(seed)
        M = self.policy_matrix(policy)
        X = np.empty(N, int)
        U = np.empty(N, int)
        Xn = np.empty(N, int)
        x = int(x0)
        for k in range(N):
            u = rng.choice(self.n_inputs, p=M[x])
            xn = rng.choice(self.n_states, p=self.P[u, x])
            X[k], U[k], Xn[k] = x, u, xn
            x = xn
        return Trajectory(X[:, None].astype(float), U[:, None].astype(float), self.cost[X, U],
                          Xn[:, None].astype(float), np.zeros((N, 1)))


def mdp_from_config(cfg: dict) -> Mdp:
    P = np.asarray(cfg["P"], float)
    return Mdp(P, np.asarray(cfg["cost"], float), cfg.get("nu"), float(cfg.get("delta", 1.0)))


# -- oracles -----------------------------------------------------------------------

def _evaluate_policy(mdp: Mdp, pol: np.ndarray) -> np.ndarray:
    """Solve Q = c + P_u Q(., pol) - delta <nu, Q> exactly for a deterministic policy."""
    nX, nU = mdp.n_states, mdp.n_inputs
    n = nX * nU
    # (P_pol Q)(x,u) = sum_y P_u(x,y) Q(y, pol(y))
    sel = np.zeros((nX, n))
    sel[np.arange(nX), np.arange(nX) * nU + pol] = 1.0
    Ppol = np.transpose(mdp.P, (1, 0, 2)).reshape(n, nX) @ sel
    A = np.eye(n) - Ppol + mdp.delta * np.ones((n, 1)) @ mdp.nu.reshape(1, n)
    return np.linalg.solve(A, mdp.cost.ravel()).reshape(nX, nU)


def avg_cost_q_oracle(mdp: Mdp, tol: float = 1e-12, max_iter: int = 100_000, damping: float = 0.5):
    """Solve the normalized Q equation: returns (Q, h, eta).

    Damped fixed-point iteration Q <- (1-b) Q + b T(Q) (damping removes the
    oscillation of periodic chains), finished by an exact evaluation of the
    greedy policy and improvement until the policy is stable.
    """
    Q = np.zeros((mdp.n_states, mdp.n_inputs))
    scale = max(1.0, np.abs(mdp.cost).max())
    for it in range(max_iter):
        TQ = mdp.bellman_operator(Q)
        err = np.max(np.abs(TQ - Q))
        Q = (1 - damping) * Q + damping * TQ
        if err <= 1e-9 * scale:
            break
    else:
        raise RuntimeError(f"fixed-point iteration did not converge in {max_iter} steps (residual {err:.2e})")
    pol = Q.argmin(axis=1)
    for _ in range(100):
        Q = _evaluate_policy(mdp, pol)
        new = Q.argmin(axis=1)
        # keep the current action on ties to guarantee termination
        keep = np.isclose(Q[np.arange(len(pol)), pol], Q.min(axis=1), rtol=0, atol=1e-13 * scale)
        new = np.where(keep, pol, new)
        if np.array_equal(new, pol):
            break
        pol = new
    res = mdp.residual(Q)
    if res > max(tol, 1e-10) * scale:
        raise RuntimeError(f"normalized Q equation residual {res:.2e} above tolerance")
    h = Q.min(axis=1)
    eta = mdp.delta * float(np.sum(mdp.nu * Q))
    return Q, h, eta


def closed_classes(Pchain) -> list:
    """Closed communicating classes of a finite chain."""
    n = Pchain.shape[0]
    R = ((Pchain > 0) | np.eye(n, dtype=bool)).astype(int)
    for _ in range(int(np.ceil(np.log2(max(n, 2)))) + 1):
        R = ((R @ R) > 0).astype(int)
    R = R.astype(bool)
    out, seen = [], set()
    for x in range(n):
        if x in seen:
            continue
        cls = np.flatnonzero(R[x] & R[:, x])
        seen.update(cls.tolist())
        if np.all(~R[x] | np.isin(np.arange(n), cls)):   # nothing outside the class is reachable
            out.append(cls)
    return out


def _class_law(Pchain, cls):
    Pc = Pchain[np.ix_(cls, cls)]
    m = len(cls)
    A = np.vstack([Pc.T - np.eye(m), np.ones((1, m))])
    b = np.zeros(m + 1)
    b[-1] = 1.0
    return np.linalg.lstsq(A, b, rcond=None)[0]


def brute_force_average_cost(mdp: Mdp):
    """Minimum average cost over all deterministic stationary policies: (eta, best policy).

    Controllability lets every state reach the cheapest closed class, so a
    policy is scored by the cheapest of its closed classes.
    """
    best, best_pol = np.inf, None
    for pol in itertools.product(range(mdp.n_inputs), repeat=mdp.n_states):
        pol = np.array(pol)
        Pc = mdp.chain(pol)
        cpol = mdp.cost[np.arange(mdp.n_states), pol]
        for cls in closed_classes(Pc):
            eta = float(_class_law(Pc, cls) @ cpol[cls])
            if eta < best - 1e-15:
                best, best_pol = eta, pol
    return best, best_pol


def stationary_distribution(Pchain, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Power iteration pi <- pi P (lazy chain, so periodicity is harmless)."""
    n = Pchain.shape[0]
    L = 0.5 * (np.eye(n) + Pchain)
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        new = pi @ L
        if np.max(np.abs(new - pi)) <= tol * 1e-2:
            pi = new
            break
        pi = new
    else:
        raise NotErgodic("power iteration did not converge")
    # uniqueness: the stationary law is unique iff the eigenvalue 1 is simple
    ev = np.sort(np.abs(np.linalg.eigvals(Pchain) - 1.0))
    if n > 1 and ev[1] < 1e-10:
        raise NotErgodic("the chain has more than one closed class")
    return pi / pi.sum()


# -- conditional expectation ---------------------------------------------------------

class CondExpEstimator:
    """Approximation of E[h(X(k+1)) | X(k)=x, U(k)=u].

    mode:
      "direct"                model sum  sum_x' P_u(x,x') h(x')
      "empirical_pmf"         successor histogram per (x,u) from samples
      "galerkin"              least squares onto span{basis_i(x,u)} from samples
      "pretend_deterministic" h(X(k+1)) itself (per-sample; no averaging)
    """

    MODES = ("direct", "empirical_pmf", "galerkin", "pretend_deterministic")

    def __init__(self, mode="direct", mdp: Optional[Mdp] = None, samples: Optional[Trajectory] = None,
                 basis: Optional[Sequence] = None, n_states=None, n_inputs=None):
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}")
        self.mode, self.mdp, self.samples = mode, mdp, samples
        self.n_states = n_states if n_states is not None else (mdp.n_states if mdp else None)
        self.n_inputs = n_inputs if n_inputs is not None else (mdp.n_inputs if mdp else None)
        if mode == "direct" and mdp is None:
            raise ValueError("direct mode needs the model")
        if mode in ("empirical_pmf", "galerkin") and samples is None:
            raise ValueError(f"{mode} mode needs samples")
        if mode == "empirical_pmf":
            x, u, xn = self._idx(samples)
            counts = np.zeros((self.n_states, self.n_inputs, self.n_states))
            np.add.at(counts, (x, u, xn), 1.0)
            self.counts = counts
        if mode == "galerkin":
            self.basis = basis if basis is not None else pair_indicators(self.n_states, self.n_inputs)
            x, u, _ = self._idx(samples)
            self.H = self._design(x, u)
            self.A = self.H.T @ self.H / len(x)
            self.rank_ = int(np.linalg.matrix_rank(self.A))
            if self.rank_ < self.A.shape[0]:
                warnings.warn("Galerkin matrix is singular; using the least-norm coefficients")

    def _idx(self, traj):
        return (np.rint(traj.x[:, 0]).astype(int), np.rint(traj.u[:, 0]).astype(int),
                np.rint(traj.x_next[:, 0]).astype(int))

    def _design(self, x, u):
        return np.column_stack([np.asarray(f(x, u), float) for f in self.basis])

    def coefficients(self, h) -> np.ndarray:
        """Galerkin alpha solving A alpha = b with Z = h(X(k+1))."""
        x, u, xn = self._idx(self.samples)
        b = self.H.T @ np.asarray(h, float)[xn] / len(x)
        return np.linalg.lstsq(self.A, b, rcond=None)[0]

    def orthogonality_residual(self, h) -> np.ndarray:
        """Sample averages of (Z - h_hat(Y)) basis_i(Y); zero at the Galerkin solution."""
        x, u, xn = self._idx(self.samples)
        Z = np.asarray(h, float)[xn]
        return self.H.T @ (Z - self.H @ self.coefficients(h)) / len(x)

    def operator(self) -> np.ndarray:
        """Matrix K with (K h)[x, u] = estimate of E[h(X(k+1)) | x, u], shape (nX*nU, nX)."""
        nX, nU = self.n_states, self.n_inputs
        if self.mode == "direct":
            return np.transpose(self.mdp.P, (1, 0, 2)).reshape(nX * nU, nX)
        if self.mode == "empirical_pmf":
            tot = self.counts.sum(axis=2, keepdims=True)
            with np.errstate(invalid="ignore", divide="ignore"):
                K = np.where(tot > 0, self.counts / tot, np.nan)
            return K.reshape(nX * nU, nX)
        if self.mode == "galerkin":
            x, u, xn = self._idx(self.samples)
            E = np.zeros((len(x), nX))
            E[np.arange(len(x)), xn] = 1.0
            alpha = np.linalg.lstsq(self.A, self.H.T @ E / len(x), rcond=None)[0]   # (d_G, nX)
            gx, gu = np.meshgrid(np.arange(nX), np.arange(nU), indexing="ij")
            return self._design(gx.ravel(), gu.ravel()) @ alpha
        raise ValueError("pretend_deterministic has no (x,u) operator; use per_sample")

    def per_sample(self, H_next_feats, traj: Trajectory) -> np.ndarray:
        """Conditional expectation of feature rows: given F with F[x'] the features of state x',
        return the (r, ...) estimates for every sample of ``traj``."""
        x, u, xn = self._idx(traj)
        F = np.asarray(H_next_feats, float)
        if self.mode == "pretend_deterministic":
            return F[xn]
        K = self.operator()
        rows = K[x * self.n_inputs + u]
        if np.isnan(rows).any():
            raise ValueError("empirical pmf has no samples for some visited (x, u)")
        return rows @ F


def pair_indicators(n_states, n_inputs):
    return [(lambda x, u, i=i, j=j: ((x == i) & (u == j)).astype(float))
            for i in range(n_states) for j in range(n_inputs)]


def cond_exp(estimator: CondExpEstimator, h, x: int, u: int, x_next: Optional[int] = None) -> float:
    """Estimate of E[h(X(k+1)) | X(k)=x, U(k)=u]; ``x_next`` is needed in pretend_deterministic mode."""
    h = np.asarray(h, float)
    if estimator.mode == "pretend_deterministic":
        if x_next is None:
            raise ValueError("pretend_deterministic needs the observed successor")
        return float(h[int(x_next)])
    if estimator.mode == "galerkin":
        alpha = estimator.coefficients(h)
        return float(estimator._design(np.array([x]), np.array([u]))[0] @ alpha)
    row = estimator.operator()[int(x) * estimator.n_inputs + int(u)]
    if np.isnan(row).any():
        raise ValueError(f"no samples observed at {(x, u)}")
    return float(row @ h)


# -- losses ------------------------------------------------------------------------

def mdp_basis(mdp: Mdp, kind="advantage") -> FeatureTableBasis:
    """Tabular basis over all pairs: h = J-part, Q = J + A with A >= 0 (or "joint": Q free)."""
    nX, nU = mdp.n_states, mdp.n_inputs
    d = nX + nX * nU
    PJ = np.zeros((nX, d))
    PJ[np.arange(nX), np.arange(nX)] = 1.0
    P = np.zeros((nX, nU, d))
    for x in range(nX):
        for u in range(nU):
            if kind == "advantage":
                P[x, u, x] = 1.0
            P[x, u, nX + x * nU + u] = 1.0
    return FeatureTableBasis(PJ, P, d_J=nX, constraint="advantage" if kind == "advantage" else "none",
                             name=f"mdp-{kind}")


def _table_values(arch, theta, nX, nU):
    X = np.arange(nX, dtype=float)[:, None]
    Q = arch.Q_all(theta, X)
    h = arch.J(theta, X) if arch.d_J else Q.min(axis=1)
    return Q, h


def noisy_loss_decomposition(mdp: Mdp, policy, theta, arch: LinearArchitecture, tol: float = 1e-8):
    """Exact steady-state (E_be, E_be_var, sigma2) under ``policy``.

    E_be uses the conditional expectation of h(X(k+1)), E_be_var the observed
    successor; the identity E_be_var = E_be + sigma2 is verified to ``tol``.
    """
    nX, nU = mdp.n_states, mdp.n_inputs
    M = mdp.policy_matrix(policy)
    pi = stationary_distribution(mdp.chain(M))
    w = pi[:, None] * M                                    # varpi(x, u)
    Q, h = _table_values(arch, theta, nX, nU)
    offset = mdp.delta * float(np.sum(mdp.nu * Q))
    Ph = np.einsum("uxy,y->xu", mdp.P, h)
    base = -Q - offset + mdp.cost                          # (x, u)
    E_be = float(np.sum(w * (base + Ph) ** 2))
    D_var = base[:, :, None] + h[None, None, :]            # successor y
    Pxuy = np.transpose(mdp.P, (1, 0, 2))
    E_var = float(np.sum(w[:, :, None] * Pxuy * D_var ** 2))
    sigma2 = float(np.sum(w[:, :, None] * Pxuy * (h[None, None, :] - Ph[:, :, None]) ** 2))
    gap = E_var - E_be - sigma2
    if abs(gap) > tol * max(1.0, E_var):
        raise ArithmeticError(f"variance identity violated by {gap:.3e}")
    return E_be, E_var, sigma2


def mdp_batch(arch: LinearArchitecture, traj: Trajectory, estimator: CondExpEstimator, mdp_nu, delta,
              window: Optional[BatchWindow] = None, mu: Optional[MuMeasure] = None, kappa_be=1.0,
              zeta: Optional[ZetaSpec] = None, h_target="J") -> BatchLossData:
    """Quadratic pieces of the average-cost loss on one window.

    TD_k = -Q(x,u) - delta <nu, Q> + c + h_{k+1|k}.  With ``h_target="J"`` the
    successor value is the J-block of the architecture, so TD_k = c - Y_k theta
    with Y_k = psi(x,u) + delta nu_psi - E[psi_J(X(k+1)) | x,u].  With
    ``h_target="min_Q"`` the successor value is supplied per step (frozen),
    and Y_k = psi(x,u) + delta nu_psi; ``data.cond`` maps state values to
    the per-sample conditional expectations.
    """
    w = traj if window is None else traj.window(window.start, window.stop)
    r = len(w)
    nX, nU = mdp_nu.shape
    X = np.arange(nX, dtype=float)[:, None]
    Psi = arch.psi(w.x, w.u)
    Psi = Psi.toarray() if sp.issparse(Psi) else np.asarray(Psi)
    gx, gu = np.meshgrid(np.arange(nX), np.arange(nU), indexing="ij")
    psi_pairs = arch.psi(gx.reshape(-1, 1).astype(float), gu.reshape(-1, 1).astype(float))
    psi_pairs = psi_pairs.toarray() if sp.issparse(psi_pairs) else np.asarray(psi_pairs)
    nu_psi = mdp_nu.ravel() @ psi_pairs
    cond = estimator.per_sample(np.eye(nX), w)             # (r, nX)
    Ups = Psi + delta * nu_psi[None, :]
    if h_target == "J":
        PJ_all = arch.psi_J(X)
        PJ_all = PJ_all.toarray() if sp.issparse(PJ_all) else np.asarray(PJ_all)
        Ups = Ups - cond @ PJ_all
    elif h_target != "min_Q":
        raise ValueError("h_target must be 'J' or 'min_Q'")
    P = Ups.T @ Ups / r
    q = -Ups.T @ w.c / r
    k0 = float(w.c @ w.c) / r
    mu_vec = np.zeros(arch.d) if mu is None else mu.vector(arch)
    Z = b_z = None
    if zeta is not None:
        Xi = zeta.matrix(arch, w)
        b_z = np.asarray(Xi.T @ w.c).ravel() / r
        Z = np.asarray(Xi.T @ Ups) / r
    data = BatchLossData(0.5 * (P + P.T), q, k0, Ups, w.c.copy(), mu_vec, Z, b_z, None,
                         arch.psi_J(w.x) - Psi, "Q", float(kappa_be), 0.0, w.x, arch)
    data.cond = cond
    return data


def _with_target(data: BatchLossData, h) -> BatchLossData:
    """Copy of ``data`` whose cost is c + h_{k+1|k} for the frozen state values ``h``."""
    c = data.c + data.cond @ h
    Ups, r = data.Ups, data.r
    return BatchLossData(data.P, -Ups.T @ c / r, float(c @ c) / r, Ups, c, data.mu_vec, None, None,
                         None, data.plus_rows, "Q", data.kappa_be, 0.0, data.X, data.arch)


class MdpBCQL(BatchConvexQLearning):
    """BCQL with the normalized average-cost loss.

    ``h_target="J"``: the successor value is the J-block of the architecture
    (a convex quadratic loss; the cone keeps J <= Q).  ``h_target="min_Q"``:
    the successor value is min_u Q at the current iterate, frozen during each
    step, so every update is still a convex quadratic program.
    """

    def __init__(self, architecture=None, mdp=None, estimator="direct", mu=None, kappa_be=1.0, zeta=None,
                 h_target="J", n_batches=20, windows=None, n_epochs=1, alpha1=1.0, alpha_offset=0.0,
                 theta0=None, cone=True, record_every_epoch=True):
        super().__init__(architecture, mu, kappa_be, 0.0, "Q", n_batches, windows, n_epochs, alpha1,
                         alpha_offset, theta0, cone, 1.0, record_every_epoch)
        self.mdp = mdp
        self.estimator = estimator
        self.zeta = zeta
        self.h_target = h_target

    def _estimator(self, traj):
        if isinstance(self.estimator, CondExpEstimator):
            return self.estimator
        return CondExpEstimator(self.estimator, mdp=self.mdp, samples=traj,
                                n_states=self.mdp.n_states, n_inputs=self.mdp.n_inputs)

    def _batches(self, traj, arch, zeta=None):
        from .algos import _resolve_mu, _windows
        est = self._estimator(traj)
        mu = _resolve_mu(self.mu, traj)
        if self.h_target == "min_Q" and self.zeta is not None:
            raise ValueError("Galerkin constraints need h_target='J'")
        return [mdp_batch(arch, traj, est, self.mdp.nu, self.mdp.delta, w, mu, self.kappa_be, self.zeta,
                          self.h_target)
                for w in _windows(traj, self.n_batches, self.windows)]

    def _step(self, data, theta, alpha, arch, W=None):
        if self.h_target == "min_Q":
            Q, _ = _table_values(arch, theta, self.mdp.n_states, self.mdp.n_inputs)
            data = _with_target(data, Q.min(axis=1))
        if data.Z is None:
            return super()._step(data, theta, alpha, arch, W)
        from .algos import _cone_lo, _program
        from .qp import solve_qp
        prob = _program(data, kappa_be=self.kappa_be, kappa_plus=0.0, galerkin="eq", tol_galerkin=0.0,
                        plus_constraint=False, tol_plus=0.0, cone_lo=_cone_lo(arch, self.cone),
                        prox=(theta, alpha, W))
        sol = solve_qp(prob, tol=1e-10, warm_start=theta)
        if not sol.optimal:
            warnings.warn(f"batch program ended with status {sol.status}", RuntimeWarning)
        return sol.x

    def fit(self, traj, y=None):
        if self.mdp is None:
            raise ValueError("MdpBCQL needs the Mdp (for nu, delta and the table sizes)")
        return super().fit(traj, y)

    def tables(self):
        """(Q, h, delta <nu, Q>) of the fitted parameter."""
        Q, h = _table_values(self._arch(), self.theta_, self.mdp.n_states, self.mdp.n_inputs)
        if self.h_target == "min_Q":
            h = Q.min(axis=1)
        return Q, h, self.mdp.delta * float(np.sum(self.mdp.nu * Q))


def run_bcql_mdp(traj: Trajectory, arch: LinearArchitecture, mdp: Mdp, estimator="direct", config=None):
    """Average-cost BCQL driver: returns (theta, record)."""
    est = MdpBCQL(architecture=arch, mdp=mdp, estimator=estimator, **dict(config or {})).fit(traj)
    return est.theta_, est.record_
