"""Temporal differences and batch quadratic losses.

For a window of r samples with feature differences
Y_k = psi(x(k), u(k)) - gamma psi_J(x(k+1)) the over-parameterized temporal
difference is D_k(theta) = c_k - Y_k' theta, so the mean-square Bellman error is
the quadratic theta' P theta + 2 q' theta + k0 with P = Y'Y / r, q = -Y'c / r,
k0 = c'c / r.  Galerkin vectors are z(theta) = (1/r) sum_k D_k zeta_k = b_z - Z theta.
"""
from __future__ import annotations

import dataclasses
import warnings
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .approx import BinnedBasis, LinearArchitecture, _as_2d
from .explore import Trajectory


def _dense(A):
    return A.toarray() if sp.issparse(A) else np.asarray(A)


# -- windows and measures ---------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class BatchWindow:
    start: int
    stop: int

    def __post_init__(self):
        if self.stop <= self.start or self.start < 0:
            raise ValueError(f"empty or invalid window [{self.start}, {self.stop})")

    @property
    def r(self) -> int:
        return self.stop - self.start


def equal_windows(N: int, B: int):
    """Partition [0, N) into B windows of (nearly) equal length."""
    if not 1 <= B <= N:
        raise ValueError("need 1 <= B <= N")
    edges = np.linspace(0, N, B + 1).round().astype(int)
    return [BatchWindow(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


class MuMeasure:
    """Weighted point set; <mu, J_theta> = m' theta with m = sum_i w_i psi_J(x_i)."""

    def __init__(self, points, weights=None):
        self.points = np.asarray(points, float)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        w = np.ones(len(self.points)) if weights is None else np.asarray(weights, float)
        if w.shape != (len(self.points),) or np.any(w < 0):
            raise ValueError("weights must be non-negative, one per point")
        self.weights = w

    @classmethod
    def uniform(cls, points):
        pts = np.asarray(points, float)
        return cls(pts, np.full(len(pts), 1.0 / len(pts)))

    @classmethod
    def standard_basis(cls, n):
        return cls(np.eye(n), np.ones(n))

    def vector(self, arch: LinearArchitecture) -> np.ndarray:
        if len(self.points) == 0:
            return np.zeros(arch.d)
        Phi = arch.psi_J(_as_2d(self.points, arch.state_dim))
        return np.asarray(Phi.T @ self.weights).ravel()


# -- eligibility (zeta) specifications ---------------------------------------------

class ZetaSpec:
    """Non-negative eligibility vectors; ``matrix`` returns an (r, dim) array."""

    dim: int

    def matrix(self, arch, traj: Trajectory):
        raise NotImplementedError


class WatkinsZeta(ZetaSpec):
    """zeta_k = psi(x(k), u(k))."""

    def __init__(self, arch):
        self.dim = arch.d

    def matrix(self, arch, traj):
        return arch.psi(traj.x, traj.u)


class KeyedIndicatorZeta(ZetaSpec):
    """zeta_k = e_{key(x(k), u(k))}; keys outside [0, dim) are dropped."""

    def __init__(self, key_fn: Callable, dim: int, name="keyed"):
        self.key_fn, self.dim, self.name = key_fn, int(dim), name

    def matrix(self, arch, traj):
        keys = np.asarray(self.key_fn(traj.x, traj.u), int).ravel()
        rows = np.flatnonzero((keys >= 0) & (keys < self.dim))
        return sp.csr_matrix((np.ones(rows.size), (rows, keys[rows])), shape=(len(traj), self.dim))


class PerSampleZeta(ZetaSpec):
    """One indicator per sample: every observed temporal difference is its own constraint."""

    def __init__(self, n):
        self.dim = int(n)

    def matrix(self, arch, traj):
        if len(traj) != self.dim:
            raise ValueError("per-sample eligibility needs one column per sample")
        return sp.identity(self.dim, format="csr")


class ZeroZeta(ZetaSpec):
    def __init__(self, dim=1):
        self.dim = dim

    def matrix(self, arch, traj):
        return sp.csr_matrix((len(traj), self.dim))


def pair_indicator_zeta(sys) -> KeyedIndicatorZeta:
    """Indicator of the (state, input) pair for a FiniteSystem."""
    nX, nU = sys.next_state.shape

    def key(X, U):
        return np.rint(X[:, 0]).astype(int) * nU + np.rint(U[:, 0]).astype(int)

    return KeyedIndicatorZeta(key, nX * nU, "pair")


def binned_pair_zeta(arch: BinnedBasis) -> KeyedIndicatorZeta:
    """Indicator of (bin of x, input sign): aggregates samples sharing a bin and input."""

    def key(X, U):
        b = arch.bin_index(X)
        return np.where(b >= 0, 2 * b + (U[:, 0] > 0), -1)

    return KeyedIndicatorZeta(key, 2 * arch.n_bins, "binned")


def binned_advantage_zeta(arch: BinnedBasis) -> KeyedIndicatorZeta:
    """Indicator of the advantage cell active at (x, u): the bin of x + shift for
    u = +1 and of x - shift for u = -1.  Each constraint then carries one
    advantage coefficient."""

    def key(X, U):
        up = U[:, 0] > 0
        b = np.where(up, arch.bin_index(X + arch.shift), arch.bin_index(X - arch.shift))
        b = np.where(X[:, 0] >= arch.z_goal, -1, b)
        return np.where(b >= 0, 2 * b + up, -1)

    return KeyedIndicatorZeta(key, 2 * arch.n_bins, "advantage_cell")


# -- temporal differences --------------------------------------------------------

def td_overparam(arch: LinearArchitecture, theta, sample, gamma=1.0) -> float:
    """-Q(x,u) + c + gamma J(x+) for one sample (x, u, c, x+)."""
    x, u, c, xn = sample
    X = _as_2d(x, arch.state_dim)
    U = np.atleast_1d(np.asarray(u, float))[None]
    Xn = _as_2d(xn, arch.state_dim)
    return float(-arch.Q(theta, X, U)[0] + c + gamma * arch.J(theta, Xn)[0])


def td_watkins(arch: LinearArchitecture, theta, sample, gamma=1.0) -> float:
    """-Q(x,u) + c + gamma min_u Q(x+, u) for one sample."""
    x, u, c, xn = sample
    X = _as_2d(x, arch.state_dim)
    U = np.atleast_1d(np.asarray(u, float))[None]
    _, qmin = arch.min_Q(theta, _as_2d(xn, arch.state_dim))
    return float(-arch.Q(theta, X, U)[0] + c + gamma * qmin[0])


def td_watkins_batch(arch, theta, traj: Trajectory, gamma=1.0) -> np.ndarray:
    _, qmin = arch.min_Q(theta, traj.x_next)
    return -arch.Q(theta, traj.x, traj.u) + traj.c + gamma * qmin


# -- batch assembly ---------------------------------------------------------------

@dataclasses.dataclass
class BatchLossData:
    """Quadratic pieces of the losses over one window."""

    P: np.ndarray
    q: np.ndarray
    k0: float
    Ups: object              # (r, d) feature differences, dense or sparse
    c: np.ndarray
    mu_vec: np.ndarray       # <mu, J_theta> = mu_vec' theta
    Z: Optional[np.ndarray]  # Galerkin: z(theta) = b_z - Z theta
    b_z: Optional[np.ndarray]
    Zp: Optional[np.ndarray] = None  # positivity Galerkin, z+(theta) = Zp theta
    plus_rows: object = None  # rows with J - Q = plus_rows @ theta
    plus_variant: str = "Q"
    kappa_be: float = 1.0
    kappa_plus: float = 0.0
    X: Optional[np.ndarray] = None
    arch: Optional[LinearArchitecture] = None

    @property
    def r(self):
        return len(self.c)

    @property
    def d(self):
        return len(self.q)

    @property
    def objective(self) -> np.ndarray:
        """Linear term of the minimization: -<mu, J_theta>."""
        return -self.mu_vec

    def td(self, theta):
        return self.c - np.asarray(self.Ups @ theta).ravel()

    def E_be(self, theta):
        theta = np.asarray(theta, float)
        return float(theta @ self.P @ theta + 2 * self.q @ theta + self.k0)

    def grad_E_be(self, theta):
        return 2 * (self.P @ theta + self.q)

    def z(self, theta):
        return self.b_z - self.Z @ theta

    def z_plus(self, theta):
        return self.Zp @ theta

    def E_plus(self, theta):
        theta = np.asarray(theta, float)
        if self.plus_variant == "Q":
            gap = np.asarray(self.plus_rows @ theta).ravel()
        else:
            gap = self.arch.J(theta, self.X) - self.arch.min_Q(theta, self.X)[1]
        return float(np.mean(np.maximum(gap, 0.0) ** 2))

    def total(self, theta):
        val = -self.mu_vec @ theta + self.kappa_be * self.E_be(theta)
        if self.kappa_plus:
            val += self.kappa_plus * self.E_plus(theta)
        return float(val)

    def min_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[0])


def assemble_batch(arch: LinearArchitecture, window: Optional[BatchWindow], traj: Trajectory,
                   mu: Optional[MuMeasure] = None, kappa_be=1.0, kappa_plus=0.0, plus_variant="Q",
                   zeta: Optional[ZetaSpec] = None, zeta_plus: Optional[ZetaSpec] = None,
                   gamma=1.0, warn_singular=False) -> BatchLossData:
    """Exact quadratic representation of the batch losses on ``window``."""
    if plus_variant not in ("Q", "minQ"):
        raise ValueError("plus_variant must be 'Q' or 'minQ'")
    w = traj if window is None else traj.window(window.start, window.stop)
    r = len(w)
    if r == 0:
        raise ValueError("empty window")
    Psi = arch.psi(w.x, w.u)
    PsiJ = arch.psi_J(w.x)
    PsiJn = arch.psi_J(w.x_next)
    Ups = Psi - gamma * PsiJn
    if sp.issparse(Ups):
        Ups = Ups.tocsr()
    P = _dense(Ups.T @ Ups) / r
    P = 0.5 * (P + P.T)
    q = -np.asarray(Ups.T @ w.c).ravel() / r
    k0 = float(w.c @ w.c) / r
    mu_vec = np.zeros(arch.d) if mu is None else mu.vector(arch)
    Z = b_z = Zp = None
    if zeta is not None:
        Xi = zeta.matrix(arch, w)
        b_z = np.asarray(Xi.T @ w.c).ravel() / r
        Z = _dense(Xi.T @ Ups) / r
    if zeta_plus is not None:
        Xp = zeta_plus.matrix(arch, w)
        Zp = _dense(Xp.T @ (PsiJ - Psi)) / r
    data = BatchLossData(P, q, k0, Ups, w.c.copy(), mu_vec, Z, b_z, Zp, PsiJ - Psi, plus_variant,
                         float(kappa_be), float(kappa_plus), w.x, arch)
    if warn_singular:
        lam = data.min_eig()
        if lam < 1e-10 * max(1.0, np.abs(P).max()):
            warnings.warn(f"mean-square Bellman error is not strongly convex (min eigenvalue {lam:.2e})")
    return data


def eval_plus_penalty(arch: LinearArchitecture, theta, traj: Trajectory,
                      window: Optional[BatchWindow] = None, variant="Q") -> float:
    """(1/r) sum {J(x) - Q(x,u)}_+^2, or with min_u Q for variant 'minQ'."""
    w = traj if window is None else traj.window(window.start, window.stop)
    J = arch.J(theta, w.x)
    if variant == "Q":
        Q = arch.Q(theta, w.x, w.u)
    elif variant == "minQ":
        Q = arch.min_Q(theta, w.x)[1]
    else:
        raise ValueError("variant must be 'Q' or 'minQ'")
    return float(np.mean(np.maximum(J - Q, 0.0) ** 2))
