"""Linear function architectures J = theta' psi_J(x), Q = theta' psi(x, u)."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .env import ControlSystem, FiniteSystem, MountainCarSystem


class NotPositiveDefinite(ValueError):
    """Raised when the input block of a quadratic Q is not positive definite."""


def _as_2d(X, dim=None):
    X = np.asarray(X, float)
    if X.ndim <= 1:
        X = X.reshape(1, -1) if dim is None or X.size == dim else X.reshape(-1, 1)
    return X


def _matvec(Phi, theta):
    out = Phi @ theta
    return np.asarray(out).ravel()


class LinearArchitecture:
    """Base class.  Subclasses implement vectorized ``psi_J(X)`` and ``psi(X, U)``.

    ``constraint`` is "none", "advantage" (theta_i >= 0 for i >= d_J), or a
    matrix Y encoding Y theta <= 0.
    """

    d: int
    d_J: Optional[int] = None
    inputs: Optional[np.ndarray] = None
    constraint = "none"
    state_dim = 1
    input_dim = 1
    sparse = False

    def psi_J(self, X):
        raise NotImplementedError

    def psi(self, X, U):
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def fingerprint(self) -> str:
        blob = json.dumps({"cls": type(self).__name__, "d": int(self.d), **self.params()},
                          sort_keys=True, default=_jsonable)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # vectorized evaluation
    def J(self, theta, X):
        return _matvec(self.psi_J(_as_2d(X, self.state_dim)), self._check(theta))

    def Q(self, theta, X, U):
        X = _as_2d(X, self.state_dim)
        U = np.asarray(U, float).reshape(len(X), -1)
        return _matvec(self.psi(X, U), self._check(theta))

    def Q_all(self, theta, X) -> np.ndarray:
        """Q at every finite input, shape (n, n_inputs)."""
        if self.inputs is None:
            raise ValueError("architecture has no finite input list")
        X = _as_2d(X, self.state_dim)
        return np.column_stack([self.Q(theta, X, np.tile(u, (len(X), 1))) for u in self.inputs])

    def min_Q(self, theta, X):
        """Vectorized (argmin input index, min value); ties go to the lowest index."""
        vals = self.Q_all(theta, X)
        j = np.argmin(vals, axis=1)
        return j, vals[np.arange(len(j)), j]

    def greedy_index(self, theta, X, tie_break="first", rng=None, tie_tol=1e-7):
        """Index of a minimizing input per row.

        Inputs whose Q lies within ``tie_tol * max(1, |min Q|)`` of the minimum
        are tied.  "first" returns the lowest tied index, "random" draws one
        uniformly with ``rng``.  Cone-constrained fits often leave exact ties
        (all advantages at zero), where the lowest-index rule is systematic.
        """
        vals = self.Q_all(theta, X)
        if tie_break == "first":
            return np.argmin(vals, axis=1)
        if tie_break != "random":
            raise ValueError("tie_break must be 'first' or 'random'")
        rng = np.random.default_rng(rng)
        lo = vals.min(axis=1, keepdims=True)
        tied = vals <= lo + tie_tol * np.maximum(1.0, np.abs(lo))
        # random keys restricted to the tied set
        keys = np.where(tied, rng.random(vals.shape), -1.0)
        return np.argmax(keys, axis=1)

    def min_Q_features(self, theta, X):
        """Features psi(x, phi(x)) of the minimizing input (Q_min is linear in these locally)."""
        X = _as_2d(X, self.state_dim)
        j, _ = self.min_Q(theta, X)
        return self.psi(X, self.inputs[j])

    def _check(self, theta):
        theta = np.asarray(theta, float).ravel()
        if theta.size != self.d:
            raise ValueError(f"theta has dimension {theta.size}, architecture expects {self.d}")
        return theta

    # constraints
    @property
    def constraint_matrix(self):
        """Y with the constraint Y theta <= 0, or None."""
        if isinstance(self.constraint, str):
            if self.constraint == "advantage":
                k = self.d - self.d_J
                return sp.hstack([sp.csr_matrix((k, self.d_J)), -sp.identity(k)]).tocsr()
            return None
        return sp.csr_matrix(self.constraint)

    def box(self):
        """Coordinate bounds implied by the advantage cone."""
        lo = np.full(self.d, -np.inf)
        if isinstance(self.constraint, str) and self.constraint == "advantage":
            lo[self.d_J:] = 0.0
        return lo, np.full(self.d, np.inf)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


# -- finite systems ------------------------------------------------------------

class FeatureTableBasis(LinearArchitecture):
    """Explicit feature tables for a FiniteSystem.

    ``psi_J_table`` has shape (n_states, d); ``psi_table`` (n_states, n_inputs, d).
    """

    def __init__(self, psi_J_table, psi_table, d_J=None, constraint="none", name="table"):
        self.psi_J_table = np.asarray(psi_J_table, float)
        self.psi_table = np.asarray(psi_table, float)
        nX, nU, d = self.psi_table.shape
        if self.psi_J_table.shape != (nX, d):
            raise ValueError("psi_J table must be (n_states, d)")
        self.d, self.d_J, self.constraint, self.name = d, d_J, constraint, name
        self.inputs = np.arange(nU, dtype=float)[:, None]
        if isinstance(constraint, str) and constraint == "advantage":
            adv = self.psi_table - self.psi_J_table[:, None, :]
            if np.any(self.psi_J_table[:, d_J:] != 0) or np.any(adv[..., :d_J] != 0) or np.any(adv < 0):
                raise ValueError("tables do not have the advantage split structure")

    def params(self):
        return {"name": self.name, "d_J": self.d_J,
                "hash": hashlib.sha256(self.psi_table.tobytes() + self.psi_J_table.tobytes()).hexdigest()}

    @staticmethod
    def _idx(V):
        return np.rint(np.asarray(V, float).reshape(-1)).astype(int)

    def psi_J(self, X):
        return self.psi_J_table[self._idx(X)]

    def psi(self, X, U):
        return self.psi_table[self._idx(X), self._idx(U)]

    def Q_all(self, theta, X):
        return self.psi_table[self._idx(X)] @ self._check(theta)


def aggregated_basis(sys: FiniteSystem, groups=None, kind="advantage") -> FeatureTableBasis:
    """State-aggregation basis; ``groups=None`` gives the tabular basis.

    ``groups[x]`` labels the aggregate containing state x; the equilibrium
    state must sit alone in its group, and its features are identically zero
    so that J(xe) = 0.  The equilibrium pair (xe, ue) has Q = 0 as well.

    kind:
      "advantage"  Q = J + A with A >= 0 on (group, input) indicators;
      "joint"      independent J and Q indicators, no sign constraint;
      "q"          Q indicators only (psi_J = 0), for Watkins-type methods.
    """
    nX, nU = sys.next_state.shape
    groups = np.arange(nX) if groups is None else np.asarray(groups, int)
    xe, ue = sys.xe, sys.ue
    if np.sum(groups == groups[xe]) != 1:
        raise ValueError("the equilibrium state must form its own group")
    labels = [g for g in np.unique(groups) if g != groups[xe]]
    gJ = {g: i for i, g in enumerate(labels)}
    pairs = [(g, u) for g in np.unique(groups) for u in range(nU) if not (g == groups[xe] and u == ue)]
    gQ = {p: i for i, p in enumerate(pairs)}
    nJ = 0 if kind == "q" else len(labels)
    d = nJ + len(pairs)
    PJ = np.zeros((nX, d))
    P = np.zeros((nX, nU, d))
    for x in range(nX):
        if kind != "q" and x != xe:
            PJ[x, gJ[groups[x]]] = 1.0
        for u in range(nU):
            if kind == "advantage":
                P[x, u] = PJ[x]
            key = (groups[x], u)
            if key in gQ:
                P[x, u, nJ + gQ[key]] += 1.0
    constraint = "advantage" if kind == "advantage" else "none"
    return FeatureTableBasis(PJ, P, d_J=nJ, constraint=constraint,
                             name=f"aggregated-{kind}-{groups.tolist()}")


def tabular_basis(sys: FiniteSystem, kind="advantage") -> FeatureTableBasis:
    return aggregated_basis(sys, None, kind)


def theta_from_tables(arch: FeatureTableBasis, J, Q) -> np.ndarray:
    """Least-squares coordinates reproducing tables J (n_states,) and Q (n_states, n_inputs)."""
    nX, nU, d = arch.psi_table.shape
    A = np.vstack([arch.psi_J_table, arch.psi_table.reshape(nX * nU, d)])
    b = np.concatenate([np.asarray(J, float), np.asarray(Q, float).ravel()])
    return np.linalg.lstsq(A, b, rcond=None)[0]


# -- Mountain Car --------------------------------------------------------------

class BinnedBasis(LinearArchitecture):
    """Rectangular bins on {z < z_goal} with shifted advantage features.

    Bin edges sit on multiples of the bin widths so the origin is a grid
    vertex; the outermost bins extend to infinity, so every state with
    z < z_goal lies in exactly one bin.  Features, in order:

      J block       bin indicators (optionally with merged bins + quadratics)
      A+ block      1{u = +1} * bin indicator of x + shift
      A- block      1{u = -1} * bin indicator of x - shift

    All features vanish on z >= z_goal, the absorbing goal.
    """

    sparse = True
    state_dim = 2
    input_dim = 1

    def __init__(self, n_z=40, n_v=20, shift="default", enrich=False, z_min=-1.2, z_goal=0.5,
                 v_bar=0.07):
        self.n_z, self.n_v = int(n_z), int(n_v)
        self.z_min, self.z_goal, self.v_bar = z_min, z_goal, v_bar
        self.wz = (z_goal - z_min) / self.n_z
        self.wv = 2 * v_bar / self.n_v
        # anchor the grid at the origin: the top z bin contains z_goal - epsilon
        self.kz_hi = int(np.ceil(z_goal / self.wz - 1e-12)) - 1
        self.kz_lo = self.kz_hi - self.n_z + 1
        self.kv_lo = -(self.n_v // 2)
        if isinstance(shift, str):
            if shift != "default":
                raise ValueError("shift must be 'default' or a 2-vector")
            shift = (0.5 * self.wz, 0.5 * self.wv)
        self.shift = np.asarray(shift, float).reshape(2)
        self.enrich = bool(enrich)
        self.n_bins = self.n_z * self.n_v
        self.d_J = self.n_bins
        self.d = 3 * self.n_bins
        self.constraint = "advantage"
        self.inputs = np.array([[-1.0], [1.0]])
        self._jmap = np.arange(self.n_bins)
        if self.enrich:
            # merge the four top-velocity bins in the last z column; free three slots
            merged = [self.bin_id(self.n_z - 1, self.n_v - 1 - j) for j in range(4)]
            keep = [b for b in range(self.n_bins) if b not in merged[1:]]
            jmap = np.empty(self.n_bins, int)
            jmap[keep] = np.arange(len(keep))
            jmap[merged[1:]] = jmap[merged[0]]
            self._jmap = jmap
            self._n_quad_start = len(keep)

    def params(self):
        return dict(n_z=self.n_z, n_v=self.n_v, shift=self.shift.tolist(), enrich=self.enrich,
                    z_min=self.z_min, z_goal=self.z_goal, v_bar=self.v_bar)

    def bin_id(self, iz, iv):
        return iz * self.n_v + iv

    def bin_index(self, X):
        """Bin index per row of X, or -1 at/after the goal line."""
        X = _as_2d(X, 2)
        z, v = X[:, 0], X[:, 1]
        iz = np.clip(np.floor(z / self.wz + 1e-12).astype(int), self.kz_lo, self.kz_hi) - self.kz_lo
        iv = np.clip(np.floor(v / self.wv + 1e-12).astype(int), self.kv_lo, self.kv_lo + self.n_v - 1) - self.kv_lo
        return np.where(z < self.z_goal, self.bin_id(iz, iv), -1)

    def bin_center(self, b):
        iz, iv = np.divmod(np.asarray(b), self.n_v)
        return np.column_stack([(iz + self.kz_lo + 0.5) * self.wz, (iv + self.kv_lo + 0.5) * self.wv])

    def _indicator(self, X, offset, width, mask=None):
        b = self.bin_index(X)
        ok = b >= 0 if mask is None else (b >= 0) & mask
        rows = np.flatnonzero(ok)
        return sp.csr_matrix((np.ones(rows.size), (rows, offset + b[rows])), shape=(len(b), width))

    def quadratics(self, X):
        """Three non-negative quadratics on the box that vanish on z = z_goal."""
        X = _as_2d(X, 2)
        z, v = X[:, 0], X[:, 1]
        gap = np.where(z < self.z_goal, self.z_goal - z, 0.0)
        return np.column_stack([gap, gap * (z - self.z_min), gap * (v + self.v_bar) / (2 * self.v_bar)])

    def psi_J(self, X):
        X = _as_2d(X, 2)
        b = self.bin_index(X)
        rows = np.flatnonzero(b >= 0)
        cols = self._jmap[b[rows]]
        M = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(len(b), self.d))
        if self.enrich:
            Qd = self.quadratics(X)
            qcols = self._n_quad_start + np.arange(3)
            M = M + sp.csr_matrix(
                (Qd.ravel(), (np.repeat(np.arange(len(b)), 3), np.tile(qcols, len(b)))),
                shape=(len(b), self.d))
        return M.tocsr()

    def psi_A(self, X, U):
        X = _as_2d(X, 2)
        u = np.asarray(U, float).reshape(-1)
        up = self._indicator(X + self.shift, self.d_J, self.d, mask=u > 0)
        dn = self._indicator(X - self.shift, self.d_J + self.n_bins, self.d, mask=u < 0)
        # advantage features vanish on the goal line itself
        at_goal = X[:, 0] >= self.z_goal
        keep = sp.diags((~at_goal).astype(float))
        return (keep @ (up + dn)).tocsr()

    def psi(self, X, U):
        return (self.psi_J(X) + self.psi_A(X, U)).tocsr()

    def Q_all(self, theta, X):
        # direct indexing; same values as the generic feature path
        theta = self._check(theta)
        X = _as_2d(X, 2)
        b = self.bin_index(X)
        live = b >= 0
        J = np.where(live, theta[self._jmap[np.maximum(b, 0)]], 0.0)
        if self.enrich:
            J = J + self.quadratics(X) @ theta[self._n_quad_start + np.arange(3)]
        out = np.empty((len(X), 2))
        for j, (sgn, off) in enumerate(((-1.0, self.d_J + self.n_bins), (1.0, self.d_J))):
            c = self.bin_index(X + sgn * self.shift)
            A = np.where(live & (c >= 0), theta[off + np.maximum(c, 0)], 0.0)
            out[:, j] = J + A
        return out


# -- LQR -----------------------------------------------------------------------

def vech_index(k):
    """Upper-triangular (i, j) pairs of a k x k symmetric matrix, row-major."""
    return [(i, j) for i in range(k) for j in range(i, k)]


def sym_from_vech(v, k):
    M = np.zeros((k, k))
    for t, (i, j) in enumerate(vech_index(k)):
        M[i, j] = M[j, i] = v[t]
    return M


def vech_from_sym(M):
    M = np.asarray(M, float)
    return np.array([M[i, j] for i, j in vech_index(M.shape[0])])


def quad_features(Z):
    """Features with z' M z = vech(M) . quad_features(z)."""
    Z = np.atleast_2d(np.asarray(Z, float))
    cols = [(1.0 if i == j else 2.0) * Z[:, i] * Z[:, j] for i, j in vech_index(Z.shape[1])]
    return np.column_stack(cols)


class QuadBasis(LinearArchitecture):
    """Quadratic forms: Q(z) = z' M^Q z with z = (x, u); optionally J(x) = x' M x.

    theta holds upper-triangular entries row-major, so for n = m = 1,
    theta = (a, b, c) means Q = a x^2 + 2 b x u + c u^2.  Without ``include_J``
    the J features are zero.
    """

    def __init__(self, n, m, include_J=False):
        self.n, self.m, self.include_J = int(n), int(m), bool(include_J)
        self.state_dim, self.input_dim = self.n, self.m
        self.kJ = self.n * (self.n + 1) // 2 if include_J else 0
        self.kQ = (self.n + self.m) * (self.n + self.m + 1) // 2
        self.d = self.kJ + self.kQ
        self.d_J = self.kJ if include_J else None
        self.inputs = None

    def params(self):
        return dict(n=self.n, m=self.m, include_J=self.include_J)

    def psi_J(self, X):
        X = _as_2d(X, self.n)
        out = np.zeros((len(X), self.d))
        if self.include_J:
            out[:, :self.kJ] = quad_features(X)
        return out

    def psi(self, X, U):
        X = _as_2d(X, self.n)
        U = np.asarray(U, float).reshape(len(X), self.m)
        out = np.zeros((len(X), self.d))
        out[:, self.kJ:] = quad_features(np.hstack([X, U]))
        return out

    def matrices(self, theta):
        """(M_J or None, M_Q) as symmetric matrices."""
        theta = self._check(theta)
        MJ = sym_from_vech(theta[:self.kJ], self.n) if self.include_J else None
        return MJ, sym_from_vech(theta[self.kJ:], self.n + self.m)

    def min_Q(self, theta, X):
        _, MQ = self.matrices(theta)
        MF, N, MG = MQ[:self.n, :self.n], MQ[self.n:, :self.n], MQ[self.n:, self.n:]
        ev = np.linalg.eigvalsh(MG)
        if ev[0] <= 0:
            raise NotPositiveDefinite(f"input block of M_Q has eigenvalue {ev[0]:.3g} <= 0")
        K = np.linalg.solve(MG, N)
        X = _as_2d(X, self.n)
        U = -X @ K.T
        Mmin = MF - N.T @ K
        return U, np.einsum("ki,ij,kj->k", X, Mmin, X)

    def min_Q_features(self, theta, X):
        U, _ = self.min_Q(theta, X)
        return self.psi(X, U)


# -- generic -------------------------------------------------------------------

class FunctionBasis(LinearArchitecture):
    """Architecture from user callables on stacked arrays."""

    def __init__(self, psi_J_fn, psi_fn, d, inputs=None, d_J=None, constraint="none", state_dim=1,
                 input_dim=1, name="function"):
        self._pJ, self._p = psi_J_fn, psi_fn
        self.d, self.d_J, self.constraint, self.name = int(d), d_J, constraint, name
        self.inputs = None if inputs is None else np.asarray(inputs, float).reshape(len(inputs), -1)
        self.state_dim, self.input_dim = state_dim, input_dim

    def params(self):
        return {"name": self.name}

    def psi_J(self, X):
        return np.asarray(self._pJ(_as_2d(X, self.state_dim)), float).reshape(-1, self.d)

    def psi(self, X, U):
        X = _as_2d(X, self.state_dim)
        return np.asarray(self._p(X, np.asarray(U, float).reshape(len(X), -1)), float).reshape(-1, self.d)


# -- module-level operations -----------------------------------------------------

def eval_J(arch: LinearArchitecture, theta, x) -> float:
    return float(arch.J(theta, _as_2d(x, arch.state_dim))[0])


def eval_Q(arch: LinearArchitecture, theta, x, u) -> float:
    return float(arch.Q(theta, _as_2d(x, arch.state_dim), np.atleast_1d(np.asarray(u, float))[None])[0])


def min_Q(arch: LinearArchitecture, theta, x):
    """(minimizing input, value) at a single state."""
    j, val = arch.min_Q(theta, _as_2d(x, arch.state_dim))
    if arch.inputs is not None:
        return arch.inputs[int(j[0])].copy(), float(val[0])
    return np.asarray(j)[0], float(val[0])


def greedy_policy(arch: LinearArchitecture, theta, tie_break="first", random_state=None):
    """x -> argmin_u Q(x, u); see ``LinearArchitecture.greedy_index`` for ties."""
    theta = arch._check(theta).copy()
    if tie_break == "first":
        def policy(x, xi=None):
            return min_Q(arch, theta, x)[0]
        return policy
    rng = np.random.default_rng(random_state)

    def policy(x, xi=None):
        j = arch.greedy_index(theta, _as_2d(x, arch.state_dim), tie_break, rng)[0]
        return arch.inputs[int(j)].copy()

    return policy


def project_constraints(arch: LinearArchitecture, theta) -> np.ndarray:
    """Euclidean projection onto the constraint cone {Y theta <= 0}."""
    theta = arch._check(theta).copy()
    c = arch.constraint
    if isinstance(c, str):
        if c == "advantage":
            theta[arch.d_J:] = np.maximum(theta[arch.d_J:], 0.0)
        return theta
    from .qp import QuadraticProgram, solve_qp

    Y = sp.csr_matrix(c)
    if np.all(Y @ theta <= 0):
        return theta
    prob = QuadraticProgram(sp.identity(arch.d), -theta, A_in=Y, b_in=np.zeros(Y.shape[0]))
    sol = solve_qp(prob, tol=1e-12)
    return sol.x


# -- serialization ---------------------------------------------------------------

def save_theta(path, arch: LinearArchitecture, theta, extra: Optional[dict] = None):
    """Write theta with the architecture fingerprint (JSON, lossless floats)."""
    theta = arch._check(theta)
    payload = {"architecture": type(arch).__name__, "fingerprint": arch.fingerprint(),
               "params": arch.params(), "theta": [float(t) for t in theta]}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, default=_jsonable))


def load_theta(path, arch: Optional[LinearArchitecture] = None) -> np.ndarray:
    payload = json.loads(Path(path).read_text())
    if arch is not None and payload["fingerprint"] != arch.fingerprint():
        raise ValueError("architecture hash mismatch")
    return np.array(payload["theta"], float)


def architecture_from_config(cfg: dict, sys: Optional[ControlSystem] = None) -> LinearArchitecture:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == "binned":
        if isinstance(sys, MountainCarSystem):
            cfg.setdefault("z_min", sys.z_min)
            cfg.setdefault("z_goal", sys.z_goal)
            cfg.setdefault("v_bar", sys.v_bar)
        return BinnedBasis(**cfg)
    if kind == "quadratic":
        return QuadBasis(cfg.get("n", sys.state_dim if sys else 1), cfg.get("m", sys.input_dim if sys else 1),
                         cfg.get("include_J", False))
    if kind in ("tabular", "aggregated"):
        if not isinstance(sys, FiniteSystem):
            raise ValueError("tabular architectures need a finite system")
        return aggregated_basis(sys, cfg.get("groups"), cfg.get("split", "advantage"))
    raise ValueError(f"unknown architecture kind {kind!r}")
