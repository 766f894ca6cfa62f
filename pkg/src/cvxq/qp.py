"""Convex quadratic programming engine.

Solves

    minimize    1/2 x'Px + q'x
    subject to  A_eq x  = b_eq
                A_in x <= b_in
                lo <= x <= hi

with an operator-splitting (ADMM) iteration in the style of OSQP, followed
by an active-set polishing pass that returns KKT-accurate solutions.  Also
provides the proximal and primal-dual steps used by the batch algorithms.
"""
from __future__ import annotations

import dataclasses
import logging
import warnings
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"


class QpError(ValueError):
    """Raised for malformed quadratic programs."""


def _as_matrix(A, n):
    if A is None:
        return sp.csr_matrix((0, n))
    if sp.issparse(A):
        return sp.csr_matrix(A, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return sp.csr_matrix((0, n))
    return sp.csr_matrix(A)


@dataclasses.dataclass
class QuadraticProgram:
    """minimize 1/2 x'Px + q'x subject to linear and box constraints."""

    P: object
    q: np.ndarray
    A_eq: object = None
    b_eq: Optional[np.ndarray] = None
    A_in: object = None
    b_in: Optional[np.ndarray] = None
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        if sp.issparse(self.P):
            self.P = sp.csr_matrix(self.P, dtype=float)
        else:
            self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if self.P.shape != (n, n):
            raise QpError(f"P has shape {self.P.shape}, expected {(n, n)}")
        self.A_eq = _as_matrix(self.A_eq, n)
        self.A_in = _as_matrix(self.A_in, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, float).ravel()
        self.b_in = np.zeros(0) if self.b_in is None else np.asarray(self.b_in, float).ravel()
        for name, A, b in (("eq", self.A_eq, self.b_eq), ("in", self.A_in, self.b_in)):
            if A.shape[1] != n or A.shape[0] != b.size:
                raise QpError(f"A_{name} {A.shape} inconsistent with b_{name} ({b.size}) / n={n}")
        self.lo = np.full(n, -np.inf) if self.lo is None else np.broadcast_to(
            np.asarray(self.lo, float), (n,)).copy()
        self.hi = np.full(n, np.inf) if self.hi is None else np.broadcast_to(
            np.asarray(self.hi, float), (n,)).copy()
        if np.any(self.lo > self.hi):
            raise QpError("box bounds with lo > hi")

    @property
    def n(self) -> int:
        return self.q.size

    def dense_P(self) -> np.ndarray:
        return self.P.toarray() if sp.issparse(self.P) else self.P

    def objective(self, x) -> float:
        x = np.asarray(x, float)
        return float(0.5 * x @ (self.P @ x) + self.q @ x)

    def check_psd(self, floor: float = -1e-9) -> float:
        """Return the smallest eigenvalue of P; raise if it is below ``floor``."""
        P = self.dense_P()
        asym = np.max(np.abs(P - P.T)) if P.size else 0.0
        if asym > 1e-9 * max(1.0, np.max(np.abs(P)) if P.size else 1.0):
            raise QpError(f"P is not symmetric (max asymmetry {asym:.3g})")
        if self.n == 0:
            return 0.0
        lam = float(np.linalg.eigvalsh(0.5 * (P + P.T))[0])
        scale = max(1.0, float(np.max(np.abs(P))))
        if lam < floor * scale:
            raise QpError(f"P is not positive semidefinite (min eigenvalue {lam:.3g})")
        return lam

    def stacked(self):
        """Constraints as l <= A x <= u with rows [eq; in; finite box]."""
        n = self.n
        box = np.flatnonzero(np.isfinite(self.lo) | np.isfinite(self.hi))
        E = sp.csr_matrix((np.ones(box.size), (np.arange(box.size), box)), shape=(box.size, n))
        A = sp.vstack([self.A_eq, self.A_in, E], format="csr")
        l = np.concatenate([self.b_eq, np.full(self.b_in.size, -np.inf), self.lo[box]])
        u = np.concatenate([self.b_eq, self.b_in, self.hi[box]])
        return A, l, u, box

    def kkt_residuals(self, x, dual_eq=None, dual_in=None, dual_lo=None, dual_hi=None) -> dict:
        """Primal feasibility, stationarity, dual sign and complementarity residuals."""
        x = np.asarray(x, float)
        n = self.n
        dual_eq = np.zeros(self.b_eq.size) if dual_eq is None else dual_eq
        dual_in = np.zeros(self.b_in.size) if dual_in is None else dual_in
        dual_lo = np.zeros(n) if dual_lo is None else dual_lo
        dual_hi = np.zeros(n) if dual_hi is None else dual_hi
        r_eq = self.A_eq @ x - self.b_eq
        slack_in = self.b_in - self.A_in @ x
        viol = [np.abs(r_eq), np.maximum(-slack_in, 0.0),
                np.maximum(self.lo - x, 0.0), np.maximum(x - self.hi, 0.0)]
        primal = max((float(np.max(v)) for v in viol if v.size), default=0.0)
        grad = self.P @ x + self.q + self.A_eq.T @ dual_eq + self.A_in.T @ dual_in + dual_hi - dual_lo
        stationarity = float(np.max(np.abs(grad))) if n else 0.0
        neg = [np.maximum(-dual_in, 0.0), np.maximum(-dual_lo, 0.0), np.maximum(-dual_hi, 0.0)]
        dual_sign = max((float(np.max(v)) for v in neg if v.size), default=0.0)
        with np.errstate(invalid="ignore"):
            comp = [np.abs(dual_in * slack_in),
                    np.abs(np.where(dual_lo != 0, dual_lo * (x - self.lo), 0.0)),
                    np.abs(np.where(dual_hi != 0, dual_hi * (self.hi - x), 0.0))]
        complementarity = max((float(np.max(v)) for v in comp if v.size), default=0.0)
        return {"primal": primal, "stationarity": stationarity,
                "dual": dual_sign, "complementarity": complementarity}


@dataclasses.dataclass
class QpSolution:
    x: np.ndarray
    status: str
    dual_eq: np.ndarray
    dual_in: np.ndarray
    dual_lo: np.ndarray
    dual_hi: np.ndarray
    residuals: dict
    iterations: int = 0
    polished: bool = False
    objective: float = float("nan")

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    @property
    def kkt_max(self) -> float:
        return max(self.residuals.values()) if self.residuals else float("inf")


class _Factor:
    """Factorization of a symmetric positive definite matrix (dense or sparse)."""

    def __init__(self, K):
        if sp.issparse(K) and K.shape[0] > 2500:
            self._lu = spla.splu(sp.csc_matrix(K))
            self._dense = None
        else:
            K = K.toarray() if sp.issparse(K) else K
            self._dense = scipy.linalg.cho_factor(K, check_finite=False)
            self._lu = None

    def solve(self, b):
        if self._dense is not None:
            return scipy.linalg.cho_solve(self._dense, b, check_finite=False)
        return self._lu.solve(b)


def _split_duals(prob: QuadraticProgram, y, box):
    m_eq, m_in = prob.b_eq.size, prob.b_in.size
    dual_eq = y[:m_eq].copy()
    dual_in = np.maximum(y[m_eq:m_eq + m_in], 0.0)
    yb = y[m_eq + m_in:]
    dual_lo = np.zeros(prob.n)
    dual_hi = np.zeros(prob.n)
    dual_lo[box] = np.maximum(-yb, 0.0)
    dual_hi[box] = np.maximum(yb, 0.0)
    # multipliers of infinite bounds are zero by definition
    dual_lo[~np.isfinite(prob.lo)] = 0.0
    dual_hi[~np.isfinite(prob.hi)] = 0.0
    return dual_eq, dual_in, dual_lo, dual_hi


def _solution(prob, x, y, box, status, iterations, polished=False):
    duals = _split_duals(prob, y, box)
    res = prob.kkt_residuals(x, *duals)
    return QpSolution(x=x, status=status, dual_eq=duals[0], dual_in=duals[1],
                      dual_lo=duals[2], dual_hi=duals[3], residuals=res,
                      iterations=iterations, polished=polished, objective=prob.objective(x))


def _independent_rows(A, rows, priority, rtol=1e-9):
    """Greedy subset of ``rows`` with linearly independent A-rows, highest priority first."""
    if rows.size <= 1:
        return rows
    order = rows[np.argsort(-priority, kind="stable")]
    Ad = A[order].toarray() if sp.issparse(A) else np.asarray(A[order])
    n = Ad.shape[1]
    basis = np.zeros((0, n))
    keep = []
    for i, a in enumerate(Ad):
        na = np.linalg.norm(a)
        if na == 0:
            continue
        r = a - basis.T @ (basis @ a) if basis.shape[0] else a.copy()
        r = r - basis.T @ (basis @ r) if basis.shape[0] else r  # second pass for stability
        nr = np.linalg.norm(r)
        if nr > rtol * na:
            basis = np.vstack([basis, r / nr])
            keep.append(order[i])
            if len(keep) == n:
                break
    return np.sort(np.array(keep, dtype=rows.dtype))


def _polish(prob, A, l, u, x, y, box, tol, rounds=25):
    """Active-set refinement: guess the active set from (x, y) and solve the KKT system.

    The guessed set is thinned to linearly independent rows (largest
    multipliers first), then adjusted by releasing wrong-signed multipliers
    and adding violated rows.
    """
    n = prob.n
    m = A.shape[0]
    Ax = A @ x
    eq = l == u
    lower = eq | (np.isfinite(l) & ((Ax - l) < -y))
    upper = ~eq & np.isfinite(u) & ((u - Ax) < y)
    lower &= ~upper | eq
    prio = np.abs(y) + np.where(eq, 1e12, 0.0)
    P = sp.csr_matrix(prob.P)
    best = None
    seen = set()
    for _ in range(rounds):
        act = np.flatnonzero(lower | upper)
        if act.size > 1:
            act = _independent_rows(A, act, prio[act])
        key = act.tobytes() + upper[act].tobytes()
        if key in seen:
            break
        seen.add(key)
        is_up = upper[act] & ~eq[act]
        Aa = A[act]
        ba = np.where(is_up, u[act], l[act])
        k = act.size
        delta = 1e-9
        K = sp.bmat([[P + delta * sp.eye(n), Aa.T], [Aa, -delta * sp.eye(k)]], format="csc")
        K0 = sp.bmat([[P, Aa.T], [Aa, sp.csr_matrix((k, k))]], format="csc")
        rhs = np.concatenate([-prob.q, ba])
        try:
            lu = spla.splu(K)
        except RuntimeError:
            return best
        sol = lu.solve(rhs)
        for _ in range(8):
            r = rhs - K0 @ sol
            if np.max(np.abs(r)) < 1e-14 * max(1.0, np.max(np.abs(rhs))):
                break
            sol = sol + lu.solve(r)
        if not np.all(np.isfinite(sol)):
            return best
        xs = sol[:n]
        ya = np.zeros(m)
        ya[act] = sol[n:]
        cand = _solution(prob, xs, ya, box, OPTIMAL, 0, polished=True)
        if best is None or cand.kkt_max < best.kkt_max:
            best = cand
        if cand.kkt_max <= tol:
            return cand
        # adjust the active set
        lower[:] = False
        upper[:] = False
        lower[act[~is_up]] = True
        upper[act[is_up]] = True
        lower |= eq
        prio = np.abs(ya) + np.where(eq, 1e12, 0.0)
        Ax = A @ xs
        wrong_low = lower & ~eq & (ya > tol)
        wrong_up = upper & (ya < -tol)
        if wrong_low.any() or wrong_up.any():
            # release the worst offender only to avoid cycling
            score = np.where(wrong_low, ya, 0.0) + np.where(wrong_up, -ya, 0.0)
            i = int(np.argmax(score))
            lower[i] = upper[i] = False
        viol_l = ~lower & np.isfinite(l) & (Ax < l - tol)
        viol_u = ~upper & np.isfinite(u) & (Ax > u + tol)
        if viol_l.any() or viol_u.any():
            big = 2.0 * (prio.max() + 1.0)
            amount = np.maximum(l - Ax, 0.0) * viol_l + np.maximum(Ax - u, 0.0) * viol_u
            prio = np.where(viol_l | viol_u, big * (1.0 + amount / (amount.max() + 1e-300)), prio)
            lower |= viol_l
            upper |= viol_u
    return best


def _active_set(P, q, A, l, u, x, max_iter=5000, tol=1e-11):
    """Primal active-set method for small dense convex QPs (P may be singular).

    Starts from a feasible ``x``.  Zero-curvature descent directions give
    simplex-like pivots, so LPs are handled.  Returns (status, x, y) with
    stationarity Px + q + A'y = 0.
    """
    n, m = len(q), A.shape[0]
    eq = l == u
    scale = max(1.0, np.abs(A).max() if A.size else 1.0)
    W, side = [], []
    for i in np.flatnonzero(eq):
        W.append(int(i))
        side.append(0)
    if W:
        keep = _independent_rows(A, np.array(W), np.ones(len(W)))
        W = [int(i) for i in keep]
        side = [0] * len(W)
    stall = 0
    for it in range(max_iter):
        g = P @ x + q
        AW = A[W] if W else np.zeros((0, n))
        if AW.shape[0]:
            Qf, _ = scipy.linalg.qr(AW.T, mode="full")
            Z = Qf[:, AW.shape[0]:]
        else:
            Z = np.eye(n)
        p = np.zeros(n)
        amax = 1.0
        if Z.shape[1]:
            H = Z.T @ P @ Z
            gz = Z.T @ g
            w, V = np.linalg.eigh(0.5 * (H + H.T))
            pos = w > 1e-12 * max(1.0, np.abs(w).max())
            Vn = V[:, ~pos]
            r = Vn @ (Vn.T @ gz)
            if np.linalg.norm(r) > tol * max(1.0, np.linalg.norm(g)):
                p = -Z @ r
                amax = np.inf
            else:
                p = -Z @ (V[:, pos] @ ((V[:, pos].T @ gz) / w[pos]))
        if np.linalg.norm(p) <= 1e-14 * max(1.0, np.linalg.norm(x)):
            lam = np.linalg.lstsq(AW.T, -g, rcond=None)[0] if W else np.zeros(0)
            sgn = np.array(side, float)
            bad = np.flatnonzero((sgn != 0) & (sgn * lam < -tol))
            if bad.size == 0:
                y = np.zeros(m)
                if W:
                    y[W] = lam
                return OPTIMAL, x, y
            j = int(bad[0]) if stall > 50 else int(bad[np.argmin(sgn[bad] * lam[bad])])
            W.pop(j)
            side.pop(j)
            continue
        Ap = A @ p
        Ax = A @ x
        inW = np.zeros(m, bool)
        inW[W] = True
        ratio = np.full(m, np.inf)
        thr = 1e-14 * scale * np.linalg.norm(p)
        up = ~inW & np.isfinite(u) & (Ap > thr)
        lo = ~inW & np.isfinite(l) & (Ap < -thr)
        ratio[up] = (u[up] - Ax[up]) / Ap[up]
        ratio[lo] = (l[lo] - Ax[lo]) / Ap[lo]
        ratio = np.maximum(ratio, 0.0)
        i = int(np.argmin(ratio)) if m else -1
        alpha = min(amax, ratio[i]) if m else amax
        if not np.isfinite(alpha):
            return UNBOUNDED, x, np.zeros(m)
        stall = stall + 1 if alpha == 0 else 0
        x = x + alpha * p
        if m and ratio[i] <= amax:
            W.append(i)
            side.append(1 if up[i] else -1)
    return MAX_ITER, x, np.zeros(m)


def _active_set_solve(prob: QuadraticProgram, A, l, u, x0, tol):
    """Phase 1 (minimize the largest violation) then the active-set method."""
    A = A.toarray() if sp.issparse(A) else np.asarray(A)
    P = prob.dense_P()
    n, m = prob.n, A.shape[0]
    eq = l == u
    x = np.asarray(x0, float).copy()
    if eq.any():
        Ae = A[eq]
        x = x + np.linalg.lstsq(Ae, l[eq] - Ae @ x, rcond=None)[0]
    Ax = A @ x
    viol = np.concatenate([[0.0], (l - Ax)[~eq & np.isfinite(l)], (Ax - u)[~eq & np.isfinite(u)]])
    t0 = float(viol.max())
    if t0 > 0:
        # variables (x, t): l - t <= Ax <= u + t on inequality rows, t >= 0
        ineq = ~eq
        A1 = np.zeros((m + 1, n + 1))
        A1[:m, :n] = A
        l1 = np.concatenate([l, [0.0]])
        u1 = np.concatenate([u, [np.inf]])
        A1[m, n] = 1.0
        # split two-sided inequality rows into separate one-sided rows
        rows, lo_, hi_ = [A1[:m][eq]], [l[eq]], [u[eq]]
        fl = ineq & np.isfinite(l)
        fu = ineq & np.isfinite(u)
        R = A1[:m][fl].copy()
        R[:, n] = 1.0
        rows.append(R)
        lo_.append(l[fl])
        hi_.append(np.full(fl.sum(), np.inf))
        R = A1[:m][fu].copy()
        R[:, n] = -1.0
        rows.append(R)
        lo_.append(np.full(fu.sum(), -np.inf))
        hi_.append(u[fu])
        rows.append(A1[m:])
        lo_.append([0.0])
        hi_.append([np.inf])
        A1 = np.vstack(rows)
        l1 = np.concatenate(lo_)
        u1 = np.concatenate(hi_)
        c1 = np.zeros(n + 1)
        c1[n] = 1.0
        st, xt, _ = _active_set(np.zeros((n + 1, n + 1)), c1, A1, l1, u1,
                                np.concatenate([x, [t0]]))
        if st != OPTIMAL:
            return None
        if xt[n] > 1e-9 * max(1.0, np.abs(u[np.isfinite(u)]).max() if np.isfinite(u).any() else 1.0):
            return INFEASIBLE, xt[:n], np.zeros(m)
        x = xt[:n]
    return _active_set(P, prob.q, A, l, u, x)


def solve_qp(prob: QuadraticProgram, tol: float = 1e-8, max_iter: int = 50_000, *,
             rho: float = 0.1, sigma: float = 1e-6, relax: float = 1.6,
             warm_start=None, polish: bool = True, check_psd: bool = True,
             adaptive_rho: bool = True) -> QpSolution:
    """Solve a convex QP by ADMM with over-relaxation and adaptive penalty.

    The returned solution is KKT-certified when ``status == "optimal"``:
    every entry of ``residuals`` is at most ``tol``.  Infeasible and unbounded
    programs are detected from the ADMM iterate differences.
    """
    if check_psd:
        prob.check_psd()
    n = prob.n
    A, l, u, box = prob.stacked()
    m = A.shape[0]
    if m and np.any(l > u):
        return _solution(prob, np.zeros(n), np.zeros(m), box, INFEASIBLE, 0)

    # row equilibration of the constraint matrix
    rn = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel()) if m else np.zeros(0)
    rn[rn == 0] = 1.0
    D = sp.diags(1.0 / rn)
    As = sp.csr_matrix(D @ A)
    ls, us = l / rn, u / rn
    P = sp.csr_matrix(prob.P)
    q = prob.q
    eq = ls == us

    y = np.zeros(m)
    if warm_start is None:
        x = np.zeros(n)
    elif isinstance(warm_start, tuple):
        # (x, y) with y over the stacked rows [eq; in; finite box], unscaled
        x = np.asarray(warm_start[0], float).copy()
        if warm_start[1] is not None:
            y = np.asarray(warm_start[1], float).copy() * rn
    else:
        x = np.asarray(warm_start, float).copy()
    z = np.clip(As @ x, ls, us)
    small = n <= 300 and m <= 20000
    tried_active = False

    def try_active(xs):
        res = _active_set_solve(prob, A, l, u, xs, tol)
        if res is None:
            return None
        st, xa, ya = res
        if st == INFEASIBLE:
            return _solution(prob, xa, ya, box, INFEASIBLE, 0)
        if st == OPTIMAL:
            cand = _solution(prob, xa, ya, box, OPTIMAL, 0, polished=True)
            if cand.kkt_max > tol:
                # refine the final active set with the regularized KKT solve
                pol = _polish(prob, A, l, u, xa, ya, box, tol, rounds=3)
                if pol is not None and pol.kkt_max < cand.kkt_max:
                    cand = pol
            if cand.kkt_max <= tol:
                return cand
        return None

    if polish and m and isinstance(warm_start, tuple):
        early = _polish(prob, A, l, u, x, y / rn, box, tol, rounds=10)
        if early is not None and early.kkt_max <= tol:
            return early
        if small:
            tried_active = True
            early = try_active(x)
            if early is not None:
                return early

    def rho_vec(r):
        v = np.full(m, r)
        v[eq] = 1e3 * r
        return v

    rho_v = rho_vec(rho)

    def factor(rv):
        K = P + sigma * sp.eye(n) + As.T @ sp.diags(rv) @ As
        return _Factor(K if n > 2500 else K.toarray())

    fac = factor(rho_v)
    qnorm = np.max(np.abs(q)) if n else 0.0
    eps_abs = eps_rel = max(tol * 1e-2, 1e-12)
    status = MAX_ITER
    it = 0
    check_every = 25
    polish_every = 100
    adapt_every = 200
    x_prev, y_prev = x.copy(), y.copy()
    for it in range(1, max_iter + 1):
        rhs = sigma * x - q + As.T @ (rho_v * z - y)
        xt = fac.solve(rhs)
        zt = As @ xt
        x = relax * xt + (1 - relax) * x
        zr = relax * zt + (1 - relax) * z
        z_new = np.clip(zr + y / rho_v, ls, us)
        y = y + rho_v * (zr - z_new)
        z = z_new
        if it % check_every and it != max_iter:
            continue
        Ax = As @ x
        Px = P @ x
        ATy = As.T @ y
        r_p = np.max(np.abs(Ax - z)) if m else 0.0
        r_d = np.max(np.abs(Px + q + ATy)) if n else 0.0
        e_p = eps_abs + eps_rel * max(np.max(np.abs(Ax)) if m else 0.0,
                                      np.max(np.abs(z)) if m else 0.0)
        e_d = eps_abs + eps_rel * max(np.max(np.abs(Px)) if n else 0.0,
                                      np.max(np.abs(ATy)) if n else 0.0, qnorm)
        if r_p <= e_p and r_d <= e_d:
            if not (polish and m) or eps_abs <= 1e-15:
                status = OPTIMAL
                break
            raw = _solution(prob, x, y / rn, box, OPTIMAL, it)
            if raw.kkt_max <= tol:
                return raw
            early = _polish(prob, A, l, u, x, y / rn, box, tol)
            if early is not None and early.kkt_max <= tol:
                early.iterations = it
                return early
            # the ADMM point is not yet accurate enough to identify the active set
            eps_abs = eps_rel = eps_abs * 1e-2
            continue
        # the active set is usually settled long before ADMM reaches tol: try to finish early
        if polish and m and it % polish_every == 0:
            raw = _solution(prob, x, y / rn, box, OPTIMAL, it)
            if raw.kkt_max <= tol:
                return raw
            early = _polish(prob, A, l, u, x, y / rn, box, tol, rounds=3)
            if early is not None and early.kkt_max <= tol:
                early.iterations = it
                return early
            if small and not tried_active:
                tried_active = True
                early = try_active(x)
                if early is not None:
                    early.iterations = it
                    return early
            polish_every = min(2 * polish_every, 3200)
        # infeasibility certificates from successive differences
        dy = y - y_prev
        dx = x - x_prev
        eps_inf = 1e-7
        ndy = np.max(np.abs(dy)) if m else 0.0
        if m and ndy > 1e-12:
            ATdy = As.T @ dy
            lf = np.where(np.isfinite(ls), ls, 0.0)
            uf = np.where(np.isfinite(us), us, 0.0)
            inf_ok = np.all(np.isfinite(us) | (dy <= eps_inf * ndy)) and \
                np.all(np.isfinite(ls) | (dy >= -eps_inf * ndy))
            if inf_ok and np.max(np.abs(ATdy)) <= eps_inf * ndy and \
                    uf @ np.maximum(dy, 0) + lf @ np.minimum(dy, 0) < -eps_inf * ndy:
                status = INFEASIBLE
                break
        ndx = np.max(np.abs(dx)) if n else 0.0
        if ndx > 1e-12:
            Adx = As @ dx
            okA = np.all(np.where(np.isfinite(us), Adx <= eps_inf * ndx, True)) and \
                np.all(np.where(np.isfinite(ls), Adx >= -eps_inf * ndx, True))
            if okA and np.max(np.abs(P @ dx)) <= eps_inf * ndx and q @ dx < -eps_inf * ndx:
                status = UNBOUNDED
                break
        x_prev, y_prev = x.copy(), y.copy()
        # adaptive penalty
        num = r_p / max(np.max(np.abs(Ax)) if m else 0.0, np.max(np.abs(z)) if m else 0.0, 1e-30)
        den = r_d / max(np.max(np.abs(Px)) if n else 0.0, np.max(np.abs(ATy)) if n else 0.0,
                        qnorm, 1e-30)
        if adaptive_rho and m and num > 0 and den > 0 and it % adapt_every == 0:
            new_rho = float(np.clip(rho * np.sqrt(num / den), 1e-6, 1e6))
            if new_rho > 5 * rho or new_rho < rho / 5:
                rho = new_rho
                rho_v = rho_vec(rho)
                fac = factor(rho_v)

    y_orig = y / rn  # undo row scaling
    if status in (INFEASIBLE, UNBOUNDED):
        logger.info("qp detected %s after %d iterations", status, it)
        return _solution(prob, x, y_orig, box, status, it)
    sol = _solution(prob, x, y_orig, box, MAX_ITER, it)
    if polish and m:
        pol = _polish(prob, A, l, u, x, y_orig, box, tol)
        if pol is not None and pol.kkt_max < sol.kkt_max:
            pol.iterations = it
            sol = pol
    elif polish and not m:
        # unconstrained: solve the normal equations directly
        try:
            xs = np.linalg.lstsq(prob.dense_P(), -q, rcond=None)[0]
            cand = _solution(prob, xs, y_orig, box, MAX_ITER, it, polished=True)
            if cand.kkt_max < sol.kkt_max:
                sol = cand
        except np.linalg.LinAlgError:
            pass
    sol.status = OPTIMAL if sol.kkt_max <= tol else (
        OPTIMAL if status == OPTIMAL and sol.kkt_max <= 1e3 * tol else MAX_ITER)
    if sol.status == OPTIMAL and sol.kkt_max > tol:
        logger.debug("qp accepted at ADMM tolerance; kkt %.2e", sol.kkt_max)
    return sol


def solve_box_qp(H, g, lo=None, hi=None, x0=None, tol: float = 1e-12, max_iter: Optional[int] = None):
    """minimize 1/2 x'Hx + g'x over a box, H positive definite.

    Primal active-set method: solve on the free variables, step to the first
    blocking bound, release the bound with the most negative multiplier.
    Finite and exact; ``x0`` only seeds the initial active set.  Returns
    ``(x, converged)``.
    """
    H = np.asarray(H, float)
    g = np.asarray(g, float)
    n = g.size
    lo = np.full(n, -np.inf) if lo is None else np.broadcast_to(np.asarray(lo, float), (n,))
    hi = np.full(n, np.inf) if hi is None else np.broadcast_to(np.asarray(hi, float), (n,))
    if not (np.isfinite(lo).any() or np.isfinite(hi).any()):
        return scipy.linalg.solve(H, -g, assume_a="pos"), True
    if np.any(lo > hi):
        raise QpError("empty box")
    x = np.clip(np.zeros(n) if x0 is None else np.asarray(x0, float), lo, hi)
    grad = H @ x + g
    act = ((x <= lo) & (grad > 0)) | ((x >= hi) & (grad < 0))
    scale = max(1.0, np.max(np.abs(g)), np.max(np.abs(np.diag(H))) * np.max(np.abs(x), initial=0.0))
    max_iter = 10 * n + 100 if max_iter is None else max_iter
    for _ in range(max_iter):
        free = ~act
        target = x.copy()
        if free.any():
            rhs = -(g[free] + H[np.ix_(free, act)] @ x[act])
            target[free] = scipy.linalg.solve(H[np.ix_(free, free)], rhs, assume_a="pos", check_finite=False)
        p = target - x
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = np.where(free & (p < 0), (lo - x) / p, np.inf)
            t_hi = np.where(free & (p > 0), (hi - x) / p, np.inf)
        t_b = np.minimum(t_lo, t_hi)
        j = int(np.argmin(t_b))
        if t_b[j] < 1.0:
            x = x + t_b[j] * p
            x[j] = lo[j] if t_lo[j] <= t_hi[j] else hi[j]
            act[j] = True
            continue
        x = target
        grad = H @ x + g
        # multipliers of the active bounds: grad >= 0 at lo, grad <= 0 at hi
        wrong = np.where(act & (x <= lo), -grad, 0.0) + np.where(act & (x >= hi) & ~(x <= lo), grad, 0.0)
        i = int(np.argmax(wrong))
        if wrong[i] <= tol * scale:
            return x, True
        act[i] = False
    return x, False


def prox_step(P, q, theta_n, alpha, W=None, *, linear=None, lo=None, hi=None,
              A_in=None, b_in=None, tol: float = 1e-10):
    """One proximal step on the quadratic loss E(t) = t'Pt + 2q't (+ linear't).

    Returns argmin_t { E(t) + (1/alpha) 1/2 (t - theta_n)' W (t - theta_n) },
    i.e. the solution of t = theta_n - alpha W^{-1} grad E(t).  With
    ``alpha = inf`` the regularizer is dropped (minimum-norm minimizer).
    """
    P = P.toarray() if sp.issparse(P) else np.asarray(P, float)
    q = np.asarray(q, float)
    theta_n = np.asarray(theta_n, float)
    d = q.size
    W = np.eye(d) if W is None else np.asarray(W, float)
    g = 2.0 * q + (0.0 if linear is None else np.asarray(linear, float))
    if np.isinf(alpha):
        H = 2.0 * P
        lin = g
    else:
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        try:
            np.linalg.cholesky(0.5 * (W + W.T))
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("prox weight W must be positive definite") from None
        H = 2.0 * P + W / alpha
        lin = g - W @ theta_n / alpha
    H = 0.5 * (H + H.T)
    if A_in is None:
        if lo is None and hi is None:
            if np.isinf(alpha):
                return np.linalg.lstsq(H, -lin, rcond=None)[0]
            return scipy.linalg.solve(H, -lin, assume_a="pos")
        x, ok = solve_box_qp(H, lin, lo, hi, x0=theta_n)
        if ok:
            return x
    sol = solve_qp(QuadraticProgram(H, lin, A_in=A_in, b_in=b_in, lo=lo, hi=hi), tol=tol,
                   warm_start=theta_n, check_psd=False)
    if not sol.optimal:
        warnings.warn(f"prox step QP ended with status {sol.status}", RuntimeWarning)
    return sol.x


def primal_dual_step(data, theta_n, lam_n, alpha, lam_max, *, kappa=1.0, lo=None, hi=None,
                     A_in=None, b_in=None):
    """One primal-dual update on the Lagrangian
        L(t, lam) = obj't + kappa E(t) - lam' z(t),   z(t) = b_z - Z t,
    minimizing over the cone in t with a proximal term, then a projected
    ascent step on lam clipped to [0, lam_max].

    ``data`` supplies ``P``, ``q`` (E = t'Pt + 2q't + k0), ``objective`` and the
    Galerkin pair ``Z``, ``b_z``.
    """
    Z = data.Z
    linear = np.asarray(data.objective, float) + Z.T @ lam_n
    # kappa E(t) = t'(kappa P)t + 2(kappa q)'t
    theta = prox_step(kappa * data.P, kappa * data.q, theta_n, alpha, linear=linear,
                      lo=lo, hi=hi, A_in=A_in, b_in=b_in)
    z = data.b_z - Z @ theta
    lam = np.clip(lam_n - alpha * z, 0.0, lam_max)
    return theta, lam


def zap_gain_update(W, A, beta):
    """Matrix gain tracking: W + beta (A - W), beta in (0, 1]."""
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    W = np.asarray(W, float)
    return W + beta * (np.asarray(A, float) - W)
