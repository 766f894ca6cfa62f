"""Independent reference computations used as test oracles."""
import numpy as np


def dual_projected_gradient(P, q, A_eq=None, b_eq=None, A_in=None, b_in=None, lo=None, hi=None,
                            tol=1e-12, max_iter=200_000):
    """Strongly convex QP via accelerated projected gradient on its dual.

    Inequalities (including finite box bounds) carry multipliers clamped at
    zero; equalities are free.  Returns (x, lam_in, nu_eq, iterations).
    """
    P = np.asarray(P, float)
    n = len(q)
    rows, rhs = [], []
    if A_in is not None:
        rows.append(np.asarray(A_in, float))
        rhs.append(np.asarray(b_in, float))
    for bound, sgn in ((hi, 1.0), (lo, -1.0)):
        if bound is not None:
            b = np.broadcast_to(np.asarray(bound, float), (n,))
            k = np.flatnonzero(np.isfinite(b))
            rows.append(sgn * np.eye(n)[k])
            rhs.append(sgn * b[k])
    G = np.vstack(rows) if rows else np.zeros((0, n))
    h = np.concatenate(rhs) if rhs else np.zeros(0)
    E = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, float)
    e = np.zeros(0) if b_eq is None else np.asarray(b_eq, float)
    C = np.vstack([G, E])
    m_in = len(G)
    Pinv = np.linalg.inv(P)
    L = np.linalg.eigvalsh(C @ Pinv @ C.T)[-1] if len(C) else 1.0
    y = np.zeros(len(C))
    z, t = y.copy(), 1.0

    def primal(mult):
        return -Pinv @ (q + C.T @ mult)

    for it in range(max_iter):
        x = primal(z)
        grad = C @ x - np.concatenate([h, e])
        y_new = z + grad / L
        y_new[:m_in] = np.maximum(y_new[:m_in], 0.0)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        # gradient-based restart keeps the convergence linear
        if (y_new - y) @ (z - y_new) > 0:
            t_new = 1.0
            z = y_new.copy()
        else:
            z = y_new + (t - 1) / t_new * (y_new - y)
        if np.max(np.abs(y_new - y), initial=0.0) <= tol * max(1.0, np.max(np.abs(y_new), initial=0.0)):
            y = y_new
            break
        y, t = y_new, t_new
    return primal(y), y[:m_in], y[m_in:], it + 1


def random_strongly_convex_qp(rng, n=10, n_in=5, n_eq=2):
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.5 * np.eye(n)
    q = rng.normal(size=n)
    x0 = rng.normal(size=n)
    A_in = rng.normal(size=(n_in, n))
    b_in = A_in @ x0 + rng.uniform(0, 1, n_in)
    A_eq = rng.normal(size=(n_eq, n))
    b_eq = A_eq @ x0
    lo = x0 - rng.uniform(0, 1, n)
    hi = x0 + rng.uniform(0, 1, n)
    return dict(P=P, q=q, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in, lo=lo, hi=hi)


def shortest_path_value(sys):
    """J° as the cheapest path to the equilibrium (Dijkstra on the transition graph)."""
    from scipy.sparse.csgraph import csgraph_from_dense, dijkstra

    n = sys.n_states
    W = np.full((n, n), np.inf)
    for x in range(n):
        for u in range(sys.next_state.shape[1]):
            y = sys.next_state[x, u]
            if sys.admissible[x, u] and y != x:
                W[x, y] = min(W[x, y], sys.cost_table[x, u])
    G = csgraph_from_dense(W, null_value=np.inf)
    return dijkstra(G.T, indices=sys.xe)


def lp_feasible(sys, J, Q, tol=1e-12):
    """Direct check of J(x_e) = 0 and J(x) <= Q(x,u) <= c(x,u) + J(F(x,u)) on admissible pairs."""
    adm = sys.admissible
    upper = sys.cost_table + J[sys.next_state]
    return (abs(J[sys.xe]) <= tol and np.all((Q <= upper + tol)[adm])
            and np.all((J[:, None] <= Q + tol)[adm]))


def dominance_fuzz(n_feasible=1000, seed=0):
    """Sample (J, Q) candidates on random small systems until ``n_feasible`` pass ``lp_feasible``.

    Returns (n_feasible, n_rejected, n_violations, max_excess).  Candidates come from
    three families: scaled and shifted copies of J°, random vectors relaxed to a
    subsolution, and J° with a positive bump (which must be rejected).
    """
    from cvxq.env import random_finite_system

    rng = np.random.default_rng(seed)
    kept = rejected = violations = 0
    worst = -np.inf
    while kept < n_feasible:
        sys = random_finite_system(int(rng.integers(3, 9)), int(rng.integers(2, 4)), seed=int(rng.integers(1 << 30)))
        Jopt = shortest_path_value(sys)
        n = sys.n_states
        fam = rng.integers(3)
        if fam == 0:
            J = rng.uniform(0, 1) * Jopt - rng.exponential(1.0, n)
        elif fam == 1:
            J = rng.uniform(-3, Jopt.max() + 3, n)
            for _ in range(10 * n):
                Jn = np.minimum(J, (sys.cost_table + J[sys.next_state]).min(axis=1))
                if np.array_equal(Jn, J):
                    break
                J = Jn
        else:
            J = Jopt.copy()
            J[rng.integers(n)] += rng.uniform(1e-6, 1.0)
        J[sys.xe] = 0.0 if fam != 2 or rng.random() < 0.5 else J[sys.xe]
        t = rng.uniform(0, 1, sys.next_state.shape)
        Q = J[:, None] + t * (sys.cost_table + J[sys.next_state] - J[:, None])
        if not lp_feasible(sys, J, Q):
            rejected += 1
            continue
        kept += 1
        excess = float(np.max(J - Jopt))
        worst = max(worst, excess)
        violations += int(excess > 1e-12)
    return kept, rejected, violations, worst
