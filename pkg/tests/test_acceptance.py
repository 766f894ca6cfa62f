"""Acceptance criteria 1-9.  Each test prints one PASS/FAIL line to the terminal."""
import time
import warnings

import numpy as np
import pytest

from _reference import dominance_fuzz, dual_projected_gradient, random_strongly_convex_qp
from cvxq.algos import DQN, BatchConvexQLearning, ConvexQLearning, PrimalDualBCQL, projected_bellman_residual
from cvxq.approx import BinnedBasis, aggregated_basis, tabular_basis
from cvxq.env import LqrSystem, random_finite_system
from cvxq.experiments import MountainCarConfig, mountain_car_data, run_mountain_car
from cvxq.explore import exhaustive_trajectory
from cvxq.losses import MuMeasure, assemble_batch, pair_indicator_zeta
from cvxq.mdpx import (CondExpEstimator, Mdp, avg_cost_q_oracle, brute_force_average_cost, mdp_basis,
                       noisy_loss_decomposition)
from cvxq.oracles import lqr_sdp_gridded, riccati_solve, value_iteration
from cvxq.qp import QuadraticProgram, solve_qp

X12 = np.arange(12.0)[:, None]
GROUPS = [0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4]


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def finite():
    sys = random_finite_system(12, 3, seed=3)
    J, Q, _ = value_iteration(sys)
    return sys, J, Q


def _tab_error(arch, theta, J, Q):
    m = np.isfinite(Q)
    return max(np.max(np.abs(arch.J(theta, X12) - J)), np.max(np.abs(arch.Q_all(theta, X12) - Q)[m]))


def test_criterion_1_lqr_sdp_matches_riccati(report):
    t0 = time.perf_counter()
    scalar = LqrSystem([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    M1, _ = lqr_sdp_gridded(scalar, n_directions=64)
    e1 = abs(M1[0, 0] - (1 + np.sqrt(5)) / 2)
    rng = np.random.default_rng(1)
    lqr = LqrSystem(rng.normal(size=(2, 2)), rng.normal(size=(2, 1)), np.eye(2), np.eye(1))
    M2, _ = lqr_sdp_gridded(lqr, n_directions=64)
    Mopt = riccati_solve(lqr)
    e2 = np.linalg.norm(M2 - Mopt) / np.linalg.norm(Mopt)
    dt = time.perf_counter() - t0
    report(1, e1 <= 1e-4 and e2 <= 1e-3 and dt < 10,
           f"scalar |M-phi|={e1:.2e} (<=1e-4), 2x2 rel={e2:.2e} (<=1e-3), {dt:.2f}s (<10s)")


def test_criterion_2_tabular_exactness(report, finite):
    sys, J, Q = finite
    t0 = time.perf_counter()
    arch = tabular_basis(sys)
    mu = MuMeasure.uniform(X12)
    zeta = pair_indicator_zeta(sys)
    cql = ConvexQLearning(arch, mu, zeta, zeta, kappa_be=1.0, constraint_mode="advantage_cone")
    cql.fit(exhaustive_trajectory(sys))
    pd = PrimalDualBCQL(arch, mu, zeta, kappa_be=1.0, n_batches=20, n_epochs=200, alpha1=1e5)
    pd.fit(exhaustive_trajectory(sys, 20))
    e_cql, e_pd = _tab_error(arch, cql.theta_, J, Q), _tab_error(arch, pd.theta_, J, Q)
    dt = time.perf_counter() - t0
    report(2, e_cql <= 1e-6 and e_pd <= 1e-6 and dt < 30,
           f"CQL sup err={e_cql:.2e}, pd-BCQL sup err={e_pd:.2e} (<=1e-6), {dt:.2f}s (<30s)")


def test_criterion_3_dqn_fixed_point_certificate(report, finite):
    sys, J, Q = finite
    traj = exhaustive_trajectory(sys)
    arch = tabular_basis(sys)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        dqn = DQN(arch, alpha1=np.inf, step_schedule="constant", n_batches=1, n_epochs=50).fit(traj)
    r_tab = np.linalg.norm(projected_bellman_residual(traj, arch, dqn.theta_))
    # impoverished joint basis: 5 aggregated states
    poor = aggregated_basis(sys, GROUPS, kind="joint")
    dqn_p = DQN(poor, alpha1=np.inf, step_schedule="constant", n_batches=1, n_epochs=200).fit(traj)
    cql_p = ConvexQLearning(poor, MuMeasure.uniform(X12), "watkins", kappa_be=1.0).fit(traj)
    r_dqn = np.linalg.norm(projected_bellman_residual(traj, poor, dqn_p.theta_))
    kkt = cql_p.solution_.kkt_max
    gap = np.max(np.abs(poor.Q_all(dqn_p.theta_, X12) - poor.Q_all(cql_p.theta_, X12)))
    report(3, r_tab <= 1e-6 and r_dqn <= 1e-6 and kkt <= 1e-6 and gap > 0,
           f"tabular DQN residual={r_tab:.2e}; impoverished: DQN residual={r_dqn:.2e}, "
           f"CQL KKT={kkt:.2e}, Q gap DQN vs CQL={gap:.3g}")


def test_criterion_4_feasibility_dominance(report):
    kept, rejected, violations, worst = dominance_fuzz(1000, seed=0)
    report(4, kept == 1000 and violations == 0,
           f"{kept} feasible pairs ({rejected} rejected candidates), {violations} violations, "
           f"max(J - J*)={worst:.2e}")


def test_criterion_5_bcql_consistency(report, finite):
    sys = finite[0]
    arch = aggregated_basis(sys, GROUPS)
    mu = MuMeasure.uniform(X12)
    traj = exhaustive_trajectory(sys, 20)
    ref = ConvexQLearning(arch, mu, None, kappa_be=1000.0, constraint_mode="penalty").fit(traj)
    est = BatchConvexQLearning(arch, mu, kappa_be=1000.0, n_batches=20, n_epochs=500, alpha1=1.0).fit(traj)
    err = np.linalg.norm(est.theta_ - ref.theta_)
    report(5, err <= 1e-4, f"||theta_500 - theta_QP||={err:.2e} (<=1e-4) with alpha_n = 1/n, 20 batches")


def test_criterion_6_mountain_car_desk_scale(report):
    est, traj, rep = run_mountain_car(MountainCarConfig())
    ok = rep["status"] == "optimal" and rep["all_reached"] and rep["median_rel_error"] <= 0.30
    report(6, ok, f"status={rep['status']}, steps={rep['steps_to_goal']}, "
                  f"median rel err={rep['median_rel_error']:.3f} (<=0.30) on {rep['visited_bins']} bins, "
                  f"fit {rep['fit_seconds']:.1f}s")


def _small_mdp(n, m, seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(n, 0.7), size=(m, n))
    P[0] = 0.5 * P[0] + 0.5 * np.roll(np.eye(n), 1, axis=1)
    return Mdp(P, rng.uniform(0, 2, (n, m)))


def test_criterion_7_mdp_identities(report):
    var_gap = orth = res = eta_gap = 0.0
    for seed in range(20):
        n = 2 + seed % 3
        mdp = _small_mdp(n, 2, seed)
        arch = mdp_basis(mdp, "joint")
        rng = np.random.default_rng(seed)
        pol = rng.dirichlet(np.ones(2), size=n)
        e, ev, s2 = noisy_loss_decomposition(mdp, pol, rng.normal(size=arch.d), arch, tol=1.0)
        var_gap = max(var_gap, abs(ev - e - s2))
        traj = mdp.simulate(pol, 0, 400, seed=seed)
        basis = [lambda x, u: np.ones(len(x)), lambda x, u: x * 1.0, lambda x, u: (u == 1) * 1.0]
        est = CondExpEstimator("galerkin", mdp=mdp, samples=traj, basis=basis)
        orth = max(orth, np.max(np.abs(est.orthogonality_residual(rng.normal(size=n)))))
        if n <= 3:
            Q, _, eta = avg_cost_q_oracle(mdp)
            res = max(res, mdp.residual(Q))
            eta_gap = max(eta_gap, abs(eta - brute_force_average_cost(mdp)[0]))
    report(7, var_gap <= 1e-8 and orth <= 1e-8 and res <= 1e-10 and eta_gap <= 1e-10,
           f"variance identity gap={var_gap:.1e}, orthogonality={orth:.1e}, Q-equation residual={res:.1e}, "
           f"|eta - brute force|={eta_gap:.1e}")


def test_criterion_8_pathology(report):
    cfg = MountainCarConfig()
    traj = mountain_car_data(cfg)
    tds = {}
    for name, shift in (("zero", (0.0, 0.0)), ("default", "default")):
        arch = BinnedBasis(cfg.n_z, cfg.n_v, shift=shift)
        th = np.ones(arch.d)
        th[:arch.d_J] = 2.0
        tds[name] = (arch, assemble_batch(arch, None, traj).td(th))
    arch0, td0 = tds["zero"]
    same = arch0.bin_index(traj.x) == arch0.bin_index(traj.x_next)
    n_nonzero = int(np.count_nonzero(tds["default"][1]))
    ok = same.sum() > 0 and np.all(td0[same] == 0.0) and n_nonzero >= 1
    report(8, ok, f"zero shift: {int(np.count_nonzero(td0[same]))} nonzero TDs on {int(same.sum())} same-bin "
                  f"transitions; default shift: {n_nonzero} nonzero TDs of {len(traj)}")


def test_criterion_9_qp_engine(report):
    rng = np.random.default_rng(9)
    kkt = agree = 0.0
    for _ in range(50):
        d = random_strongly_convex_qp(rng)
        sol = solve_qp(QuadraticProgram(**d))
        ref, _, _, _ = dual_projected_gradient(**d)
        kkt = max(kkt, sol.kkt_max if sol.optimal else np.inf)
        agree = max(agree, np.max(np.abs(sol.x - ref)))
    report(9, kkt <= 1e-8 and agree <= 1e-6,
           f"50 random QPs: max KKT={kkt:.1e} (<=1e-8), max |x - x_pg|={agree:.1e} (<=1e-6)")


@pytest.mark.slow
def test_criterion_6_full_scale(report):
    est, traj, rep = run_mountain_car(MountainCarConfig.full())
    ok = rep["status"] == "optimal" and rep["all_reached"] and rep["median_rel_error"] <= 0.30
    report(6, ok, f"full scale: status={rep['status']}, steps={rep['steps_to_goal']}, "
                  f"median rel err={rep['median_rel_error']:.3f}, fit {rep['fit_seconds']:.0f}s")
