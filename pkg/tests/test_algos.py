import warnings

import numpy as np
import pytest

from cvxq.algos import (DQN, LPQL, BatchConvexQLearning, ConvexQLearning, InfeasibleProgram, NonLipschitzRegion,
                        PrimalDualBCQL, kkt_certificate, projected_bellman_residual, run_bcql, run_cql,
                        run_dqn, run_lpql, run_pd_bcql, run_zap_bcql)
from cvxq.approx import QuadBasis, aggregated_basis, tabular_basis
from cvxq.env import LqrSystem, random_finite_system
from cvxq.explore import (ConstantPolicy, LinearFeedbackPolicy, Trajectory, default_probe, exhaustive_trajectory,
                          rollout)
from cvxq.losses import MuMeasure, ZeroZeta, assemble_batch, pair_indicator_zeta
from cvxq.oracles import riccati_solve, value_iteration

X12 = np.arange(12.0)[:, None]
GROUPS = [0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4]


@pytest.fixture
def setup(sys12):
    J, Q, _ = value_iteration(sys12)
    return dict(sys=sys12, J=J, Q=Q, arch=tabular_basis(sys12), mu=MuMeasure.uniform(X12),
                zeta=pair_indicator_zeta(sys12), traj=exhaustive_trajectory(sys12))


def test_lpql_exact_on_tabular(setup):
    s = setup
    th, rec = run_lpql(s["traj"], s["arch"], dict(mu=s["mu"], zeta=s["zeta"], zeta_plus=s["zeta"]))
    assert np.max(np.abs(s["arch"].J(th, X12) - s["J"])) <= 1e-8
    assert rec.status == "optimal" and len(rec) == 1


def test_lpql_pinned_trajectory_is_finite(setup):
    s = setup
    xe, ue = s["sys"].equilibrium
    traj = rollout(s["sys"], ConstantPolicy(ue), default_probe(), xe, 20)
    est = LPQL(s["arch"], MuMeasure([xe]), s["zeta"]).fit(traj)
    assert est.solution_.optimal and np.isfinite(est.record_.mu_J[0])
    assert est.record_.mu_J[0] == 0.0


def test_lpql_zero_plus_eligibility_is_vacuous():
    _, traj = _scalar_lqr_traj(400)
    arch = QuadBasis(1, 1)
    a = LPQL(arch, MuMeasure([[1.0]]), "watkins").fit(traj)
    b = LPQL(arch, MuMeasure([[1.0]]), "watkins", zeta_plus=ZeroZeta(3)).fit(traj)
    assert np.allclose(a.theta_, b.theta_, atol=1e-8)


def test_lpql_infeasible_raises():
    # contradictory data: the same pair observed with two different costs
    traj = Trajectory([[1.0], [1.0]], [[0.0], [0.0]], [1.0, 2.0], [[0.0], [0.0]])
    arch = tabular_basis(random_finite_system(3, 2, seed=0))
    # per-sample equalities for the same pair cannot both hold
    with pytest.raises(InfeasibleProgram):
        LPQL(arch, MuMeasure([[1.0]]), "per_sample").fit(traj)


@pytest.mark.parametrize("mode", ["penalty", "hard_galerkin", "advantage_cone"])
def test_cql_modes_exact_on_tabular(setup, mode):
    s = setup
    est = ConvexQLearning(s["arch"], s["mu"], s["zeta"], s["zeta"], kappa_be=1.0, constraint_mode=mode)
    est.fit(s["traj"])
    assert np.max(np.abs(est.value(X12) - s["J"])) <= 1e-8
    assert kkt_certificate(est)["stationarity"] <= 1e-8


def test_cql_large_kappa_approaches_least_squares(sys12):
    arch = aggregated_basis(sys12, GROUPS)
    traj = exhaustive_trajectory(sys12)
    mu = MuMeasure.uniform(X12)
    data = assemble_batch(arch, None, traj)
    floor = data.E_be(ConvexQLearning(arch, None, None, kappa_be=1.0).fit(traj).theta_)
    errs = []
    for k in (1.0, 100.0, 1e4):
        th, _ = run_cql(traj, arch, dict(mu=mu, zeta=None, kappa_be=k))
        errs.append(data.E_be(th))
    assert errs[2] < errs[1] < errs[0]
    assert errs[2] - floor <= 1e-3 * floor


def test_cql_without_mu_fits_zero_td(setup):
    s = setup
    est = ConvexQLearning(s["arch"], None, s["zeta"], kappa_be=1.0).fit(s["traj"])
    assert est.data_.E_be(est.theta_) <= 1e-12


def test_bcql_single_batch_large_alpha_matches_cql(setup):
    arch = aggregated_basis(setup["sys"], GROUPS)
    ref = ConvexQLearning(arch, setup["mu"], None, kappa_be=10.0).fit(setup["traj"])
    th, _ = run_bcql(setup["traj"], arch, dict(mu=setup["mu"], kappa_be=10.0, n_batches=1, alpha1=1e12))
    assert np.allclose(th, ref.theta_, atol=1e-6)


def test_bcql_consistency_on_stationary_batches(sys12):
    arch = aggregated_basis(sys12, GROUPS)
    mu = MuMeasure.uniform(X12)
    traj = exhaustive_trajectory(sys12, 20)
    ref = ConvexQLearning(arch, mu, None, kappa_be=1000.0).fit(traj)
    est = BatchConvexQLearning(arch, mu, kappa_be=1000.0, n_batches=20, n_epochs=200).fit(traj)
    assert np.linalg.norm(est.theta_ - ref.theta_) <= 1e-4
    # successive epoch snapshots form a Cauchy sequence
    d = [np.linalg.norm(a - b) for a, b in zip(est.record_.thetas[1:], est.record_.thetas[:-1])]
    assert d[-1] <= d[0]


def test_bcql_prox_objective_decreases(sys12):
    arch = aggregated_basis(sys12, GROUPS)
    mu = MuMeasure.uniform(X12)
    traj = exhaustive_trajectory(sys12, 1)
    est = BatchConvexQLearning(arch, mu, kappa_be=10.0, n_batches=1, n_epochs=30).fit(traj)
    data = est.batches_[0]
    f = [data.total(t) for t in est.record_.thetas]
    assert all(b <= a + 1e-10 for a, b in zip(f, f[1:]))


def test_zap_bcql_approaches_pooled_solution(sys12):
    arch = aggregated_basis(sys12, GROUPS)
    mu = MuMeasure.uniform(X12)
    traj = exhaustive_trajectory(sys12, 20)
    ref = ConvexQLearning(arch, mu, None, kappa_be=1000.0).fit(traj)
    th, rec = run_zap_bcql(traj, arch, dict(mu=mu, kappa_be=1000.0, n_epochs=50))
    assert np.linalg.norm(th - ref.theta_) <= 1e-2
    assert len(rec) == 50 * 20


def test_pd_bcql_exact_on_tabular(setup):
    s = setup
    traj = exhaustive_trajectory(s["sys"], 20)
    (th, lam), rec = run_pd_bcql(traj, s["arch"], dict(mu=s["mu"], zeta=s["zeta"], n_batches=20, n_epochs=200,
                                                       alpha1=1e5))
    assert np.max(np.abs(s["arch"].J(th, X12) - s["J"])) <= 1e-6
    # complementary slackness on the pooled Galerkin vector
    z = assemble_batch(s["arch"], None, traj, zeta=s["zeta"]).z(th)
    assert np.max(np.abs(lam * z)) <= 1e-6
    assert np.all(lam >= 0) and len(rec.lambdas) == 200


def test_pd_bcql_zero_lambda_max_is_cone_bcql(sys12):
    arch = aggregated_basis(sys12, GROUPS)
    mu = MuMeasure.uniform(X12)
    traj = exhaustive_trajectory(sys12, 4)
    pd = PrimalDualBCQL(arch, mu, pair_indicator_zeta(sys12), kappa_be=5.0, n_batches=4, n_epochs=10,
                        lam_max=0.0).fit(traj)
    bc = BatchConvexQLearning(arch, mu, kappa_be=5.0, n_batches=4, n_epochs=10, cone=True).fit(traj)
    assert np.allclose(pd.theta_, bc.theta_, atol=1e-8)


def test_pd_bcql_needs_cone_and_zeta(sys12):
    traj = exhaustive_trajectory(sys12)
    with pytest.raises(ValueError):
        PrimalDualBCQL(aggregated_basis(sys12, kind="joint"), None, "watkins").fit(traj)
    with pytest.raises(ValueError):
        PrimalDualBCQL(tabular_basis(sys12), None, None).fit(traj)


def test_dqn_tabular_fixed_point(setup):
    s = setup
    arch = aggregated_basis(s["sys"], kind="joint")
    th, rec = run_dqn(s["traj"], arch, dict(alpha1=np.inf, step_schedule="constant", n_batches=1, n_epochs=50))
    Qh = arch.Q_all(th, X12)
    m = np.isfinite(s["Q"])
    assert np.max(np.abs(Qh - s["Q"])[m]) <= 1e-6
    assert np.linalg.norm(projected_bellman_residual(s["traj"], arch, th)) <= 1e-6


def test_dqn_and_cql_limits_differ_on_impoverished_basis(sys12):
    arch = aggregated_basis(sys12, GROUPS, kind="joint")
    traj = exhaustive_trajectory(sys12)
    dqn = DQN(arch, alpha1=np.inf, step_schedule="constant", n_batches=1, n_epochs=200).fit(traj)
    cql = ConvexQLearning(arch, MuMeasure.uniform(X12), "watkins", kappa_be=1.0).fit(traj)
    r_dqn = np.linalg.norm(projected_bellman_residual(traj, arch, dqn.theta_))
    r_cql = np.linalg.norm(projected_bellman_residual(traj, arch, cql.theta_))
    assert r_dqn <= 1e-6 and cql.solution_.kkt_max <= 1e-8
    assert r_cql > 1e-3
    assert np.max(np.abs(arch.Q_all(dqn.theta_, X12) - arch.Q_all(cql.theta_, X12))) > 1e-2


def test_exact_tables_have_zero_residual(setup):
    from cvxq.approx import theta_from_tables
    s = setup
    th = theta_from_tables(s["arch"], s["J"], s["Q"])
    assert np.max(np.abs(projected_bellman_residual(s["traj"], s["arch"], th))) <= 1e-10


def _scalar_lqr_traj(N=500):
    lqr = LqrSystem([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    return lqr, rollout(lqr, LinearFeedbackPolicy([[0.5]]), default_probe(), [1.0], N)


def test_scalar_lqr_residual_moment_formula():
    _, traj = _scalar_lqr_traj()
    arch = QuadBasis(1, 1)
    th = np.array([2.0, 0.4, 1.5])
    x, u, xn, c = traj.x[:, 0], traj.u[:, 0], traj.x_next[:, 0], traj.c
    zeta = np.column_stack([x * x, 2 * x * u, u * u])
    Sigma = zeta.T @ zeta / len(c)
    b_c = zeta.T @ c / len(c)
    b_x = zeta.T @ (xn * xn) / len(c)
    expected = -Sigma @ th + b_c + (th[0] - th[1] ** 2 / th[2]) * b_x
    assert np.allclose(projected_bellman_residual(traj, arch, th), expected, rtol=1e-10, atol=1e-12)


def test_scalar_lqr_flags_non_lipschitz_region():
    _, traj = _scalar_lqr_traj(50)
    with pytest.warns(NonLipschitzRegion):
        projected_bellman_residual(traj, QuadBasis(1, 1), np.array([2.0, 0.1, 1e-5]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        projected_bellman_residual(traj, QuadBasis(1, 1), np.array([2.0, 0.1, 1.0]))


def test_scalar_lqr_lpql_recovers_riccati():
    lqr, traj = _scalar_lqr_traj(400)
    arch = QuadBasis(1, 1, include_J=True)
    est = LPQL(arch, MuMeasure([[1.0]]), "watkins", zeta_plus="per_sample").fit(traj)
    assert abs(arch.matrices(est.theta_)[0][0, 0] - riccati_solve(lqr)[0, 0]) <= 1e-3


def test_feasible_j_dominated_by_optimal(setup):
    # the LPQL feasible set with exhaustive constraints: any point of it has J <= J*
    s = setup
    rng = np.random.default_rng(0)
    for _ in range(5):
        w = rng.uniform(0.1, 1.0, 12)
        est = LPQL(s["arch"], MuMeasure(X12, w), s["zeta"], s["zeta"]).fit(s["traj"])
        assert np.all(est.value(X12) <= s["J"] + 1e-8)


def test_determinism(sys12):
    arch = aggregated_basis(sys12, GROUPS)
    traj = exhaustive_trajectory(sys12, 4)
    a = BatchConvexQLearning(arch, MuMeasure.uniform(X12), kappa_be=10.0, n_batches=4, n_epochs=5).fit(traj)
    b = BatchConvexQLearning(arch, MuMeasure.uniform(X12), kappa_be=10.0, n_batches=4, n_epochs=5).fit(traj)
    assert np.array_equal(a.record_.table(include_time=False), b.record_.table(include_time=False), equal_nan=True)


def test_run_record_csv(tmp_path, sys12):
    traj = exhaustive_trajectory(sys12, 2)
    _, rec = run_bcql(traj, aggregated_basis(sys12, GROUPS), dict(mu=MuMeasure.uniform(X12), n_batches=2,
                                                                  n_epochs=3))
    rec.to_csv(tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0].split(",")[:3] == ["step", "epoch", "alpha"] and len(rows) == 7


def test_sklearn_params_roundtrip(sys12):
    from sklearn.base import clone
    est = ConvexQLearning(tabular_basis(sys12), kappa_be=3.0, constraint_mode="advantage_cone")
    c = clone(est)
    assert c.get_params()["kappa_be"] == 3.0 and c.constraint_mode == "advantage_cone"
