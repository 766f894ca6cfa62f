import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _reference import dominance_fuzz, lp_feasible, shortest_path_value
from cvxq.env import FiniteSystem, LqrSystem, random_finite_system
from cvxq.oracles import (GridTooSparse, GridValue, OracleError, are_residual, bellman_residual,
                          dplp_certificate, lqr_q_matrices, lqr_sdp_gridded, riccati_solve, value_iteration)

PHI = (1 + np.sqrt(5)) / 2
SCALAR = LqrSystem([[1.0]], [[1.0]], [[1.0]], [[1.0]])


def test_value_iteration_zero_costs():
    sys = FiniteSystem([[0, 1], [1, 0]], np.zeros((2, 2)), (0, 0))
    J, Q, _ = value_iteration(sys)
    assert np.array_equal(J, [0.0, 0.0])


def test_value_iteration_chain(chain3):
    J, Q, pol = value_iteration(chain3)
    assert np.array_equal(J, [0.0, 1.0, 2.0])
    assert np.array_equal(Q[2], [2.0, 4.0]) and pol[1] == 0


def test_value_iteration_divergence():
    sys = FiniteSystem([[0, 0], [1, 1]], [[0.0, 0.0], [1.0, 1.0]], (0, 0))
    with pytest.raises(OracleError):
        value_iteration(sys)


@given(st.integers(3, 10), st.integers(2, 4), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_value_iteration_matches_shortest_path(n, m, seed):
    sys = random_finite_system(n, m, seed=seed)
    J, _, _ = value_iteration(sys)
    assert np.allclose(J, shortest_path_value(sys), atol=1e-10)
    assert bellman_residual(sys, J) <= 1e-10


def test_riccati_golden_ratio_and_iterates():
    M, its = riccati_solve(SCALAR, return_iterates=True)
    assert abs(M[0, 0] - PHI) <= 1e-10
    assert np.allclose([m[0, 0] for m in its[1:4]], [1.0, 1.5, 1.6])
    assert are_residual(SCALAR, M) <= 1e-10


def test_riccati_one_step_system():
    S = np.array([[2.0, 0.5], [0.5, 1.0]])
    lqr = LqrSystem(np.zeros((2, 2)), np.eye(2)[:, :1], S, [[1.0]])
    assert np.allclose(riccati_solve(lqr), S)


def test_riccati_unstabilizable():
    lqr = LqrSystem([[2.0]], [[0.0]], [[1.0]], [[1.0]])
    with pytest.raises(OracleError):
        riccati_solve(lqr)


def test_q_matrix_blocks():
    MJ, MQ = lqr_q_matrices([[PHI]], SCALAR)
    assert np.allclose(MQ, [[1 + PHI, PHI], [PHI, 1 + PHI]])
    assert np.allclose(MJ, [[PHI, 0], [0, 0]])
    _, MQ0 = lqr_q_matrices([[0.0]], SCALAR)
    assert np.allclose(MQ0, np.eye(2))


def test_q_matrix_symmetric():
    rng = np.random.default_rng(4)
    lqr = LqrSystem(rng.normal(size=(3, 3)), rng.normal(size=(3, 2)), np.eye(3), np.eye(2))
    A = rng.normal(size=(3, 3))
    _, MQ = lqr_q_matrices(A + A.T, lqr)
    assert np.array_equal(MQ, MQ.T)


def test_sdp_gridded_scalar():
    M, info = lqr_sdp_gridded(SCALAR, n_directions=64)
    assert abs(M[0, 0] - PHI) <= 1e-4
    assert info["n_constraints"] >= 64
    # without cutting directions the fixed grid over-estimates
    M0, info0 = lqr_sdp_gridded(SCALAR, n_directions=64, refine=False)
    assert info0["n_constraints"] == 64 and M0[0, 0] >= PHI - 1e-8


def test_sdp_gridded_state_only_grid_is_rejected():
    with pytest.raises(GridTooSparse):
        lqr_sdp_gridded(SCALAR, directions=[[1.0, 0.0], [-1.0, 0.0]])


def test_sdp_trace_is_sum_of_basis_values():
    rng = np.random.default_rng(1)
    lqr = LqrSystem(rng.normal(size=(2, 2)), rng.normal(size=(2, 1)), np.eye(2), np.eye(1))
    M, _ = lqr_sdp_gridded(lqr)
    Mopt = riccati_solve(lqr)
    assert np.linalg.norm(M - Mopt) <= 1e-3 * np.linalg.norm(Mopt)
    J = [e @ M @ e for e in np.eye(2)]
    assert abs(np.trace(M) - sum(J)) <= 1e-12


def test_sdp_coarse_grid_bounds_trace_from_above():
    rng = np.random.default_rng(1)
    lqr = LqrSystem(rng.normal(size=(2, 2)), rng.normal(size=(2, 1)), np.eye(2), np.eye(1))
    Mopt = riccati_solve(lqr)
    gaps = [np.trace(lqr_sdp_gridded(lqr, n_directions=k, refine=False)[0]) - np.trace(Mopt)
            for k in (16, 64, 256)]
    assert min(gaps) >= -1e-6
    # Halton prefixes are nested, so densifying only adds constraints
    assert gaps[0] >= gaps[1] - 1e-8 >= gaps[2] - 2e-8


def test_dplp_certificate_optimum(sys12):
    J, Q, _ = value_iteration(sys12)
    rep = dplp_certificate(sys12, J, Q)
    assert rep.feasible and rep.optimal and rep.dominated


def test_dplp_certificate_shifted(sys12):
    J, _, _ = value_iteration(sys12)
    J = J - 1.0
    J[sys12.xe] = 0.0
    Q = np.minimum(sys12.cost_table + J[sys12.next_state], np.inf)
    rep = dplp_certificate(sys12, J, Q)
    assert rep.feasible and rep.dominated and not rep.optimal
    assert rep.max_excess < 0 or np.isclose(rep.max_excess, 0.0)


def test_dplp_certificate_flags_q_below_j(sys12):
    J, Q, _ = value_iteration(sys12)
    Q = Q.copy()
    Q[3, 1] = J[3] - 0.5
    rep = dplp_certificate(sys12, J, Q)
    assert not rep.feasible and rep.max_violation_lower == pytest.approx(0.5)


def test_dplp_certificate_requires_pinned_equilibrium(sys12):
    J, Q, _ = value_iteration(sys12)
    rep = dplp_certificate(sys12, J + 1.0, Q + 1.0)
    assert not rep.feasible and rep.pin_violation == pytest.approx(1.0)


def test_dplp_relaxed_constraint(sys12):
    J, Q, _ = value_iteration(sys12)
    rep = dplp_certificate(sys12, J, Q, rho=0.5)
    assert not rep.feasible_relaxed
    assert dplp_certificate(sys12, J, Q, rho=0.0).feasible_relaxed


def test_dominance_fuzz_small():
    kept, rejected, violations, _ = dominance_fuzz(200, seed=11)
    assert kept == 200 and rejected > 0 and violations == 0


def test_fuzz_feasibility_check_agrees_with_certificate():
    sys = random_finite_system(5, 2, seed=7)
    J, Q, _ = value_iteration(sys)
    assert lp_feasible(sys, J, Q) and dplp_certificate(sys, J, Q).feasible
    J2 = J.copy()
    J2[2] += 0.1
    assert not lp_feasible(sys, J2, Q) and not dplp_certificate(sys, J2, Q).feasible


def test_grid_value_roundtrip(tmp_path):
    z, v = np.linspace(-1.2, 0.4, 5), np.linspace(-0.07, 0.07, 4)
    g = GridValue(z, v, np.arange(20.0).reshape(5, 4), 0.5, {"key": "abc"})
    g.save(tmp_path / "g.npz")
    h = GridValue.load(tmp_path / "g.npz")
    X = np.array([[-1.0, 0.01], [0.1, -0.05], [0.6, 0.0]])
    assert np.array_equal(g(X), h(X)) and h.meta == {"key": "abc"}
    assert h(X)[2] == 0.0
    # bilinear interpolation reproduces grid values at nodes
    assert h([[z[2], v[1]]])[0] == 9.0
