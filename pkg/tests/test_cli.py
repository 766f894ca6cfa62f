import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from cvxq.approx import load_theta, save_theta, tabular_basis, theta_from_tables
from cvxq.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, SCHEMA_VERSION, main
from cvxq.env import random_finite_system
from cvxq.explore import Trajectory
from cvxq.oracles import value_iteration

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _strict_json(text):
    def bad(tok):
        raise ValueError(f"non-standard JSON token {tok}")
    return json.loads(text, parse_constant=bad)


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for name in ("finite.toml", "lqr_scalar.toml", "lqr_sdp.toml", "mountain_car.toml"):
        shutil.copy(CONFIGS / name, tmp_path / name)
    return tmp_path


@pytest.fixture
def finite_run(workdir, capsys):
    assert main(["run", "finite.toml", "--out", "fin"]) == EXIT_OK
    capsys.readouterr()
    return workdir / "fin"


def test_malformed_config_exits_2_without_outputs(workdir, capsys):
    (workdir / "bad.toml").write_text("[system\nkind = 'finite'\n[output]\ndir='o'\n")
    assert main(["run", "bad.toml"]) == EXIT_CONFIG
    (workdir / "noalgo.toml").write_text((workdir / "finite.toml").read_text().replace('"lpql"', '"nope"'))
    assert main(["run", "noalgo.toml", "--out", "o2"]) == EXIT_CONFIG
    (workdir / "noexp.toml").write_text((workdir / "finite.toml").read_text().replace('"exhaustive"', '"file"'))
    assert main(["run", "noexp.toml", "--out", "o3"]) == EXIT_CONFIG
    assert main(["run", "missing.toml"]) == EXIT_CONFIG
    assert main(["frobnicate"]) == EXIT_CONFIG
    for d in ("o", "o2", "o3", "out_finite"):
        assert not (workdir / d).exists()
    assert "configuration error" in capsys.readouterr().err


def test_infeasible_program_exits_3(workdir):
    traj = Trajectory([[1.0], [1.0]], [[0.0], [0.0]], [1.0, 2.0], [[0.0], [0.0]])
    traj.to_csv(workdir / "contradiction.csv")
    text = (workdir / "finite.toml").read_text()
    text = text.replace('kind = "exhaustive"\nrepeats = 5', 'kind = "file"\npath = "contradiction.csv"')
    text = text.replace('zeta = "pair_indicator"\nzeta_plus = "pair_indicator"', 'zeta = "per_sample"')
    (workdir / "inf.toml").write_text(text)
    assert main(["run", "inf.toml", "--out", "inf"]) == EXIT_INFEASIBLE


def test_finite_run_outputs_and_summary(finite_run):
    summary = _strict_json((finite_run / "summary.json").read_text())
    assert summary["schema_version"] == SCHEMA_VERSION == 1
    assert summary["status"] == "optimal"
    assert summary["oracle"]["J_sup_error"] <= 1e-6
    for f in ("trajectory.csv", "theta.json", "run_record.csv"):
        assert (finite_run / f).exists()
    header = (finite_run / "run_record.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["step", "epoch", "alpha"]


def test_theta_roundtrip_is_bit_exact(tmp_path):
    sys = random_finite_system(6, 2, seed=1)
    arch = tabular_basis(sys)
    theta = np.random.default_rng(0).normal(size=arch.d) / 3.0
    save_theta(tmp_path / "t.json", arch, theta)
    back = load_theta(tmp_path / "t.json", arch)
    X = np.arange(6.0)[:, None]
    assert np.array_equal(back, theta)
    assert np.array_equal(arch.Q_all(back, X), arch.Q_all(theta, X))


def test_trajectory_csv_roundtrip(finite_run):
    t = Trajectory.from_csv(finite_run / "trajectory.csv")
    t.to_csv(finite_run / "again.csv")
    assert (finite_run / "again.csv").read_text() == (finite_run / "trajectory.csv").read_text()


def _oracle(workdir, capsys):
    assert main(["oracle", "finite.toml", "--out", "ref"]) == EXIT_OK
    capsys.readouterr()
    return workdir / "ref" / "finite_reference.npz"


def test_compare_exact_projection_has_zero_error(workdir, capsys):
    ref = _oracle(workdir, capsys)
    sys = random_finite_system(12, 3, seed=3)
    arch = tabular_basis(sys)
    J, Q, _ = value_iteration(sys)
    save_theta(workdir / "exact.json", arch, theta_from_tables(arch, J, Q))
    assert main(["compare", "exact.json", str(ref), "--config", "finite.toml", "--out", "cmp.json"]) == EXIT_OK
    m = _strict_json((workdir / "cmp.json").read_text())["metrics"]
    assert m["sup_error"] <= 1e-12 and m["Q_sup_error"] <= 1e-12 and m["policy_agreement"] == 1.0


def test_compare_random_theta_is_positive_and_deterministic(workdir, capsys):
    ref = _oracle(workdir, capsys)
    arch = tabular_basis(random_finite_system(12, 3, seed=3))
    save_theta(workdir / "rand.json", arch, np.random.default_rng(5).normal(size=arch.d))
    outs = []
    for name in ("a.json", "b.json"):
        assert main(["compare", "rand.json", str(ref), "--config", "finite.toml", "--out", name]) == EXIT_OK
        outs.append(_strict_json((workdir / name).read_text())["metrics"])
    assert outs[0] == outs[1] and outs[0]["sup_error"] > 0 and outs[0]["l2_error"] > 0


def test_compare_rejects_mismatched_architecture(workdir, capsys):
    ref = _oracle(workdir, capsys)
    arch = tabular_basis(random_finite_system(5, 3, seed=3))
    save_theta(workdir / "other.json", arch, np.zeros(arch.d))
    assert main(["compare", "other.json", str(ref), "--config", "finite.toml"]) == EXIT_CONFIG
    assert "hash mismatch" in capsys.readouterr().err


def test_residual_of_exact_and_fitted_theta(finite_run, capsys):
    sys = random_finite_system(12, 3, seed=3)
    arch = tabular_basis(sys)
    J, Q, _ = value_iteration(sys)
    save_theta(finite_run / "exact.json", arch, theta_from_tables(arch, J, Q))
    traj = str(finite_run / "trajectory.csv")
    assert main(["residual", str(finite_run / "exact.json"), traj, "--config", "finite.toml",
                 "--out", "res.json"]) == EXIT_OK
    norms = _strict_json(Path("res.json").read_text())["norms"]
    assert norms["sup"] <= 1e-10 and norms["dim"] == arch.d
    assert main(["residual", str(finite_run / "exact.json"), traj, "--config", "finite.toml",
                 "--zeta", "pair_indicator", "--out", "res2.json"]) == EXIT_OK
    assert _strict_json(Path("res2.json").read_text())["norms"]["dim"] == 36


def test_lqr_run_reports_riccati_error(workdir, capsys):
    assert main(["run", "lqr_scalar.toml", "--out", "lqr"]) == EXIT_OK
    s = _strict_json((workdir / "lqr" / "summary.json").read_text())
    assert s["oracle"]["M_abs_error"] <= 1e-3
    assert main(["run", "lqr_sdp.toml", "--out", "sdp"]) == EXIT_OK
    s = _strict_json((workdir / "sdp" / "summary.json").read_text())
    assert s["oracle"]["M_abs_error"] <= 1e-4
    assert main(["oracle", "lqr_scalar.toml", "--out", "lqr"]) == EXIT_OK
    capsys.readouterr()
    assert main(["compare", "lqr/theta.json", "lqr/riccati.csv", "--out", "c.json"]) == EXIT_OK
    assert _strict_json((workdir / "c.json").read_text())["metrics"]["M_abs_error"] <= 1e-3


def test_mountain_car_run_emits_value_surface(workdir, capsys):
    assert main(["run", "mountain_car.toml", "--out", "mc"]) == EXIT_OK
    head = (workdir / "mc" / "value_surface.csv").read_text().splitlines()
    assert head[0] == "z,v,J_theta,J_reference" and len(head) == 1 + 60 * 40
    s = _strict_json((workdir / "mc" / "summary.json").read_text())
    assert s["report"]["status"] == "optimal" and s["schema_version"] == SCHEMA_VERSION
