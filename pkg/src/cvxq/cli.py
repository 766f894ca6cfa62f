"""Config-driven command line: ``cvxq run | compare | residual | oracle``.

Exit codes: 0 success, 1 unexpected error, 2 configuration error,
3 infeasible or unbounded program, 4 solver did not converge.
"""
from __future__ import annotations

import argparse
import dataclasses
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .algos import ALGORITHMS, InfeasibleProgram, NotConverged, projected_bellman_residual
from .approx import (BinnedBasis, FeatureTableBasis, QuadBasis, _jsonable, architecture_from_config,
                     save_theta)
from .env import FiniteSystem, LqrSystem, MountainCarSystem, load_config, system_from_config
from .experiments import MountainCarConfig, run_mountain_car, value_surface
from .explore import (IndexPolicy, LinearFeedbackPolicy, RelayPolicy, RotorPolicy, SinusoidProbe, Trajectory,
                      cycle_starts, default_probe, exhaustive_trajectory, rollout, rotation_probe)
from .losses import binned_advantage_zeta, binned_pair_zeta, pair_indicator_zeta
from .oracles import (GridValue, lqr_sdp_gridded, mountain_car_reference, riccati_solve,
                      value_iteration)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NOT_CONVERGED = 0, 1, 2, 3, 4

log = logging.getLogger("cvxq")


class ConfigError(ValueError):
    pass


# -- config plumbing ---------------------------------------------------------------

def _load(path) -> dict:
    try:
        cfg = load_config(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except Exception as exc:  # parse errors from tomllib/json
        raise ConfigError(f"cannot parse {path}: {exc}")
    if "system" not in cfg:
        raise ConfigError("config needs a [system] section")
    return cfg


def _system(cfg):
    try:
        return system_from_config(cfg["system"])
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad [system] section: {exc}")


def _architecture(cfg, sys):
    if "architecture" not in cfg:
        raise ConfigError("config needs an [architecture] section")
    try:
        return architecture_from_config(cfg["architecture"], sys)
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad [architecture] section: {exc}")


def _probe(spec: dict):
    kind = spec.get("probe", "sinusoid")
    if kind == "sinusoid":
        if "frequencies" in spec:
            return SinusoidProbe(spec["frequencies"], spec.get("amplitudes", 1.0), spec.get("phases", 0.0))
        return default_probe(spec.get("amplitude", 1.0))
    if kind == "rotation":
        return rotation_probe()
    raise ConfigError(f"unknown probe {kind!r}")


def _trajectory(cfg, sys) -> Trajectory:
    try:
        return _rollout_from_spec(dict(cfg.get("exploration", {})), sys)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad [exploration] section: {exc!r}")


def _rollout_from_spec(spec, sys) -> Trajectory:
    kind = spec.get("kind")
    if kind is None:
        raise ConfigError("config needs [exploration] with a 'kind'")
    if kind == "file":
        return Trajectory.from_csv(spec["path"])
    if kind == "exhaustive":
        if not isinstance(sys, FiniteSystem):
            raise ConfigError("exhaustive exploration needs a finite system")
        return exhaustive_trajectory(sys, spec.get("repeats", 1))
    N = int(spec.get("N", 1000))
    x0 = np.atleast_1d(np.asarray(spec.get("x0", sys.equilibrium[0] * 0), float))
    if kind == "index":
        policy = IndexPolicy(sys.inputs)
        probe = rotation_probe()
    elif kind == "rotor":
        policy = RotorPolicy(sys.inputs)
        probe = rotation_probe()
    elif kind == "linear":
        policy = LinearFeedbackPolicy(spec.get("K", 0.0), spec.get("gain", 1.0))
        probe = _probe(spec)
    elif kind == "relay":
        policy = RelayPolicy(spec.get("gain", 0.02))
        probe = _probe(spec)
    else:
        raise ConfigError(f"unknown exploration kind {kind!r}")
    restart = cycle_starts(spec["starts"], spec.get("episode_len")) if "starts" in spec else None
    return rollout(sys, policy, probe, x0, N, restart=restart)


def _mu(spec, sys):
    if spec in (None, "visited") or not isinstance(spec, str):
        return spec
    if spec == "states" and isinstance(sys, FiniteSystem):
        return np.arange(sys.n_states, dtype=float)[:, None]
    raise ConfigError(f"unknown mu {spec!r}")


def _named_zeta(name, sys, arch):
    """Map a config string to a zeta specification; estimators resolve the rest."""
    if name in (None, "watkins", "per_sample"):
        return name
    if name == "pair_indicator":
        if not isinstance(sys, FiniteSystem):
            raise ConfigError("pair_indicator zeta needs a finite system")
        return pair_indicator_zeta(sys)
    if name in ("bin_input", "advantage_cell"):
        if not isinstance(arch, BinnedBasis):
            raise ConfigError(f"zeta {name!r} needs a binned architecture")
        return binned_pair_zeta(arch) if name == "bin_input" else binned_advantage_zeta(arch)
    raise ConfigError(f"unknown zeta {name!r}")


def _estimator(cfg, arch, sys):
    spec = dict(cfg.get("algorithm", {}))
    name = spec.pop("name", None)
    if name not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {name!r}; choose from {sorted(ALGORITHMS)} or 'sdp'")
    if "mu" in spec:
        spec["mu"] = _mu(spec["mu"], sys)
    for key in ("zeta", "zeta_plus"):
        if key in spec:
            spec[key] = _named_zeta(spec[key], sys, arch)
    try:
        return ALGORITHMS[name](architecture=arch, **spec)
    except TypeError as exc:
        raise ConfigError(f"bad [algorithm] parameters: {exc}")


def _out_dir(cfg, override=None) -> Path:
    """Output directory, created only once the config has been validated."""
    d = Path(override or cfg.get("output", {}).get("dir", "cvxq_out"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _clean(o):
    """Strict JSON: arrays to lists, non-finite floats to null."""
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, (float, np.floating)):
        return float(o) if np.isfinite(o) else None
    if isinstance(o, (np.integer, np.bool_)):
        return o.item()
    return o


def _dumps(payload, indent=None):
    return json.dumps(_clean(payload), indent=indent, default=_jsonable, allow_nan=False)


def _write_json(path, payload):
    Path(path).write_text(_dumps(payload, indent=2))


def _summary(command, **kw):
    return {"schema_version": SCHEMA_VERSION, "cvxq_version": __version__, "command": command, **kw}


# -- oracle comparisons ---------------------------------------------------------------

def _finite_tables(arch: FeatureTableBasis, theta):
    J = arch.psi_J_table @ theta
    Q = arch.psi_table @ theta
    return J, Q


def _finite_comparison(sys: FiniteSystem, arch, theta):
    Js, Qs, pol = value_iteration(sys)
    J, Q = _finite_tables(arch, theta)
    ok = sys.admissible
    greedy = np.argmin(np.where(ok, Q, np.inf), axis=1)
    return {"J_sup_error": float(np.max(np.abs(J - Js))),
            "Q_sup_error": float(np.max(np.abs(Q - Qs)[ok])),
            "policy_agreement": float(np.mean(greedy == pol))}


def _lqr_comparison(sys: LqrSystem, M_hat):
    M_star = riccati_solve(sys)
    err = float(np.linalg.norm(M_hat - M_star))
    return {"M_hat": M_hat, "M_star": M_star, "M_abs_error": err,
            "M_rel_error": err / float(np.linalg.norm(M_star))}


# -- commands ------------------------------------------------------------------------

def cmd_run(config_path, out=None) -> int:
    cfg = _load(config_path)
    sys_ = _system(cfg)
    if isinstance(sys_, MountainCarSystem):
        return _run_mountain_car(cfg, out)
    algo = cfg.get("algorithm", {}).get("name")
    if algo == "sdp":
        if not isinstance(sys_, LqrSystem):
            raise ConfigError("the 'sdp' algorithm needs an LQR system")
        out = _out_dir(cfg, out)
        M_hat, info = lqr_sdp_gridded(sys_, n_directions=cfg["algorithm"].get("n_directions", 64))
        summary = _summary("run", config=str(config_path), system="lqr", algorithm="sdp", status="optimal",
                           solver=info, oracle=_lqr_comparison(sys_, M_hat))
        np.savetxt(out / "M_hat.csv", M_hat, delimiter=",")
        _write_json(out / "summary.json", summary)
        print(json.dumps({"M_abs_error": summary["oracle"]["M_abs_error"]}))
        return EXIT_OK
    arch = _architecture(cfg, sys_)
    traj = _trajectory(cfg, sys_)
    est = _estimator(cfg, arch, sys_)
    gamma = getattr(sys_, "discount", 1.0)
    if hasattr(est, "gamma"):
        est.gamma = gamma
    out = _out_dir(cfg, out)
    est.fit(traj)
    theta = est.theta_
    traj.to_csv(out / "trajectory.csv")
    save_theta(out / "theta.json", arch, theta)
    est.record_.to_csv(out / "run_record.csv")
    rec = est.record_
    last = {c: getattr(rec, c)[-1] for c in rec.COLUMNS if c != "wall_time"} if len(rec) else {}
    residual = projected_bellman_residual(traj, arch, theta, gamma=gamma)
    summary = _summary("run", config=str(config_path), system=type(sys_).__name__, algorithm=type(est).__name__,
                       status=rec.status, objective=last,
                       kkt=dict(est.solution_.residuals) if hasattr(est, "solution_") else None,
                       projected_bellman_residual_sup=float(np.max(np.abs(residual))))
    if isinstance(sys_, FiniteSystem) and isinstance(arch, FeatureTableBasis):
        summary["oracle"] = _finite_comparison(sys_, arch, theta)
    elif isinstance(sys_, LqrSystem) and isinstance(arch, QuadBasis) and arch.include_J:
        summary["oracle"] = _lqr_comparison(sys_, arch.matrices(theta)[0])
    _write_json(out / "summary.json", summary)
    print(json.dumps({"status": rec.status, "out": str(out)}))
    return EXIT_OK


def _run_mountain_car(cfg, out) -> int:
    try:
        mc = MountainCarConfig.from_dict(cfg.get("mountain_car", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    out = _out_dir(cfg, out)
    sys_ = system_from_config(cfg["system"])
    est, traj, report = run_mountain_car(mc, sys_)
    traj.to_csv(out / "trajectory.csv")
    save_theta(out / "theta.json", est.architecture, est.theta_)
    est.record_.to_csv(out / "run_record.csv")
    surf = value_surface(est, sys_)
    ref = mountain_car_reference(sys_, cache_dir=mc.cache_dir)
    _write_csv(out / "value_surface.csv", ["z", "v", "J_theta", "J_reference"],
               np.column_stack([surf, ref(surf[:, :2])]))
    _write_json(out / "summary.json", _summary("run", system="mountain_car", algorithm="ConvexQLearning",
                                               experiment=dataclasses.asdict(mc), report=report))
    print(json.dumps({"status": report["status"], "all_reached": report["all_reached"],
                      "median_rel_error": report["median_rel_error"]}))
    return EXIT_OK


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


def _arch_from_theta_file(path, cfg_path=None):
    payload = json.loads(Path(path).read_text())
    params = dict(payload.get("params", {}))
    kind = payload.get("architecture")
    if cfg_path is not None:
        cfg = _load(cfg_path)
        sys_ = _system(cfg)
        arch = _architecture(cfg, sys_)
    elif kind == "BinnedBasis":
        sys_, arch = MountainCarSystem(), BinnedBasis(**params)
    elif kind == "QuadBasis":
        sys_, arch = None, QuadBasis(**params)
    else:
        raise ConfigError(f"architecture {kind!r} needs --config to be rebuilt")
    if arch.fingerprint() != payload.get("fingerprint"):
        raise ConfigError("architecture hash mismatch between theta file and configuration")
    return sys_, arch, np.array(payload["theta"], float)


def _parse_grid(text):
    try:
        nz, nv = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise ConfigError("grid must look like 60x40")
    return nz, nv


def cmd_compare(theta_file, oracle_file, grid="60x40", config=None, out=None) -> int:
    sys_, arch, theta = _arch_from_theta_file(theta_file, config)
    if str(oracle_file).endswith(".npz") and isinstance(arch, BinnedBasis):
        ref = GridValue.load(oracle_file)
        sys_ = sys_ if isinstance(sys_, MountainCarSystem) else MountainCarSystem()
        nz, nv = _parse_grid(grid)
        z = np.linspace(sys_.z_min, sys_.z_goal, nz, endpoint=False)
        v = np.linspace(-sys_.v_bar, sys_.v_bar, nv)
        X = np.stack(np.meshgrid(z, v, indexing="ij"), -1).reshape(-1, 2)
        J, Jr = arch.J(theta, X), ref(X)
        # greedy agreement against one-step lookahead on the reference
        Qr = np.column_stack([1.0 + ref(np.array([sys_.step(x, u) for x in X])) for u in arch.inputs])
        agree = np.argmin(arch.Q_all(theta, X), axis=1) == np.argmin(Qr, axis=1)
        metrics = {"sup_error": float(np.max(np.abs(J - Jr))),
                   "l2_error": float(np.sqrt(np.mean((J - Jr) ** 2))),
                   "policy_agreement": float(np.mean(agree)), "grid": [nz, nv]}
    elif isinstance(arch, FeatureTableBasis):
        with np.load(oracle_file) as f:
            Js, Qs = f["J"], f["Q"]
        J, Q = _finite_tables(arch, theta)
        ok = np.isfinite(Qs)
        metrics = {"sup_error": float(np.max(np.abs(J - Js))), "l2_error": float(np.sqrt(np.mean((J - Js) ** 2))),
                   "Q_sup_error": float(np.max(np.abs(Q - Qs)[ok])),
                   "policy_agreement": float(np.mean(np.argmin(np.where(ok, Q, np.inf), 1) == np.argmin(Qs, 1)))}
    elif isinstance(arch, QuadBasis) and arch.include_J and str(oracle_file).endswith(".csv"):
        M_star = np.atleast_2d(np.loadtxt(oracle_file, delimiter=","))
        err = float(np.linalg.norm(arch.matrices(theta)[0] - M_star))
        metrics = {"M_abs_error": err, "M_rel_error": err / float(np.linalg.norm(M_star))}
    else:
        raise ConfigError("oracle file does not match the architecture")
    payload = _summary("compare", theta=str(theta_file), oracle=str(oracle_file), metrics=metrics)
    if out:
        _write_json(out, payload)
    print(_dumps(payload))
    return EXIT_OK


def cmd_residual(theta_file, traj_file, zeta_spec="watkins", config=None, out=None) -> int:
    sys_, arch, theta = _arch_from_theta_file(theta_file, config)
    traj = Trajectory.from_csv(traj_file)
    zeta = _named_zeta(zeta_spec, sys_, arch)
    gamma = getattr(sys_, "discount", 1.0) if sys_ is not None else 1.0
    r = projected_bellman_residual(traj, arch, theta, zeta, gamma=gamma)
    payload = _summary("residual", theta=str(theta_file), trajectory=str(traj_file), zeta=zeta_spec,
                       norms={"sup": float(np.max(np.abs(r))), "l2": float(np.linalg.norm(r)),
                              "dim": int(r.size)})
    if out:
        _write_json(out, payload)
    print(_dumps(payload))
    return EXIT_OK


def cmd_oracle(config_path, out=None) -> int:
    cfg = _load(config_path)
    sys_ = _system(cfg)
    d = _out_dir(cfg, out)
    if isinstance(sys_, MountainCarSystem):
        spec = cfg.get("oracle", {})
        ref = mountain_car_reference(sys_, s_z=spec.get("s_z", 0.041), s_v=spec.get("s_v", 0.001))
        path = d / "mc_reference.npz"
        ref.save(path)
        info = {"kind": "mountain_car", "path": str(path), **ref.meta}
    elif isinstance(sys_, FiniteSystem):
        J, Q, pol = value_iteration(sys_)
        path = d / "finite_reference.npz"
        np.savez(path, J=J, Q=Q, policy=pol)
        info = {"kind": "finite", "path": str(path), "J": J}
    elif isinstance(sys_, LqrSystem):
        M = riccati_solve(sys_)
        path = d / "riccati.csv"
        np.savetxt(path, M, delimiter=",")
        info = {"kind": "lqr", "path": str(path), "M_star": M}
    else:
        raise ConfigError("no oracle for this system")
    print(_dumps(_summary("oracle", **info)))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="cvxq", description="Convex Q-learning experiments")
    p.add_argument("--version", action="version", version=f"cvxq {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="explore, fit and evaluate from a config file")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides [output] dir)")
    c = sub.add_parser("compare", help="errors of a fitted theta against a reference")
    c.add_argument("theta")
    c.add_argument("oracle")
    c.add_argument("--grid", default="60x40")
    c.add_argument("--config", help="config used to rebuild table architectures")
    c.add_argument("--out")
    s = sub.add_parser("residual", help="projected Bellman residual of theta on a trajectory")
    s.add_argument("theta")
    s.add_argument("trajectory")
    s.add_argument("--zeta", default="watkins")
    s.add_argument("--config")
    s.add_argument("--out")
    o = sub.add_parser("oracle", help="precompute the reference solution for a config")
    o.add_argument("config")
    o.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out)
        if args.command == "compare":
            return cmd_compare(args.theta, args.oracle, args.grid, args.config, args.out)
        if args.command == "residual":
            return cmd_residual(args.theta, args.trajectory, args.zeta, args.config, args.out)
        return cmd_oracle(args.config, args.out)
    except ConfigError as exc:
        print(f"cvxq: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleProgram as exc:
        print(f"cvxq: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NotConverged as exc:
        print(f"cvxq: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except Exception as exc:
        log.debug("unexpected failure", exc_info=True)
        print(f"cvxq: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
