"""Command line entry point: ``dockgnc <subcommand> [--config F] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .sim.config import ConfigError, ScenarioConfig, default_config, load_config

log = logging.getLogger("dockgnc")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, top: bool) -> None:
    kw = {} if top else {"default": argparse.SUPPRESS}
    p.add_argument("--config", type=Path, help="scenario TOML file", **kw)
    p.add_argument("--seed", type=int, help="override run.seed (unsigned 64-bit)", **kw)
    p.add_argument("--out", type=Path, help="output directory", **kw)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dockgnc", description=__doc__.splitlines()[0])
    _common(p, True)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        _common(sp, False)
        return sp

    add("propagate", "relative dynamics only (nonlinear, unforced)")
    add("train", "DDPG training on the docking environment")
    sp = add("tune", "Bayesian optimisation over DDPG hyperparameters")
    sp.add_argument("--resume", action="store_true", help="continue from tune_history.jsonl")
    sp = add("estimate", "UKF replay over recorded measurements")
    sp.add_argument("--measurements", type=Path, required=True)
    sp.add_argument("--trajectory", type=Path, help="trajectory.csv supplying the controls")
    sp = add("kinematics", "forward kinematics, Jacobian and resolved rates")
    sp.add_argument("--q", type=float, nargs=6, required=True, metavar="Q")
    sp.add_argument("--deg", action="store_true", help="joint angles in degrees")
    sp.add_argument("--twist", type=float, nargs=6, metavar="V",
                    help="end-effector twist (mm/s, rad/s) to map to joint rates")
    add("run", "closed-loop scenario")
    add("report", "aggregate run/training outputs into summary tables")
    return p


def _load(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
    return cfg


def _out(args) -> Path:
    out = args.out or Path("out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------- subcommands

def cmd_propagate(cfg: ScenarioConfig, args) -> int:
    from .dynamics import FullState, Propagator, RelativeTranslationalState, circular_orbit_state
    a = cfg.agents[0]
    target = circular_orbit_state(cfg.orbit.altitude, np.radians(cfg.orbit.inclination_deg))
    state = FullState(target, RelativeTranslationalState(np.asarray(a.rho0, float),
                                                         np.asarray(a.rho_dot0, float)))
    n = int(round(cfg.run.duration / cfg.run.dt_filter))
    traj = Propagator().propagate(state, cfg.run.dt_filter, n)
    out = _out(args)
    traj.write_csv(out / "propagation.csv")
    _dump(out / "summary.json", {"n_steps": n, "final_rho": traj.rho()[-1].tolist()})
    return EXIT_OK


def _train_setup(cfg: ScenarioConfig, dynamics=None):
    from .ddpg import DdpgHyperparams, DockingEnvConfig, RewardParams
    tr = cfg.train
    env = DockingEnvConfig(d_i=tr.d_i, eps_pos=cfg.docking.eps_pos, eps_vel=cfg.docking.eps_vel,
                           velocity_constrained=tr.velocity_constrained,
                           state_mode=tr.state_mode, a_bound=cfg.guidance.a_bound,
                           dt=cfg.run.dt_control, T=tr.T, dynamics_mode=dynamics or tr.dynamics,
                           altitude=cfg.orbit.altitude, d_i_jitter=tr.d_i_jitter)
    hp = DdpgHyperparams(alpha0=tr.alpha0, beta0=tr.beta0, tau=tr.tau, gamma=tr.gamma,
                         N=tr.episodes, eps0=tr.eps0, eps_min=min(0.01, tr.eps0),
                         lambda_decay=tr.lambda_decay, actor_hidden=tuple(tr.hidden),
                         critic_hidden=tuple(tr.hidden))
    rp = RewardParams(c1=tr.c1, c2=tr.c2, c3=tr.c3, R_docked=tr.R_docked,
                      variant=tr.reward_variant)
    return env, hp, rp


def cmd_train(cfg: ScenarioConfig, args) -> int:
    from .ddpg import evaluate_policy, train_ddpg
    env, hp, rp = _train_setup(cfg)
    out = _out(args)
    seed = cfg.run.seed
    res = train_ddpg(env, hp, rp, seed, metrics_path=out / "episodes.jsonl")
    res.actor.save(out / "actor.txt")
    ev = evaluate_policy(res.actor, env, cfg.train.n_validation, seed + 1, rp)
    window = min(50, len(res.metrics))
    _dump(out / "summary.json", {
        "seed": seed, "episodes": len(res.metrics),
        "docks_final_window": res.docks_in_final(window), "window": window,
        "validation_docks": ev.docked, "n_validation": ev.n_trials,
        "checkpoint": "actor.txt",
    })
    print(f"trained {len(res.metrics)} episodes; validation docks {ev.docked}/{ev.n_trials}")
    return EXIT_OK


def cmd_tune(cfg: ScenarioConfig, args) -> int:
    from .tuner import ddpg_search_space, make_ddpg_objective, tune
    env, hp, rp = _train_setup(cfg)
    val_env = replace(env, dynamics_mode="nonlinear")
    objective = make_ddpg_objective(env, hp, rp, mode=cfg.tune.mode,
                                    n_validation=cfg.train.n_validation,
                                    window=min(50, hp.N), validation_config=val_env)
    out = _out(args)
    res = tune(objective, ddpg_search_space(), cfg.tune.n_init, cfg.tune.n_iter, cfg.run.seed,
               history_path=out / "tune_history.jsonl", resume=args.resume,
               replications=cfg.tune.replications)
    _dump(out / "summary.json", {
        "n_evaluations": len(res.history),
        "best_objective": res.best_objective if np.isfinite(res.best_objective) else None,
        "best_config": res.best_config,
        "n_failed": sum(e.failed for e in res.history),
    })
    print(f"{len(res.history)} evaluations; best objective {res.best_objective}")
    return EXIT_OK


def cmd_estimate(cfg: ScenarioConfig, args) -> int:
    from .dynamics import mean_motion
    from .sim.loop import ControlLog, CwProcessModel, make_estimator_bank
    from .sim.outputs import read_csv_columns, fmt
    meas = read_csv_columns(args.measurements)
    ctrl = read_csv_columns(args.trajectory) if args.trajectory else None
    dt = cfg.run.dt_filter
    n = mean_motion(cfg.orbit.altitude)
    out = _out(args)
    agents = sorted(set(meas["agent"].astype(int).tolist())) if len(meas["agent"]) else []
    rows = []
    for i in agents:
        control = ControlLog()
        if ctrl is not None:
            sel = ctrl["agent"] == i
            for t, *u in zip(ctrl["t"][sel], ctrl["u_x"][sel], ctrl["u_y"][sel], ctrl["u_z"][sel]):
                control.set(float(t), u)
        a = cfg.agents[i]
        m0 = np.concatenate([a.rho0, a.rho_dot0]).astype(float)
        n_cams = int(meas["camera"].max()) + 1
        bank = make_estimator_bank(cfg, m0, CwProcessModel(n, control), n_cams)
        sel = meas["agent"] == i
        recs = sorted(zip(meas["t_arrival"][sel], meas["t_meas"][sel], meas["camera"][sel],
                          meas["t_x"][sel], meas["t_y"][sel], meas["t_z"][sel]))
        t_end = max(r[0] for r in recs)
        j = 0
        for k in range(int(np.ceil(t_end / dt - 1e-9)) + 1):
            t = k * dt
            if k:
                bank.predict(dt)
            batch = []
            while j < len(recs) and recs[j][0] <= t + 1e-9:
                ta, tm, c, *z = recs[j]
                batch.append((float(tm), int(c), np.array(z)))
                j += 1
            bank.process(batch)
            e = bank.estimate()
            rows.append([t, i, *e.m, *np.diag(e.P)])
    header = (["t", "agent"] + [f"rho_hat_{c}" for c in "xyz"]
              + [f"rho_dot_hat_{c}" for c in "xyz"] + [f"var_{k}" for k in range(6)])
    with open(out / "replay_estimates.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(fmt(v) for v in r) + "\n")
    print(f"replayed {int(len(meas['agent']))} measurements for {len(agents)} agent(s)")
    return EXIT_OK


def cmd_kinematics(cfg: ScenarioConfig, args) -> int:
    from .robot import (CR20A, DampingLimits, DhTable, condition_number, damp_joint_rates,
                        forward_kinematics, jacobian, joint_rates_from_twist)
    table = DhTable.from_dict(cfg.robot) if cfg.robot else CR20A
    q = np.radians(args.q) if args.deg else np.asarray(args.q, float)
    pose = forward_kinematics(table, q)
    J = jacobian(table, q)
    res = {"q_rad": q.tolist(), "position_mm": pose.position.tolist(),
           "rotation": pose.rotation.tolist(), "jacobian": J.tolist(),
           "condition_number": condition_number(J)}
    if args.twist is not None:
        rates = joint_rates_from_twist(J, args.twist)
        limits = DampingLimits(cfg.lab.lambda_l, cfg.lab.lambda_u)
        res["joint_rates"] = rates.tolist()
        res["damped_joint_rates"] = damp_joint_rates(rates, J, limits).tolist()
    text = json.dumps(res, indent=2)
    if args.out:
        _out(args)
        (args.out / "kinematics.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_run(cfg: ScenarioConfig, args) -> int:
    from .sim.loop import run_closed_loop
    from .sim.outputs import write_run_outputs
    metrics = run_closed_loop(cfg)
    out = _out(args)
    summary = write_run_outputs(metrics, out)
    for i, a in enumerate(summary["agents"]):
        state = f"docked at t={a['dock_time']}" if a["docked"] else "not docked"
        print(f"agent {i}: {state}; E_t={a['E_t']} E_q={a['E_q']}")
    if metrics.status != "ok":
        log.error("run failed: %s", metrics.error)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(cfg: ScenarioConfig, args) -> int:
    from .sim.outputs import dock_ratio_series, estimate_means, read_jsonl
    out = args.out or Path("out")
    if not out.is_dir():
        raise FileNotFoundError(f"no output directory {out}")
    report: dict = {}
    if (out / "episodes.jsonl").exists():
        series = dock_ratio_series(read_jsonl(out / "episodes.jsonl"))
        report["dock_ratio"] = series
        with open(out / "dock_ratio.csv", "w") as fh:
            fh.write("episode_end,dock_ratio\n")
            for s in series:
                fh.write(f"{s['episode_end']},{s['dock_ratio']!r}\n")
    if (out / "estimates.csv").exists():
        report["pose_error_means"] = {str(k): v for k, v in
                                      estimate_means(out / "estimates.csv").items()}
    if (out / "tune_history.jsonl").exists():
        hist = read_jsonl(out / "tune_history.jsonl")
        best, rows = -np.inf, []
        for h in hist:
            if not h["failed"] and h["objective"] is not None:
                best = max(best, h["objective"])
            rows.append({"iteration": h["iteration"], "objective": h["objective"],
                         "running_best": best if np.isfinite(best) else None})
        report["tuning"] = rows
    if not report:
        raise FileNotFoundError(f"nothing to report in {out}")
    _dump(out / "report.json", report)
    print(json.dumps({k: (len(v) if isinstance(v, list) else v) for k, v in report.items()},
                     indent=2))
    return EXIT_OK


COMMANDS = {
    "propagate": cmd_propagate, "train": cmd_train, "tune": cmd_tune,
    "estimate": cmd_estimate, "kinematics": cmd_kinematics, "run": cmd_run,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
