"""Closed-loop runner: sense, estimate, fuse, guide, filter, act (and optionally scale to the lab).

Guidance and the safety filter only ever see fused estimates; truth is read
from the plant for logging, docking detection and the sensor models.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .. import attitude as att
from ..cbf import (AgentKinematics, BarrierViolationError, ControlCommand, DegenerateGeometryError,
                   SafetyParams, eval_cbfs, filter_control)
from ..dynamics import (ExternalInputs, FullState, Propagator, RelativeTranslationalState,
                        circular_orbit_state, mean_motion)
from ..robot import CR20A, DampingLimits, DhTable, LabScaling, SimulatedArm, scale_lab_to_orbit
from ..ukf import DelayedMeasurement, GaussianBelief, Ukf, UkfConfig, owa_fuse
from .config import ScenarioConfig
from .sensors import PoseSensorModel, SensorChannel, batch_means, pose_error_metrics

log = logging.getLogger(__name__)

H_HAT = np.array([0.0, 0.0, 1.0])


# ----------------------------------------------------------------- models

def _cw_matrices(n: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Discrete CW transition and zero-order-hold input matrices."""
    M = np.zeros((9, 9))
    M[0:3, 3:6] = np.eye(3)
    M[3, 0] = 3 * n * n
    M[3, 4] = 2 * n
    M[4, 3] = -2 * n
    M[5, 2] = -n * n
    M[3:6, 6:9] = np.eye(3)
    E = expm(M * dt)
    return E[:6, :6], E[:6, 6:9]


class ControlLog:
    """Piecewise-constant record of the applied acceleration."""

    def __init__(self):
        self.times: list[float] = [0.0]
        self.values: list[np.ndarray] = [np.zeros(3)]

    def set(self, t: float, u) -> None:
        u = np.asarray(u, dtype=float).copy()
        if t <= self.times[-1] + 1e-12:
            self.values[-1] = u
        else:
            self.times.append(t)
            self.values.append(u)

    def at(self, t: float) -> np.ndarray:
        i = bisect.bisect_right(self.times, t + 1e-9) - 1
        return self.values[max(i, 0)]


class CwProcessModel:
    """CW dynamics with the logged acceleration held over each interval."""

    time_aware = True

    def __init__(self, n: float, control: ControlLog):
        self.n = n
        self.control = control
        self._cache: dict = {}

    def __call__(self, x, dt, t0):
        key = round(dt, 12)
        if key not in self._cache:
            self._cache[key] = _cw_matrices(self.n, dt)
        Phi, Gam = self._cache[key]
        return Phi @ x + Gam @ self.control.at(t0)


# --------------------------------------------------------------- guidance

def scripted_guidance(rho_rel, vel, g) -> np.ndarray:
    """Speed-profile approach: square-root slowdown towards the port, velocity tracking."""
    d = float(np.linalg.norm(rho_rel))
    if d == 0.0:
        v_cmd = np.zeros(3)
    else:
        speed = min(g.v_max, g.v_min + g.k_sqrt * np.sqrt(max(d - g.d_slow, 0.0)))
        v_cmd = -speed * rho_rel / d
    return np.clip(g.k_v * (v_cmd - vel), -g.a_bound, g.a_bound)


def _frame_to_h(axis) -> np.ndarray:
    """Rotation taking ``axis`` onto +h (the training approach direction)."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    c = float(a @ H_HAT)
    if c > 1 - 1e-12:
        return np.eye(3)
    if c < -1 + 1e-12:
        return np.diag([1.0, -1.0, -1.0])
    v = np.cross(a, H_HAT)
    K = att.skew(v)
    return np.eye(3) + K + K @ K / (1 + c)


class PolicyGuidance:
    """Trained actor applied in the agent's approach frame."""

    def __init__(self, actor, axis, a_bound: float):
        self.actor = actor
        self.R = _frame_to_h(axis)
        self.a_bound = a_bound
        self.state_dim = actor.sizes[0]
        if self.state_dim not in (3, 6):
            raise ValueError("policy input must be 3 (position) or 6 (position, velocity)")

    def __call__(self, rho_rel, vel) -> np.ndarray:
        obs = -(self.R @ rho_rel)
        if self.state_dim == 6:
            obs = np.concatenate([obs, -(self.R @ vel)])
        a = float(np.clip(np.ravel(self.actor(obs))[0], -self.a_bound, self.a_bound))
        return self.R.T @ (a * H_HAT)


def make_guidance(cfg: ScenarioConfig, agent_index: int):
    g = cfg.guidance
    if g.mode == "zero":
        return lambda rho_rel, vel: np.zeros(3)
    if g.mode == "scripted":
        return lambda rho_rel, vel: scripted_guidance(rho_rel, vel, g)
    from ..ddpg import Mlp
    actor = Mlp.load(cfg.resolve(g.checkpoint))
    a = cfg.agents[agent_index]
    axis = np.asarray(a.rho0, float) - np.asarray(a.port, float)
    return PolicyGuidance(actor, axis, g.a_bound)


# ---------------------------------------------------------------- results

@dataclass
class AgentLog:
    rho: list = field(default_factory=list)
    rho_dot: list = field(default_factory=list)
    q_true: list = field(default_factory=list)
    rho_hat: list = field(default_factory=list)
    rho_dot_hat: list = field(default_factory=list)
    var: list = field(default_factory=list)
    q_hat: list = field(default_factory=list)
    u: list = field(default_factory=list)
    u_ref: list = field(default_factory=list)
    infeasible: list = field(default_factory=list)
    barriers: list = field(default_factory=list)
    e_t: list = field(default_factory=list)
    e_q: list = field(default_factory=list)
    e_p: list = field(default_factory=list)
    lab: list = field(default_factory=list)
    docked_flags: list = field(default_factory=list)
    # (camera index, PoseMeasurement) in delivery order
    measurements: list = field(default_factory=list)
    docked: bool = False
    dock_time: float | None = None
    n_measurements: int = 0
    n_dropped: int = 0


@dataclass
class RunMetrics:
    t: list = field(default_factory=list)
    agents: list = field(default_factory=list)
    status: str = "ok"
    error: str | None = None
    seed: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.t)

    def batch_means(self, i: int) -> tuple[float, float, float]:
        a = self.agents[i]
        if not a.e_t:
            return float("nan"), float("nan"), float("nan")
        return batch_means(a.e_t, a.e_q, a.e_p)

    def min_barrier(self) -> float:
        vals = [np.nanmin(b) for a in self.agents for b in a.barriers if not np.all(np.isnan(b))]
        return float(min(vals)) if vals else float("nan")

    def all_docked(self) -> bool:
        return all(a.docked for a in self.agents)


# ----------------------------------------------------------------- runner

def safety_params(cfg: ScenarioConfig) -> SafetyParams:
    s = cfg.safety
    return SafetyParams(r_agent_i=s.r_agent, r_agent_j=s.r_agent, r_target=s.r_target, r_m=s.r_m,
                        nu_0=s.nu_0, nu_1=s.nu_1, F_max=s.F_max, mass=s.mass,
                        n=mean_motion(cfg.orbit.altitude), v_m=s.v_m, alpha_cbf=s.alpha_cbf,
                        margin_pos=s.margin_pos, margin_vel=s.margin_vel)


def _barrier_row(agents_truth, params, i) -> np.ndarray:
    """h1 (min over pairs with agent i), h2..h5 on the true kinematics; NaN where undefined."""
    try:
        h = eval_cbfs(agents_truth, params)
    except BarrierViolationError as exc:
        # a radicand went negative: the constraint itself is violated
        row = np.full(5, np.nan)
        row[int(exc.barrier[1]) - 1] = -np.inf
        return row
    except DegenerateGeometryError:
        return np.full(5, np.nan)
    h1 = h["h1"]
    return np.array([float(np.min(h1)) if len(h1) else np.nan, h["h2"][i], h["h3"][i],
                     h["h4"][i], h["h5"][i]])


class EstimatorBank:
    """One UKF per camera plus a stacked-fusion UKF, combined by OWA."""

    def __init__(self, m0, P0, ukf_cfg: UkfConfig, model, n_cams: int, R, history_len: int = 50):
        n_filters = max(n_cams, 1) + (1 if n_cams >= 2 else 0)
        self.n_cams = n_cams
        self.R = np.asarray(R, dtype=float)
        self.filters = [Ukf(GaussianBelief(m0, P0), ukf_cfg, model, history_len)
                        for _ in range(n_filters)]

    @property
    def t(self) -> float:
        return self.filters[0].t

    def predict(self, dt: float) -> None:
        for f in self.filters:
            f.predict(dt)

    def process(self, delivered) -> None:
        """``delivered``: (t_meas, camera index, z) tuples that arrived by now."""
        delivered = sorted(delivered, key=lambda item: (item[0], item[1]))
        h = lambda x: x[:3]
        groups: dict = {}
        for t_meas, c, z in delivered:
            self.filters[c].delayed_update(DelayedMeasurement(z, t_meas, f"cam{c}"), h, self.R)
            groups.setdefault(t_meas, []).append(z)
        if len(self.filters) > self.n_cams and self.n_cams >= 2:
            fusion = self.filters[-1]
            for t_meas in sorted(groups):
                zs = groups[t_meas]
                k = len(zs)
                hs = lambda x, k=k: np.tile(x[:3], k)
                fusion.delayed_update(DelayedMeasurement(np.concatenate(zs), t_meas, "stacked"),
                                      hs, np.kron(np.eye(k), self.R))

    def estimate(self) -> GaussianBelief:
        beliefs = [f.belief for f in self.filters]
        return beliefs[0].copy() if len(beliefs) == 1 else owa_fuse(beliefs)


def make_estimator_bank(cfg: ScenarioConfig, m0, model, n_cams: int) -> EstimatorBank:
    """Filters configured from the scenario; Q scales with the filter step."""
    u = cfg.ukf
    dt = cfg.run.dt_filter
    Q = np.diag([u.q_pos * dt] * 3 + [u.q_vel * dt] * 3)
    ukf_cfg = UkfConfig(n=6, alpha=u.alpha, beta=u.beta, kappa=u.kappa, Q=Q)
    P0 = np.diag([u.p0_pos] * 3 + [u.p0_vel] * 3)
    R = max(cfg.sensor.sigma_t ** 2, 1e-10) * np.eye(3)
    return EstimatorBank(np.asarray(m0, dtype=float), P0, ukf_cfg, model, n_cams, R,
                         u.history_len)


class _AgentRuntime:
    def __init__(self, cfg: ScenarioConfig, index: int, rng, n_ticks: int, control: ControlLog):
        a = cfg.agents[index]
        self.index = index
        self.port = np.asarray(a.port, dtype=float)
        self.rho0 = np.asarray(a.rho0, dtype=float)
        self.control = control
        n = mean_motion(cfg.orbit.altitude)
        self.n = n
        dt = cfg.run.dt_filter
        self.dynamics = cfg.run.dynamics
        rel = RelativeTranslationalState(self.rho0.copy(), np.asarray(a.rho_dot0, dtype=float))
        if self.dynamics == "nonlinear":
            target = circular_orbit_state(cfg.orbit.altitude, np.radians(cfg.orbit.inclination_deg))
            self.stepper = Propagator().stepper(FullState(target, rel), dt, n_ticks)
            self.x = np.concatenate([rel.rho, rel.rho_dot])
            self.q_true = self.stepper.state.rot.q_r.copy()
        else:
            self.stepper = None
            self.x = np.concatenate([rel.rho, rel.rho_dot])
            self.q_true = att.IDENTITY_QUAT.copy()
            self._cw = _cw_matrices(n, dt)

        # estimator bank: one filter per camera plus a stacked fusion filter
        u = cfg.ukf
        P0 = np.diag([u.p0_pos] * 3 + [u.p0_vel] * 3)
        m0 = self.x + np.sqrt(np.diag(P0)) * rng.normal(size=6)
        self.model = CwProcessModel(n, control)
        n_cams = cfg.sensor.cameras_per_agent if cfg.sensor.enabled else 0
        self.bank = make_estimator_bank(cfg, m0, self.model, n_cams)
        se = cfg.sensor
        model = PoseSensorModel(se.sigma_t, se.sigma_q, se.rate, se.delay_kind, se.delay,
                                se.delay_low, se.delay_high, se.dropout, np.asarray(se.bias))
        self.channels = [SensorChannel(model, np.random.default_rng(rng.integers(2 ** 63)),
                                       f"agent{index}.cam{c}") for c in range(n_cams)]
        self.measurement_log: list = []
        self.latest_q: dict = {}
        self.guidance = make_guidance(cfg, index)
        self.u = np.zeros(3)
        self.u_ref = np.zeros(3)
        self.infeasible = False
        self.docked = False

        self.arm = None
        if cfg.lab.enabled:
            table = DhTable.from_dict(cfg.robot) if cfg.robot else CR20A
            self.scaling = LabScaling(cfg.lab.kappa, cfg.lab.nu)
            self.arm = SimulatedArm(table, np.asarray(cfg.lab.q0, float),
                                    DampingLimits(cfg.lab.lambda_l, cfg.lab.lambda_u))
            self.p_home = self.arm.pose().position.copy()

    # ---------------------------------------------------------------- plant
    def step_plant(self) -> None:
        if self.docked:
            # captured at the port: the relative state is held
            self.x[3:] = 0.0
            if self.stepper is not None:
                self.stepper.step()
            return
        if self.stepper is not None:
            full = self.stepper.step(ExternalInputs(a_p_s=self.u.copy()))
            self.x = np.concatenate([full.rel.rho, full.rel.rho_dot])
            self.q_true = full.rot.q_r.copy()
        else:
            Phi, Gam = self._cw
            self.x = Phi @ self.x + Gam @ self.u

    def step_arm(self, dt_orbit: float) -> None:
        target = self.p_home + 1000.0 * self.scaling.factor("position") * (self.x[:3] - self.rho0)
        dt_lab = self.scaling.factor("time") * dt_orbit
        twist = np.concatenate([(target - self.arm.pose().position) / dt_lab, np.zeros(3)])
        self.arm.step_twist(twist, dt_lab)

    def observed_translation(self) -> np.ndarray:
        """What the cameras see: truth, or the arm's pose mapped back to orbit scale."""
        if self.arm is None:
            return self.x[:3]
        disp = (self.arm.pose().position - self.p_home) / 1000.0
        return self.rho0 + scale_lab_to_orbit(disp, self.scaling, "position")

    # ------------------------------------------------------------ estimation
    def sense_and_update(self, t: float) -> None:
        seen = self.observed_translation()
        for ch in self.channels:
            ch.emit_due(t, seen, self.q_true)
        delivered = []
        for c, ch in enumerate(self.channels):
            for m in ch.deliver(t):
                delivered.append((m.t_meas, c, m.t))
                self.measurement_log.append((c, m))
                prev = self.latest_q.get(c)
                if prev is None or m.t_meas >= prev[0]:
                    self.latest_q[c] = (m.t_meas, m.q)
        self.bank.process(delivered)
        self.n_delivered = len(delivered)

    def predict(self, dt: float) -> None:
        self.bank.predict(dt)

    def estimate(self) -> GaussianBelief:
        return self.bank.estimate()

    def attitude_estimate(self) -> np.ndarray:
        if not self.latest_q:
            return att.IDENTITY_QUAT.copy()
        qs = [self.latest_q[c][1] for c in sorted(self.latest_q)]
        ref = qs[0]
        s = sum((q if q @ ref >= 0 else -q) for q in qs)
        return att.normalize(s)


def run_closed_loop(cfg: ScenarioConfig, guidance_override=None) -> RunMetrics:
    """Run the scenario; deterministic for a fixed config (seed included).

    ``guidance_override(agent_index, rho_rel_hat, vel_hat) -> accel`` replaces
    the configured guidance (used for adversarial checks).
    """
    r = cfg.run
    rng = np.random.default_rng(r.seed)
    dt = r.dt_filter
    n_ticks = int(round(r.duration / dt))
    per_control = int(round(r.dt_control / dt))
    metrics = RunMetrics(seed=r.seed)
    params = safety_params(cfg)
    d = cfg.docking
    try:
        controls = [ControlLog() for _ in cfg.agents]
        agents = [_AgentRuntime(cfg, i, rng, n_ticks, controls[i]) for i in range(len(cfg.agents))]
        metrics.agents = [AgentLog() for _ in agents]
        for k in range(n_ticks + 1):
            t = k * dt
            for ag in agents:
                ag.sense_and_update(t)
            est = [ag.estimate() for ag in agents]
            if k % per_control == 0 and k < n_ticks:
                kin = [AgentKinematics(e.m[:3], e.m[3:]) for e in est]
                for i, ag in enumerate(agents):
                    if ag.docked:
                        ag.u_ref = np.zeros(3)
                        ag.u = np.zeros(3)
                        ag.infeasible = False
                    else:
                        rel = est[i].m[:3] - ag.port
                        if guidance_override is not None:
                            u_ref = np.asarray(guidance_override(i, rel, est[i].m[3:]), float)
                        else:
                            u_ref = np.asarray(ag.guidance(rel, est[i].m[3:]), float)
                        ag.u_ref = u_ref
                        if cfg.safety.enabled:
                            others = [agents[j].u for j in range(len(agents))]
                            res = filter_control(ControlCommand(u_ref), kin, params, controlled=i,
                                                 others_accel=others, on_infeasible="saturate")
                            ag.u = res.command.u_force.copy()
                            ag.infeasible = res.infeasible
                        else:
                            ag.u = np.clip(u_ref, -cfg.guidance.a_bound, cfg.guidance.a_bound)
                            ag.infeasible = False
                    controls[i].set(t, ag.u)
            truth_kin = [AgentKinematics(ag.x[:3], ag.x[3:]) for ag in agents]
            metrics.t.append(t)
            for i, (ag, lg) in enumerate(zip(agents, metrics.agents)):
                e = est[i]
                q_hat = ag.attitude_estimate()
                e_t, e_q, e_p = pose_error_metrics(e.m[:3], ag.x[:3], q_hat, ag.q_true)
                lg.rho.append(ag.x[:3].copy())
                lg.rho_dot.append(ag.x[3:].copy())
                lg.q_true.append(ag.q_true.copy())
                lg.rho_hat.append(e.m[:3].copy())
                lg.rho_dot_hat.append(e.m[3:].copy())
                lg.var.append(np.diag(e.P).copy())
                lg.q_hat.append(q_hat)
                lg.u.append(ag.u.copy())
                lg.u_ref.append(ag.u_ref.copy())
                lg.infeasible.append(bool(ag.infeasible))
                lg.barriers.append(_barrier_row(truth_kin, params, i))
                lg.e_t.append(e_t)
                lg.e_q.append(e_q)
                lg.e_p.append(e_p)
                lg.n_measurements += ag.n_delivered
                if ag.arm is not None:
                    lg.lab.append(np.concatenate([ag.arm.q, ag.arm.pose().position,
                                                  [ag.arm.last_condition]]))
                pos_ok = np.linalg.norm(ag.x[:3] - ag.port) < d.eps_pos
                vel_ok = (not d.velocity_constrained) or np.linalg.norm(ag.x[3:]) < d.eps_vel
                if not ag.docked and pos_ok and vel_ok:
                    ag.docked = True
                    lg.docked = True
                    lg.dock_time = t
                lg.docked_flags.append(ag.docked)
            if k == n_ticks or (r.stop_when_docked and all(ag.docked for ag in agents)):
                break
            for ag in agents:
                ag.step_plant()
                if ag.arm is not None:
                    ag.step_arm(dt)
                ag.predict(dt)
        for ag, lg in zip(agents, metrics.agents):
            lg.n_dropped = sum(ch.dropped for ch in ag.channels)
            lg.measurements = ag.measurement_log
    except Exception as exc:  # structured failure record for the caller
        log.error("closed-loop run failed: %s", exc)
        metrics.status = "failed"
        metrics.error = f"{type(exc).__name__}: {exc}"
    return metrics
