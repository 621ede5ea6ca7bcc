"""Operational constraints, CW barrier functions and the QP safety filter.

Constraint values follow the ``>= 0 means satisfied`` convention.  Barrier
time derivatives are taken along the Clohessy-Wiltshire model, which makes
each condition ``h_dot + alpha * h >= 0`` affine in the commanded thrust
acceleration of the controlled agent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import cw_accel
from .qp import QPInfeasibleError, solve_qp

BARRIERS = ("h1", "h2", "h3", "h4", "h5")
# radicands below this are treated as zero when differentiating sqrt terms
_RADICAND_FLOOR = 1e-3


class InfeasibleSafetyConfigError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


class BarrierViolationError(ValueError):
    def __init__(self, barrier: str, agent, radicand: float):
        super().__init__(f"{barrier} already violated for agent {agent} (radicand {radicand:.3g})")
        self.barrier = barrier
        self.agent = agent
        self.radicand = radicand


@dataclass
class SafetyParams:
    r_agent_i: float = 0.5
    r_agent_j: float = 0.5
    r_target: float = 1.0
    r_m: float = 100.0
    nu_0: float = 0.2
    nu_1: float = 0.02
    theta_s: float = np.radians(60.0)
    e_sun_hat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    F_max: float = 5.0
    T_max: float = 1.0
    mass: float = 100.0
    n: float = 1.1e-3
    v_m: float = 2.2
    alpha_cbf: float | tuple = 1.0
    # tightening used inside the filter so sampled-data control keeps the
    # nominal barriers non-negative between control updates
    margin_pos: float = 0.01
    margin_vel: float = 1e-3

    def __post_init__(self):
        self.e_sun_hat = np.asarray(self.e_sun_hat, dtype=float)
        if min(self.r_agent_i, self.r_agent_j, self.r_target) <= 0:
            raise ValueError("collision radii must be positive")
        if self.r_m <= self.r_agent_i + self.r_target:
            raise ValueError("r_m must exceed r_agent + r_target")
        if not 0 < self.theta_s < np.pi:
            raise ValueError("theta_s must lie in (0, pi)")
        if abs(np.linalg.norm(self.e_sun_hat) - 1.0) > 1e-9:
            raise ValueError("e_sun_hat must be a unit vector")
        if self.F_max <= 0 or self.T_max <= 0 or self.mass <= 0:
            raise ValueError("F_max, T_max and mass must be positive")
        alpha = np.broadcast_to(np.asarray(self.alpha_cbf, dtype=float), (5,))
        if np.any(alpha <= 0):
            raise ValueError("alpha_cbf must be positive")
        if self.margin_pos < 0 or not 0 <= self.margin_vel < self.nu_0:
            raise ValueError("margins must be non-negative and margin_vel < nu_0")

    @property
    def alphas(self) -> tuple:
        return tuple(float(a) for a in np.broadcast_to(np.asarray(self.alpha_cbf, dtype=float), (5,)))

    @property
    def accel_limit(self) -> float:
        return self.F_max / self.mass

    def tightened(self) -> "SafetyParams":
        """Geometry the filter actually protects."""
        m = self.margin_pos
        return replace(self, r_agent_i=self.r_agent_i + m, r_agent_j=self.r_agent_j + m,
                       r_target=self.r_target + m, r_m=self.r_m - m,
                       nu_0=self.nu_0 - self.margin_vel, margin_pos=0.0, margin_vel=0.0)


@dataclass
class AgentKinematics:
    rho: np.ndarray
    rho_dot: np.ndarray
    rho_pr: np.ndarray | None = None
    rho_pr_dot: np.ndarray | None = None

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        self.rho_dot = np.asarray(self.rho_dot, dtype=float)
        if self.rho_pr is not None:
            self.rho_pr = np.asarray(self.rho_pr, dtype=float)
            self.rho_pr_dot = (np.zeros(3) if self.rho_pr_dot is None
                               else np.asarray(self.rho_pr_dot, dtype=float))
        for v in (self.rho, self.rho_dot):
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ValueError("agent kinematics must be finite 3-vectors")


@dataclass
class ControlCommand:
    u_force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    u_torque: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.u_force = np.asarray(self.u_force, dtype=float)
        self.u_torque = np.asarray(self.u_torque, dtype=float)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.u_force, self.u_torque])

    @classmethod
    def from_vector(cls, u) -> "ControlCommand":
        u = np.asarray(u, dtype=float)
        return cls(u[:3].copy(), u[3:].copy())

    def clamp(self, params: SafetyParams) -> "ControlCommand":
        a = params.accel_limit
        return ControlCommand(np.clip(self.u_force, -a, a),
                              np.clip(self.u_torque, -params.T_max, params.T_max))


@dataclass
class FilterResult:
    command: ControlCommand
    infeasible: bool = False
    active_set: list = field(default_factory=list)


def _norm(v) -> float:
    return float(np.sqrt(v @ v))


def eval_constraints(agents: list[AgentKinematics], params: SafetyParams) -> dict:
    """Return phi1 (pairwise, i<j order) and phi2..phi5 (per agent)."""
    if not agents:
        raise ValueError("at least one agent is required")
    phi1 = [_norm(a.rho - b.rho) - (params.r_agent_i + params.r_agent_j)
            for i, a in enumerate(agents) for b in agents[i + 1:]]
    out = {"phi1": np.array(phi1), "phi2": [], "phi3": [], "phi4": [], "phi5": []}
    for a in agents:
        r = _norm(a.rho)
        if r == 0.0:
            raise DegenerateGeometryError("rho = 0 leaves the sun angle undefined")
        out["phi2"].append(r - (params.r_agent_i + params.r_target))
        out["phi3"].append(params.r_m - r)
        out["phi4"].append(params.nu_1 * r + params.nu_0 - _norm(a.rho_dot))
        out["phi5"].append(-(a.rho @ params.e_sun_hat) / r + np.cos(params.theta_s / 2))
    for k in ("phi2", "phi3", "phi4", "phi5"):
        out[k] = np.array(out[k])
    return out


def worst_case_accel(params: SafetyParams) -> float:
    n = params.n
    a_m = params.F_max / params.mass - 3 * n * n * params.r_m - 2 * n * params.v_m
    if a_m <= 0:
        raise InfeasibleSafetyConfigError(f"worst-case acceleration a_m = {a_m:.3g} <= 0")
    return a_m


def _sqrt_term(coef: float, radicand: float, name: str, agent) -> float:
    if radicand < 0:
        raise BarrierViolationError(name, agent, radicand)
    return float(np.sqrt(coef * radicand))


def eval_cbfs(agents: list[AgentKinematics], params: SafetyParams, a_m: float | None = None) -> dict:
    """Barrier values; h1 pairwise (i<j), h2..h5 per agent.

    h5 is NaN for agents without a projection point.  ``a_m`` defaults to
    :func:`worst_case_accel` of ``params``.
    """
    a_m = worst_case_accel(params) if a_m is None else a_m
    phi = eval_constraints(agents, params)
    h1 = []
    k = 0
    for i, a in enumerate(agents):
        for j in range(i + 1, len(agents)):
            b = agents[j]
            d = a.rho - b.rho
            dn = _norm(d)
            # both agents share params, so a_m,i + a_m,j = 2 a_m
            h1.append(_sqrt_term(2 * (a_m + a_m), phi["phi1"][k], "h1", (i, j))
                      + d @ (a.rho_dot - b.rho_dot) / dn)
            k += 1
    h2, h3, h5 = [], [], []
    for i, a in enumerate(agents):
        r = _norm(a.rho)
        rdot = a.rho @ a.rho_dot / r
        h2.append(_sqrt_term(a_m, phi["phi2"][i], "h2", i) + rdot)
        h3.append(_sqrt_term(a_m, phi["phi3"][i], "h3", i) - rdot)
        if a.rho_pr is None:
            h5.append(np.nan)
        else:
            h5.append(np.sqrt(a_m * _norm(a.rho - a.rho_pr))
                      + a.rho @ (a.rho_dot - a.rho_pr_dot) / r)
    return {"h1": np.array(h1), "h2": np.array(h2), "h3": np.array(h3),
            "h4": phi["phi4"].copy(), "h5": np.array(h5)}


def sun_cone_projection(rho, rho_dot, e_sun_hat, theta_s: float, fd_step: float = 1e-6):
    """Closest point to ``rho`` on the sun-exclusion cone surface and its rate.

    The cone has its axis along ``e_sun_hat`` and half-angle ``theta_s / 2``.
    The rate is the directional derivative of the projection along ``rho_dot``
    (central difference).
    """
    e = np.asarray(e_sun_hat, dtype=float)

    def project(p):
        along = p @ e
        perp = p - along * e
        pn = _norm(perp)
        if pn < 1e-12:
            # on the axis: any generator is closest, pick a fixed one
            trial = np.array([1.0, 0.0, 0.0]) if abs(e[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            perp_hat = trial - (trial @ e) * e
            perp_hat /= _norm(perp_hat)
        else:
            perp_hat = perp / pn
        gen = np.cos(theta_s / 2) * e + np.sin(theta_s / 2) * perp_hat
        return max(p @ gen, 0.0) * gen

    rho = np.asarray(rho, dtype=float)
    rho_dot = np.asarray(rho_dot, dtype=float)
    h = fd_step * max(1.0, _norm(rho))
    vn = _norm(rho_dot)
    if vn == 0.0:
        return project(rho), np.zeros(3)
    step = h / vn
    rate = (project(rho + step * rho_dot) - project(rho - step * rho_dot)) / (2 * step)
    return project(rho), rate


def _radial_terms(rho, rho_dot, f):
    r = _norm(rho)
    rdot = rho @ rho_dot / r
    # d/dt(rho . rho_dot / r) with the input contribution split off
    drift = (rho_dot @ rho_dot - rdot * rdot + rho @ f) / r
    return r, rdot, drift, rho / r


def _braking(coef: float, rad: float, rate: float) -> tuple[float, float]:
    """sqrt(coef * rad) and its time derivative given d(rad)/dt = rate.

    Radicands inside the tightening margin are clamped at zero and the
    derivative uses a small floor, so states just past the tightened surface
    still yield a usable (strongly braking) constraint.
    """
    s = float(np.sqrt(coef * max(rad, 0.0)))
    sdot = coef * rate / (2.0 * np.sqrt(coef * max(rad, _RADICAND_FLOOR)))
    return s, sdot


def barrier_rows(agents: list[AgentKinematics], params: SafetyParams, controlled: int = 0,
                 others_accel=None) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Affine CBF conditions ``G u_force >= w`` for the controlled agent.

    Barriers are evaluated on the margin-tightened geometry with the nominal
    worst-case acceleration.
    """
    a_m = worst_case_accel(params)
    m = params.margin_pos
    r_keep_out = params.r_agent_i + params.r_target + 2 * m
    r_valid = params.r_m - m
    nu_0 = params.nu_0 - params.margin_vel
    r_pair = params.r_agent_i + params.r_agent_j + 2 * m
    alpha = params.alphas
    n = params.n
    me = agents[controlled]
    f = cw_accel(me.rho, me.rho_dot, n)
    rows, rhs, names = [], [], []

    r, rdot, drift, grad = _radial_terms(me.rho, me.rho_dot, f)
    if r == 0.0:
        raise DegenerateGeometryError("rho = 0")

    # h2: approach braking towards the target sphere
    s, sdot = _braking(a_m, r - r_keep_out, rdot)
    rows.append(grad)
    rhs.append(-alpha[1] * (s + rdot) - sdot - drift)
    names.append(f"h2[{controlled}]")

    # h3: outward braking before the model-validity radius
    s, sdot = _braking(a_m, r_valid - r, -rdot)
    rows.append(-grad)
    rhs.append(-alpha[2] * (s - rdot) - sdot + drift)
    names.append(f"h3[{controlled}]")

    # h4: speed envelope, undefined gradient at zero speed where h4 > 0 anyway
    vn = _norm(me.rho_dot)
    if vn > 1e-12:
        vhat = me.rho_dot / vn
        h4 = params.nu_1 * r + nu_0 - vn
        rows.append(-vhat)
        rhs.append(-alpha[3] * h4 - params.nu_1 * rdot + vhat @ f)
        names.append(f"h4[{controlled}]")

    # h5: relative to a caller-supplied projection point with constant velocity
    if me.rho_pr is not None:
        dp = me.rho - me.rho_pr
        dv = me.rho_dot - me.rho_pr_dot
        dn = _norm(dp)
        s, sdot = _braking(a_m, dn, dp @ dv / max(dn, _RADICAND_FLOOR))
        h5 = s + me.rho @ dv / r
        drift5 = (me.rho_dot @ dv + me.rho @ f) / r - (me.rho @ dv) * rdot / (r * r)
        rows.append(grad)
        rhs.append(-alpha[4] * h5 - sdot - drift5)
        names.append(f"h5[{controlled}]")

    # h1: pairwise separation from every other agent
    a_m_pair = 2 * (a_m + a_m)
    for other, o in enumerate(agents):
        if other == controlled:
            continue
        a_o = np.zeros(3) if others_accel is None else np.asarray(others_accel[other], float)
        d = me.rho - o.rho
        dd = me.rho_dot - o.rho_dot
        dn = _norm(d)
        ddn = d @ dd / dn
        rel_f = f - cw_accel(o.rho, o.rho_dot, n) - a_o
        s, sdot = _braking(a_m_pair, dn - r_pair, ddn)
        drift1 = (dd @ dd - ddn * ddn + d @ rel_f) / dn
        rows.append(d / dn)
        rhs.append(-alpha[0] * (s + ddn) - sdot - drift1)
        i, j = sorted((controlled, other))
        names.append(f"h1[{i},{j}]")
    return np.array(rows), np.array(rhs), names


def filter_control(u_ref: ControlCommand, agents: list[AgentKinematics], params: SafetyParams,
                   Q=None, controlled: int = 0, others_accel=None,
                   on_infeasible: str = "raise") -> FilterResult:
    """Minimal-intervention projection of ``u_ref`` onto the safe input set.

    ``on_infeasible="saturate"`` returns the box-clamped reference with the
    ``infeasible`` flag set instead of raising.
    """
    Q = np.eye(6) if Q is None else np.asarray(Q, dtype=float)
    G, w, names = barrier_rows(agents, params, controlled, others_accel)
    A = np.hstack([G, np.zeros((len(G), 3))])
    a = params.accel_limit
    lim = np.array([a, a, a, params.T_max, params.T_max, params.T_max])
    u0 = u_ref.as_vector()
    if np.all(np.abs(u0) <= lim) and (not len(G) or np.all(G @ u0[:3] >= w)):
        # a feasible reference is its own projection
        slack = G @ u0[:3] - w
        active = [names[i] for i in np.where(slack <= 1e-9 * (1 + np.abs(w)))[0]]
        return FilterResult(ControlCommand.from_vector(u0), False, active)
    try:
        u = solve_qp(2 * Q, -2 * Q @ u0, A, w, -lim, lim)
    except QPInfeasibleError as exc:
        active = [names[i] if i < len(names) else f"box{i - len(names)}" for i in exc.active_set]
        if on_infeasible == "saturate":
            return FilterResult(u_ref.clamp(params), True, active)
        raise QPInfeasibleError(str(exc), active, exc.violated) from exc
    slack = A @ u - w
    active = [names[i] for i in np.where(slack <= 1e-9 * (1 + np.abs(w)))[0]]
    return FilterResult(ControlCommand.from_vector(u), False, active)


def cbf_conditions(u: ControlCommand, agents, params, controlled: int = 0, others_accel=None):
    """Slack of each affine condition at ``u`` (all >= 0 when safe)."""
    G, w, names = barrier_rows(agents, params, controlled, others_accel)
    return dict(zip(names, G @ u.u_force - w))
