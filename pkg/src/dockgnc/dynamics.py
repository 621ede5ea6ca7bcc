"""Nonlinear relative translational and rotational spacecraft dynamics.

Translation uses the Battin-Giorgi form of the two-body difference, written
in the target-centred LVLH frame (axes r_hat, theta_hat, h_hat).  Rotation
uses the relative quaternion ``q_r = q_t (x) q_s^-1`` and the relative
angular velocity ``omega_r = omega_bt - A(q_r) omega_bs`` in target body axes.

All translational vectors handed to :func:`relative_translational_accel` are
LVLH components; inertial quantities only enter through
:class:`TargetAbsoluteState`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from . import attitude as att

MU_EARTH = 3.986004418e14
R_EARTH = 6378.0e3


class DegenerateOrbitError(ValueError):
    """Orbit with zero angular momentum; LVLH frame is undefined."""


class SingularGeometryError(ValueError):
    """Chaser at the attracting centre (rho + r_t = 0)."""


class SingularInclinationError(ValueError):
    """Out-of-plane perturbation applied to an equatorial orbit."""


class InsufficientDataError(ValueError):
    pass


@dataclass
class TargetAbsoluteState:
    r_t: np.ndarray
    v_t: np.ndarray

    def __post_init__(self):
        self.r_t = np.asarray(self.r_t, dtype=float)
        self.v_t = np.asarray(self.v_t, dtype=float)


@dataclass
class RelativeTranslationalState:
    rho: np.ndarray
    rho_dot: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        self.rho_dot = np.asarray(self.rho_dot, dtype=float)


@dataclass
class RotationalState:
    q_s: np.ndarray = field(default_factory=lambda: att.IDENTITY_QUAT.copy())
    omega_bs: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_r: np.ndarray = field(default_factory=lambda: att.IDENTITY_QUAT.copy())
    omega_r: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("q_s", "omega_bs", "q_r", "omega_r"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))


@dataclass
class SpacecraftInertia:
    J_s: np.ndarray = field(default_factory=lambda: np.diag([10.0, 12.0, 8.0]))
    J_t: np.ndarray = field(default_factory=lambda: np.diag([400.0, 300.0, 500.0]))
    m_s: float = 100.0
    m_t: float = 2000.0


@dataclass
class ExternalInputs:
    a_p_t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    a_p_s: np.ndarray = field(default_factory=lambda: np.zeros(3))
    a_t_s: np.ndarray = field(default_factory=lambda: np.zeros(3))
    T_s: np.ndarray = field(default_factory=lambda: np.zeros(3))
    T_t: np.ndarray = field(default_factory=lambda: np.zeros(3))


ZERO_INPUTS = ExternalInputs()


@dataclass
class OrbitGeometry:
    mu: float
    raan: float
    inc: float
    arg_lat: float
    ecc: float
    true_anom: float
    semilatus: float
    ang_mom: float
    mean_motion: float


@dataclass
class FullState:
    target: TargetAbsoluteState
    rel: RelativeTranslationalState
    rot: RotationalState = field(default_factory=RotationalState)

    def as_row(self, t: float) -> list[float]:
        return [t, *self.rel.rho, *self.rel.rho_dot, *self.rot.q_s, *self.rot.omega_bs,
                *self.rot.q_r, *self.rot.omega_r, *self.target.r_t, *self.target.v_t]


TRAJECTORY_COLUMNS = (
    ["t"] + [f"rho_{c}" for c in "xyz"] + [f"rho_dot_{c}" for c in "xyz"]
    + [f"q_s_{i}" for i in range(1, 5)] + [f"omega_bs_{c}" for c in "xyz"]
    + [f"q_r_{i}" for i in range(1, 5)] + [f"omega_r_{c}" for c in "xyz"]
    + [f"r_t_{c}" for c in "xyz"] + [f"v_t_{c}" for c in "xyz"]
)


# ---------------------------------------------------------------- frames

def lvlh_basis(state: TargetAbsoluteState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit vectors (r_hat, theta_hat, h_hat) in inertial components."""
    r, v = state.r_t, state.v_t
    h = np.cross(r, v)
    h_norm = np.linalg.norm(h)
    r_norm = np.linalg.norm(r)
    if r_norm == 0.0 or h_norm <= 1e-12 * r_norm * max(np.linalg.norm(v), 1e-300):
        raise DegenerateOrbitError("target orbit has zero angular momentum")
    r_hat = r / r_norm
    h_hat = h / h_norm
    return r_hat, np.cross(h_hat, r_hat), h_hat


def lvlh_to_inertial_matrix(state: TargetAbsoluteState) -> np.ndarray:
    """Columns are the LVLH unit vectors; maps LVLH components to inertial."""
    return np.column_stack(lvlh_basis(state))


def orbit_geometry(state: TargetAbsoluteState, mu: float = MU_EARTH) -> OrbitGeometry:
    """Osculating elements needed by the Gauss variational equations."""
    r, v = state.r_t, state.v_t
    r_norm = np.linalg.norm(r)
    h_vec = np.cross(r, v)
    h = np.linalg.norm(h_vec)
    if h == 0.0:
        raise DegenerateOrbitError("target orbit has zero angular momentum")
    h_hat = h_vec / h
    inc = float(np.arccos(np.clip(h_hat[2], -1.0, 1.0)))
    node = np.cross([0.0, 0.0, 1.0], h_vec)
    node_norm = np.linalg.norm(node)
    if node_norm < 1e-12 * h:
        # equatorial: measure angles from the inertial x axis
        node_hat = np.array([1.0, 0.0, 0.0])
        raan = 0.0
    else:
        node_hat = node / node_norm
        raan = float(np.arctan2(node_hat[1], node_hat[0]))
    r_hat = r / r_norm
    arg_lat = float(np.arctan2(np.cross(node_hat, r_hat) @ h_hat, node_hat @ r_hat))
    e_vec = np.cross(v, h_vec) / mu - r_hat
    ecc = float(np.linalg.norm(e_vec))
    if ecc < 1e-12:
        true_anom = arg_lat
    else:
        e_hat = e_vec / ecc
        true_anom = float(np.arctan2(np.cross(e_hat, r_hat) @ h_hat, e_hat @ r_hat))
    p = h**2 / mu
    a = p / (1.0 - ecc**2)
    return OrbitGeometry(mu=mu, raan=raan, inc=inc, arg_lat=arg_lat, ecc=ecc,
                         true_anom=true_anom, semilatus=p, ang_mom=h,
                         mean_motion=float(np.sqrt(mu / a**3)))


def gve_rates(geom: OrbitGeometry, a_r: float, a_theta: float, a_h: float,
              r: float) -> tuple[float, float, float]:
    """Rates of inclination, RAAN and argument of latitude.

    ``a_r`` and ``a_theta`` are accepted for a complete perturbation triple but
    do not enter these three rates.
    """
    s_th, c_th = np.sin(geom.arg_lat), np.cos(geom.arg_lat)
    s_i, c_i = np.sin(geom.inc), np.cos(geom.inc)
    h = geom.ang_mom
    kepler = np.sqrt(geom.mu / geom.semilatus**3) * (1.0 + geom.ecc * np.cos(geom.true_anom))**2
    if a_h == 0.0:
        return 0.0, 0.0, float(kepler)
    if abs(s_i) < 1e-12:
        raise SingularInclinationError("equatorial orbit with out-of-plane acceleration")
    di = r * c_th / h * a_h
    draan = r * s_th / (h * s_i) * a_h
    dtheta = kepler - r * s_th * c_i / (h * s_i) * a_h
    return float(di), float(draan), float(dtheta)


def lvlh_angular_velocity(geom: OrbitGeometry, rates: Sequence[float]) -> np.ndarray:
    """omega_{L/I} in LVLH components from element rates (di, dRAAN, dtheta)."""
    di, draan, dth = rates
    s_th, c_th = np.sin(geom.arg_lat), np.cos(geom.arg_lat)
    s_i, c_i = np.sin(geom.inc), np.cos(geom.inc)
    return np.array([
        draan * s_i * s_th + di * c_th,
        draan * s_i * c_th - di * s_th,
        draan * c_i + dth,
    ])


def lvlh_omega_from_state(state: TargetAbsoluteState, a_p_t=None, mu: float = MU_EARTH) -> np.ndarray:
    """omega_{L/I} (LVLH components) for a target state and its perturbation."""
    geom = orbit_geometry(state, mu)
    a_h = 0.0
    if a_p_t is not None and np.any(a_p_t):
        C = lvlh_to_inertial_matrix(state)
        a_h = float((C.T @ np.asarray(a_p_t, dtype=float))[2])
    rates = gve_rates(geom, 0.0, 0.0, a_h, float(np.linalg.norm(state.r_t)))
    return lvlh_angular_velocity(geom, rates)


def lvlh_angular_accel(omega_samples, times) -> Callable[[float], np.ndarray]:
    """Cubic-spline fit per component of omega_{L/I}; returns its derivative."""
    times = np.asarray(times, dtype=float)
    omega_samples = np.asarray(omega_samples, dtype=float)
    if times.ndim != 1 or len(times) < 4:
        raise InsufficientDataError("need at least 4 samples for a cubic spline")
    if np.any(np.diff(times) <= 0):
        raise ValueError("sample times must be strictly increasing")
    spline = CubicSpline(times, omega_samples, axis=0)
    deriv = spline.derivative()

    def omega_dot(t: float) -> np.ndarray:
        return np.asarray(deriv(t), dtype=float)

    return omega_dot


# ------------------------------------------------------------ translation

def battin_q(rho, r_t) -> float:
    rho = np.asarray(rho, dtype=float)
    r_t = np.asarray(r_t, dtype=float)
    rt2 = r_t @ r_t
    if rt2 == 0.0:
        raise SingularGeometryError("target at the attracting centre")
    if np.linalg.norm(rho + r_t) == 0.0:
        raise SingularGeometryError("chaser at the attracting centre")
    return float((rho @ rho + 2.0 * rho @ r_t) / rt2)


def battin_factor(q: float) -> float:
    """q (q + 2 + sqrt(1+q)) / ((1+q)^1.5 (sqrt(1+q) + 1)) == 1 - (1+q)^-1.5."""
    s = np.sqrt(1.0 + q)
    return q * (q + 2.0 + s) / ((1.0 + q) ** 1.5 * (s + 1.0))


def relative_translational_accel(rel: RelativeTranslationalState, tgt: TargetAbsoluteState,
                                 omega_li, omega_li_dot, inputs: ExternalInputs = ZERO_INPUTS,
                                 mu: float = MU_EARTH) -> np.ndarray:
    """LVLH-observed relative acceleration; every vector in LVLH components.

    The target position enters as ``[r_t, 0, 0]`` since r_hat is the first
    LVLH axis.  Perturbation and thrust accelerations in ``inputs`` must
    already be LVLH components.
    """
    rho = rel.rho
    rho_dot = rel.rho_dot
    r_t = float(np.linalg.norm(tgt.r_t))
    r_t_vec = np.array([r_t, 0.0, 0.0])
    q = battin_q(rho, r_t_vec)
    r_s = np.linalg.norm(rho + r_t_vec)
    w = np.asarray(omega_li, dtype=float)
    wd = np.asarray(omega_li_dot, dtype=float)
    grav = mu / r_t**3 * battin_factor(q) * r_t_vec - mu / r_s**3 * rho
    return (grav + inputs.a_p_s + inputs.a_t_s - inputs.a_p_t
            - 2.0 * np.cross(w, rho_dot) - np.cross(wd, rho) - np.cross(w, np.cross(w, rho)))


def target_accel(tgt: TargetAbsoluteState, a_p_t=None, mu: float = MU_EARTH) -> np.ndarray:
    r = tgt.r_t
    acc = -mu / np.linalg.norm(r) ** 3 * r
    if a_p_t is not None:
        acc = acc + a_p_t
    return acc


def cw_accel(rho, rho_dot, n: float, u=None) -> np.ndarray:
    """Clohessy-Wiltshire acceleration (x radial, y along-track, z cross-track)."""
    x, _, z = rho
    vx, vy, _ = rho_dot
    acc = np.array([3 * n * n * x + 2 * n * vy, -2 * n * vx, -n * n * z])
    if u is not None:
        acc = acc + u
    return acc


def cw_state_transition(n: float, t: float) -> np.ndarray:
    """Closed-form 6x6 CW state transition matrix for [rho, rho_dot]."""
    s, c = np.sin(n * t), np.cos(n * t)
    return np.array([
        [4 - 3 * c, 0, 0, s / n, 2 * (1 - c) / n, 0],
        [6 * (s - n * t), 1, 0, -2 * (1 - c) / n, (4 * s - 3 * n * t) / n, 0],
        [0, 0, c, 0, 0, s / n],
        [3 * n * s, 0, 0, c, 2 * s, 0],
        [-6 * n * (1 - c), 0, 0, -2 * s, 4 * c - 3, 0],
        [0, 0, -n * s, 0, 0, c],
    ])


# --------------------------------------------------------------- rotation

def euler_eom(omega, J, T) -> np.ndarray:
    """Rigid-body Euler equations: J^-1 [T - w x (J w)]."""
    omega = np.asarray(omega, dtype=float)
    J = np.asarray(J, dtype=float)
    try:
        return np.linalg.solve(J, np.asarray(T, dtype=float) - np.cross(omega, J @ omega))
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular inertia matrix") from exc


def quat_rate(q, omega) -> np.ndarray:
    return att.quat_rate(q, omega)


def relative_rotational_accel(rot: RotationalState, inertia: SpacecraftInertia,
                              inputs: ExternalInputs = ZERO_INPUTS) -> np.ndarray:
    """Relative angular acceleration in target body axes."""
    A = att.quat_to_dcm(rot.q_r)
    A_wbs = A @ rot.omega_bs
    w_bt = rot.omega_r + A_wbs
    try:
        target_term = np.linalg.solve(inertia.J_t, inputs.T_t - np.cross(w_bt, inertia.J_t @ w_bt))
        chaser_term = np.linalg.solve(
            inertia.J_s, inputs.T_s - np.cross(rot.omega_bs, inertia.J_s @ rot.omega_bs))
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular inertia matrix") from exc
    return target_term - A @ chaser_term + np.cross(w_bt, A_wbs)


# ------------------------------------------------------------- propagator

def rk4_step(f: Callable[[float, np.ndarray], np.ndarray], t: float, y: np.ndarray,
             dt: float) -> np.ndarray:
    k1 = f(t, y)
    k2 = f(t + dt / 2, y + dt / 2 * k1)
    k3 = f(t + dt / 2, y + dt / 2 * k2)
    k4 = f(t + dt, y + dt * k3)
    return y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_integrate(f, y0, dt: float, n_steps: int, t0: float = 0.0) -> np.ndarray:
    ys = np.empty((n_steps + 1, len(y0)))
    ys[0] = y0
    t = t0
    for k in range(n_steps):
        ys[k + 1] = rk4_step(f, t, ys[k], dt)
        t += dt
    return ys


def two_body_deriv(mu: float = MU_EARTH, accel=None):
    def f(t, y):
        r = y[:3]
        a = -mu / np.linalg.norm(r) ** 3 * r
        if accel is not None:
            a = a + accel(t)
        return np.concatenate([y[3:], a])
    return f


InputSchedule = Callable[[float, "FullState"], ExternalInputs]


def _pack(state: FullState) -> np.ndarray:
    return np.concatenate([state.rel.rho, state.rel.rho_dot, state.target.r_t, state.target.v_t,
                           state.rot.q_s, state.rot.omega_bs, state.rot.q_r, state.rot.omega_r])


def _unpack(y: np.ndarray) -> FullState:
    return FullState(
        target=TargetAbsoluteState(y[6:9].copy(), y[9:12].copy()),
        rel=RelativeTranslationalState(y[0:3].copy(), y[3:6].copy()),
        rot=RotationalState(y[12:16].copy(), y[16:19].copy(), y[19:23].copy(), y[23:26].copy()),
    )


@dataclass
class Trajectory:
    times: np.ndarray
    states: list[FullState]

    def rho(self) -> np.ndarray:
        return np.array([s.rel.rho for s in self.states])

    def rho_dot(self) -> np.ndarray:
        return np.array([s.rel.rho_dot for s in self.states])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_COLUMNS)
            for t, s in zip(self.times, self.states):
                w.writerow([repr(float(x)) for x in s.as_row(float(t))])


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _mat_vec(M, v):
    return (M[0][0] * v[0] + M[0][1] * v[1] + M[0][2] * v[2],
            M[1][0] * v[0] + M[1][1] * v[1] + M[1][2] * v[2],
            M[2][0] * v[0] + M[2][1] * v[1] + M[2][2] * v[2])


def _quat_rate(q, w):
    wx, wy, wz = w
    q1, q2, q3, q4 = q
    return (0.5 * (wz * q2 - wy * q3 + wx * q4),
            0.5 * (-wz * q1 + wx * q3 + wy * q4),
            0.5 * (wy * q1 - wx * q2 + wz * q4),
            0.5 * (-wx * q1 - wy * q2 - wz * q3))


class _StepInputs:
    """Per-step constant inputs flattened to float tuples."""

    __slots__ = ("a_p_t", "a_chaser", "T_s", "T_t", "has_apt")

    def __init__(self, inputs: ExternalInputs):
        self.a_p_t = tuple(float(x) for x in inputs.a_p_t)
        self.a_chaser = tuple(float(a + b) for a, b in zip(inputs.a_p_s, inputs.a_t_s))
        self.T_s = tuple(float(x) for x in inputs.T_s)
        self.T_t = tuple(float(x) for x in inputs.T_t)
        self.has_apt = any(self.a_p_t)


def _full_derivative(y, wd, inp: _StepInputs, mu, J_s, J_s_inv, J_t, J_t_inv) -> np.ndarray:
    """Time derivative of the packed 26-state with float arithmetic.

    Layout: rho(3) rho_dot(3) r_t(3) v_t(3) q_s(4) omega_bs(3) q_r(4) omega_r(3).
    """
    yl = y.tolist()
    rho = yl[0:3]
    rho_dot = yl[3:6]
    r_vec = yl[6:9]
    v_vec = yl[9:12]
    r2 = r_vec[0] ** 2 + r_vec[1] ** 2 + r_vec[2] ** 2
    r = r2 ** 0.5
    h_vec = _cross(r_vec, v_vec)
    h = (h_vec[0] ** 2 + h_vec[1] ** 2 + h_vec[2] ** 2) ** 0.5

    a_lvlh = inp.a_chaser
    a_h = 0.0
    if inp.has_apt:
        r_hat = (r_vec[0] / r, r_vec[1] / r, r_vec[2] / r)
        h_hat = (h_vec[0] / h, h_vec[1] / h, h_vec[2] / h)
        t_hat = _cross(h_hat, r_hat)
        apt = inp.a_p_t
        a_h = sum(x * y_ for x, y_ in zip(apt, h_hat))
        apt_lvlh = (sum(x * y_ for x, y_ in zip(apt, r_hat)),
                    sum(x * y_ for x, y_ in zip(apt, t_hat)), a_h)
        a_lvlh = tuple(a - b for a, b in zip(a_lvlh, apt_lvlh))
    # GVE rates of (i, RAAN, arg. of latitude) projected on LVLH axes reduce to
    # [r a_h / h, 0, h / r^2]; see gve_rates / lvlh_angular_velocity.
    w = (r * a_h / h, 0.0, h / r2)

    q = (rho[0] ** 2 + rho[1] ** 2 + rho[2] ** 2 + 2.0 * rho[0] * r) / r2
    sq = (1.0 + q) ** 0.5
    factor = q * (q + 2.0 + sq) / ((1.0 + q) ** 1.5 * (sq + 1.0))
    rs3 = ((rho[0] + r) ** 2 + rho[1] ** 2 + rho[2] ** 2) ** 1.5
    g_t = mu / r2 * factor
    g_s = mu / rs3
    cor = _cross(w, rho_dot)
    eul = _cross(wd, rho)
    cen = _cross(w, _cross(w, rho))
    rho_dd = (
        g_t - g_s * rho[0] + a_lvlh[0] - 2.0 * cor[0] - eul[0] - cen[0],
        -g_s * rho[1] + a_lvlh[1] - 2.0 * cor[1] - eul[1] - cen[1],
        -g_s * rho[2] + a_lvlh[2] - 2.0 * cor[2] - eul[2] - cen[2],
    )
    k = -mu / (r2 * r)
    apt = inp.a_p_t
    rt_dd = (k * r_vec[0] + apt[0], k * r_vec[1] + apt[1], k * r_vec[2] + apt[2])

    q_s = yl[12:16]
    w_bs = yl[16:19]
    q_r = yl[19:23]
    w_r = yl[23:26]
    A = _dcm_rows(q_r)
    A_wbs = _mat_vec(A, w_bs)
    w_bt = (w_r[0] + A_wbs[0], w_r[1] + A_wbs[1], w_r[2] + A_wbs[2])
    Jw_bs = _mat_vec(J_s, w_bs)
    c_s = _cross(w_bs, Jw_bs)
    w_bs_dot = _mat_vec(J_s_inv, (inp.T_s[0] - c_s[0], inp.T_s[1] - c_s[1], inp.T_s[2] - c_s[2]))
    Jw_bt = _mat_vec(J_t, w_bt)
    c_t = _cross(w_bt, Jw_bt)
    tgt_term = _mat_vec(J_t_inv, (inp.T_t[0] - c_t[0], inp.T_t[1] - c_t[1], inp.T_t[2] - c_t[2]))
    A_wdot = _mat_vec(A, w_bs_dot)
    transport = _cross(w_bt, A_wbs)
    w_r_dot = (tgt_term[0] - A_wdot[0] + transport[0],
               tgt_term[1] - A_wdot[1] + transport[1],
               tgt_term[2] - A_wdot[2] + transport[2])

    return np.array([*rho_dot, *rho_dd, *v_vec, *rt_dd, *_quat_rate(q_s, w_bs), *w_bs_dot,
                     *_quat_rate(q_r, w_r), *w_r_dot])


def _dcm_rows(q):
    q1, q2, q3, q4 = q
    d = q4 * q4 - q1 * q1 - q2 * q2 - q3 * q3
    return (
        (d + 2 * q1 * q1, 2 * (q1 * q2 + q4 * q3), 2 * (q1 * q3 - q4 * q2)),
        (2 * (q1 * q2 - q4 * q3), d + 2 * q2 * q2, 2 * (q2 * q3 + q4 * q1)),
        (2 * (q1 * q3 + q4 * q2), 2 * (q2 * q3 - q4 * q1), d + 2 * q3 * q3),
    )


@dataclass
class Propagator:
    """Fixed-step RK4 over the full 26-element state.

    The LVLH angular acceleration comes from a cubic spline fitted to
    omega_{L/I} sampled along a pre-propagated target orbit on the same grid.
    Inputs are held constant over each step (zero-order hold): ``schedule`` is
    queried once per step with the state at the start of the step.
    ``impulses`` maps a step index to an LVLH velocity increment applied
    before that step.
    """

    mu: float = MU_EARTH
    inertia: SpacecraftInertia = field(default_factory=SpacecraftInertia)

    def omega_dot_grid(self, target: TargetAbsoluteState, dt: float, n_steps: int,
                       a_p_t_steps=None) -> np.ndarray:
        """omega_dot_{L/I} at t_k and t_k + dt/2 for every step, shape (2n+1, 3)."""
        n_grid = max(n_steps + 1, 4)
        y = np.concatenate([target.r_t, target.v_t])
        omegas = np.empty((n_grid, 3))
        for k in range(n_grid):
            apt = None
            if a_p_t_steps is not None:
                apt = a_p_t_steps[min(k, len(a_p_t_steps) - 1)]
                if not np.any(apt):
                    apt = None
            omegas[k] = lvlh_omega_from_state(TargetAbsoluteState(y[:3], y[3:]), apt, self.mu)
            if k < n_grid - 1:
                y = rk4_step(two_body_deriv(self.mu, None if apt is None else (lambda t, a=apt: a)),
                             0.0, y, dt)
        times = dt * np.arange(n_grid)
        wd = lvlh_angular_accel(omegas, times)
        return wd(dt / 2 * np.arange(2 * n_steps + 1))

    def stepper(self, state: FullState, dt: float, n_steps: int,
                apt_steps=None, t0: float = 0.0) -> "Stepper":
        """Incremental propagation over a fixed horizon of ``n_steps``."""
        return Stepper(self, state, dt, n_steps, apt_steps, t0)

    def propagate(self, state: FullState, dt: float, n_steps: int,
                  schedule: InputSchedule | None = None, t0: float = 0.0,
                  impulses: dict[int, np.ndarray] | None = None) -> Trajectory:
        """Propagate ``n_steps`` of size ``dt``.

        ``schedule(t, state)`` returns :class:`ExternalInputs`.  ``a_p_t`` is
        given in inertial components; chaser accelerations ``a_p_s`` and
        ``a_t_s`` in LVLH components; torques in the respective body frames.
        The schedule is also called as ``schedule(t, None)`` on the step grid
        to pre-sample the target perturbation for the LVLH spline, so
        ``a_p_t`` may depend on time only.
        """
        apt_steps = None
        if schedule is not None:
            apt_steps = [np.asarray(schedule(t0 + k * dt, None).a_p_t, float)
                         for k in range(n_steps + 1)]
        st = self.stepper(state, dt, n_steps, apt_steps, t0)
        states = [st.state]
        for k in range(n_steps):
            inputs = schedule(st.t, states[-1]) if schedule is not None else ZERO_INPUTS
            dv = impulses.get(k) if impulses else None
            states.append(st.step(inputs, dv))
        return Trajectory(t0 + dt * np.arange(n_steps + 1), states)


class Stepper:
    """One-step-at-a-time RK4 propagation with a precomputed omega-dot grid."""

    def __init__(self, prop: Propagator, state: FullState, dt: float, n_steps: int,
                 apt_steps=None, t0: float = 0.0):
        if dt <= 0:
            raise ValueError("dt must be positive")
        inertia = prop.inertia
        try:
            J_s_inv = tuple(map(tuple, np.linalg.inv(inertia.J_s)))
            J_t_inv = tuple(map(tuple, np.linalg.inv(inertia.J_t)))
        except np.linalg.LinAlgError as exc:
            raise ValueError("singular inertia matrix") from exc
        J_s = tuple(map(tuple, np.asarray(inertia.J_s, float)))
        J_t = tuple(map(tuple, np.asarray(inertia.J_t, float)))
        self._consts = (prop.mu, J_s, J_s_inv, J_t, J_t_inv)
        self._y = _pack(state)
        wd_grid = prop.omega_dot_grid(state.target, dt, n_steps, apt_steps)
        self._wd = [tuple(row) for row in wd_grid.tolist()]
        self.dt = dt
        self.n_steps = n_steps
        self.k = 0
        self.t0 = t0

    @property
    def t(self) -> float:
        return self.t0 + self.k * self.dt

    @property
    def state(self) -> FullState:
        return _unpack(self._y)

    def step(self, inputs: ExternalInputs = ZERO_INPUTS, dv=None) -> FullState:
        """Apply an optional LVLH velocity increment, then advance one step."""
        if self.k >= self.n_steps:
            raise RuntimeError("stepper horizon exhausted")
        y = self._y.copy()
        if dv is not None:
            y[3:6] += dv
        dt, k = self.dt, self.k
        args = (_StepInputs(inputs),) + self._consts
        wd = self._wd
        k1 = _full_derivative(y, wd[2 * k], *args)
        k2 = _full_derivative(y + dt / 2 * k1, wd[2 * k + 1], *args)
        k3 = _full_derivative(y + dt / 2 * k2, wd[2 * k + 1], *args)
        k4 = _full_derivative(y + dt * k3, wd[2 * k + 2], *args)
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        y[12:16] /= np.linalg.norm(y[12:16])
        y[19:23] /= np.linalg.norm(y[19:23])
        self._y = y
        self.k += 1
        return _unpack(y)


def propagate(state: FullState, dt: float, n_steps: int, schedule: InputSchedule | None = None,
              mu: float = MU_EARTH, inertia: SpacecraftInertia | None = None,
              impulses=None) -> Trajectory:
    prop = Propagator(mu=mu, inertia=inertia or SpacecraftInertia())
    return prop.propagate(state, dt, n_steps, schedule, impulses=impulses)


# ------------------------------------------------------------ scenarios

def circular_orbit_state(altitude: float = 500e3, inc: float = np.radians(51.6),
                         raan: float = 0.0, arg_lat: float = 0.0,
                         mu: float = MU_EARTH) -> TargetAbsoluteState:
    """Inertial state on a circular orbit of given altitude above R_EARTH."""
    r = R_EARTH + altitude
    v = np.sqrt(mu / r)
    # perifocal-like frame: node line, then in-plane normal
    node = np.array([np.cos(raan), np.sin(raan), 0.0])
    h_hat = np.array([np.sin(inc) * np.sin(raan), -np.sin(inc) * np.cos(raan), np.cos(inc)])
    in_plane = np.cross(h_hat, node)
    r_hat = np.cos(arg_lat) * node + np.sin(arg_lat) * in_plane
    t_hat = np.cross(h_hat, r_hat)
    return TargetAbsoluteState(r * r_hat, v * t_hat)


def mean_motion(altitude: float = 500e3, mu: float = MU_EARTH) -> float:
    return float(np.sqrt(mu / (R_EARTH + altitude) ** 3))


def chaser_inertial(target: TargetAbsoluteState, rel: RelativeTranslationalState,
                    mu: float = MU_EARTH) -> tuple[np.ndarray, np.ndarray]:
    """Inertial chaser position/velocity from an LVLH relative state."""
    C = lvlh_to_inertial_matrix(target)
    w = lvlh_omega_from_state(target, None, mu)
    r_c = target.r_t + C @ rel.rho
    v_c = target.v_t + C @ (rel.rho_dot + np.cross(w, rel.rho))
    return r_c, v_c


def relative_from_inertial(target: TargetAbsoluteState, r_c, v_c,
                           mu: float = MU_EARTH) -> RelativeTranslationalState:
    C = lvlh_to_inertial_matrix(target)
    w = lvlh_omega_from_state(target, None, mu)
    rho = C.T @ (np.asarray(r_c) - target.r_t)
    rho_dot = C.T @ (np.asarray(v_c) - target.v_t) - np.cross(w, rho)
    return RelativeTranslationalState(rho, rho_dot)
