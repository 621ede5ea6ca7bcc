"""Arm kinematics (D-H chain, geometric Jacobian, damped resolved rates) and
the orbit/laboratory scaling layer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SingularJacobianError(ValueError):
    pass


@dataclass(frozen=True)
class DhRow:
    theta_offset: float  # rad
    d: float  # mm
    a: float  # mm
    alpha: float  # rad


@dataclass(frozen=True)
class DhTable:
    rows: tuple
    # fixed flange-to-tool transform (mounted camera); identity by default
    tool: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if len(self.rows) != 6:
            raise ValueError(f"expected 6 D-H rows, got {len(self.rows)}")
        tool = np.asarray(self.tool, dtype=float)
        if tool.shape != (4, 4) or not np.allclose(tool[3], [0, 0, 0, 1]):
            raise ValueError("tool must be a 4x4 homogeneous transform")
        for r in self.rows:
            if not np.all(np.isfinite([r.theta_offset, r.d, r.a, r.alpha])):
                raise ValueError("D-H entries must be finite")

    @classmethod
    def from_dict(cls, data: dict) -> "DhTable":
        """Rows as {theta_offset, d, a, alpha_deg}; optional tool_offset_mm 3-vector."""
        rows = tuple(DhRow(float(r.get("theta_offset", 0.0)), float(r["d"]), float(r["a"]),
                           np.deg2rad(float(r["alpha_deg"]))) for r in data["rows"])
        tool = np.eye(4)
        tool[:3, 3] = np.asarray(data.get("tool_offset_mm", [0.0, 0.0, 0.0]), dtype=float)
        return cls(rows, tool)


def _cr20a() -> DhTable:
    d = [230.0, 0.0, 0.0, 175.6, 128.8, 136.5]
    a = [0.0, 825.2, 746.0, 0.0, 0.0, 0.0]
    alpha = [90.0, 0.0, 0.0, -90.0, 90.0, 0.0]
    return DhTable(tuple(DhRow(0.0, d[i], a[i], np.deg2rad(alpha[i])) for i in range(6)))


CR20A = _cr20a()

# an elbow-bent configuration well away from the straight-arm singularity
HOME_Q = np.array([0.0, np.pi / 4, -np.pi / 2, 0.0, np.pi / 2, 0.0])


@dataclass
class JointState:
    q: np.ndarray
    q_dot: np.ndarray = field(default_factory=lambda: np.zeros(6))
    limits: np.ndarray | None = None  # (6, 2) lower/upper, rad

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).copy()
        self.q_dot = np.asarray(self.q_dot, dtype=float).copy()
        if self.q.shape != (6,) or self.q_dot.shape != (6,):
            raise ValueError("joint vectors must have 6 entries")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.q_dot))):
            raise ValueError("joint state must be finite")
        if self.limits is not None:
            self.limits = np.asarray(self.limits, dtype=float)
            if np.any(self.q < self.limits[:, 0]) or np.any(self.q > self.limits[:, 1]):
                raise ValueError("joint angle outside configured limits")


@dataclass(frozen=True)
class EndEffectorPose:
    rotation: np.ndarray
    position: np.ndarray  # mm, base frame

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T


def link_transform(row: DhRow, theta: float) -> np.ndarray:
    th = row.theta_offset + theta
    ct, st = np.cos(th), np.sin(th)
    ca, sa = np.cos(row.alpha), np.sin(row.alpha)
    return np.array([
        [ct, -st * ca, st * sa, row.a * ct],
        [st, ct * ca, -ct * sa, row.a * st],
        [0.0, sa, ca, row.d],
        [0.0, 0.0, 0.0, 1.0],
    ])


def link_frames(table: DhTable, q) -> list[np.ndarray]:
    """Cumulative transforms 0T0 .. 0T6 (the last one includes the tool)."""
    q = np.asarray(q, dtype=float)
    if q.shape != (6,):
        raise ValueError("q must have 6 entries")
    frames = [np.eye(4)]
    for row, th in zip(table.rows, q):
        frames.append(frames[-1] @ link_transform(row, th))
    frames[-1] = frames[-1] @ np.asarray(table.tool, dtype=float)
    return frames


def forward_kinematics(table: DhTable, q) -> EndEffectorPose:
    T = link_frames(table, q)[-1]
    return EndEffectorPose(T[:3, :3].copy(), T[:3, 3].copy())


def jacobian(table: DhTable, q) -> np.ndarray:
    """Geometric Jacobian: rows 0-2 linear velocity (mm/s), rows 3-5 angular (rad/s)."""
    frames = link_frames(table, q)
    p_e = frames[-1][:3, 3]
    J = np.zeros((6, 6))
    for i in range(6):
        z = frames[i][:3, 2]
        J[:3, i] = np.cross(z, p_e - frames[i][:3, 3])
        J[3:, i] = z
    return J


def pseudo_inverse(J, rcond: float = 1e-12) -> np.ndarray:
    """(J^T J)^-1 J^T computed from the SVD; rank deficiency raises."""
    J = np.asarray(J, dtype=float)
    if J.shape[0] < J.shape[1]:
        raise ValueError("Jacobian must have at least as many rows as columns")
    U, s, Vt = np.linalg.svd(J, full_matrices=False)
    if s[-1] <= rcond * s[0] or s[0] == 0.0:
        raise SingularJacobianError(f"Jacobian rank deficient (sigma_min={s[-1]:.3e})")
    return (Vt.T / s) @ U.T


def joint_rates_from_twist(J, x_dot) -> np.ndarray:
    return pseudo_inverse(J) @ np.asarray(x_dot, dtype=float)


@dataclass(frozen=True)
class DampingLimits:
    # placeholder defaults; the real values are lab specific
    lambda_l: float = 50.0
    lambda_u: float = 500.0

    def __post_init__(self):
        if not 0 < self.lambda_l < self.lambda_u:
            raise ValueError("need 0 < lambda_l < lambda_u")


def condition_number(J, length_scale: float = 1e-3) -> float:
    """sigma_max / sigma_min with the linear rows rescaled (mm -> m by default)."""
    J = np.array(J, dtype=float)
    J[:3] *= length_scale
    s = np.linalg.svd(J, compute_uv=False)
    return np.inf if s[-1] == 0.0 else float(s[0] / s[-1])


def damping_scale(lam: float, limits: DampingLimits) -> float:
    if lam <= limits.lambda_l:
        return 1.0
    if lam >= limits.lambda_u:
        return 0.0
    return 1.0 - (lam - limits.lambda_l) / (limits.lambda_u - limits.lambda_l)


def damp_joint_rates(q_dot, J, limits: DampingLimits | None = None) -> np.ndarray:
    limits = limits or DampingLimits()
    q_dot = np.asarray(q_dot, dtype=float)
    s = damping_scale(condition_number(J), limits)
    if s == 1.0:
        return q_dot.copy()
    return q_dot * s


# ------------------------------------------------------------------- scaling

@dataclass(frozen=True)
class LabScaling:
    """Lab quantities: position * nu, time * kappa, acceleration * nu / kappa^2."""
    kappa: float = 1.0
    nu: float = 1.0

    def __post_init__(self):
        if not (self.kappa > 0 and self.nu > 0):
            raise ValueError("kappa and nu must be positive")

    @property
    def accel_factor(self) -> float:
        return self.nu / self.kappa ** 2

    def factor(self, kind: str) -> float:
        if kind == "position":
            return self.nu
        if kind == "time":
            return self.kappa
        if kind == "velocity":
            return self.nu / self.kappa
        if kind == "acceleration":
            return self.accel_factor
        raise ValueError(f"unknown quantity kind {kind!r}")

    def compose(self, other: "LabScaling") -> "LabScaling":
        return LabScaling(self.kappa * other.kappa, self.nu * other.nu)


def scale_orbit_to_lab(value, scaling: LabScaling, kind: str = "acceleration"):
    return np.asarray(value, dtype=float) * scaling.factor(kind)


def scale_lab_to_orbit(value, scaling: LabScaling, kind: str = "acceleration"):
    return np.asarray(value, dtype=float) / scaling.factor(kind)


# -------------------------------------------------------------- simulated arm

class SimulatedArm:
    """Kinematic arm driven by end-effector twists through damped resolved rates."""

    def __init__(self, table: DhTable = CR20A, q0=None, limits: DampingLimits | None = None,
                 max_rate: float = np.pi):
        self.table = table
        self.q = np.array(q0 if q0 is not None else HOME_Q, dtype=float)
        self.limits = limits or DampingLimits()
        self.max_rate = max_rate
        self.last_rates = np.zeros(6)
        self.last_condition = condition_number(jacobian(table, self.q))

    def pose(self) -> EndEffectorPose:
        return forward_kinematics(self.table, self.q)

    def step_twist(self, x_dot, dt: float) -> np.ndarray:
        J = jacobian(self.table, self.q)
        self.last_condition = condition_number(J)
        q_dot = damp_joint_rates(joint_rates_from_twist(J, x_dot), J, self.limits)
        peak = np.max(np.abs(q_dot))
        if peak > self.max_rate:
            q_dot = q_dot * (self.max_rate / peak)
        self.q = self.q + q_dot * dt
        self.last_rates = q_dot
        return self.q

    def move_to(self, position, rotation=None, tol: float = 1e-10, max_iter: int = 50):
        """Newton iteration on the pose error until the position is within ``tol`` mm."""
        target_p = np.asarray(position, dtype=float)
        target_R = self.pose().rotation if rotation is None else np.asarray(rotation)
        for _ in range(max_iter):
            pose = self.pose()
            dp = target_p - pose.position
            Re = target_R @ pose.rotation.T
            dw = 0.5 * np.array([Re[2, 1] - Re[1, 2], Re[0, 2] - Re[2, 0], Re[1, 0] - Re[0, 1]])
            if np.linalg.norm(dp) < tol and np.linalg.norm(dw) < 1e-12:
                return self.q
            self.q = self.q + joint_rates_from_twist(jacobian(self.table, self.q),
                                                     np.concatenate([dp, dw]))
        raise RuntimeError("pose iteration did not converge")
