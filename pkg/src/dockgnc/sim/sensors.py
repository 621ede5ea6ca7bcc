"""Synthetic pose sensor standing in for the vision network, plus pose error metrics."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from ..attitude import axis_angle_to_quat, normalize, quat_multiply


class UndefinedRelativeError(ValueError):
    pass


@dataclass
class PoseSensorModel:
    sigma_t: float = 0.0  # m
    sigma_q: float = 0.0  # rad, axis-angle
    rate: float = 2.0  # Hz
    delay_kind: str = "fixed"
    delay: float = 0.0  # s, fixed delay
    delay_low: float = 0.0
    delay_high: float = 0.0
    dropout: float = 0.0
    bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=float)
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if min(self.sigma_t, self.sigma_q) < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.delay_kind not in ("fixed", "uniform"):
            raise ValueError("delay_kind must be fixed or uniform")
        if min(self.delay, self.delay_low) < 0 or self.delay_high < self.delay_low:
            raise ValueError("delays must be non-negative")

    @property
    def period(self) -> float:
        return 1.0 / self.rate

    def sample_delay(self, rng) -> float:
        if self.delay_kind == "fixed":
            return self.delay
        return float(rng.uniform(self.delay_low, self.delay_high))


@dataclass
class PoseMeasurement:
    t: np.ndarray  # translation, m
    q: np.ndarray  # attitude quaternion, scalar last
    t_meas: float
    t_arrival: float
    sensor_id: str = ""


def mock_pose_sensor(t_true, q_true, model: PoseSensorModel, t_now: float, rng,
                     sensor_id: str = "") -> PoseMeasurement | None:
    """One emission: noisy pose stamped ``t_now``, or None when dropped.

    The random draws are made in a fixed order (dropout, delay, translation,
    rotation) whether or not the sample is dropped, so dropout does not
    shift later noise.
    """
    u = rng.random()
    delay = model.sample_delay(rng)
    dt = rng.normal(size=3)
    dq = rng.normal(size=3)
    if u < model.dropout:
        return None
    t_meas = np.asarray(t_true, dtype=float) + model.bias + model.sigma_t * dt
    q = np.asarray(q_true, dtype=float)
    if model.sigma_q > 0:
        rotvec = model.sigma_q * dq
        angle = float(np.linalg.norm(rotvec))
        q = normalize(quat_multiply(q, axis_angle_to_quat(rotvec, angle)))
    return PoseMeasurement(t_meas, q.copy(), float(t_now), float(t_now) + delay, sensor_id)


class SensorChannel:
    """Emission schedule plus the in-flight queue for one camera."""

    def __init__(self, model: PoseSensorModel, rng, sensor_id: str, t0: float = 0.0):
        self.model = model
        self.rng = rng
        self.sensor_id = sensor_id
        self.t0 = t0
        self.next_emit = t0
        self._queue: list = []
        self._count = 0
        self.emitted = 0
        self.dropped = 0

    def emit_due(self, t_now: float, t_true, q_true, tol: float = 1e-9) -> None:
        while self.next_emit <= t_now + tol:
            self.emitted += 1
            m = mock_pose_sensor(t_true, q_true, self.model, self.next_emit, self.rng,
                                 self.sensor_id)
            self._count += 1
            self.next_emit = self.t0 + self._count * self.model.period
            if m is None:
                self.dropped += 1
                continue
            heapq.heappush(self._queue, (m.t_arrival, m.t_meas, self._count, m))

    def deliver(self, t_now: float, tol: float = 1e-9) -> list[PoseMeasurement]:
        out = []
        while self._queue and self._queue[0][0] <= t_now + tol:
            out.append(heapq.heappop(self._queue)[3])
        return out


def pose_error_metrics(t_hat, t, q_hat, q, threshold: tuple | None = None):
    """(e_t, e_q, e_p) for one estimate.

    ``threshold = (t_thr, q_thr)`` zeroes errors below the calibration
    accuracy when given.
    """
    t_hat = np.asarray(t_hat, dtype=float)
    t = np.asarray(t, dtype=float)
    e_t = float(np.linalg.norm(t_hat - t))
    dot = min(1.0, abs(float(np.dot(q_hat, q))))
    e_q = 2.0 * float(np.arccos(dot))
    if threshold is not None:
        if e_t < threshold[0]:
            e_t = 0.0
        if e_q < threshold[1]:
            e_q = 0.0
    tn = float(np.linalg.norm(t))
    if tn == 0.0:
        raise UndefinedRelativeError("relative translation error undefined for |t| = 0")
    return e_t, e_q, e_t / tn + e_q


def batch_means(e_t, e_q, e_p) -> tuple[float, float, float]:
    return float(np.mean(e_t)), float(np.mean(e_q)), float(np.mean(e_p))
