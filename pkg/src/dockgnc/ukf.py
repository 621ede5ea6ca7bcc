"""Additive-noise unscented Kalman filter with delayed-measurement handling and OWA fusion.

Process models are callables ``f(x, dt) -> x`` and measurement models
``h(x) -> z``; both act on a single state vector.  A process model with a
truthy ``time_aware`` attribute is called as ``f(x, dt, t0)`` instead, so
replays after a late measurement see the inputs that were active back then.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# timestamps closer than this are the same epoch (absorbs accumulated dt roundoff)
T_TOL = 1e-9


class UkfNumericalError(RuntimeError):
    pass


class StaleMeasurementError(ValueError):
    """Measurement older than the stored history; it is dropped."""


class DegenerateCovarianceError(ValueError):
    pass


def _sym(P):
    return 0.5 * (P + P.T)


@dataclass
class GaussianBelief:
    m: np.ndarray
    P: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float).ravel().copy()
        self.P = np.asarray(self.P, dtype=float).copy()
        n = len(self.m)
        if self.P.shape != (n, n):
            raise ValueError("covariance shape does not match the mean")
        if np.max(np.abs(self.P - self.P.T), initial=0.0) > 1e-10 * max(1.0, np.abs(self.P).max()):
            raise ValueError("covariance not symmetric")

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.m, self.P, self.t)


@dataclass
class UkfConfig:
    n: int
    alpha: float = 0.1
    beta: float = 2.0
    kappa: float = 0.0
    Q: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.zeros((self.n, self.n)) if self.Q is None else np.asarray(self.Q, float)
        if self.Q.shape != (self.n, self.n):
            raise ValueError("Q must be n x n")
        if self.n + self.lam <= 0:
            raise ValueError("need n + lambda > 0")
        if np.linalg.eigvalsh(_sym(self.Q)).min() < -1e-12:
            raise ValueError("Q must be positive semidefinite")

    @property
    def lam(self) -> float:
        return self.alpha ** 2 * (self.n + self.kappa) - self.n

    def weights(self):
        n, lam = self.n, self.lam
        wm = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = lam / (n + lam) + (1.0 - self.alpha ** 2 + self.beta)
        return wm, wc


@dataclass
class SigmaPointSet:
    points: np.ndarray
    wm: np.ndarray
    wc: np.ndarray

    def mean(self) -> np.ndarray:
        return self.wm @ self.points

    def cov(self) -> np.ndarray:
        d = self.points - self.mean()
        return _sym((d * self.wc[:, None]).T @ d)


def _sqrt_psd(P):
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(P + 1e-9 * np.eye(len(P)))
    except np.linalg.LinAlgError as exc:
        raise UkfNumericalError("covariance factorisation failed after jitter") from exc


def generate_sigma_points(belief: GaussianBelief, config: UkfConfig) -> SigmaPointSet:
    n = len(belief.m)
    if n != config.n:
        raise ValueError("belief dimension does not match config.n")
    S = np.sqrt(n + config.lam) * _sqrt_psd(belief.P)
    pts = np.empty((2 * n + 1, n))
    pts[0] = belief.m
    pts[1:n + 1] = belief.m + S.T
    pts[n + 1:] = belief.m - S.T
    wm, wc = config.weights()
    return SigmaPointSet(pts, wm, wc)


def _apply(fn, pts):
    return np.array([np.asarray(fn(x), dtype=float).ravel() for x in pts])


def _stat_lin(X, Y, sp: SigmaPointSet, P):
    """Least-squares linear map A with Y - y_bar ~ A (X - x_bar) over the sigma points."""
    dX = X - sp.wm @ X
    dY = Y - sp.wm @ Y
    C = (dX * sp.wc[:, None]).T @ dY
    return np.linalg.lstsq(P, C, rcond=None)[0].T


def _call_f(f, x, dt, t0):
    return f(x, dt, t0) if getattr(f, "time_aware", False) else f(x, dt)


def _predict(belief, f, config, dt, want_factor=False):
    sp = generate_sigma_points(belief, config)
    Y = _apply(lambda x: _call_f(f, x, dt, belief.t), sp.points)
    m = sp.wm @ Y
    d = Y - m
    P = _sym((d * sp.wc[:, None]).T @ d + config.Q)
    out = GaussianBelief(m, P, belief.t + dt)
    if want_factor:
        return out, _stat_lin(sp.points, Y, sp, belief.P)
    return out


def ukf_predict(belief: GaussianBelief, f, config: UkfConfig, dt: float) -> GaussianBelief:
    return _predict(belief, f, config, dt)


def propagate_only(belief: GaussianBelief, f, config: UkfConfig, dt: float) -> GaussianBelief:
    """Prediction with the correction skipped, so the result is both m- and m+."""
    return _predict(belief, f, config, dt)


def _measurement_moments(sp: SigmaPointSet, h, R):
    Z = _apply(h, sp.points)
    z_hat = sp.wm @ Z
    dZ = Z - z_hat
    dX = sp.points - sp.mean()
    W = _sym((dZ * sp.wc[:, None]).T @ dZ + R)
    C = (dX * sp.wc[:, None]).T @ dZ
    return z_hat, W, C


def _gain(C, W):
    try:
        if np.linalg.cond(W) > 1e15:
            raise np.linalg.LinAlgError
        return np.linalg.solve(W.T, C.T).T
    except np.linalg.LinAlgError as exc:
        raise UkfNumericalError("innovation covariance is singular") from exc


def _update(pred, z, h, R, config):
    sp = generate_sigma_points(pred, config)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    z_hat, W, C = _measurement_moments(sp, h, R)
    K = _gain(C, W)
    m = pred.m + K @ (np.asarray(z, dtype=float).ravel() - z_hat)
    P = pred.P - C @ K.T - K @ C.T + K @ W @ K.T
    return GaussianBelief(m, _sym(P), pred.t), K, C


def ukf_update(pred: GaussianBelief, z, h, R, config: UkfConfig) -> GaussianBelief:
    """Correction with K = C W^-1 (sigma points re-formed from the prediction)."""
    return _update(pred, z, h, R, config)[0]


def ukf_fusion_stacked(pred: GaussianBelief, zs, hs, Rs, config: UkfConfig) -> GaussianBelief:
    """One update with all sensors' measurements concatenated."""
    zs = [np.atleast_1d(np.asarray(z, dtype=float)) for z in zs]
    if not (len(zs) == len(hs) == len(Rs)) or not zs:
        raise ValueError("need matching, non-empty lists of z, h and R")
    sizes = [len(z) for z in zs]
    R = np.zeros((sum(sizes), sum(sizes)))
    i = 0
    for Ri, k in zip(Rs, sizes):
        R[i:i + k, i:i + k] = np.atleast_2d(Ri)
        i += k
    h = lambda x: np.concatenate([np.atleast_1d(hi(x)) for hi in hs])
    return ukf_update(pred, np.concatenate(zs), h, R, config)


# ------------------------------------------------------------- delayed data

@dataclass
class DelayedMeasurement:
    z: np.ndarray
    t_meas: float
    sensor_id: int = 0


@dataclass
class HistoryEntry:
    belief: GaussianBelief
    corrected: bool
    # prediction step from the previous entry and its linearised error transition
    dt: float = 0.0
    F: np.ndarray | None = None
    # measurements whose epoch falls in (previous t, this t], as (t, z, h, R)
    updates: list = field(default_factory=list)


class StateHistoryBuffer:
    """Fixed-capacity store of the most recent beliefs, oldest first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.entries: list[HistoryEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, belief: GaussianBelief, corrected: bool, dt: float = 0.0,
               F=None) -> HistoryEntry:
        if self.entries and belief.t <= self.entries[-1].belief.t:
            raise ValueError("history timestamps must increase strictly")
        e = HistoryEntry(belief.copy(), corrected, dt, F)
        self.entries.append(e)
        if len(self.entries) > self.capacity:
            self.entries.pop(0)
        return e

    @property
    def span(self) -> tuple[float, float]:
        return self.entries[0].belief.t, self.entries[-1].belief.t

    def base_index(self, t_meas: float) -> int:
        """Index of the latest stored belief at or before ``t_meas``."""
        if not self.entries or t_meas < self.entries[0].belief.t - T_TOL:
            raise StaleMeasurementError(f"measurement at t={t_meas} predates the history")
        for i in range(len(self.entries) - 1, -1, -1):
            if self.entries[i].belief.t <= t_meas + T_TOL:
                return i
        raise StaleMeasurementError("no stored belief precedes the measurement")


def _belief_at(history: StateHistoryBuffer, t_meas: float, f, config: UkfConfig):
    i = history.base_index(t_meas)
    base = history.entries[i].belief
    if abs(t_meas - base.t) <= T_TOL:
        return i, base
    return i, _predict(base, f, config, t_meas - base.t)


def extrapolate_measurement(z_meas, t_meas: float, history: StateHistoryBuffer, h,
                            config: UkfConfig, f, predicted: GaussianBelief) -> np.ndarray:
    """Shift a measurement taken at ``t_meas`` to the time of ``predicted``.

    Adds the predicted-measurement difference between the two epochs; the
    earlier epoch's sigma points come from forward-propagating the latest
    stored belief not after ``t_meas``.
    """
    z_meas = np.asarray(z_meas, dtype=float).ravel()
    if t_meas > predicted.t + T_TOL:
        raise ValueError("measurement is from the future")
    if abs(t_meas - predicted.t) <= T_TOL:
        return z_meas.copy()
    _, b_meas = _belief_at(history, t_meas, f, config)
    sp_k = generate_sigma_points(predicted, config)
    sp_s = generate_sigma_points(b_meas, config)
    return z_meas + sp_k.wm @ _apply(h, sp_k.points) - sp_s.wm @ _apply(h, sp_s.points)


class Ukf:
    """Stateful filter: predict / update / delayed update with a belief history."""

    def __init__(self, belief: GaussianBelief, config: UkfConfig, f, history_len: int = 50):
        self.config = config
        self.f = f
        self.belief = belief.copy()
        self.history = StateHistoryBuffer(history_len)
        # the prior counts as a corrected estimate
        self.history.append(self.belief, True)
        self.dropped: list[DelayedMeasurement] = []
        self.n_replays = 0

    @property
    def t(self) -> float:
        return self.belief.t

    def predict(self, dt: float) -> GaussianBelief:
        self.belief, F = _predict(self.belief, self.f, self.config, dt, want_factor=True)
        self.history.append(self.belief, False, dt, F)
        return self.belief

    propagate_only = predict

    def update(self, z, h, R) -> GaussianBelief:
        self.belief = ukf_update(self.belief, z, h, R, self.config)
        e = self.history.entries[-1]
        e.belief = self.belief.copy()
        e.corrected = True
        e.updates.append((self.t, z, h, R))
        return self.belief

    def _transition(self, i: int, b_meas: GaussianBelief) -> np.ndarray:
        """Linearised error map from ``b_meas.t`` to now, for a window free of updates."""
        entries = self.history.entries
        M = np.eye(self.config.n)
        start = i + 1
        if b_meas.t > entries[i].belief.t:
            nxt = entries[start]
            sp = generate_sigma_points(b_meas, self.config)
            Y = _apply(lambda x: _call_f(self.f, x, nxt.belief.t - b_meas.t, b_meas.t),
                       sp.points)
            M = _stat_lin(sp.points, Y, sp, b_meas.P)
            start += 1
        for e in entries[start:]:
            M = e.F @ M
        return M

    def _record(self, i: int, meas: DelayedMeasurement, h, R) -> None:
        """File a late measurement under the entry covering its epoch."""
        entries = self.history.entries
        item = (meas.t_meas, meas.z, h, R)
        if abs(meas.t_meas - entries[i].belief.t) <= T_TOL:
            e = entries[i]
            e.belief = ukf_update(e.belief, meas.z, h, R, self.config)
            e.corrected = True
            e.updates.append(item)
        else:
            entries[i + 1].updates.append(item)
            entries[i + 1].updates.sort(key=lambda u: u[0])

    def _replay_from(self, i: int) -> GaussianBelief:
        """Re-run predictions and stored corrections after entry ``i``."""
        entries = self.history.entries
        b = entries[i].belief
        for e in entries[i + 1:]:
            F = np.eye(self.config.n)
            for t_u, z, h, R in e.updates:
                if t_u > b.t + T_TOL:
                    b, Fp = _predict(b, self.f, self.config, t_u - b.t, want_factor=True)
                    F = Fp @ F
                b = ukf_update(b, z, h, R, self.config)
            if e.belief.t > b.t + T_TOL:
                b, Fp = _predict(b, self.f, self.config, e.belief.t - b.t, want_factor=True)
                F = Fp @ F
            e.F = F
            e.belief = b.copy()
            e.corrected = e.corrected or bool(e.updates)
        self.n_replays += 1
        return b

    def delayed_update(self, meas: DelayedMeasurement, h, R) -> GaussianBelief | None:
        """Use a late measurement.

        With no corrections between ``t_meas`` and now, the extrapolated
        measurement is used with the gain mapped from the acquisition epoch,
        which in the linear case equals rolling back, updating and
        re-propagating.  If corrections happened inside that window the
        history is replayed instead.  Either way the stored history is brought
        up to date so later rollbacks start from consistent beliefs.  Stale
        measurements are logged, kept in ``dropped`` and skipped.
        """
        if meas.t_meas > self.t + T_TOL:
            raise ValueError("measurement is from the future")
        if abs(meas.t_meas - self.t) <= T_TOL:
            return self.update(meas.z, h, R)
        try:
            i = self.history.base_index(meas.t_meas)
        except StaleMeasurementError:
            log.warning("dropping stale measurement from sensor %s at t=%.3f",
                        meas.sensor_id, meas.t_meas)
            self.dropped.append(meas)
            return None
        entries = self.history.entries
        R = np.atleast_2d(np.asarray(R, dtype=float))
        if any(e.updates for e in entries[i + 1:]):
            self._record(i, meas, h, R)
            self.belief = self._replay_from(i).copy()
            return self.belief
        _, b_meas = _belief_at(self.history, meas.t_meas, self.f, self.config)
        z_extra = extrapolate_measurement(meas.z, meas.t_meas, self.history, h, self.config,
                                          self.f, self.belief)
        sp_k = generate_sigma_points(self.belief, self.config)
        z_hat_k = sp_k.wm @ _apply(h, sp_k.points)
        sp_s = generate_sigma_points(b_meas, self.config)
        _, W_s, C_s = _measurement_moments(sp_s, h, R)
        MK = self._transition(i, b_meas) @ _gain(C_s, W_s)
        m = self.belief.m + MK @ (z_extra - z_hat_k)
        P = _sym(self.belief.P - MK @ W_s @ MK.T)
        self.belief = GaussianBelief(m, P, self.t)
        # keep older entries consistent with the new information
        self._record(i, meas, h, R)
        self._replay_from(i)
        self.n_replays -= 1
        entries[-1].belief = self.belief.copy()
        entries[-1].corrected = True
        return self.belief


# ---------------------------------------------------------------- fusion

def owa_weights(s) -> np.ndarray:
    """Inverse-variance weights, normalised to one, for a vector of variances."""
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise DegenerateCovarianceError("variances must be positive and finite")
    r = s.min() / s
    return r / r.sum()


def owa_fuse(beliefs) -> GaussianBelief:
    """Per-component inverse-variance weighting of aligned estimates.

    The fused covariance is diagonal with entries sum_i w_i^2 s_i, a heuristic
    that keeps the output a usable Gaussian summary.
    """
    beliefs = list(beliefs)
    if len(beliefs) < 2:
        raise ValueError("need at least two beliefs")
    t0 = beliefs[0].t
    if any(abs(b.t - t0) > 1e-12 for b in beliefs):
        raise ValueError("beliefs must share a timestamp")
    S = np.array([np.diag(b.P) for b in beliefs])
    M = np.array([b.m for b in beliefs])
    W = np.array([owa_weights(S[:, j]) for j in range(S.shape[1])]).T
    m = (W * M).sum(0)
    P = np.diag((W ** 2 * S).sum(0))
    return GaussianBelief(m, P, t0)
