import numpy as np
import pytest
from scipy import stats

from dockgnc.dynamics import (FullState, Propagator, RelativeTranslationalState,
                              circular_orbit_state)
from dockgnc.ukf import (DegenerateCovarianceError, DelayedMeasurement, GaussianBelief, SigmaPointSet,
                         StaleMeasurementError, StateHistoryBuffer, Ukf, UkfConfig, UkfNumericalError,
                         extrapolate_measurement, generate_sigma_points, owa_fuse, owa_weights,
                         propagate_only, ukf_fusion_stacked, ukf_predict, ukf_update)


def cv_matrix(dt, dim=1):
    F = np.eye(2 * dim)
    F[:dim, dim:] = dt * np.eye(dim)
    return F


def random_spd(rng, n, scale=1.0):
    A = rng.normal(size=(n, n))
    return scale * (A @ A.T + n * np.eye(n)) / n


def kf_predict(m, P, F, Q):
    return F @ m, F @ P @ F.T + Q


def kf_update(m, P, z, H, R):
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    I = np.eye(len(m))
    return m + K @ (z - H @ m), (I - K @ H) @ P @ (I - K @ H).T + K @ R @ K.T


# ------------------------------------------------------------ sigma points

def test_weights_at_unit_alpha():
    cfg = UkfConfig(n=6, alpha=1.0, beta=2.0, kappa=0.0)
    wm, wc = cfg.weights()
    assert cfg.lam == 0.0
    assert wm[0] == 0.0 and np.all(wm[1:] == 1 / 12)
    assert wc[0] == 2.0


@pytest.mark.parametrize("alpha", [1e-1, 0.5, 1.0])
def test_weights_sum_to_one(alpha):
    wm, _ = UkfConfig(n=4, alpha=alpha).weights()
    assert abs(wm.sum() - 1.0) < 1e-12


def test_collapsed_covariance():
    b = GaussianBelief([1.0, -2.0, 3.0], 1e-18 * np.eye(3))
    sp = generate_sigma_points(b, UkfConfig(n=3))
    assert np.max(np.abs(sp.points - b.m)) < 1e-8


def test_sigma_reconstruction(rng):
    for n in (2, 6, 12):
        b = GaussianBelief(rng.normal(size=n), random_spd(rng, n))
        sp = generate_sigma_points(b, UkfConfig(n=n))
        np.testing.assert_array_equal(sp.points[0], b.m)
        np.testing.assert_allclose(sp.mean(), b.m, atol=1e-9)
        np.testing.assert_allclose(sp.cov(), b.P, atol=1e-9)


def test_factorisation_failure():
    with pytest.raises(UkfNumericalError):
        generate_sigma_points(GaussianBelief([0, 0], np.diag([1.0, -1.0])), UkfConfig(n=2))


def test_config_validation():
    with pytest.raises(ValueError):
        UkfConfig(n=2, Q=-np.eye(2))
    with pytest.raises(ValueError):
        UkfConfig(n=2, alpha=1.0, kappa=-2.0)


# ---------------------------------------------------------- predict/update

def test_identity_prediction_keeps_belief(rng):
    b = GaussianBelief(rng.normal(size=3), random_spd(rng, 3))
    out = ukf_predict(b, lambda x, dt: x, UkfConfig(n=3), 1.0)
    np.testing.assert_allclose(out.m, b.m, atol=1e-12)
    np.testing.assert_allclose(out.P, b.P, atol=1e-12)


def test_linear_prediction_exact(rng):
    F = rng.normal(size=(4, 4))
    Q = random_spd(rng, 4, 0.1)
    b = GaussianBelief(rng.normal(size=4), random_spd(rng, 4))
    out = ukf_predict(b, lambda x, dt: F @ x, UkfConfig(n=4, Q=Q), 1.0)
    np.testing.assert_allclose(out.m, F @ b.m, atol=1e-9)
    np.testing.assert_allclose(out.P, F @ b.P @ F.T + Q, atol=1e-9)


def test_relative_dynamics_prediction_mean():
    target = circular_orbit_state(500e3)
    prop = Propagator()

    def f(x, dt):
        s = FullState(target, RelativeTranslationalState(x[:3], x[3:]))
        traj = prop.propagate(s, dt / 10, 10)
        return np.concatenate([traj.rho()[-1], traj.rho_dot()[-1]])

    m = np.array([10.0, 0.0, 0.0, 0.0, -0.02, 0.0])
    b = GaussianBelief(m, np.diag([1e-4] * 3 + [1e-8] * 3))
    out = ukf_predict(b, f, UkfConfig(n=6, alpha=1e-1), 1.0)
    np.testing.assert_allclose(out.m[:3], f(m, 1.0)[:3], atol=1e-6)


def test_zero_innovation_keeps_mean_and_shrinks_cov(rng):
    b = GaussianBelief(rng.normal(size=4), random_spd(rng, 4))
    H = rng.normal(size=(2, 4))
    cfg = UkfConfig(n=4)
    z_hat = H @ b.m
    out = ukf_update(b, z_hat, lambda x: H @ x, 0.1 * np.eye(2), cfg)
    np.testing.assert_allclose(out.m, b.m, atol=1e-12)
    assert np.trace(out.P) < np.trace(b.P)
    assert np.linalg.eigvalsh(b.P - out.P).min() > -1e-12


def test_uninformative_measurement(rng):
    b = GaussianBelief(rng.normal(size=3), random_spd(rng, 3))
    out = ukf_update(b, [100.0, -100.0], lambda x: x[:2], 1e12 * np.eye(2), UkfConfig(n=3))
    np.testing.assert_allclose(out.m, b.m, atol=1e-4)


def test_singular_innovation_covariance():
    b = GaussianBelief([0.0, 0.0], np.eye(2))
    with pytest.raises(UkfNumericalError):
        ukf_update(b, [0.0, 0.0], lambda x: np.array([x[0], x[0]]), np.zeros((2, 2)),
                   UkfConfig(n=2))


def test_matches_kalman_filter_over_100_steps(rng):
    F = cv_matrix(0.5, 2)
    H = np.hstack([np.eye(2), np.zeros((2, 2))])
    Q = 1e-3 * random_spd(rng, 4)
    R = 0.05 * np.eye(2)
    cfg = UkfConfig(n=4, Q=Q)
    b = GaussianBelief(np.zeros(4), np.eye(4))
    m, P = b.m.copy(), b.P.copy()
    for _ in range(100):
        z = rng.normal(size=2)
        b = ukf_update(ukf_predict(b, lambda x, dt: F @ x, cfg, 0.5), z, lambda x: H @ x, R, cfg)
        m, P = kf_update(*kf_predict(m, P, F, Q), z, H, R)
        assert np.max(np.abs(b.P - b.P.T)) < 1e-10
    np.testing.assert_allclose(b.m, m, atol=1e-8)
    np.testing.assert_allclose(b.P, P, atol=1e-8)


def test_nees_consistency():
    rng = np.random.default_rng(7)
    dt, n_runs, n_steps = 1.0, 200, 50
    F = cv_matrix(dt)
    q = 1e-2
    Q = q * np.array([[dt ** 3 / 3, dt ** 2 / 2], [dt ** 2 / 2, dt]])
    H = np.array([[1.0, 0.0]])
    R = np.array([[0.25]])
    cfg = UkfConfig(n=2, Q=Q)
    LQ = np.linalg.cholesky(Q)
    P0 = np.diag([1.0, 0.1])
    nees = []
    for _ in range(n_runs):
        x = rng.multivariate_normal([0, 0], P0)
        b = GaussianBelief([0.0, 0.0], P0)
        run = []
        for _ in range(n_steps):
            x = F @ x + LQ @ rng.normal(size=2)
            z = H @ x + 0.5 * rng.normal(size=1)
            b = ukf_update(ukf_predict(b, lambda s, d: F @ s, cfg, dt), z, lambda s: H @ s, R, cfg)
            e = x - b.m
            run.append(e @ np.linalg.solve(b.P, e))
        nees.append(np.mean(run))
    anees = np.mean(nees)
    lo, hi = stats.chi2.ppf([0.025, 0.975], 2 * n_runs) / n_runs
    assert lo <= anees <= hi


# ----------------------------------------------------------- propagate only

def test_propagate_only_equals_predict(rng):
    F = cv_matrix(0.1, 3)
    cfg = UkfConfig(n=6, Q=1e-4 * np.eye(6))
    b = GaussianBelief(rng.normal(size=6), random_spd(rng, 6))
    a = propagate_only(b, lambda x, dt: F @ x, cfg, 0.1)
    c = ukf_predict(b, lambda x, dt: F @ x, cfg, 0.1)
    np.testing.assert_array_equal(a.m, c.m)
    np.testing.assert_array_equal(a.P, c.P)


def test_propagate_only_trace_grows(rng):
    cfg = UkfConfig(n=4, Q=1e-3 * np.eye(4))
    b = GaussianBelief(np.zeros(4), np.diag(rng.uniform(0.1, 1.0, size=4)))
    tr = [np.trace(b.P)]
    for _ in range(20):
        b = propagate_only(b, lambda x, dt: cv_matrix(dt, 2) @ x, cfg, 0.2)
        tr.append(np.trace(b.P))
    assert np.all(np.diff(tr) >= 0)


def test_substeps_compose(rng):
    K, dt = 5, 0.2
    F = cv_matrix(dt, 2)
    Q = 1e-3 * random_spd(rng, 4)
    b0 = GaussianBelief(rng.normal(size=4), random_spd(rng, 4))
    b = b0
    for _ in range(K):
        b = propagate_only(b, lambda x, d: F @ x, UkfConfig(n=4, Q=Q), dt)
    FK = np.linalg.matrix_power(F, K)
    QK = sum(np.linalg.matrix_power(F, i) @ Q @ np.linalg.matrix_power(F, i).T for i in range(K))
    one = ukf_predict(b0, lambda x, d: FK @ x, UkfConfig(n=4, Q=QK), K * dt)
    np.testing.assert_allclose(b.m, one.m, atol=1e-9)
    np.testing.assert_allclose(b.P, one.P, atol=1e-9)


# ---------------------------------------------------------- delayed updates

def _cv_filter(dt=1.0):
    F = cv_matrix(dt)
    cfg = UkfConfig(n=2, Q=1e-3 * np.array([[1 / 3, 1 / 2], [1 / 2, 1.0]]))
    f = lambda x, d: cv_matrix(d) @ x
    return F, cfg, f


def test_zero_delay_is_ordinary_update(rng):
    _, cfg, f = _cv_filter()
    h = lambda x: x[:1]
    R = np.array([[0.2]])
    filt = Ukf(GaussianBelief([0.0, 1.0], np.eye(2)), cfg, f)
    filt.predict(1.0)
    pred = filt.belief.copy()
    z = rng.normal(size=1)
    assert np.array_equal(extrapolate_measurement(z, 1.0, filt.history, h, cfg, f, pred), z)
    out = filt.delayed_update(DelayedMeasurement(z, 1.0), h, R)
    ref = ukf_update(pred, z, h, R, cfg)
    assert np.array_equal(out.m, ref.m) and np.array_equal(out.P, ref.P)


def test_static_system_extrapolation_is_identity(rng):
    cfg = UkfConfig(n=2)
    f = lambda x, d: x
    h = lambda x: x[:1]
    filt = Ukf(GaussianBelief([1.0, 2.0], np.eye(2)), cfg, f)
    for _ in range(4):
        filt.predict(0.5)
    z = np.array([3.3])
    out = extrapolate_measurement(z, 0.5, filt.history, h, cfg, f, filt.belief)
    np.testing.assert_allclose(out, z, atol=1e-14)


def _rollback_oracle(m0, P0, F, Q, H, R, arrived, k):
    """Re-run a Kalman filter from the start with every delivered measurement at its epoch."""
    by_step = {int(round(mm.t_meas)): mm.z for mm in arrived}
    m, P = m0.copy(), P0.copy()
    for j in range(1, k + 1):
        m, P = kf_predict(m, P, F, Q)
        if j in by_step:
            m, P = kf_update(m, P, by_step[j], H, R)
    return m, P


@pytest.mark.parametrize("delay,period", [(2, 3), (2, 5), (2, 1), (3, 2), (5, 1)])
def test_delayed_updates_match_rollback(rng, delay, period):
    # periods shorter than the delay put other corrections inside the window
    F, cfg, f = _cv_filter()
    H = np.array([[1.0, 0.0]])
    R = np.array([[0.3]])
    m0, P0 = np.array([0.0, 0.5]), np.diag([1.0, 0.2])
    filt = Ukf(GaussianBelief(m0, P0), cfg, f, history_len=10)
    x = np.array([0.3, 0.4])
    pending, arrived = [], []
    for k in range(1, 40):
        x = F @ x + 0.03 * rng.normal(size=2)
        filt.predict(1.0)
        if k % period == 0:
            pending.append(DelayedMeasurement(H @ x + 0.5 * rng.normal(size=1), float(k)))
        for mm in [p for p in pending if p.t_meas == k - delay]:
            filt.delayed_update(mm, lambda s: H @ s, R)
            pending.remove(mm)
            arrived.append(mm)
        m, P = _rollback_oracle(m0, P0, F, cfg.Q, H, R, arrived, k)
        np.testing.assert_allclose(filt.belief.m, m, atol=1e-6)
        np.testing.assert_allclose(filt.belief.P, P, atol=1e-6)


def test_off_grid_delay_matches_rollback():
    # measurement taken between filter ticks; no process noise so the oracle is unambiguous
    cfg = UkfConfig(n=2)
    f = lambda x, d: cv_matrix(d) @ x
    H = np.array([[1.0, 0.0]])
    R = np.array([[0.3]])
    m0, P0 = np.array([0.0, 0.5]), np.diag([1.0, 0.2])
    filt = Ukf(GaussianBelief(m0, P0), cfg, f)
    for _ in range(3):
        filt.predict(1.0)
    z = np.array([1.7])
    filt.delayed_update(DelayedMeasurement(z, 1.5), lambda s: H @ s, R)
    zero = np.zeros((2, 2))
    m, P = kf_predict(m0, P0, cv_matrix(1.5), zero)
    m, P = kf_update(m, P, z, H, R)
    m, P = kf_predict(m, P, cv_matrix(1.5), zero)
    np.testing.assert_allclose(filt.belief.m, m, atol=1e-9)
    np.testing.assert_allclose(filt.belief.P, P, atol=1e-9)


def test_stale_measurement_dropped(caplog):
    _, cfg, f = _cv_filter()
    filt = Ukf(GaussianBelief([0.0, 0.0], np.eye(2)), cfg, f, history_len=3)
    for _ in range(6):
        filt.predict(1.0)
    before = filt.belief.copy()
    assert filt.delayed_update(DelayedMeasurement(np.array([1.0]), 1.0), lambda s: s[:1],
                               np.eye(1)) is None
    assert len(filt.dropped) == 1 and "stale" in caplog.text
    np.testing.assert_array_equal(filt.belief.m, before.m)
    with pytest.raises(StaleMeasurementError):
        filt.history.base_index(0.0)


def test_history_buffer_contract():
    buf = StateHistoryBuffer(2)
    buf.append(GaussianBelief([0.0], [[1.0]], 0.0), True)
    with pytest.raises(ValueError):
        buf.append(GaussianBelief([0.0], [[1.0]], 0.0), False)
    buf.append(GaussianBelief([0.0], [[1.0]], 1.0), False)
    buf.append(GaussianBelief([0.0], [[1.0]], 2.0), False)
    assert len(buf) == 2 and buf.span == (1.0, 2.0)


# ------------------------------------------------------------------ stacked

def test_stacked_duplicate_noiseless_sensor(rng):
    b = GaussianBelief(rng.normal(size=4), random_spd(rng, 4))
    cfg = UkfConfig(n=4)
    H = rng.normal(size=(2, 4))
    z = rng.normal(size=2)
    R = 1e-2 * np.eye(2)
    single = ukf_update(b, z, lambda x: H @ x, R, cfg)
    # a second copy with very small noise dominates; a true duplicate with R=0 is singular,
    # so the redundant case is checked as the noiseless limit of both copies
    tiny = 1e-10 * np.eye(2)
    both = ukf_fusion_stacked(b, [z, z], [lambda x: H @ x, lambda x: H @ x], [tiny, tiny], cfg)
    one = ukf_update(b, z, lambda x: H @ x, tiny / 2, cfg)
    np.testing.assert_allclose(both.m, one.m, atol=1e-8)
    np.testing.assert_allclose(both.P, one.P, atol=1e-8)
    assert not np.allclose(single.m, both.m, atol=1e-8)


def test_stacked_uninformative_block(rng):
    b = GaussianBelief(rng.normal(size=3), random_spd(rng, 3))
    cfg = UkfConfig(n=3)
    h1 = lambda x: x[:2]
    h2 = lambda x: x[1:]
    z1, z2 = rng.normal(size=2), rng.normal(size=2)
    R = 0.1 * np.eye(2)
    both = ukf_fusion_stacked(b, [z1, z2], [h1, h2], [R, 1e12 * np.eye(2)], cfg)
    np.testing.assert_allclose(both.m, ukf_update(b, z1, h1, R, cfg).m, atol=1e-4)


def test_stacked_matches_kalman(rng):
    b = GaussianBelief(rng.normal(size=4), random_spd(rng, 4))
    H1, H2 = rng.normal(size=(2, 4)), rng.normal(size=(1, 4))
    R1, R2 = 0.2 * np.eye(2), np.array([[0.05]])
    z1, z2 = rng.normal(size=2), rng.normal(size=1)
    out = ukf_fusion_stacked(b, [z1, z2], [lambda x: H1 @ x, lambda x: H2 @ x], [R1, R2],
                             UkfConfig(n=4))
    H = np.vstack([H1, H2])
    R = np.zeros((3, 3))
    R[:2, :2], R[2:, 2:] = R1, R2
    m, P = kf_update(b.m, b.P, np.r_[z1, z2], H, R)
    np.testing.assert_allclose(out.m, m, atol=1e-8)
    np.testing.assert_allclose(out.P, P, atol=1e-8)


# --------------------------------------------------------------------- OWA

def test_owa_equal_weights_exact():
    for s in (1.0, 0.37, 1e-5, 123.0):
        w = owa_weights([s, s, s])
        assert list(w) == [1 / 3, 1 / 3, 1 / 3]


def test_owa_printed_closed_form():
    w = owa_weights([1.0, 2.0, 3.0])
    np.testing.assert_allclose(w, [6 / 11, 3 / 11, 2 / 11], rtol=0, atol=1e-15)


def test_owa_normalisation_and_errors(rng):
    for _ in range(100):
        assert abs(owa_weights(rng.exponential(size=3)).sum() - 1.0) < 1e-12
    with pytest.raises(DegenerateCovarianceError):
        owa_weights([1.0, 0.0, 2.0])


def test_owa_fuse_components():
    b1 = GaussianBelief([1.0, 10.0], np.diag([1.0, 4.0]))
    b2 = GaussianBelief([2.0, 20.0], np.diag([2.0, 4.0]))
    b3 = GaussianBelief([3.0, 30.0], np.diag([3.0, 4.0]))
    fused = owa_fuse([b1, b2, b3])
    assert fused.m[0] == pytest.approx((6 * 1 + 3 * 2 + 2 * 3) / 11, abs=1e-14)
    assert fused.m[1] == pytest.approx(20.0, abs=1e-12)
    assert fused.P[1, 1] == pytest.approx(4.0 / 3.0)
    with pytest.raises(ValueError):
        owa_fuse([b1])


def test_owa_fused_rmse_not_worse():
    rng = np.random.default_rng(3)
    s = np.array([0.5, 2.0])
    truth = rng.normal(size=10_000)
    est = truth[:, None] + rng.normal(size=(10_000, 2)) * np.sqrt(s)
    fused = np.array([owa_fuse([GaussianBelief([e[0]], [[s[0]]]),
                                GaussianBelief([e[1]], [[s[1]]])]).m[0] for e in est])
    rmse = lambda e: np.sqrt(np.mean((e - truth) ** 2))
    assert rmse(fused) <= min(rmse(est[:, 0]), rmse(est[:, 1]))
