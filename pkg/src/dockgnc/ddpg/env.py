"""Single-agent docking environment along the target's orbit-normal axis.

The chaser starts at ``rho = d_i * h_hat`` at rest and may only thrust along
``+/- h_hat``.  Observations are target-minus-chaser differences, so the
initial position-only observation is ``[0, 0, -d_i]``.  The environment keeps
the true relative state internally; the velocity it reports to the reward
for position-only observations is that truth (side channel).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..dynamics import (FullState, Propagator, RelativeTranslationalState, Stepper,
                        circular_orbit_state, cw_state_transition, mean_motion)

H_HAT = np.array([0.0, 0.0, 1.0])
STATE_MODES = ("position_only", "position_velocity")
DYNAMICS_MODES = ("cw", "nonlinear")
REWARD_VARIANTS = ("velocity_reward", "velocity_penalty", "fast_approach_penalty")


@dataclass
class DockingEnvConfig:
    d_i: float = 10.0
    eps_pos: float = 0.1
    eps_vel: float = 0.05
    velocity_constrained: bool = False
    state_mode: str = "position_only"
    a_bound: float = 0.1
    dt: float = 1.0
    T: int = 500
    dynamics_mode: str = "cw"
    altitude: float = 500e3
    # fractional spread of the initial distance, uniform in d_i * (1 +/- jitter)
    d_i_jitter: float = 0.0
    # end the episode (not docked) once |rho| exceeds drift_factor * d_i
    drift_factor: float | None = 3.0

    def __post_init__(self):
        if not self.d_i > self.eps_pos > 0:
            raise ValueError("need d_i > eps_pos > 0")
        if self.a_bound <= 0 or self.dt <= 0 or self.T < 1:
            raise ValueError("a_bound, dt must be positive and T >= 1")
        if self.state_mode not in STATE_MODES:
            raise ValueError(f"state_mode must be one of {STATE_MODES}")
        if self.dynamics_mode not in DYNAMICS_MODES:
            raise ValueError(f"dynamics_mode must be one of {DYNAMICS_MODES}")
        if not 0 <= self.d_i_jitter < 1:
            raise ValueError("d_i_jitter must lie in [0, 1)")

    @property
    def state_dim(self) -> int:
        return 3 if self.state_mode == "position_only" else 6

    @property
    def n(self) -> float:
        return mean_motion(self.altitude)


@dataclass
class RewardParams:
    c1: float = 1.0
    c2: float = 1.0
    R_docked: float = 10.0
    vel_reward_radius_factor: float = 3.0
    # penalty constant of the sparse-penalty alternatives (not the default path)
    c3: float = 1.0
    variant: str = "velocity_reward"
    # the eps_vel / |v| term is capped at vel_cap * c2
    vel_cap: float = 10.0

    def __post_init__(self):
        if min(self.c1, self.c2, self.R_docked, self.c3) < 0:
            raise ValueError("reward constants must be non-negative")
        if self.variant not in REWARD_VARIANTS:
            raise ValueError(f"variant must be one of {REWARD_VARIANTS}")


def is_docked(pos, vel, config: DockingEnvConfig) -> bool:
    if np.linalg.norm(pos) >= config.eps_pos:
        return False
    return (not config.velocity_constrained) or np.linalg.norm(vel) < config.eps_vel


def reward_terms(s_t, s_prev, params: RewardParams, config: DockingEnvConfig,
                 v_rel=None) -> dict:
    """Dense, sparse and velocity reward components.

    ``v_rel`` is required when the observation carries no velocity.
    """
    s_t = np.asarray(s_t, dtype=float)
    s_prev = np.asarray(s_prev, dtype=float)
    pos = s_t[:3]
    if v_rel is None:
        if len(s_t) < 6:
            raise ValueError("velocity needed: pass v_rel for position-only states")
        v_rel = s_t[3:6]
    v_rel = np.asarray(v_rel, dtype=float)
    d = float(np.linalg.norm(pos))
    speed = float(np.linalg.norm(v_rel))
    dense = -params.c1 * (d - float(np.linalg.norm(s_prev[:3])))
    sparse = params.R_docked if is_docked(pos, v_rel, config) else 0.0
    vel = 0.0
    if d < params.vel_reward_radius_factor * config.eps_pos:
        if params.variant == "velocity_reward":
            cap = params.vel_cap * params.c2
            vel = cap if speed == 0.0 else min(params.c2 * config.eps_vel / speed, cap)
        elif params.variant == "velocity_penalty":
            # penalty inside the docking region, as the formulation is written
            if d < config.eps_pos and speed < config.eps_vel:
                vel = -params.c3
        elif d < config.eps_pos and speed >= config.eps_vel:
            # variant: penalise arriving too fast instead
            vel = -params.c3
    return {"dense": dense, "sparse": sparse, "vel": vel}


def reward(s_t, s_prev, params: RewardParams, config: DockingEnvConfig, v_rel=None) -> float:
    terms = reward_terms(s_t, s_prev, params, config, v_rel)
    return terms["dense"] + terms["sparse"] + terms["vel"]


@dataclass
class EnvState:
    """Truth and bookkeeping for one episode."""

    rho: np.ndarray
    rho_dot: np.ndarray
    step: int = 0
    t: float = 0.0
    docked: bool = False
    stepper: Stepper | None = field(default=None, repr=False)

    def observation(self, config: DockingEnvConfig) -> np.ndarray:
        if config.state_mode == "position_only":
            return -self.rho.copy()
        return np.concatenate([-self.rho, -self.rho_dot])


_STM_CACHE: dict = {}


def _stm(n: float, dt: float) -> np.ndarray:
    key = (n, dt)
    if key not in _STM_CACHE:
        _STM_CACHE[key] = cw_state_transition(n, dt)
    return _STM_CACHE[key]


def env_reset(config: DockingEnvConfig, rng=None) -> EnvState:
    d = config.d_i
    if config.d_i_jitter > 0:
        rng = np.random.default_rng() if rng is None else rng
        d *= 1.0 + config.d_i_jitter * rng.uniform(-1.0, 1.0)
    rho = d * H_HAT
    state = EnvState(rho=rho, rho_dot=np.zeros(3))
    if config.dynamics_mode == "nonlinear":
        target = circular_orbit_state(config.altitude)
        full = FullState(target, RelativeTranslationalState(rho.copy(), np.zeros(3)))
        state.stepper = Propagator().stepper(full, config.dt, config.T)
    return state


def env_step(state: EnvState, action: float, config: DockingEnvConfig,
             reward_params: RewardParams | None = None):
    """Advance one step in place.

    Returns ``(state, observation, reward, done, info)``; ``info`` carries the
    reward components and the docked / drifted flags.
    """
    a = float(action)
    if not np.isfinite(a):
        raise ValueError("action must be finite")
    if abs(a) > config.a_bound * (1 + 1e-12):
        raise ValueError("action exceeds a_bound")
    reward_params = reward_params or RewardParams()
    s_prev = state.observation(config)
    dv = a * config.dt * H_HAT
    if config.dynamics_mode == "cw":
        y = _stm(config.n, config.dt) @ np.concatenate([state.rho, state.rho_dot + dv])
        state.rho, state.rho_dot = y[:3], y[3:]
    else:
        full = state.stepper.step(dv=dv)
        state.rho, state.rho_dot = full.rel.rho, full.rel.rho_dot
    state.step += 1
    state.t += config.dt
    s_next = state.observation(config)
    terms = reward_terms(s_next, s_prev, reward_params, config, v_rel=-state.rho_dot)
    r = terms["dense"] + terms["sparse"] + terms["vel"]
    state.docked = is_docked(state.rho, state.rho_dot, config)
    drifted = (config.drift_factor is not None
               and np.linalg.norm(state.rho) > config.drift_factor * config.d_i)
    done = state.docked or drifted or state.step >= config.T
    info = {"terms": terms, "docked": state.docked, "drifted": bool(drifted)}
    return state, s_next, r, done, info


class DockingEnv:
    """Stateful wrapper around :func:`env_reset` / :func:`env_step`."""

    def __init__(self, config: DockingEnvConfig, reward_params: RewardParams | None = None):
        self.config = config
        self.reward_params = reward_params or RewardParams()
        self.state: EnvState | None = None

    def reset(self, rng=None) -> np.ndarray:
        self.state = env_reset(self.config, rng)
        return self.state.observation(self.config)

    def step(self, action: float):
        self.state, s, r, done, info = env_step(self.state, action, self.config, self.reward_params)
        return s, r, done, info
