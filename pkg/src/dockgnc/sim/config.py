"""Scenario configuration: typed sections loaded from TOML and cross-validated."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1
GUIDANCE_MODES = ("trained_policy", "scripted", "zero")


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    duration: float = 300.0
    dt_control: float = 1.0
    dt_filter: float = 0.1
    dynamics: str = "nonlinear"
    stop_when_docked: bool = True


@dataclass
class OrbitSection:
    altitude: float = 500e3
    inclination_deg: float = 51.6


@dataclass
class AgentSection:
    rho0: list = field(default_factory=lambda: [0.0, 0.0, 3.0])
    rho_dot0: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    # docking port in LVLH; the agent docks when |rho - port| < eps_pos
    port: list = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class DockingSection:
    eps_pos: float = 0.1
    eps_vel: float = 0.05
    velocity_constrained: bool = True


@dataclass
class SafetySection:
    enabled: bool = True
    r_agent: float = 0.02
    r_target: float = 0.02
    r_m: float = 100.0
    nu_0: float = 0.2
    nu_1: float = 0.02
    F_max: float = 10.0
    mass: float = 100.0
    v_m: float = 2.2
    alpha_cbf: float = 1.0
    margin_pos: float = 0.01
    margin_vel: float = 1e-3


@dataclass
class GuidanceSection:
    mode: str = "scripted"
    checkpoint: str = ""
    a_bound: float = 0.1
    # scripted approach profile: speed = min(v_max, v_min + k_sqrt * sqrt(d - d_slow))
    v_max: float = 0.2
    v_min: float = 0.02
    k_sqrt: float = 0.1
    d_slow: float = 0.05
    k_v: float = 0.5


@dataclass
class SensorSection:
    enabled: bool = True
    cameras_per_agent: int = 2
    rate: float = 2.0
    sigma_t: float = 0.02
    sigma_q: float = 0.02
    delay_kind: str = "fixed"
    delay: float = 0.2
    delay_low: float = 0.1
    delay_high: float = 0.4
    dropout: float = 0.0
    bias: list = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class UkfSection:
    alpha: float = 0.1
    beta: float = 2.0
    kappa: float = 0.0
    q_pos: float = 1e-6
    q_vel: float = 1e-5
    p0_pos: float = 0.1
    p0_vel: float = 0.01
    history_len: int = 50


@dataclass
class LabSection:
    enabled: bool = False
    kappa: float = 10.0
    nu: float = 0.1
    lambda_l: float = 50.0
    lambda_u: float = 500.0
    q0: list = field(default_factory=lambda: [0.0, 0.7853981633974483, -1.5707963267948966,
                                              0.0, 1.5707963267948966, 0.0])


@dataclass
class TrainSection:
    d_i: float = 10.0
    velocity_constrained: bool = False
    state_mode: str = "position_only"
    dynamics: str = "cw"
    T: int = 500
    d_i_jitter: float = 0.0
    episodes: int = 400
    hidden: list = field(default_factory=lambda: [64, 64])
    alpha0: float = 1e-3
    beta0: float = 2e-3
    tau: float = 0.01
    gamma: float = 0.98
    eps0: float = 0.3
    lambda_decay: float = 0.05
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    R_docked: float = 10.0
    reward_variant: str = "velocity_reward"
    n_validation: int = 5


@dataclass
class TuneSection:
    n_init: int = 5
    n_iter: int = 20
    mode: str = "validation"
    replications: int = 1


@dataclass
class ScenarioConfig:
    schema_version: int = SCHEMA_VERSION
    run: RunSection = field(default_factory=RunSection)
    orbit: OrbitSection = field(default_factory=OrbitSection)
    agents: list = field(default_factory=lambda: [AgentSection()])
    docking: DockingSection = field(default_factory=DockingSection)
    safety: SafetySection = field(default_factory=SafetySection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    sensor: SensorSection = field(default_factory=SensorSection)
    ukf: UkfSection = field(default_factory=UkfSection)
    lab: LabSection = field(default_factory=LabSection)
    train: TrainSection = field(default_factory=TrainSection)
    tune: TuneSection = field(default_factory=TuneSection)
    robot: dict = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


_SECTIONS = {
    "run": RunSection, "orbit": OrbitSection, "docking": DockingSection,
    "safety": SafetySection, "guidance": GuidanceSection, "sensor": SensorSection,
    "ukf": UkfSection, "lab": LabSection, "train": TrainSection, "tune": TuneSection,
}


def _section(cls, data, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    out = {}
    defaults = cls()
    for k, v in data.items():
        ref = getattr(defaults, k)
        if isinstance(ref, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{name}.{k} must be a boolean")
        elif isinstance(ref, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name}.{k} must be an integer")
        elif isinstance(ref, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name}.{k} must be a number")
            v = float(v)
        elif isinstance(ref, str):
            if not isinstance(v, str):
                raise ConfigError(f"{name}.{k} must be a string")
        elif isinstance(ref, list):
            if not isinstance(v, list):
                raise ConfigError(f"{name}.{k} must be an array")
        out[k] = v
    return cls(**out)


def _vec(v, n: int, what: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (n,) or not np.all(np.isfinite(a)):
        raise ConfigError(f"{what} must be {n} finite numbers")
    return a


def validate(cfg: ScenarioConfig) -> ScenarioConfig:
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg.schema_version}")
    r = cfg.run
    if r.duration <= 0 or r.dt_control <= 0 or r.dt_filter <= 0:
        raise ConfigError("durations and step sizes must be positive")
    ratio = r.dt_control / r.dt_filter
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ConfigError("dt_control must be an integer multiple of dt_filter")
    if r.dynamics not in ("nonlinear", "cw"):
        raise ConfigError("run.dynamics must be 'nonlinear' or 'cw'")
    if r.seed < 0:
        raise ConfigError("run.seed must be non-negative")
    if not 1 <= len(cfg.agents) <= 2:
        raise ConfigError("one or two agents are supported")
    s, d = cfg.safety, cfg.docking
    if d.eps_pos <= 0 or d.eps_vel <= 0:
        raise ConfigError("docking tolerances must be positive")
    for i, a in enumerate(cfg.agents):
        rho0 = _vec(a.rho0, 3, f"agents[{i}].rho0")
        _vec(a.rho_dot0, 3, f"agents[{i}].rho_dot0")
        port = _vec(a.port, 3, f"agents[{i}].port")
        d_i = float(np.linalg.norm(rho0 - port))
        if d_i <= d.eps_pos:
            raise ConfigError(f"agent {i} starts inside the docking tolerance")
        if np.linalg.norm(rho0) >= s.r_m:
            raise ConfigError(f"agent {i}: initial distance must be below r_m")
        if d.eps_vel >= s.nu_1 * d_i + s.nu_0:
            raise ConfigError("eps_vel must be below the speed envelope nu_1 d_i + nu_0")
    if len(cfg.agents) == 2:
        p0, p1 = (np.asarray(a.port, float) for a in cfg.agents)
        if np.linalg.norm(p0 - p1) <= 2 * s.r_agent:
            raise ConfigError("docking ports of the two agents overlap")
    if cfg.guidance.mode not in GUIDANCE_MODES:
        raise ConfigError(f"guidance.mode must be one of {GUIDANCE_MODES}")
    if cfg.guidance.mode == "trained_policy" and not cfg.guidance.checkpoint:
        raise ConfigError("guidance.checkpoint is required for trained_policy")
    if cfg.guidance.a_bound <= 0:
        raise ConfigError("guidance.a_bound must be positive")
    se = cfg.sensor
    if se.rate <= 0 or se.sigma_t < 0 or se.sigma_q < 0:
        raise ConfigError("sensor rate must be positive and noise levels non-negative")
    if not 0 <= se.dropout < 1:
        raise ConfigError("sensor.dropout must lie in [0, 1)")
    if se.delay_kind not in ("fixed", "uniform"):
        raise ConfigError("sensor.delay_kind must be 'fixed' or 'uniform'")
    if se.delay < 0 or se.delay_low < 0 or se.delay_high < se.delay_low:
        raise ConfigError("sensor delays must be non-negative with delay_low <= delay_high")
    if se.cameras_per_agent < 1:
        raise ConfigError("sensor.cameras_per_agent must be >= 1")
    _vec(se.bias, 3, "sensor.bias")
    u = cfg.ukf
    if min(u.q_pos, u.q_vel) < 0 or min(u.p0_pos, u.p0_vel) <= 0 or u.alpha <= 0:
        raise ConfigError("invalid UKF noise settings")
    max_delay = se.delay if se.delay_kind == "fixed" else se.delay_high
    if max_delay > 0.9 * u.history_len * r.dt_filter:
        raise ConfigError("ukf.history_len too short for the configured sensor delay")
    lab = cfg.lab
    if lab.kappa <= 0 or lab.nu <= 0 or not 0 < lab.lambda_l < lab.lambda_u:
        raise ConfigError("invalid lab scaling or damping limits")
    _vec(lab.q0, 6, "lab.q0")
    t = cfg.train
    if t.d_i <= d.eps_pos or t.episodes < 1 or t.T < 1:
        raise ConfigError("invalid [train] settings")
    if cfg.tune.mode not in ("window", "validation"):
        raise ConfigError("tune.mode must be 'window' or 'validation'")
    return cfg


def config_from_dict(data: dict, base_dir=".") -> ScenarioConfig:
    data = dict(data)
    if "schema_version" not in data:
        raise ConfigError("missing schema_version")
    kwargs = {"schema_version": data.pop("schema_version"), "base_dir": Path(base_dir)}
    if "agents" in data:
        agents = data.pop("agents")
        if not isinstance(agents, list):
            raise ConfigError("agents must be an array of tables")
        kwargs["agents"] = [_section(AgentSection, a, f"agents[{i}]")
                            for i, a in enumerate(agents)]
    if "robot" in data:
        kwargs["robot"] = data.pop("robot")
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _section(cls, data.pop(name), name)
    if data:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(data))}")
    try:
        cfg = ScenarioConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return validate(cfg)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return config_from_dict(data, path.parent)


def default_config() -> ScenarioConfig:
    return validate(ScenarioConfig())
