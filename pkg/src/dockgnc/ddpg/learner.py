"""DDPG learner: exploration, replay, actor/critic updates and the episode loop."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import DockingEnvConfig, RewardParams, env_reset, env_step
from .nets import Adam, Mlp, soft_update


@dataclass
class OuNoiseState:
    current_noise: float = 0.0
    theta_ou: float = 0.15
    mu_ou: float = 0.0
    dt_ou: float = 0.01
    gamma_ou: float = 0.2
    k: float = 0.995
    floor: float = 0.05


def ou_step(noise: OuNoiseState, a_t: float, rng) -> float:
    """One OU increment for action ``a_t``; decays the noise scale afterwards."""
    dA = (noise.theta_ou * (noise.mu_ou - a_t) * noise.dt_ou
          + noise.gamma_ou * np.sqrt(noise.dt_ou) * rng.standard_normal())
    noise.current_noise = float(dA)
    noise.gamma_ou = max(noise.k * noise.gamma_ou, noise.floor)
    return float(dA)


@dataclass
class DdpgHyperparams:
    alpha0: float = 1e-3
    beta0: float = 2e-3
    tau: float = 0.01
    gamma: float = 0.98
    N: int = 400
    T: int | None = None
    eps0: float = 0.3
    eps_min: float = 0.01
    lambda_decay: float = 0.05
    M: int = 64
    buffer_capacity: int = 50_000
    actor_hidden: tuple = (64, 64)
    critic_hidden: tuple = (64, 64)
    gamma_ou0: float = 0.2
    # literal (1 - d) factor in the actor loss; False gives the usual DDPG loss
    actor_done_mask: bool = True
    # gradient steps begin once the buffer holds this many transitions
    warmup: int | None = None

    def __post_init__(self):
        self.actor_hidden = tuple(int(h) for h in self.actor_hidden)
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.eps_min > self.eps0:
            raise ValueError("eps_min must not exceed eps0")
        if self.M > self.buffer_capacity:
            raise ValueError("minibatch larger than buffer")
        if self.N < 1:
            raise ValueError("N must be >= 1")


def exploration_prob(step: int, hp: DdpgHyperparams) -> float:
    return hp.eps_min + (hp.eps0 - hp.eps_min) * np.exp(-hp.lambda_decay * step)


def select_action(actor: Mlp, s, step: int, hp: DdpgHyperparams, rng,
                  noise: OuNoiseState | None = None) -> float:
    """Epsilon-greedy choice plus OU noise, clamped to the actor's bound."""
    if step < 1:
        raise ValueError("step counts from 1")
    bound = actor.out_scale
    if rng.random() < exploration_prob(step, hp):
        a = rng.uniform(-bound, bound)
    else:
        a = float(actor(s)[0, 0])
    if noise is not None:
        a = a + ou_step(noise, a, rng)
    return float(np.clip(a, -bound, bound))


@dataclass
class Transition:
    s: np.ndarray
    a: float
    r: float
    s_next: np.ndarray
    d: float


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    d: np.ndarray


class ReplayBuffer:
    """Ring buffer with uniform sampling (with replacement)."""

    def __init__(self, capacity: int, state_dim: int):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, 1))
        self.r = np.zeros((capacity, 1))
        self.s_next = np.zeros((capacity, state_dim))
        self.d = np.zeros((capacity, 1))
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, tr: Transition) -> None:
        i = self._next
        self.s[i] = tr.s
        self.a[i, 0] = tr.a
        self.r[i, 0] = tr.r
        self.s_next[i] = tr.s_next
        self.d[i, 0] = tr.d
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample_indices(self, m: int, rng) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self._size, size=m)

    def sample(self, m: int, rng) -> Batch:
        idx = self.sample_indices(m, rng)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.d[idx])


def make_actor(state_dim: int, hidden, a_bound: float, rng) -> Mlp:
    sizes = [state_dim, *hidden, 1]
    return Mlp(sizes, ["relu"] * len(hidden) + ["tanh"], out_scale=a_bound, rng=rng)


def make_critic(state_dim: int, hidden, rng) -> Mlp:
    # the action joins the state at the input of the first hidden layer
    sizes = [state_dim + 1, *hidden, 1]
    return Mlp(sizes, ["relu"] * len(hidden) + ["linear"], rng=rng, final_init=3e-3)


@dataclass
class DdpgNets:
    actor: Mlp
    critic: Mlp
    actor_target: Mlp
    critic_target: Mlp
    actor_opt: Adam
    critic_opt: Adam

    @classmethod
    def create(cls, state_dim: int, a_bound: float, hp: DdpgHyperparams, rng) -> "DdpgNets":
        actor = make_actor(state_dim, hp.actor_hidden, a_bound, rng)
        critic = make_critic(state_dim, hp.critic_hidden, rng)
        return cls(actor, critic, actor.copy(), critic.copy(),
                   Adam(actor.params, hp.alpha0), Adam(critic.params, hp.beta0))


def critic_targets(batch: Batch, gamma: float, target_actor, target_critic) -> np.ndarray:
    a_next = target_actor(batch.s_next)
    q_next = target_critic(np.hstack([batch.s_next, a_next]))
    return batch.r + gamma * (1.0 - batch.d) * q_next


def critic_loss_and_grads(critic: Mlp, batch: Batch, y: np.ndarray):
    q, cache = critic.forward(np.hstack([batch.s, batch.a]), keep_cache=True)
    err = q - y
    loss = float(np.mean(err ** 2))
    grads, _ = critic.backward(cache, 2.0 * err / len(err))
    return loss, grads


def actor_loss_and_grads(actor: Mlp, critic: Mlp, batch: Batch, done_mask: bool = True):
    a, a_cache = actor.forward(batch.s, keep_cache=True)
    q, c_cache = critic.forward(np.hstack([batch.s, a]), keep_cache=True)
    w = (1.0 - batch.d) if done_mask else np.ones_like(q)
    loss = float(-np.mean(q * w))
    _, d_in = critic.backward(c_cache, -w / len(q))
    grads, _ = actor.backward(a_cache, d_in[:, -1:])
    return loss, grads


def train_step(nets: DdpgNets, batch: Batch, hp: DdpgHyperparams) -> tuple[float, float]:
    """One critic step, one actor step, then soft target updates."""
    y = critic_targets(batch, hp.gamma, nets.actor_target, nets.critic_target)
    L_c, g_c = critic_loss_and_grads(nets.critic, batch, y)
    nets.critic_opt.step(nets.critic.params, g_c)
    L_a, g_a = actor_loss_and_grads(nets.actor, nets.critic, batch, hp.actor_done_mask)
    nets.actor_opt.step(nets.actor.params, g_a)
    soft_update(nets.actor_target, nets.actor, hp.tau)
    soft_update(nets.critic_target, nets.critic, hp.tau)
    return L_c, L_a


@dataclass
class EpisodeMetrics:
    episode: int
    total_reward: float
    final_pos_norm: float
    final_vel_norm: float
    docked: bool
    steps: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainResult:
    actor: Mlp
    nets: DdpgNets
    metrics: list[EpisodeMetrics] = field(default_factory=list)
    buffer: ReplayBuffer | None = None

    def docks_in_final(self, window: int = 50) -> int:
        return sum(m.docked for m in self.metrics[-window:])


def train_ddpg(config: DockingEnvConfig, hp: DdpgHyperparams, reward_params: RewardParams | None,
               seed: int, metrics_path=None, stop_window: int | None = None,
               stop_docks: int | None = None) -> TrainResult:
    """Run Algorithm-1 style training; deterministic for a fixed seed.

    With ``stop_window`` / ``stop_docks`` set, training ends early once the
    last ``stop_window`` episodes contain at least ``stop_docks`` docks.
    """
    reward_params = reward_params or RewardParams()
    rng = np.random.default_rng(seed)
    T = hp.T or config.T
    if T != config.T:
        config = DockingEnvConfig(**{**asdict(config), "T": T})
    nets = DdpgNets.create(config.state_dim, config.a_bound, hp, rng)
    buffer = ReplayBuffer(hp.buffer_capacity, config.state_dim)
    noise = OuNoiseState(gamma_ou=hp.gamma_ou0)
    warmup = hp.M if hp.warmup is None else hp.warmup
    result = TrainResult(nets.actor, nets, [], buffer)
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        for ep in range(hp.N):
            state = env_reset(config, rng)
            s = state.observation(config)
            total = 0.0
            step = 1
            done = False
            while not done:
                a = select_action(nets.actor, s, step, hp, rng, noise)
                state, s_next, r, done, info = env_step(state, a, config, reward_params)
                total += r
                step += 1
                buffer.add(Transition(s, a, r, s_next, float(info["docked"])))
                if len(buffer) >= warmup:
                    train_step(nets, buffer.sample(hp.M, rng), hp)
                s = s_next
            m = EpisodeMetrics(ep, float(total), float(np.linalg.norm(state.rho)),
                               float(np.linalg.norm(state.rho_dot)), bool(state.docked),
                               state.step)
            result.metrics.append(m)
            if fh:
                fh.write(m.to_json() + "\n")
            if stop_window and stop_docks is not None and len(result.metrics) >= stop_window:
                if result.docks_in_final(stop_window) >= stop_docks:
                    break
    finally:
        if fh:
            fh.close()
    return result


@dataclass
class EvalResult:
    docked: int
    n_trials: int
    final_pos: list[float]
    final_vel: list[float]
    trajectories: list[np.ndarray]


def evaluate_policy(policy, config: DockingEnvConfig, n_trials: int, seed: int,
                    reward_params: RewardParams | None = None) -> EvalResult:
    """Greedy rollouts, no exploration; ``policy`` maps an observation to an action."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    docked, fp, fv, trajs = 0, [], [], []
    for _ in range(n_trials):
        state = env_reset(config, rng)
        s = state.observation(config)
        path = [state.rho.copy()]
        done = False
        while not done:
            out = policy(s)
            a = float(np.clip(np.ravel(out)[0], -config.a_bound, config.a_bound))
            state, s, _, done, _ = env_step(state, a, config, reward_params)
            path.append(state.rho.copy())
        docked += int(state.docked)
        fp.append(float(np.linalg.norm(state.rho)))
        fv.append(float(np.linalg.norm(state.rho_dot)))
        trajs.append(np.array(path))
    return EvalResult(docked, n_trials, fp, fv, trajs)
