"""Bayesian-optimisation tuner: GP surrogate, expected improvement, resumable loop.

Objectives are maximised.  Inputs are handled in the unit cube; a
:class:`SearchSpace` maps between unit coordinates and configurations.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, optimize, stats
from scipy.stats import qmc

N_CANDIDATES = 4096
N_REFINE = 8
_DEDUP_TOL = 1e-9


class GpNumericalError(RuntimeError):
    pass


# ------------------------------------------------------------------ search space

@dataclass(frozen=True)
class Dimension:
    name: str
    lower: float
    upper: float
    scale: str = "linear"
    kind: str = "continuous"

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"{self.name}: need lower < upper")
        if self.scale not in ("linear", "log"):
            raise ValueError(f"{self.name}: scale must be linear or log")
        if self.scale == "log" and self.lower <= 0:
            raise ValueError(f"{self.name}: log scale needs lower > 0")
        if self.kind not in ("continuous", "integer"):
            raise ValueError(f"{self.name}: kind must be continuous or integer")

    def from_unit(self, u: float):
        u = min(max(float(u), 0.0), 1.0)
        if self.scale == "log":
            lo, hi = math.log(self.lower), math.log(self.upper)
            v = math.exp(lo + u * (hi - lo))
        else:
            v = self.lower + u * (self.upper - self.lower)
        if self.kind == "integer":
            return int(min(max(round(v), math.ceil(self.lower)), math.floor(self.upper)))
        return min(max(v, self.lower), self.upper)

    def to_unit(self, v) -> float:
        v = float(v)
        if self.scale == "log":
            lo, hi = math.log(self.lower), math.log(self.upper)
            return (math.log(v) - lo) / (hi - lo)
        return (v - self.lower) / (self.upper - self.lower)


@dataclass
class SearchSpace:
    dims: list[Dimension]

    def __post_init__(self):
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ValueError("duplicate dimension names")
        if not names:
            raise ValueError("empty search space")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def from_unit(self, u) -> dict:
        return {d.name: d.from_unit(x) for d, x in zip(self.dims, u)}

    def to_unit(self, config: dict) -> np.ndarray:
        return np.array([d.to_unit(config[d.name]) for d in self.dims])

    def snap(self, u) -> np.ndarray:
        """Unit coordinates of the configuration ``u`` decodes to (integer rounding)."""
        return self.to_unit(self.from_unit(u))


# ------------------------------------------------------------------------ GP

@dataclass
class GpSurrogate:
    X: np.ndarray
    y: np.ndarray
    lengthscales: np.ndarray
    signal_var: float
    noise_var: float
    mean: float
    L: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)

    @property
    def n_obs(self) -> int:
        return len(self.y)


def se_kernel(A, B, lengthscales, signal_var):
    A = np.atleast_2d(A) / lengthscales
    B = np.atleast_2d(B) / lengthscales
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return signal_var * np.exp(-0.5 * np.maximum(d2, 0.0))


def _dedupe(X, y):
    keep_X, keep_y = [], []
    for x, v in zip(X, y):
        for k, kx in enumerate(keep_X):
            if np.max(np.abs(kx - x)) < _DEDUP_TOL:
                keep_y[k].append(v)
                break
        else:
            keep_X.append(x)
            keep_y.append([v])
    return np.array(keep_X), np.array([np.mean(v) for v in keep_y])


def _chol(K):
    if not np.all(np.isfinite(K)):
        raise GpNumericalError("kernel matrix has non-finite entries")
    jitter = 0.0
    scale = max(float(np.mean(np.diag(K))), 1e-300)
    for _ in range(8):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(len(K)))
        except np.linalg.LinAlgError:
            jitter = scale * 1e-10 if jitter == 0.0 else jitter * 10.0
    raise GpNumericalError("kernel matrix not positive definite after jitter")


def _neg_log_marginal(theta, D2, yc, eye):
    d = len(D2)
    K = math.exp(theta[d]) * np.exp(-0.5 * np.tensordot(np.exp(-2.0 * theta[:d]), D2, 1))
    K += math.exp(theta[d + 1]) * eye
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return 1e25
    a = linalg.solve_triangular(L, yc, lower=True, check_finite=False)
    return 0.5 * a @ a + np.log(np.diag(L)).sum() + 0.5 * len(yc) * math.log(2 * math.pi)


def gp_fit(X, y, lengthscales=None, signal_var=None, noise_var=None, rng=None,
           n_restarts: int = 3) -> GpSurrogate:
    """Exact GP regression with a constant prior mean (the sample mean).

    Kernel hyperparameters left as None are chosen by maximising the marginal
    likelihood with multistart Nelder-Mead in log space.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(y) < 1 or len(X) != len(y):
        raise ValueError("need at least one observation and matching X / y")
    if not np.all(np.isfinite(y)):
        raise ValueError("objective values must be finite")
    X, y = _dedupe(X, y)
    n, d = X.shape
    mu = float(y.mean())
    yc = y - mu
    spread = float(np.var(y)) if n > 1 and np.var(y) > 0 else max(abs(mu), 1.0)

    fixed = lengthscales is not None and signal_var is not None and noise_var is not None
    if fixed:
        ls = np.broadcast_to(np.asarray(lengthscales, float), (d,)).copy()
        sf2, sn2 = float(signal_var), float(noise_var)
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        lo = np.r_[np.full(d, math.log(0.02)), math.log(spread * 1e-2), math.log(spread * 1e-8)]
        hi = np.r_[np.full(d, math.log(5.0)), math.log(spread * 1e2), math.log(spread * 0.5)]
        if lengthscales is not None:
            lo[:d] = hi[:d] = np.log(np.broadcast_to(np.asarray(lengthscales, float), (d,)))
        if signal_var is not None:
            lo[d] = hi[d] = math.log(signal_var)
        if noise_var is not None:
            lo[d + 1] = hi[d + 1] = math.log(noise_var)
        start0 = np.r_[np.full(d, math.log(0.3)), math.log(spread), math.log(spread * 1e-4)]
        starts = [np.clip(start0, lo, hi)] + [rng.uniform(lo, hi) for _ in range(n_restarts - 1)]
        D2 = (X.T[:, :, None] - X.T[:, None, :]) ** 2
        best = None
        for s0 in starts:
            res = optimize.minimize(_neg_log_marginal, s0, args=(D2, yc, np.eye(n)),
                                    method="Nelder-Mead",
                                    bounds=list(zip(lo, hi)),
                                    options={"maxiter": 100 * (d + 2), "xatol": 1e-3,
                                             "fatol": 1e-6})
            if best is None or res.fun < best.fun:
                best = res
        theta = best.x
        ls, sf2, sn2 = np.exp(theta[:d]), math.exp(theta[d]), math.exp(theta[d + 1])

    K = se_kernel(X, X, ls, sf2) + sn2 * np.eye(n)
    L = _chol(K)
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, yc))
    return GpSurrogate(X, y, ls, sf2, sn2, mu, L, alpha)


def gp_predict(gp: GpSurrogate, x):
    """Posterior mean and latent-function variance at the rows of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    k = se_kernel(x, gp.X, gp.lengthscales, gp.signal_var)
    mean = gp.mean + k @ gp.alpha
    v = np.linalg.solve(gp.L, k.T)
    var = np.maximum(gp.signal_var - (v * v).sum(0), 0.0)
    return mean, var


def expected_improvement(mean, variance, best_so_far):
    """EI for maximisation; reduces to max(mean - best, 0) at zero variance."""
    mean = np.asarray(mean, dtype=float)
    sigma = np.sqrt(np.maximum(np.asarray(variance, dtype=float), 0.0))
    imp = mean - best_so_far
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, imp / np.where(sigma > 0, sigma, 1.0), 0.0)
    ei = np.where(sigma > 0, imp * stats.norm.cdf(z) + sigma * stats.norm.pdf(z),
                  np.maximum(imp, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


# ---------------------------------------------------------------- proposals

def _sobol(d, n, rng):
    m = max(int(math.ceil(math.log2(max(n, 1)))), 0)
    seed = int(rng.integers(2**63 - 1))
    return qmc.Sobol(d, scramble=True, seed=seed).random_base2(m)[:n]


def _neg_ei_and_grad(x, gp: GpSurrogate, best: float):
    """Negative EI at one point and its gradient, for the local polish."""
    x = np.asarray(x, dtype=float)
    k = se_kernel(x[None, :], gp.X, gp.lengthscales, gp.signal_var)[0]
    dk = -(k[:, None] * (x - gp.X) / gp.lengthscales ** 2)
    v = np.linalg.solve(gp.L, k)
    var = gp.signal_var - v @ v
    mean = gp.mean + k @ gp.alpha
    d_mean = dk.T @ gp.alpha
    if var <= 1e-300:
        imp = mean - best
        return -max(imp, 0.0), (-d_mean if imp > 0 else np.zeros_like(x))
    sigma = math.sqrt(var)
    d_sigma = -(dk.T @ np.linalg.solve(gp.L.T, v)) / sigma
    z = (mean - best) / sigma
    cdf, pdf = stats.norm.cdf(z), stats.norm.pdf(z)
    ei = (mean - best) * cdf + sigma * pdf
    return -ei, -(cdf * d_mean + pdf * d_sigma)


def propose_next(gp: GpSurrogate | None, space: SearchSpace, rng, evaluated=None) -> dict:
    """Maximise EI over a scrambled Sobol set, polishing the best few locally.

    Falls back to a quasi-random draw with no observations.  The result never
    coincides with a row of ``evaluated`` (unit coordinates).
    """
    d = space.ndim
    if evaluated is None:
        evaluated = gp.X if gp is not None else np.zeros((0, d))
    evaluated = np.atleast_2d(np.asarray(evaluated, float)).reshape(-1, d)
    if gp is None or gp.n_obs == 0:
        u = _sobol(d, 1, rng)[0]
    else:
        best = float(gp.y.max())
        cand = _sobol(d, N_CANDIDATES, rng)
        ei = expected_improvement(*gp_predict(gp, cand), best)
        order = np.argsort(-ei, kind="stable")[:N_REFINE]
        u, u_val = cand[order[0]], -ei[order[0]]
        for i in order:
            res = optimize.minimize(_neg_ei_and_grad, cand[i], args=(gp, best), jac=True,
                                    method="L-BFGS-B", bounds=[(0.0, 1.0)] * d)
            if res.fun < u_val:
                u, u_val = np.clip(res.x, 0.0, 1.0), res.fun
    u = space.snap(u)
    for _ in range(100):
        if len(evaluated) == 0 or np.min(np.max(np.abs(evaluated - u), axis=1)) > _DEDUP_TOL:
            break
        u = space.snap(np.clip(u + rng.normal(scale=0.05, size=d), 0.0, 1.0))
    return space.from_unit(u)


# ---------------------------------------------------------------- objectives

def objective_final_docks(metrics, window: int = 50, validation_docks: int | None = None,
                          n_validation: int = 5) -> float:
    """Docks among the final ``window`` episodes.

    With ``validation_docks`` given, returns ``-(n_validation - docks)`` instead,
    a value in ``[-n_validation, 0]``.
    """
    if validation_docks is not None:
        if not 0 <= validation_docks <= n_validation:
            raise ValueError("validation_docks out of range")
        return -float(n_validation - validation_docks)
    if window < 1 or len(metrics) < window:
        raise ValueError(f"need at least {window} episodes, got {len(metrics)}")
    return float(sum(bool(getattr(m, "docked", m)) for m in list(metrics)[-window:]))


# ------------------------------------------------------------------ the loop

@dataclass
class Evaluation:
    iteration: int
    config: dict
    objective: float | None
    seed: int
    duration: float
    failed: bool = False
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


@dataclass
class TuneResult:
    best_config: dict | None
    best_objective: float
    history: list[Evaluation]

    def running_best(self) -> np.ndarray:
        vals = [e.objective if not e.failed else -np.inf for e in self.history]
        return np.maximum.accumulate(vals)


def derived_seed(seed: int, iteration: int, replicate: int = 0) -> int:
    return int(np.random.SeedSequence([seed, iteration, replicate]).generate_state(1)[0])


def _fit_values(history):
    ok = [e.objective for e in history if not e.failed]
    worst = min(ok) if ok else 0.0
    return [e.objective if not e.failed else worst for e in history]


def tune(objective, space: SearchSpace, n_init: int = 5, n_iter: int = 20, seed: int = 0,
         history_path=None, resume: bool = False, replications: int = 1) -> TuneResult:
    """Sequential BO.  ``objective(config, seed) -> float`` is maximised.

    Every evaluation is appended to ``history_path`` (JSONL) as it finishes; with
    ``resume`` the recorded evaluations are reused and the run continues from
    where it stopped.  Ties keep the earliest iteration.
    """
    if n_init < 2 or n_iter < 0 or replications < 1:
        raise ValueError("need n_init >= 2, n_iter >= 0, replications >= 1")
    history: list[Evaluation] = []
    if history_path is not None and resume and Path(history_path).exists():
        for line in Path(history_path).read_text().splitlines():
            if line.strip():
                history.append(Evaluation(**json.loads(line)))
    elif history_path is not None:
        Path(history_path).write_text("")
    init_u = _sobol(space.ndim, n_init, np.random.default_rng([seed, 0xB0]))

    for it in range(len(history), n_init + n_iter):
        if it < n_init:
            config = space.from_unit(init_u[it])
        else:
            X = np.array([space.to_unit(e.config) for e in history])
            gp = gp_fit(X, _fit_values(history), rng=np.random.default_rng([seed, it, 1]))
            config = propose_next(gp, space, np.random.default_rng([seed, it, 2]), evaluated=X)
        run_seed = derived_seed(seed, it)
        t0 = time.perf_counter()
        try:
            vals = [float(objective(config, derived_seed(seed, it, r)))
                    for r in range(replications)]
            val, failed, err = float(np.mean(vals)), not np.isfinite(np.mean(vals)), None
            if failed:
                err = "non-finite objective"
        except Exception as exc:  # a failed training must not end the campaign
            val, failed, err = None, True, f"{type(exc).__name__}: {exc}"
        if failed:
            ok = [e.objective for e in history if not e.failed]
            val = min(ok) if ok else None
        ev = Evaluation(it, config, val, run_seed, time.perf_counter() - t0, failed, err)
        history.append(ev)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(ev.to_json() + "\n")

    best_i = None
    for i, e in enumerate(history):
        if not e.failed and (best_i is None or e.objective > history[best_i].objective):
            best_i = i
    if best_i is None:
        return TuneResult(None, -np.inf, history)
    return TuneResult(dict(history[best_i].config), history[best_i].objective, history)


def random_search(objective, space: SearchSpace, n_eval: int, seed: int) -> TuneResult:
    """Uniform random baseline with the same bookkeeping as :func:`tune`."""
    rng = np.random.default_rng(seed)
    history = []
    for it in range(n_eval):
        config = space.from_unit(rng.random(space.ndim))
        t0 = time.perf_counter()
        val = float(objective(config, derived_seed(seed, it)))
        history.append(Evaluation(it, config, val, derived_seed(seed, it),
                                  time.perf_counter() - t0))
    best = max(history, key=lambda e: e.objective)
    return TuneResult(dict(best.config), best.objective, history)


# ------------------------------------------------------------ DDPG wiring

def ddpg_search_space() -> SearchSpace:
    return SearchSpace([
        Dimension("alpha0", 1e-4, 1e-2, "log"),
        Dimension("beta0", 1e-4, 1e-2, "log"),
        Dimension("tau", 1e-3, 0.1, "log"),
        Dimension("eps0", 0.05, 0.8),
        Dimension("lambda_decay", 1e-3, 0.5, "log"),
        Dimension("width", 16, 256, "log", "integer"),
        Dimension("depth", 1, 3, "linear", "integer"),
        Dimension("c2", 1e-3, 0.1, "log"),
        Dimension("R_docked", 1.0, 50.0, "log"),
    ])


def ddpg_candidate(config: dict, base_hp=None, base_reward=None):
    """Split a tuner configuration into DDPG hyperparameters and reward constants."""
    from dataclasses import asdict

    from .ddpg import DdpgHyperparams, RewardParams
    hp = asdict(base_hp) if base_hp is not None else {}
    rp = asdict(base_reward) if base_reward is not None else {}
    for k, v in config.items():
        if k in ("width", "depth"):
            continue
        if k in DdpgHyperparams.__dataclass_fields__:
            hp[k] = v
        elif k in RewardParams.__dataclass_fields__:
            rp[k] = v
        else:
            raise ValueError(f"unknown tuning dimension {k!r}")
    if "width" in config or "depth" in config:
        width = int(config.get("width", 64))
        depth = int(config.get("depth", 2))
        hp["actor_hidden"] = hp["critic_hidden"] = (width,) * depth
    if "eps0" in config:
        hp["eps_min"] = min(hp.get("eps_min", 0.01), config["eps0"])
    return DdpgHyperparams(**hp), RewardParams(**rp)


def make_ddpg_objective(env_config, base_hp=None, base_reward=None, mode: str = "window",
                        window: int = 50, n_validation: int = 5, validation_config=None):
    """Objective closure running one full DDPG training per call.

    ``mode="window"`` scores docks in the final ``window`` training episodes;
    ``mode="validation"`` scores greedy validation docks as ``-(5 - docks)``.
    """
    from .ddpg import evaluate_policy, train_ddpg
    if mode not in ("window", "validation"):
        raise ValueError("mode must be window or validation")

    def objective(config, seed):
        hp, rp = ddpg_candidate(config, base_hp, base_reward)
        res = train_ddpg(env_config, hp, rp, seed)
        if mode == "window":
            return objective_final_docks(res.metrics, window)
        ev = evaluate_policy(res.actor, validation_config or env_config, n_validation,
                             seed + 1, rp)
        return objective_final_docks(res.metrics, validation_docks=ev.docked,
                                     n_validation=n_validation)

    return objective
