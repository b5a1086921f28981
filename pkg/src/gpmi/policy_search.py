"""Policy search on a learned model: Monte-Carlo rollouts + BIPOP-CMA-ES.

Each rollout of a policy through the probabilistic model is one noisy
measurement of the policy's expected return; CMA-ES maximizes the mean of
``rollouts_per_eval`` such measurements per candidate.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import pendubot
from .cmaes import CmaConfig, CmaResult, bipop_cmaes
from .policy import DEFAULT_ARCH, PolicyArch, act

log = logging.getLogger(__name__)

ANGLE_LIMIT = 4 * np.pi


@dataclass
class RolloutConfig:
    horizon: int = pendubot.HORIZON
    rollouts_per_eval: int = 2
    mode: str = "sample"              # "sample" or "mean"
    sigma_c: float = 0.25
    reward_params: pendubot.PendubotParams = field(default_factory=lambda: pendubot.ACTUAL)
    start: tuple = tuple(pendubot.HANGING)
    chunk_size: int = 16              # candidates per work unit

    def __post_init__(self):
        if self.horizon < 1 or self.rollouts_per_eval < 1:
            raise ValueError("horizon and rollouts_per_eval must be >= 1")
        if self.mode not in ("sample", "mean"):
            raise ValueError("mode must be 'sample' or 'mean'")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")


@dataclass
class Rollouts:
    returns: np.ndarray       # (B,)
    aborted: np.ndarray       # (B,) bool
    states: np.ndarray        # (B, T + 1, E); NaN after an abort


def _absurd(x):
    return (~np.all(np.isfinite(x), axis=1)
            | np.any(np.abs(x[:, 2:]) > pendubot.OMEGA_LIMIT, axis=1)
            | np.any(np.abs(x[:, :2]) > ANGLE_LIMIT, axis=1))


def rollout_batch(model, thetas, config: RolloutConfig, eps=None,
                  arch: PolicyArch = DEFAULT_ARCH) -> Rollouts:
    """Chain one-step predictions for a batch of policies.

    ``eps`` (B, T, E) are the standard normal draws for sample mode; ``None``
    propagates the predictive mean. A rollout whose state leaves the
    plausible range is stopped and keeps the reward collected so far.
    """
    thetas = np.atleast_2d(thetas)
    B = len(thetas)
    T = config.horizon
    E = model.state_dim
    x = np.tile(np.asarray(config.start, float), (B, 1))
    states = np.full((B, T + 1, E), np.nan)
    states[:, 0] = x
    G = np.zeros(B)
    alive = np.ones(B, bool)
    for t in range(T):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        xa = x[idx]
        u = act(thetas[idx], xa, arch)
        with np.errstate(over="ignore", invalid="ignore"):
            mu, var = model.predict(np.hstack([xa, u]))
            dx = mu if eps is None else mu + np.sqrt(var) * eps[idx, t]
            xn = xa + dx
        bad = _absurd(xn)
        alive[idx[bad]] = False
        ok = idx[~bad]
        x[ok] = xn[~bad]
        states[ok, t + 1] = x[ok]
        G[ok] += pendubot.reward(x[ok], config.reward_params, config.sigma_c)
    return Rollouts(G, ~alive, states)


def rollout_model(model, theta, config: RolloutConfig | None = None, seed=0,
                  arch: PolicyArch = DEFAULT_ARCH):
    """One rollout of ``theta``: returns (G, states, aborted)."""
    cfg = config or RolloutConfig()
    eps = None
    if cfg.mode == "sample":
        eps = np.random.default_rng(seed).standard_normal((1, cfg.horizon, model.state_dim))
    r = rollout_batch(model, np.asarray(theta, float)[None], cfg, eps, arch)
    return float(r.returns[0]), r.states[0], bool(r.aborted[0])


def evaluate_candidates(model, thetas, seeds, config: RolloutConfig,
                        arch: PolicyArch = DEFAULT_ARCH) -> np.ndarray:
    """Mean return over ``rollouts_per_eval`` rollouts for each candidate.

    The draws of candidate ``i`` come only from ``seeds[i]``.
    """
    thetas = np.atleast_2d(thetas)
    R = config.rollouts_per_eval
    rep = np.repeat(thetas, R, axis=0)
    eps = None
    if config.mode == "sample":
        eps = np.concatenate([
            np.random.default_rng(s).standard_normal((R, config.horizon, model.state_dim))
            for s in seeds])
    r = rollout_batch(model, rep, config, eps, arch)
    return r.returns.reshape(len(thetas), R).mean(axis=1)


_WORKER_STATE = {}


def _init_worker(model, config, arch):
    _WORKER_STATE["args"] = (model, config, arch)


def _eval_chunk(chunk):
    thetas, seeds = chunk
    model, config, arch = _WORKER_STATE["args"]
    return evaluate_candidates(model, thetas, seeds, config, arch)


class RolloutObjective:
    """Batch objective for CMA-ES. Work is split into fixed-size chunks of
    candidates, so the arithmetic does not depend on the worker count."""

    def __init__(self, model, config: RolloutConfig, arch: PolicyArch = DEFAULT_ARCH,
                 workers: int = 1):
        self.model = model
        self.config = config
        self.arch = arch
        self.workers = workers
        self.pool = None
        self.calls = 0

    def __enter__(self):
        if self.workers > 1:
            self.pool = ProcessPoolExecutor(self.workers, initializer=_init_worker,
                                            initargs=(self.model, self.config, self.arch))
        return self

    def __exit__(self, *exc):
        if self.pool is not None:
            self.pool.shutdown()
            self.pool = None

    def __call__(self, X, seeds):
        self.calls += len(X)
        c = self.config.chunk_size
        chunks = [(X[i:i + c], seeds[i:i + c]) for i in range(0, len(X), c)]
        if self.pool is not None:
            parts = list(self.pool.map(_eval_chunk, chunks))
        else:
            parts = [evaluate_candidates(self.model, t, s, self.config, self.arch)
                     for t, s in chunks]
        return np.concatenate(parts)


def policy_cma_config(**overrides) -> CmaConfig:
    """Defaults for policy search: weights boxed to [-5, 5]."""
    base = dict(sigma0=1.0, max_fevals=20000, lower=-5.0, upper=5.0)
    base.update(overrides)
    return CmaConfig(**base)


def optimize_policy(model, config: CmaConfig | None = None,
                    rollout_config: RolloutConfig | None = None, seed: int = 0,
                    x0=None, workers: int = 1,
                    arch: PolicyArch = DEFAULT_ARCH) -> tuple[np.ndarray, CmaResult]:
    """Maximize the expected model return of the policy weights.

    Starts from ``x0`` (default: all-zero weights).
    """
    cma_cfg = config or policy_cma_config()
    rcfg = rollout_config or RolloutConfig()
    x0 = np.zeros(arch.n_params) if x0 is None else np.asarray(x0, float)
    with RolloutObjective(model, rcfg, arch, workers) as objective:
        result = bipop_cmaes(objective, x0, cma_cfg, seed=seed)
    log.info("policy search: %d evals, model return %.3f", result.evals, result.score)
    return result.x, result
