"""Experiment harness: the episode loop of model-based policy search with priors.

One replicate alternates between learning a dynamics model from all data
collected so far, optimizing the policy on that model, and running the
policy once on the simulated real pendubot. Variants differ only in the
model they learn:

====================  ================  ==================================
variant               model mode        first episode
====================  ================  ==================================
``blackdrops``        gp_only           random policy, weights ~ N(0, 1)
``blackdrops_prior``  gp_fixed_prior    policy optimized on the prior
``blackdrops_mi``     mi_only           policy optimized on the prior
``blackdrops_gpmi``   gp_mi             policy optimized on the prior
====================  ================  ==================================
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pendubot
from .cmaes import CmaConfig
from .data import TransitionDataset
from .policy import NNPolicy, random_theta
from .priors import ModelConfig, learn_model, pendubot_prior, prior_model
from .policy_search import RolloutConfig, optimize_policy
from .rprop import RpropConfig

log = logging.getLogger(__name__)

VARIANTS = {
    "blackdrops": "gp_only",
    "blackdrops_prior": "gp_fixed_prior",
    "blackdrops_mi": "mi_only",
    "blackdrops_gpmi": "gp_mi",
}
PRIOR_NAMES = ("useful", "tunable", "misleading", "partial", "actual", "none")


class ConfigError(ValueError):
    pass


class NoDataError(RuntimeError):
    pass


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from integer keys."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys])
    return int(ss.generate_state(1)[0])


@dataclass
class RolloutSettings:
    rollouts_per_eval: int = 2
    mode: str = "sample"
    chunk_size: int = 64

    def build(self, horizon: int, sigma_c: float, system) -> RolloutConfig:
        return RolloutConfig(horizon=horizon, rollouts_per_eval=self.rollouts_per_eval,
                             mode=self.mode, sigma_c=sigma_c, reward_params=system,
                             chunk_size=self.chunk_size)


@dataclass
class ModelSettings:
    rprop_iterations: int = 300
    rprop_restarts: int = 3
    warm_iterations: int = 300
    max_outer_evals: int = 50
    outer_ftol_rel: float = 1e-4
    simplex_scale: float = 0.1
    mse_max_evals: int = 5000
    scoring: str = "sum"
    max_fit_points: int | None = None
    max_gp_points: int | None = None
    prior_lower: float = 0.05
    prior_upper: float = 1.5

    def build(self, seed: int, workers: int) -> ModelConfig:
        return ModelConfig(
            rprop=RpropConfig(iterations=self.rprop_iterations, restarts=self.rprop_restarts),
            warm_rprop=RpropConfig(iterations=self.warm_iterations, restarts=1),
            max_outer_evals=self.max_outer_evals, outer_ftol_rel=self.outer_ftol_rel,
            simplex_scale=self.simplex_scale, mse_max_evals=self.mse_max_evals,
            scoring=self.scoring, seed=seed, workers=workers,
            max_fit_points=self.max_fit_points, max_gp_points=self.max_gp_points)


@dataclass
class OracleSettings:
    """Budget of the reference optimization on the true dynamics."""
    restarts: int = 1
    cma: CmaConfig = field(default_factory=lambda: CmaConfig(
        sigma0=3.0, popsize=128, max_fevals=200_000, lower=-5.0, upper=5.0,
        reeval=1, n_final=5, noise_handling=False))


def _default_cma():
    return CmaConfig(sigma0=1.0, max_fevals=20_000, lower=-5.0, upper=5.0)


@dataclass
class ExperimentConfig:
    variant: str = "blackdrops_gpmi"
    prior: str = "useful"
    episodes: int = 26
    replicates: int = 1
    seed: int = 0
    workers: int = 1
    output_dir: str = "results"
    noise_sd: float = 0.0
    sigma_c: float = 0.25
    horizon: int = pendubot.HORIZON
    system: pendubot.PendubotParams = field(default_factory=lambda: pendubot.ACTUAL)
    solve_threshold: float | None = None      # 0.9 R*; None disables the check
    stop_when_solved: bool = False
    warm_start_policy: bool = True
    rollout: RolloutSettings = field(default_factory=RolloutSettings)
    cma: CmaConfig = field(default_factory=_default_cma)
    model: ModelSettings = field(default_factory=ModelSettings)
    oracle: OracleSettings = field(default_factory=OracleSettings)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.prior not in PRIOR_NAMES:
            raise ConfigError(f"unknown prior {self.prior!r}; expected one of {PRIOR_NAMES}")
        if (self.variant == "blackdrops") != (self.prior == "none"):
            raise ConfigError("variant 'blackdrops' requires prior 'none'; the others need a prior")
        if self.replicates < 1 or self.episodes < 1:
            raise ConfigError("episodes and replicates must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be non-negative")

    @property
    def mode(self) -> str:
        return VARIANTS[self.variant]

    @property
    def label(self) -> str:
        return f"{self.variant}__{self.prior}"

    def prior_params(self) -> pendubot.PendubotParams | None:
        if self.prior == "none":
            return None
        if self.prior == "actual":
            return self.system
        return pendubot.PRIORS[self.prior]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_dict(cls, d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_json(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def save(self, path):
        Path(path).write_text(self.to_json())


def _from_dict(cls, d):
    if not isinstance(d, dict):
        raise ConfigError(f"expected a table for {cls.__name__}, got {type(d).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for key, value in d.items():
        default = names[key].default_factory if names[key].default_factory is not \
            dataclasses.MISSING else None
        sample = default() if default else None
        if dataclasses.is_dataclass(sample):
            kwargs[key] = _from_dict(type(sample), value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


@dataclass
class EpisodeResult:
    episode: int
    reward: float
    aborted: bool
    phi: list | None
    model_score: float | None
    model_return: float | None
    theta: list


@dataclass
class RunResults:
    variant: str
    prior: str
    replicate: int
    seed: int
    episodes: list = field(default_factory=list)     # EpisodeResult per episode
    status: str = "ok"
    error: str | None = None
    solved_episode: int | None = None
    episode_length_s: float = pendubot.HORIZON * pendubot.DT
    timing: list = field(default_factory=list)       # wall-clock per phase; kept out of results.json

    @property
    def rewards(self) -> list:
        return [e.reward for e in self.episodes]

    @property
    def interaction_time(self) -> float:
        return len(self.episodes) * self.episode_length_s

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("timing")
        d["interaction_time_s"] = self.interaction_time
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunResults":
        d = dict(d)
        d.pop("interaction_time_s", None)
        eps = [EpisodeResult(**e) for e in d.pop("episodes")]
        return cls(episodes=eps, **d)


def run_dir(config: ExperimentConfig, replicate: int) -> Path:
    return Path(config.output_dir) / config.label / f"rep_{replicate:03d}"


def _prior(config: ExperimentConfig):
    params = config.prior_params()
    if params is None:
        return None
    m = config.model
    return pendubot_prior(params, pendubot.TUNABLE, m.prior_lower, m.prior_upper)


def _write_trace(path: Path, episode: int, trace, append: bool):
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["episode", "generation", "best_model_return"])
        for g, v in enumerate(trace):
            w.writerow([episode, g, repr(float(v))])


def run_replicate(config: ExperimentConfig, replicate: int = 0,
                  out: Path | None = None) -> RunResults:
    """Run the episode loop for one replicate; never raises on module errors."""
    seed = derive_seed(config.seed, replicate)
    res = RunResults(config.variant, config.prior, replicate, seed)
    res.episode_length_s = config.horizon * pendubot.DT
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.json")
    prior = _prior(config)
    rcfg = config.rollout.build(config.horizon, config.sigma_c, config.system)
    data = TransitionDataset.empty(pendubot.STATE_DIM, pendubot.ACTION_DIM)
    theta = None
    try:
        for ep in range(config.episodes):
            timing = {"episode": ep}
            model = None
            t0 = time.perf_counter()
            if ep == 0:
                if prior is None:
                    theta = random_theta(np.random.default_rng(derive_seed(seed, 1)))
                else:
                    model = prior_model(prior)
            else:
                mcfg = config.model.build(derive_seed(seed, 2, ep), config.workers)
                model = learn_model(data, prior, config.mode, mcfg)
            timing["model_s"] = time.perf_counter() - t0

            model_return = None
            t0 = time.perf_counter()
            if model is not None:
                x0 = theta if (config.warm_start_policy and theta is not None) else None
                theta, cma = optimize_policy(model, config.cma, rcfg,
                                             seed=derive_seed(seed, 3, ep), x0=x0,
                                             workers=config.workers)
                model_return = float(cma.score)
                if out is not None:
                    _write_trace(out / "optimization.csv", ep, cma.trace, append=ep > 0)
            timing["policy_s"] = time.perf_counter() - t0

            rec = pendubot.run_episode(NNPolicy(theta), config.system, config.noise_sd,
                                       seed=derive_seed(seed, 4, ep), horizon=config.horizon,
                                       sigma_c=config.sigma_c)
            timing["episode_s"] = rec.wall_time
            new = TransitionDataset(rec.inputs, rec.targets, pendubot.STATE_DIM,
                                    pendubot.ACTION_DIM)
            data = data.extend(new)
            if out is not None:
                new.to_csv(out / "transitions.csv", extra={"episode": ep}, append=ep > 0)

            phi = None
            score = None
            if model is not None and model.phi is not None:
                phi = [float(v) for v in np.atleast_1d(model.phi)]
            if model is not None and np.isfinite(model.score):
                score = float(model.score)
            res.episodes.append(EpisodeResult(ep + 1, rec.cumulative_reward, rec.aborted,
                                              phi, score, model_return,
                                              [float(v) for v in theta]))
            res.timing.append(timing)
            log.info("%s rep %d episode %d: reward %.4f", config.label, replicate, ep + 1,
                     rec.cumulative_reward)
            if (config.solve_threshold is not None and res.solved_episode is None
                    and rec.cumulative_reward >= config.solve_threshold):
                res.solved_episode = ep + 1
                if config.stop_when_solved:
                    break
    except Exception as exc:  # recorded; the caller moves on to the next replicate
        res.status = "failed"
        res.error = f"{type(exc).__name__}: {exc}"
        log.error("%s rep %d failed:\n%s", config.label, replicate, traceback.format_exc())
    if out is not None:
        (out / "results.json").write_text(res.to_json())
        (out / "timing.json").write_text(json.dumps(res.timing, indent=2) + "\n")
    return res


def run_experiment(config: ExperimentConfig, replicates=None,
                   write: bool = True) -> list[RunResults]:
    """Run the requested replicates (default: all) and write their directories."""
    reps = range(config.replicates) if replicates is None else replicates
    return [run_replicate(config, k, run_dir(config, k) if write else None) for k in reps]


def best_so_far(rewards, length: int | None = None) -> np.ndarray:
    """Running maximum, carried forward to ``length`` episodes."""
    best = np.maximum.accumulate(np.asarray(rewards, float))
    if length is not None and len(best) < length:
        fill = best[-1] if len(best) else np.nan
        best = np.concatenate([best, np.full(length - len(best), fill)])
    return best


def load_results(results_dir) -> dict:
    """All results.json under ``results_dir`` grouped by (variant, prior)."""
    groups = {}
    for path in sorted(Path(results_dir).rglob("results.json")):
        res = RunResults.from_dict(json.loads(path.read_text()))
        cfg_path = path.parent / "config.json"
        episodes = (ExperimentConfig.load(cfg_path).episodes if cfg_path.exists()
                    else len(res.episodes))
        groups.setdefault((res.variant, res.prior), []).append((res, episodes))
    return groups


def emit_curves(results_dir, out_dir=None) -> list[Path]:
    """Per (variant, prior): episode, interaction_s, median, p25, p75 of the
    best reward so far across replicates (linear-interpolation percentiles).
    Runs that stopped early carry their best value forward."""
    groups = load_results(results_dir)
    if not groups:
        raise NoDataError(f"no results.json found under {results_dir}")
    out_dir = Path(out_dir or results_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for (variant, prior), runs in sorted(groups.items()):
        runs = [(r, n) for r, n in runs if r.episodes]
        if not runs:
            continue
        length = max(n for _, n in runs)
        curves = np.array([best_so_far(r.rewards, length) for r, _ in runs])
        ep_len = runs[0][0].episode_length_s
        p25, med, p75 = np.percentile(curves, [25, 50, 75], axis=0)
        path = out_dir / f"curve_{variant}__{prior}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "interaction_s", "median", "p25", "p75"])
            for i in range(length):
                w.writerow([i + 1, repr((i + 1) * ep_len), repr(float(med[i])),
                            repr(float(p25[i])), repr(float(p75[i]))])
        written.append(path)
    if not written:
        raise NoDataError(f"no completed episodes under {results_dir}")
    return written


def episodes_to_solve(rewards, threshold: float) -> float:
    """First episode (1-based) whose reward reaches ``threshold``; inf if none."""
    for i, r in enumerate(rewards):
        if r >= threshold:
            return float(i + 1)
    return float("inf")


def oracle_reward(config: ExperimentConfig) -> dict:
    """Reference return R*: policy search directly on the true dynamics.

    Search ``k`` uses the seed and start point of the first-episode search of
    replicate ``k``, so an agent whose prior is the true system and whose CMA
    settings equal ``config.oracle.cma`` reproduces R* in its first episode.
    R* is the best of ``config.oracle.restarts`` searches, each scored on the
    real system.
    """
    model = prior_model(pendubot_prior(config.system))
    rcfg = RolloutConfig(horizon=config.horizon, rollouts_per_eval=1, mode="mean",
                         sigma_c=config.sigma_c, reward_params=config.system,
                         chunk_size=config.rollout.chunk_size)
    best = None
    runs = []
    for k in range(config.oracle.restarts):
        seed = derive_seed(derive_seed(config.seed, k), 3, 0)
        theta, _ = optimize_policy(model, config.oracle.cma, rcfg, seed=seed,
                                   workers=config.workers)
        rec = pendubot.run_episode(NNPolicy(theta), config.system, 0.0, seed=0,
                                   horizon=config.horizon, sigma_c=config.sigma_c)
        runs.append(rec.cumulative_reward)
        if best is None or rec.cumulative_reward > best[0]:
            best = (rec.cumulative_reward, theta)
    return {"r_star": best[0], "solve_threshold": 0.9 * best[0],
            "theta": [float(v) for v in best[1]], "restart_rewards": runs}
