"""Dynamics models built from tunable black-box priors.

A prior is a simulator ``M(x~, phi)`` predicting the state difference for
state-action inputs ``x~``; ``phi`` are its tunable parameters. Four ways of
turning data plus a prior into a dynamics model are provided:

``gp_only``         GPs with a zero mean (no prior)
``gp_fixed_prior``  GPs whose mean is the prior at its nominal parameters
``gp_mi``           GP-MI: search ``phi`` with a gradient-free local optimizer,
                    scoring each candidate by the combined marginal
                    likelihoods of per-dimension GPs whose kernels are
                    optimized with ``phi`` fixed
``mi_only``         pure model identification by least squares; no GP
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import nlopt
import numpy as np
from scipy.special import logsumexp

from . import pendubot
from .data import TransitionDataset
from .gp import (FittedGP, GPFitError, KernelHyperParams, LikelihoodProblem, fit,
                 optimize_kernel, pairwise_sqdiff)
from .rprop import RpropConfig

log = logging.getLogger(__name__)

MODES = ("gp_only", "gp_fixed_prior", "gp_mi", "mi_only")
SCORING = ("sum", "product", "harmonic")


@dataclass(frozen=True)
class PriorParameterSpace:
    """Continuous box (``lower``, ``upper``, ``initial``) or a finite list of
    ``candidates`` with optional ``labels``."""

    kind: str
    names: tuple = ()
    lower: tuple = ()
    upper: tuple = ()
    initial: tuple = ()
    candidates: tuple = ()
    labels: tuple = ()

    def __post_init__(self):
        if self.kind == "continuous":
            lo, hi, x0 = (np.asarray(v, float) for v in (self.lower, self.upper, self.initial))
            if not (len(lo) == len(hi) == len(x0) and len(lo) > 0):
                raise ValueError("bounds and initial point must have equal, nonzero length")
            if np.any(lo >= hi):
                raise ValueError("lower bound must be below upper bound")
            if np.any(x0 < lo) or np.any(x0 > hi):
                raise ValueError("initial point outside the bounds")
        elif self.kind == "discrete":
            if len(self.candidates) == 0:
                raise ValueError("discrete space needs at least one candidate")
            if self.labels and len(self.labels) != len(self.candidates):
                raise ValueError("one label per candidate")
        else:
            raise ValueError(f"unknown parameter space kind {self.kind!r}")

    @classmethod
    def box(cls, names, lower, upper, initial) -> "PriorParameterSpace":
        return cls("continuous", tuple(names), tuple(map(float, lower)),
                   tuple(map(float, upper)), tuple(map(float, initial)))

    @classmethod
    def choices(cls, candidates, labels=(), names=()) -> "PriorParameterSpace":
        cands = tuple(tuple(map(float, np.atleast_1d(c))) for c in candidates)
        return cls("discrete", tuple(names), candidates=cands, labels=tuple(labels))

    @property
    def dim(self) -> int:
        if self.kind == "continuous":
            return len(self.lower)
        return len(self.candidates[0])

    def clamp(self, phi):
        if self.kind != "continuous":
            return np.asarray(phi, float)
        return np.clip(np.asarray(phi, float), self.lower, self.upper)


class PendubotPrior:
    """Pendubot simulator as a prior: one RK4 control step per input.

    ``phi`` overrides the parameters named in ``tunable``; the others stay
    at ``base``. Inputs are rows ``(theta1, theta2, omega1, omega2, u)``.
    """

    def __init__(self, base: pendubot.PendubotParams, tunable=pendubot.TUNABLE,
                 dt=pendubot.DT, substeps=pendubot.SUBSTEPS):
        self.base = base
        self.tunable = tuple(tunable)
        self.dt = dt
        self.substeps = substeps

    def params(self, phi) -> pendubot.PendubotParams:
        phi = np.atleast_1d(np.asarray(phi, float))
        return self.base.replace(**{k: float(v) for k, v in zip(self.tunable, phi)})

    def __call__(self, X, phi):
        X = np.atleast_2d(np.asarray(X, float))
        p = self.params(phi)
        x, u = X[:, :pendubot.STATE_DIM], X[:, pendubot.STATE_DIM]
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = pendubot.rk4(x, np.clip(u, -pendubot.U_MAX, pendubot.U_MAX), p,
                               self.dt, self.substeps)
        return nxt - x


@dataclass
class TunableMeanPrior:
    """Black-box ``evaluator(X, phi) -> (n, E)`` with its parameter space.

    ``nominal`` is the parameter vector the prior comes with; it is the
    starting point of a continuous search.
    """

    evaluator: object
    space: PriorParameterSpace
    state_dim: int
    action_dim: int
    nominal: tuple = ()

    def __post_init__(self):
        if not self.nominal:
            if self.space.kind == "continuous":
                self.nominal = tuple(self.space.initial)
            else:
                self.nominal = tuple(self.space.candidates[0])

    def __call__(self, X, phi=None):
        phi = self.nominal if phi is None else phi
        out = np.asarray(self.evaluator(X, phi), float)
        return out.reshape(len(np.atleast_2d(X)), self.state_dim)


def pendubot_prior(params: pendubot.PendubotParams, tunable=pendubot.TUNABLE,
                   lower=0.05, upper=1.5) -> TunableMeanPrior:
    """Continuous prior over the ``tunable`` pendubot parameters, starting at
    the values in ``params``."""
    x0 = [getattr(params, k) for k in tunable]
    space = PriorParameterSpace.box(tunable, [lower] * len(tunable),
                                    [upper] * len(tunable), x0)
    return TunableMeanPrior(PendubotPrior(params, tunable), space,
                            pendubot.STATE_DIM, pendubot.ACTION_DIM)


def pendubot_discrete_prior(candidates, labels=(), base=pendubot.ACTUAL,
                            tunable=pendubot.TUNABLE) -> TunableMeanPrior:
    """Finite set of pendubot models; each candidate gives ``tunable`` values."""
    space = PriorParameterSpace.choices(candidates, labels, tunable)
    return TunableMeanPrior(PendubotPrior(base, tunable), space,
                            pendubot.STATE_DIM, pendubot.ACTION_DIM)


class _Column:
    """Picklable ``X -> M(X, phi)[:, i]`` used as the mean of one GP."""

    def __init__(self, prior, phi, i):
        self.prior, self.phi, self.i = prior, phi, i

    def __call__(self, X):
        return self.prior(X, self.phi)[:, self.i]


@dataclass
class ModelConfig:
    rprop: RpropConfig = field(default_factory=RpropConfig)
    # inner Rprop once warm-started from the previous outer iteration
    warm_rprop: RpropConfig = field(default_factory=lambda: RpropConfig(restarts=1))
    max_outer_evals: int = 50
    outer_ftol_rel: float = 1e-4
    simplex_scale: float = 0.1
    mse_max_evals: int = 5000
    scoring: str = "sum"
    seed: int = 0
    workers: int = 1
    # hyperparameter and phi search use at most this many evenly spaced
    # transitions
    max_fit_points: int | None = None
    # the returned GPs condition on at most this many (None: all data)
    max_gp_points: int | None = None

    def __post_init__(self):
        for name in ("max_fit_points", "max_gp_points"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be positive")
        if self.scoring not in SCORING:
            raise ValueError(f"scoring must be one of {SCORING}")
        if self.max_outer_evals < 1 or self.mse_max_evals < 1:
            raise ValueError("evaluation budgets must be positive")


def combine_scores(liks, rule: str = "sum") -> float:
    """Combine per-dimension log marginal likelihoods into one score.

    ``sum`` adds the log-likelihoods; ``product`` is the log of the product
    of densities, which is the same number; ``harmonic`` is the log of the
    harmonic mean of the densities, dominated by the worst dimension.
    """
    liks = np.asarray(liks, float)
    if not np.all(np.isfinite(liks)) or np.any(np.isnan(liks)):
        return -np.inf
    if rule in ("sum", "product"):
        return float(np.sum(liks))
    if rule == "harmonic":
        return float(math.log(len(liks)) - logsumexp(-liks))
    raise ValueError(f"unknown scoring rule {rule!r}")


@dataclass
class FittedDynamicsModel:
    """E independent GPs sharing one prior parameter vector, or a pure
    parametric model in ``mi_only`` mode."""

    mode: str
    state_dim: int
    action_dim: int
    prior: TunableMeanPrior | None = None
    phi: np.ndarray | None = None
    gps: list = field(default_factory=list)
    score: float = float("nan")
    discrete_index: int | None = None
    fallback: bool = False
    history: list = field(default_factory=list)   # (phi, score) per outer evaluation

    @property
    def hps(self) -> list:
        return [g.hp for g in self.gps]

    def mean_values(self, X):
        X = np.atleast_2d(X)
        if self.prior is None:
            return np.zeros((len(X), self.state_dim))
        return self.prior(X, self.phi)

    def predict(self, X):
        """Mean and latent variance of the state difference, each (n, E)."""
        X = np.atleast_2d(np.asarray(X, float))
        m = self.mean_values(X)
        if self.mode == "mi_only":
            return m, np.zeros_like(m)
        mu = np.empty_like(m)
        var = np.empty_like(m)
        for i, gp in enumerate(self.gps):
            mu[:, i], var[:, i] = gp.predict(X, mean_values=m[:, i])
        return mu, var

    def sample_step(self, X, rng):
        mu, var = self.predict(X)
        return mu + np.sqrt(var) * rng.standard_normal(mu.shape)

    def predictive_log_likelihood(self, X, Y) -> float:
        """Sum of log N(Y | mu, var + noise) over held-out transitions."""
        mu, var = self.predict(X)
        if self.mode == "mi_only":
            resid = np.asarray(Y) - mu
            noise = np.maximum(resid.var(axis=0), 1e-12)
        else:
            noise = np.array([g.hp.noise_var for g in self.gps])
        s2 = var + noise
        return float(np.sum(-0.5 * (np.log(2 * np.pi * s2) + (Y - mu) ** 2 / s2)))


def fit_subset(data: TransitionDataset, config: ModelConfig, n="fit") -> TransitionDataset:
    """Evenly spaced subsample of at most ``n`` transitions; ``"fit"`` and
    ``"gp"`` pick the configured caps for learning and for conditioning."""
    if n == "fit":
        n = config.max_fit_points
    elif n == "gp":
        n = config.max_gp_points
    if n is None or len(data) <= n:
        return data
    return data.subset(np.unique(np.linspace(0, len(data) - 1, n).round().astype(int)))


def _fit_dimension(X, y, mean_values, mean, init, rprop, seed, sqdiff):
    problem = LikelihoodProblem(X, y - mean_values, sqdiff)
    hp, info = optimize_kernel(X, y, mean, init, rprop, seed=seed, problem=problem,
                               return_info=True)
    return hp, info.value


def evaluate_model(phi, data: TransitionDataset, prior: TunableMeanPrior | None,
                   config: ModelConfig | None = None, warm=None, sqdiff=None):
    """Score the prior parameters ``phi`` against ``data``.

    For each output dimension the kernel hyperparameters are optimized with
    ``phi`` held fixed; the per-dimension log marginal likelihoods are
    combined with ``config.scoring``. Returns ``(score, hps, liks)``;
    ``warm`` gives per-dimension starting hyperparameters.
    """
    cfg = config or ModelConfig()
    if len(data) == 0:
        raise ValueError("evaluate_model needs data")
    X = data.inputs
    if sqdiff is None:
        sqdiff = pairwise_sqdiff(X)
    with np.errstate(over="ignore", invalid="ignore"):
        M = (np.zeros_like(data.targets) if prior is None
             else np.asarray(prior(X, phi), float))
    if not np.all(np.isfinite(M)):
        return -np.inf, None, [-np.inf] * data.state_dim
    hps, liks = [], []
    for i in range(data.state_dim):
        y = data.column(i)
        if warm is not None:
            init, rprop = warm[i], cfg.warm_rprop
        else:
            init, rprop = KernelHyperParams.initial(X, y - M[:, i]), cfg.rprop
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            hp, lik = _fit_dimension(X, y, M[:, i], None, init, rprop,
                                     cfg.seed + 7919 * i, sqdiff)
        hps.append(hp)
        liks.append(lik)
    return combine_scores(liks, cfg.scoring), hps, liks


def _build_gps(data, prior, phi, hps, cfg):
    data = fit_subset(data, cfg, "gp")
    X = data.inputs
    M = prior(X, phi) if prior is not None else np.zeros_like(data.targets)
    gps = []
    for i, hp in enumerate(hps):
        mean = _Column(prior, phi, i) if prior is not None else None
        gps.append(fit(X, data.column(i), mean, hp, mean_values=M[:, i]))
    return gps


class _OuterSearch:
    """Maximize ``score(phi)`` over a box with NLopt's Subplex.

    Candidates are clamped to the box; ``-inf`` scores are passed to the
    optimizer as a large negative number. Keeps every evaluation and the
    best-so-far trace.
    """

    def __init__(self, score_fn, space: PriorParameterSpace, max_evals, ftol_rel,
                 simplex_scale, seed):
        self.score_fn = score_fn
        self.space = space
        self.max_evals = max_evals
        self.ftol_rel = ftol_rel
        self.simplex_scale = simplex_scale
        self.seed = seed
        self.evals = []           # (phi, score, extra)
        self.best_trace = []

    def _objective(self, x, grad):
        phi = self.space.clamp(x)
        score, extra = self.score_fn(phi)
        self.evals.append((phi.copy(), score, extra))
        best = max(score, self.best_trace[-1]) if self.best_trace else score
        self.best_trace.append(best)
        return float(score) if np.isfinite(score) else -1e300

    def run(self):
        lo = np.asarray(self.space.lower, float)
        hi = np.asarray(self.space.upper, float)
        nlopt.srand(int(self.seed))
        opt = nlopt.opt(nlopt.LN_SBPLX, len(lo))
        opt.set_lower_bounds(lo)
        opt.set_upper_bounds(hi)
        opt.set_max_objective(self._objective)
        opt.set_initial_step(self.simplex_scale * (hi - lo))
        opt.set_ftol_rel(self.ftol_rel)
        opt.set_maxeval(self.max_evals)
        try:
            opt.optimize(np.asarray(self.space.initial, float))
        except (nlopt.RoundoffLimited, nlopt.ForcedStop, ValueError, RuntimeError) as exc:
            log.debug("outer search stopped early: %s", exc)
        i = int(np.argmax([e[1] for e in self.evals]))
        return self.evals[i]


def _evaluate_candidate(args):
    phi, data, prior, cfg = args
    return evaluate_model(phi, data, prior, cfg)


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def gp_fixed_prior(data: TransitionDataset, prior: TunableMeanPrior | None,
                   config: ModelConfig | None = None, phi=None) -> FittedDynamicsModel:
    """GPs on top of the prior with ``phi`` frozen (default: nominal)."""
    cfg = config or ModelConfig()
    phi = None if prior is None else np.asarray(prior.nominal if phi is None else phi, float)
    score, hps, _ = evaluate_model(phi, fit_subset(data, cfg), prior, cfg)
    if hps is None:
        raise GPFitError("prior produced non-finite predictions on the data")
    return FittedDynamicsModel("gp_fixed_prior" if prior is not None else "gp_only",
                               data.state_dim, data.action_dim, prior, phi,
                               _build_gps(data, prior, phi, hps, cfg), score)


def gp_mi(data: TransitionDataset, prior: TunableMeanPrior,
          config: ModelConfig | None = None) -> FittedDynamicsModel:
    """GP-MI: pick the prior parameters whose GP explains the data best."""
    cfg = config or ModelConfig()
    if len(data) == 0:
        raise ValueError("gp_mi needs data")
    sub = fit_subset(data, cfg)
    sqdiff = pairwise_sqdiff(sub.inputs)
    space = prior.space

    if space.kind == "discrete":
        items = [(np.asarray(c, float), sub, prior, cfg) for c in space.candidates]
        results = _map(_evaluate_candidate, items, cfg.workers)
        history = [(items[k][0], r[0]) for k, r in enumerate(results)]
        scores = [r[0] for r in results]
        if not np.any(np.isfinite(scores)):
            return _fallback(data, prior, cfg, history)
        k = int(np.argmax(scores))
        phi = items[k][0]
        model = FittedDynamicsModel("gp_mi", data.state_dim, data.action_dim, prior, phi,
                                    _build_gps(data, prior, phi, results[k][1], cfg),
                                    scores[k], discrete_index=k, history=history)
        return model

    state = {"warm": None}

    def score(phi):
        s, hps, _ = evaluate_model(phi, sub, prior, cfg, warm=state["warm"], sqdiff=sqdiff)
        if hps is not None and np.isfinite(s):
            state["warm"] = hps
        return s, hps

    search = _OuterSearch(score, space, cfg.max_outer_evals, cfg.outer_ftol_rel,
                          cfg.simplex_scale, cfg.seed)
    phi, best, hps = search.run()
    history = [(p, s) for p, s, _ in search.evals]
    if not np.isfinite(best):
        return _fallback(data, prior, cfg, history)
    return FittedDynamicsModel("gp_mi", data.state_dim, data.action_dim, prior, phi,
                               _build_gps(data, prior, phi, hps, cfg), best, history=history)


def _fallback(data, prior, cfg, history):
    log.warning("every prior parameter candidate failed; using the nominal prior")
    model = gp_fixed_prior(data, prior, cfg)
    model.fallback = True
    model.history = history
    return model


def mse(phi, data: TransitionDataset, prior: TunableMeanPrior) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        M = prior(data.inputs, phi)
    err = np.sum((data.targets - M) ** 2, axis=1)
    val = float(np.mean(err))
    return val if np.isfinite(val) else np.inf


def mi_mse(data: TransitionDataset, prior: TunableMeanPrior,
           config: ModelConfig | None = None) -> FittedDynamicsModel:
    """Least-squares identification of ``phi``; the model is the prior alone."""
    cfg = config or ModelConfig()
    if len(data) == 0:
        raise ValueError("mi_mse needs data")
    space = prior.space
    if space.kind == "discrete":
        history = [(np.asarray(c, float), -mse(c, data, prior)) for c in space.candidates]
        k = int(np.argmax([h[1] for h in history]))
        phi, best = history[k]
        index = k
    else:
        search = _OuterSearch(lambda phi: (-mse(phi, data, prior), None), space,
                              cfg.mse_max_evals, 1e-12, cfg.simplex_scale, cfg.seed)
        phi, best, _ = search.run()
        history = [(p, s) for p, s, _ in search.evals]
        index = None
    fallback = not np.isfinite(best)
    if fallback:
        phi = np.asarray(prior.nominal, float)
    return FittedDynamicsModel("mi_only", data.state_dim, data.action_dim, prior,
                               np.asarray(phi, float), score=best, discrete_index=index,
                               fallback=fallback, history=history)


def learn_model(data: TransitionDataset, prior: TunableMeanPrior | None, mode: str,
                config: ModelConfig | None = None) -> FittedDynamicsModel:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "gp_only":
        return gp_fixed_prior(data, None, config)
    if prior is None:
        raise ValueError(f"mode {mode} needs a prior")
    if mode == "gp_fixed_prior":
        return gp_fixed_prior(data, prior, config)
    if mode == "gp_mi":
        return gp_mi(data, prior, config)
    return mi_mse(data, prior, config)


def prior_model(prior: TunableMeanPrior | None, state_dim=pendubot.STATE_DIM,
                action_dim=pendubot.ACTION_DIM, phi=None) -> FittedDynamicsModel:
    """The prior simulator alone as a (deterministic) dynamics model."""
    if prior is None:
        raise ValueError("no prior model available")
    phi = np.asarray(prior.nominal if phi is None else phi, float)
    return FittedDynamicsModel("mi_only", prior.state_dim, prior.action_dim, prior, phi)
