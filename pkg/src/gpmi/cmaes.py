"""BIPOP-CMA-ES for maximizing noisy black-box functions.

The objective is batch-oriented: ``func(X, seeds)`` receives a population
``X`` of shape (n, dim) plus one integer seed per candidate and returns
``n`` scores to MAXIMIZE. Seeds are derived from (master seed, generation,
candidate index) only, so results do not depend on how a caller schedules
the batch.

References: Hansen, "The CMA Evolution Strategy: A Tutorial" (2016) and
Hansen, "Benchmarking a BI-population CMA-ES on the BBOB-2009 function
testbed" (2009).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class CmaConfig:
    sigma0: float = 1.0
    popsize: int | None = None        # default 4 + floor(3 ln n)
    max_fevals: int = 20000           # includes the final re-evaluations
    max_restarts: int = 9
    lower: float | None = None
    upper: float | None = None
    bound_penalty: float = 1.0
    tolfun: float = 1e-12
    tolx: float = 1e-12
    reeval: int = 40                  # re-evaluations per final candidate
    n_final: int = 5                  # candidates re-evaluated at the end
    noise_handling: bool = True       # rank-change based step-size increase

    def __post_init__(self):
        if self.sigma0 <= 0 or self.max_fevals <= 0:
            raise ValueError("sigma0 and max_fevals must be positive")
        if self.popsize is not None and self.popsize < 2:
            raise ValueError("popsize must be at least 2")
        if self.reeval < 1 or self.n_final < 1:
            raise ValueError("reeval and n_final must be >= 1")
        if (self.lower is None) != (self.upper is None):
            raise ValueError("give both bounds or neither")
        if self.lower is not None and not self.lower < self.upper:
            raise ValueError("lower bound must be below upper bound")


def _rank_change(f_old, f_new, idx, theta=0.2):
    """Rank-change measure of uncertainty for re-evaluated candidates.

    Positive values mean the re-evaluation reshuffled the ranking more than
    expected by chance, i.e. the noise dominates the signal. Hansen et al.,
    "A method for handling uncertainty in evolutionary optimization" (2009).
    """
    lam = len(f_old)
    joint = np.concatenate([f_old, f_new[idx]])
    ranks = np.empty(len(joint))
    ranks[np.argsort(joint, kind="stable")] = np.arange(1, len(joint) + 1)
    r_old = ranks[idx]
    r_new = ranks[lam:]
    grid = np.arange(1, lam + len(idx))

    def lim(r):
        return np.quantile(np.abs(grid - r), theta / 2)

    total = 0.0
    for j, i in enumerate(idx):
        delta = abs(r_new[j] - r_old[j]) - 1
        total += 2 * delta - lim(r_new[j] - (f_new[i] > f_old[i])) \
            - lim(r_old[j] - (f_old[i] > f_new[i]))
    return total / len(idx)


def candidate_seed(master: int, generation: int, index: int, tag: int = 0) -> int:
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, tag, generation, index])
    return int(ss.generate_state(1)[0])


@dataclass
class CmaResult:
    x: np.ndarray
    score: float                      # mean of the re-evaluations
    evals: int
    generations: int
    runs: list = field(default_factory=list)     # (regime, popsize, sigma0, evals, stop)
    trace: list = field(default_factory=list)    # best score seen per generation


class _Run:
    """State of a single CMA-ES run (minimization of ``fit``)."""

    def __init__(self, mean, sigma, lam, rng):
        n = len(mean)
        self.n = n
        self.lam = lam
        self.rng = rng
        self.mean = np.array(mean, dtype=float)
        self.sigma = float(sigma)
        self.sigma0 = float(sigma)
        mu = lam // 2
        w = np.log((lam + 1) / 2.0) - np.log(np.arange(1, mu + 1))
        self.weights = w / w.sum()
        self.mu = mu
        self.mueff = 1.0 / np.sum(self.weights ** 2)
        me = self.mueff
        self.cc = (4 + me / n) / (n + 4 + 2 * me / n)
        self.cs = (me + 2) / (n + me + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + me)
        self.cmu = min(1 - self.c1, 2 * (me - 2 + 1 / me) / ((n + 2) ** 2 + me))
        self.damps = 1 + 2 * max(0.0, math.sqrt((me - 1) / (n + 1)) - 1) + self.cs
        self.chin = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.C = np.eye(n)
        self.B = np.eye(n)
        self.D = np.ones(n)
        self.gen = 0
        self.best_hist: list[float] = []
        self.mean_hist: list[np.ndarray] = []
        self.median_hist: list[float] = []
        self.best_x = None
        self.best_f = np.inf
        self.maxiter = 100 + 50 * (n + 3) ** 2 / math.sqrt(lam)

    def ask(self):
        z = self.rng.standard_normal((self.lam, self.n))
        y = (z * self.D) @ self.B.T
        return self.mean + self.sigma * y

    def tell(self, X, fit):
        n = self.n
        order = np.argsort(fit, kind="stable")
        fit = np.asarray(fit)
        self.best_hist.append(float(fit[order[0]]))
        self.median_hist.append(float(np.median(fit)))

        y = (X[order[:self.mu]] - self.mean) / self.sigma
        yw = self.weights @ y
        self.mean = self.mean + self.sigma * yw
        self.mean_hist.append(self.mean)

        cinv_half_yw = self.B @ ((self.B.T @ yw) / self.D)
        self.ps = (1 - self.cs) * self.ps \
            + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * cinv_half_yw
        self.gen += 1
        norm_ps = np.linalg.norm(self.ps)
        hsig = norm_ps / math.sqrt(1 - (1 - self.cs) ** (2 * self.gen)) / self.chin \
            < 1.4 + 2 / (n + 1)
        self.pc = (1 - self.cc) * self.pc \
            + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * yw
        rank_mu = (y.T * self.weights) @ y
        self.C = (1 - self.c1 - self.cmu) * self.C \
            + self.c1 * (np.outer(self.pc, self.pc)
                         + (1 - hsig) * self.cc * (2 - self.cc) * self.C) \
            + self.cmu * rank_mu
        self.sigma *= math.exp(min(1.0, (self.cs / self.damps) * (norm_ps / self.chin - 1)))

        self.C = np.triu(self.C) + np.triu(self.C, 1).T
        evals, vecs = np.linalg.eigh(self.C)
        self.D = np.sqrt(np.maximum(evals, 1e-300))
        self.B = vecs

    def averaged_mean(self):
        """Average of the distribution means over the last half of the run.

        Under noise the mean jitters around the optimum; averaging the
        iterates removes most of that jitter.
        """
        if not self.mean_hist:
            return self.mean
        k = max(1, len(self.mean_hist) // 2)
        return np.mean(self.mean_hist[-k:], axis=0)

    def stop(self, tolfun, tolx):
        n, lam = self.n, self.lam
        if self.gen >= self.maxiter:
            return "maxiter"
        if not np.all(np.isfinite(self.C)) or not np.isfinite(self.sigma):
            return "numerics"
        hist = 10 + int(math.ceil(30 * n / lam))
        if len(self.best_hist) >= hist:
            recent = self.best_hist[-hist:]
            # relative: objectives may live on tiny scales yet still rank well
            if max(recent) - min(recent) < tolfun * max(abs(max(recent)), abs(min(recent))):
                return "tolfun"
        if self.sigma * max(np.max(np.abs(self.pc)), np.max(self.D)) < tolx * self.sigma0:
            return "tolx"
        if np.max(self.D) > 1e7 * np.min(self.D):
            return "conditioncov"
        window = 120 + int(30 * n / lam)
        if len(self.best_hist) > window:
            k = max(1, int(0.2 * window))
            old_b = np.median(self.best_hist[-window:-window + k])
            new_b = np.median(self.best_hist[-k:])
            old_m = np.median(self.median_hist[-window:-window + k])
            new_m = np.median(self.median_hist[-k:])
            if new_b >= old_b and new_m >= old_m:
                return "stagnation"
        return None


def bipop_cmaes(func, x0, config: CmaConfig | None = None, seed: int = 0) -> CmaResult:
    """Maximize ``func`` starting from ``x0`` with BIPOP restarts.

    Runs start from ``x0``. The first run and the large-population (IPOP)
    restarts use ``sigma0``; small-population restarts draw a random
    population size and a step size down to ``sigma0 / 100``. The regime
    with the smaller evaluation count so far is chosen next, except that a
    run stopped by stagnation (the usual symptom of noise-limited progress)
    is continued from its averaged mean with a doubled population. Evaluations
    never exceed ``max_fevals``; ``reeval * n_final`` of them are reserved
    for re-scoring the final candidates.
    """
    cfg = config or CmaConfig()
    x0 = np.asarray(x0, dtype=float)
    n = len(x0)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 7]))
    lam_def = cfg.popsize or 4 + int(3 * math.log(n))
    bounded = cfg.lower is not None

    reserve = cfg.reeval * cfg.n_final
    budget = cfg.max_fevals - reserve
    if budget < lam_def:
        raise ValueError("max_fevals too small for one generation plus re-evaluation")

    evals = 0
    generation = 0
    budget_large = budget_small = 0
    n_large = 0
    lam_large = lam_def
    runs = []
    trace = []
    finals = []          # (best f seen in run, candidate point)
    longest = (0, None)  # (evals, averaged mean) of the longest run
    overall_best = (np.inf, x0.copy())

    start = x0
    noisy_stop = False
    for r in range(cfg.max_restarts + 1):
        start = x0
        if r == 0:
            regime, lam, sigma = "first", lam_def, cfg.sigma0
        elif noisy_stop:
            # the last run stalled on noise, not on a local optimum: continue
            # from its averaged mean with a doubled population
            n_large += 1
            regime = "noise"
            lam = lam_def * 2 ** n_large
            lam_large = lam
            sigma = min(cfg.sigma0, 2 * run.sigma)
            start = run.averaged_mean()
            if bounded:
                start = np.clip(start, cfg.lower, cfg.upper)
        elif budget_small < budget_large:
            u = rng.uniform()
            regime = "small"
            lam = max(2, int(lam_def * (0.5 * lam_large / lam_def) ** (u * u)))
            sigma = cfg.sigma0 * 10 ** (-2 * rng.uniform())
        else:
            n_large += 1
            regime = "large"
            lam = lam_def * 2 ** n_large
            lam_large = lam
            sigma = cfg.sigma0
        if budget - evals < lam:
            break
        n_reev = max(1, int(math.ceil(0.1 * lam))) if cfg.noise_handling else 0
        cost = lam + n_reev
        if budget - evals < cost:
            break
        run = _Run(start, sigma, lam, rng)
        run_evals = 0
        reason = "budget"
        s_bar = 0.0
        while budget - evals >= cost:
            X = run.ask()
            Xe = np.clip(X, cfg.lower, cfg.upper) if bounded else X
            seeds = [candidate_seed(seed, generation, i) for i in range(cost)]
            Xall = np.vstack([Xe, Xe[:n_reev]])
            scores = -np.asarray(func(Xall, seeds), dtype=float)
            scores = np.where(np.isnan(scores), np.inf, scores)
            evals += cost
            run_evals += cost
            generation += 1
            fit = scores[:lam].copy()
            if n_reev:
                idx = np.arange(n_reev)
                f_new = fit.copy()
                f_new[idx] = scores[lam:]
                if np.all(np.isfinite(scores)):
                    s_bar = 0.7 * s_bar + 0.3 * _rank_change(fit, f_new, idx)
                fit[idx] = 0.5 * (fit[idx] + f_new[idx])
                fit = np.where(np.isnan(fit), np.inf, fit)
            if bounded:
                fit = fit + cfg.bound_penalty * np.sum((X - Xe) ** 2, axis=1)
            i = int(np.argmin(fit))
            if fit[i] < run.best_f:
                run.best_f, run.best_x = float(fit[i]), Xe[i].copy()
            if fit[i] < overall_best[0]:
                overall_best = (float(fit[i]), Xe[i].copy())
            trace.append(-overall_best[0])
            run.tell(X, fit)
            if s_bar > 0:
                run.sigma *= 1 + 2 / (n + 10)
            reason = run.stop(cfg.tolfun, cfg.tolx)
            if reason:
                break
        else:
            reason = "budget"
        if regime == "small":
            budget_small += run_evals
        else:
            budget_large += run_evals
        for m in (run.mean, run.averaged_mean()):
            finals.append((run.best_f, np.clip(m, cfg.lower, cfg.upper) if bounded else m))
        if run_evals >= longest[0]:
            longest = (run_evals, finals[-1][1])
        runs.append((regime, lam, sigma, run_evals, reason or "budget"))
        noisy_stop = cfg.noise_handling and reason == "stagnation"
        log.debug("cma run %d %s lam=%d evals=%d stop=%s best=%g",
                  r, regime, lam, run_evals, reason, -run.best_f)
        if reason == "budget":
            break

    # re-score: overall best-seen point, the averaged mean of the longest run
    # and the means of the best runs
    finals.sort(key=lambda t: t[0])
    cands = [overall_best[1]] + [m for _, m in finals[:cfg.n_final - 1]]
    if cfg.noise_handling and longest[1] is not None:
        cands = [longest[1]] + cands[:cfg.n_final - 1]
    Xc = np.repeat(np.array(cands), cfg.reeval, axis=0)
    seeds = [candidate_seed(seed, k, j, tag=1)
             for k in range(len(cands)) for j in range(cfg.reeval)]
    vals = np.asarray(func(Xc, seeds), dtype=float).reshape(len(cands), cfg.reeval)
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    evals += Xc.shape[0]
    means = vals.mean(axis=1)
    k = int(np.argmax(means))
    if cfg.noise_handling and longest[1] is not None and cfg.reeval > 1 and k != 0:
        # under noise keep the averaged mean unless another candidate is
        # better by a clear margin (two standard errors of the difference)
        with np.errstate(invalid="ignore"):
            se = np.sqrt((vals[k].var(ddof=1) + vals[0].var(ddof=1)) / cfg.reeval)
        if not means[k] - means[0] > 2 * se:
            k = 0
    return CmaResult(x=np.array(cands[k]), score=float(means[k]), evals=evals,
                     generations=generation, runs=runs, trace=trace)
