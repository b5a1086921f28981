"""Rprop for maximizing smooth functions with analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RpropConfig:
    iterations: int = 300
    eta_plus: float = 1.2
    eta_minus: float = 0.5
    delta0: float = 0.1
    delta_max: float = 50.0
    delta_min: float = 1e-9
    restarts: int = 3           # total runs, the first one from the initial point
    restart_sd: float = 1.0     # perturbation of the initial point for restarts
    gtol: float = 1e-10


@dataclass
class RpropResult:
    x: np.ndarray
    value: float
    history: list = field(default_factory=list)   # value after every iteration
    evaluations: int = 0


def rprop_maximize(fun, x0, config: RpropConfig | None = None, lower=None, upper=None):
    """Maximize ``fun(x) -> (value, grad)`` with sign-based Rprop steps.

    A step that does not improve the value (or lands on a non-finite one) is
    rejected and the step sizes shrink, so the value sequence never
    decreases. Returns the starting point unchanged if its value is not
    finite.
    """
    cfg = config or RpropConfig()
    lower = -np.inf if lower is None else lower
    upper = np.inf if upper is None else upper
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    f, g = fun(x)
    n_eval = 1
    history = [f]
    if not np.isfinite(f):
        return RpropResult(x, f, history, n_eval)
    delta = np.full(x.shape, cfg.delta0)
    g_prev = np.zeros_like(x)
    for _ in range(cfg.iterations):
        if np.max(np.abs(g)) < cfg.gtol:
            break
        prod = g * g_prev
        delta = np.where(prod > 0, np.minimum(delta * cfg.eta_plus, cfg.delta_max), delta)
        delta = np.where(prod < 0, np.maximum(delta * cfg.eta_minus, cfg.delta_min), delta)
        g_eff = np.where(prod < 0, 0.0, g)
        x_new = np.clip(x + np.sign(g_eff) * delta, lower, upper)
        if np.array_equal(x_new, x):
            # pinned at the bounds or skipping after a sign change
            g_prev = g_eff
            history.append(f)
            continue
        f_new, g_new = fun(x_new)
        n_eval += 1
        if np.isfinite(f_new) and f_new >= f:
            x, f, g_prev, g = x_new, f_new, g_eff, g_new
        else:
            delta = np.maximum(delta * cfg.eta_minus, cfg.delta_min)
            g_prev = np.zeros_like(x)
        history.append(f)
        if np.max(delta) <= cfg.delta_min:
            break
    return RpropResult(x, f, history, n_eval)
