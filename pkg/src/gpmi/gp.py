"""Exact GP regression with an arbitrary mean function.

One scalar output per GP. The mean function is any callable mapping an
(n, d) array of inputs to n values; the GP models the residual between the
observations and that mean, so far from the data the predictions fall back
to the mean function.

Kernel: squared exponential with one lengthscale per input dimension
(ARD). Hyperparameters are stored as logs of the lengthscales, the signal
sd and the noise sd.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, lapack, solve_triangular

from .rprop import RpropConfig, rprop_maximize

log = logging.getLogger(__name__)

JITTER = 1e-8
JITTER_MAX = 1e-2
LOG_2PI = np.log(2 * np.pi)

# box for the log-hyperparameters during optimization
LOG_LENGTHSCALE_BOUNDS = (-8.0, 8.0)
LOG_SIGNAL_BOUNDS = (-12.0, 8.0)
LOG_NOISE_BOUNDS = (-14.0, 4.0)


class GPFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelHyperParams:
    log_lengthscales: np.ndarray
    log_signal_sd: float
    log_noise_sd: float

    def __post_init__(self):
        ls = np.array(self.log_lengthscales, dtype=float).reshape(-1)
        ls.setflags(write=False)
        object.__setattr__(self, "log_lengthscales", ls)
        object.__setattr__(self, "log_signal_sd", float(self.log_signal_sd))
        object.__setattr__(self, "log_noise_sd", float(self.log_noise_sd))

    @property
    def dim(self) -> int:
        return len(self.log_lengthscales)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def signal_var(self) -> float:
        return float(np.exp(2 * self.log_signal_sd))

    @property
    def noise_var(self) -> float:
        return float(np.exp(2 * self.log_noise_sd))

    def to_vector(self) -> np.ndarray:
        return np.r_[self.log_lengthscales, self.log_signal_sd, self.log_noise_sd]

    @classmethod
    def from_vector(cls, v) -> "KernelHyperParams":
        v = np.asarray(v, dtype=float)
        return cls(v[:-2], v[-2], v[-1])

    @classmethod
    def from_values(cls, lengthscales, signal_sd, noise_sd) -> "KernelHyperParams":
        return cls(np.log(np.atleast_1d(lengthscales)), np.log(signal_sd), np.log(noise_sd))

    @classmethod
    def initial(cls, X, residual) -> "KernelHyperParams":
        """Data-scaled starting point: input sds, residual sd, 1% noise."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        residual = np.asarray(residual, dtype=float)
        ls = X.std(axis=0) if len(X) > 1 else np.ones(X.shape[1])
        ls = np.where(ls > 0, ls, 1.0)
        sf = residual.std() if len(residual) > 1 else 0.0
        sf = sf if sf > 0 else 1.0
        return cls.from_values(ls, sf, 0.01 * sf)

    def to_dict(self) -> dict:
        return {"log_lengthscales": self.log_lengthscales.tolist(),
                "log_signal_sd": self.log_signal_sd,
                "log_noise_sd": self.log_noise_sd}

    @classmethod
    def from_dict(cls, d) -> "KernelHyperParams":
        return cls(d["log_lengthscales"], d["log_signal_sd"], d["log_noise_sd"])


def hp_bounds(dim: int):
    lo = np.r_[np.full(dim, LOG_LENGTHSCALE_BOUNDS[0]), LOG_SIGNAL_BOUNDS[0], LOG_NOISE_BOUNDS[0]]
    hi = np.r_[np.full(dim, LOG_LENGTHSCALE_BOUNDS[1]), LOG_SIGNAL_BOUNDS[1], LOG_NOISE_BOUNDS[1]]
    return lo, hi


def kernel_eval(a, b, hp: KernelHyperParams) -> float:
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape or a.shape[0] != hp.dim:
        raise ValueError(f"dimension mismatch: {a.shape}, {b.shape}, hp dim {hp.dim}")
    z = (a - b) / hp.lengthscales
    return hp.signal_var * float(np.exp(-0.5 * z @ z))


def kernel_matrix(A, B, hp: KernelHyperParams) -> np.ndarray:
    A = np.atleast_2d(A) / hp.lengthscales
    B = np.atleast_2d(B) / hp.lengthscales
    diff = A[:, None, :] - B[None, :, :]
    return hp.signal_var * np.exp(-0.5 * np.einsum("ijk,ijk->ij", diff, diff))


def _cross_kernel(A, B, hp: KernelHyperParams) -> np.ndarray:
    """kernel_matrix via the expanded square; faster for prediction."""
    A = A / hp.lengthscales
    B = B / hp.lengthscales
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
    return hp.signal_var * np.exp(-0.5 * np.maximum(d2, 0.0))


def _mean_values(mean, X):
    if mean is None:
        return np.zeros(len(X))
    return np.asarray(mean(X), dtype=float).reshape(len(X))


def _jittered_cholesky(K, signal_var):
    """Cholesky of K with diagonal jitter escalated by x10 until PD."""
    n = len(K)
    jitter = JITTER
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            L = cholesky(K + jitter * signal_var * np.eye(n), lower=True, check_finite=False)
            if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0):
                return L, jitter
        except LinAlgError:
            pass
        jitter *= 10
    raise LinAlgError("matrix not positive definite after jitter escalation")


@dataclass(frozen=True, eq=False)
class FittedGP:
    X: np.ndarray
    y: np.ndarray
    mean: object          # callable (n, d) -> (n,), or None for zero mean
    hp: KernelHyperParams
    L: np.ndarray         # lower Cholesky factor of K + (noise + jitter) I
    alpha: np.ndarray
    jitter: float
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.X)

    def linv(self):
        if "linv" not in self._cache:
            self._cache["linv"] = solve_triangular(self.L, np.eye(len(self.L)), lower=True)
        return self._cache["linv"]

    def predict(self, Q, mean_values=None):
        """Posterior mean and latent variance at the rows of ``Q``.

        ``mean_values`` lets a caller pass precomputed M(Q).
        """
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if Q.shape[1] != self.hp.dim:
            raise ValueError(f"query dimension {Q.shape[1]} != {self.hp.dim}")
        m = _mean_values(self.mean, Q) if mean_values is None else mean_values
        if len(self.X) == 0:
            return m, np.full(len(Q), self.hp.signal_var)
        k = _cross_kernel(Q, self.X, self.hp)
        mu = m + k @ self.alpha
        v = k @ self.linv().T
        var = self.hp.signal_var - np.sum(v * v, axis=1)
        return mu, np.maximum(var, 0.0)


def fit(X, y, mean, hp: KernelHyperParams, mean_values=None) -> FittedGP:
    """Condition the GP on (X, y); ``mean`` is the prior mean function."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(X) == 0:
        raise ValueError("fit needs at least one observation; use predict_prior")
    if X.shape[1] != hp.dim:
        raise ValueError(f"input dimension {X.shape[1]} != {hp.dim}")
    m = _mean_values(mean, X) if mean_values is None else np.asarray(mean_values, float)
    K = kernel_matrix(X, X, hp) + hp.noise_var * np.eye(len(X))
    try:
        L, jitter = _jittered_cholesky(K, hp.signal_var)
    except LinAlgError as exc:
        raise GPFitError(f"GP fit failed for {len(X)} points, hp={hp.to_dict()}") from exc
    alpha = cho_solve((L, True), y - m, check_finite=False)
    return FittedGP(X, y, mean, hp, L, alpha, jitter)


def predict(gp: FittedGP, query):
    mu, var = gp.predict(np.asarray(query, dtype=float).reshape(1, -1))
    return float(mu[0]), float(var[0])


def predict_prior(mean, hp: KernelHyperParams, query):
    """Prediction with no data: the mean function and the signal variance."""
    query = np.asarray(query, dtype=float).reshape(1, -1)
    return float(_mean_values(mean, query)[0]), hp.signal_var


def pairwise_sqdiff(X):
    """Per-dimension squared differences, shape (d, n, n)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    diff = X[:, None, :] - X[None, :, :]
    return np.ascontiguousarray(np.moveaxis(diff * diff, -1, 0))


class LikelihoodProblem:
    """Log marginal likelihood of residuals under a zero-mean GP, with
    gradients in the log-hyperparameters. Pairwise squared differences are
    cached so repeated evaluations only pay for the Cholesky."""

    def __init__(self, X, residual, sqdiff=None):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.r = np.asarray(residual, dtype=float).reshape(-1)
        self.sqdiff = pairwise_sqdiff(self.X) if sqdiff is None else sqdiff

    def __call__(self, v):
        """(value, grad) at the log-hyperparameter vector ``v``."""
        v = np.asarray(v, dtype=float)
        d = self.X.shape[1]
        n = len(self.r)
        inv_ell2 = np.exp(-2 * v[:d])
        sf2 = np.exp(2 * v[d])
        sn2 = np.exp(2 * v[d + 1])
        flat = self.sqdiff.reshape(d, -1)
        K = sf2 * np.exp(-0.5 * (inv_ell2 @ flat)).reshape(n, n)
        try:
            L, jitter = _jittered_cholesky(K + sn2 * np.eye(n), sf2)
        except LinAlgError:
            return -np.inf, np.zeros_like(v)
        alpha = cho_solve((L, True), self.r, check_finite=False)
        value = (-0.5 * self.r @ alpha - np.sum(np.log(np.diag(L)))
                 - 0.5 * n * LOG_2PI)
        Kinv, info = lapack.dpotri(L, lower=1)
        if info != 0:
            return -np.inf, np.zeros_like(v)
        Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
        W = np.outer(alpha, alpha) - Kinv
        WK = W * K
        grad = np.empty_like(v)
        grad[:d] = 0.5 * inv_ell2 * (flat @ WK.ravel())
        grad[d] = np.sum(WK) + jitter * sf2 * np.trace(W)
        grad[d + 1] = sn2 * np.trace(W)
        return float(value), grad


def log_marginal_likelihood(X, y, mean, hp: KernelHyperParams, mean_values=None):
    """(value, gradient w.r.t. ``hp.to_vector()``); value is -inf if the
    covariance cannot be factorized."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(X) == 0:
        raise ValueError("likelihood needs at least one observation")
    m = _mean_values(mean, X) if mean_values is None else mean_values
    return LikelihoodProblem(X, np.asarray(y, float) - m)(hp.to_vector())


@dataclass
class KernelFitInfo:
    value: float
    history: list
    ok: bool
    runs: int


def optimize_kernel(X, y, mean, init: KernelHyperParams, config: RpropConfig | None = None,
                    seed=0, mean_values=None, problem: LikelihoodProblem | None = None,
                    return_info: bool = False):
    """Maximize the marginal likelihood over the kernel hyperparameters.

    Runs Rprop from ``init`` and ``config.restarts - 1`` perturbed starting
    points and keeps the best. If every run fails to factorize the
    covariance, ``init`` is returned and a warning is issued.
    """
    cfg = config or RpropConfig()
    if problem is None:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m = _mean_values(mean, X) if mean_values is None else mean_values
        problem = LikelihoodProblem(X, np.asarray(y, float) - m)
    lo, hi = hp_bounds(init.dim)
    rng = np.random.default_rng(seed)
    x0 = init.to_vector()
    best = None
    history = []
    for k in range(max(1, cfg.restarts)):
        start = x0 if k == 0 else x0 + cfg.restart_sd * rng.standard_normal(len(x0))
        res = rprop_maximize(problem, start, cfg, lo, hi)
        if k == 0:
            history = res.history
        if np.isfinite(res.value) and (best is None or res.value > best.value):
            best = res
    if best is None:
        warnings.warn("kernel optimization failed on every restart; keeping the initial hyperparameters",
                      RuntimeWarning, stacklevel=2)
        info = KernelFitInfo(-np.inf, history, False, cfg.restarts)
        return (init, info) if return_info else init
    hp = KernelHyperParams.from_vector(best.x)
    info = KernelFitInfo(best.value, history, True, cfg.restarts)
    return (hp, info) if return_info else hp
