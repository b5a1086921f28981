"""One-hidden-layer tanh network policy with a squashed, scaled output."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pendubot import ACTION_DIM, STATE_DIM, U_MAX


@dataclass(frozen=True)
class PolicyArch:
    n_in: int = STATE_DIM
    n_hidden: int = 10
    n_out: int = ACTION_DIM
    u_max: float = U_MAX

    @property
    def n_params(self) -> int:
        return (self.n_in + 1) * self.n_hidden + (self.n_hidden + 1) * self.n_out

    def unpack(self, theta):
        """Split flat weights (..., n_params) into ``W1, b1, W2, b2``.

        Layout: W1 row-major (n_hidden, n_in), b1, W2 row-major
        (n_out, n_hidden), b2.
        """
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.n_params:
            raise ValueError(f"expected {self.n_params} weights, got {theta.shape[-1]}")
        lead = theta.shape[:-1]
        i = 0
        sizes = [self.n_hidden * self.n_in, self.n_hidden,
                 self.n_out * self.n_hidden, self.n_out]
        parts = []
        for s in sizes:
            parts.append(theta[..., i:i + s])
            i += s
        W1 = parts[0].reshape(lead + (self.n_hidden, self.n_in))
        W2 = parts[2].reshape(lead + (self.n_out, self.n_hidden))
        return W1, parts[1], W2, parts[3]


DEFAULT_ARCH = PolicyArch()


def act(theta, x, arch: PolicyArch = DEFAULT_ARCH):
    """u = u_max * tanh(W2 tanh(W1 x + b1) + b2).

    ``theta`` may be a single vector or a batch (B, n_params) paired with a
    batch of states (B, n_in).
    """
    W1, b1, W2, b2 = arch.unpack(theta)
    x = np.asarray(x, dtype=float)
    hidden = np.tanh(np.einsum("...hi,...i->...h", W1, x) + b1)
    return arch.u_max * np.tanh(np.einsum("...oh,...h->...o", W2, hidden) + b2)


class NNPolicy:
    """Callable wrapper binding a weight vector, for use with run_episode."""

    def __init__(self, theta, arch: PolicyArch = DEFAULT_ARCH):
        self.theta = np.array(theta, dtype=float)
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("policy weights must be finite")
        self.arch = arch

    def __call__(self, x):
        return act(self.theta, x, self.arch)


def random_theta(rng, arch: PolicyArch = DEFAULT_ARCH):
    return rng.standard_normal(arch.n_params)
