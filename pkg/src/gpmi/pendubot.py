"""Pendubot: a two-link planar arm actuated only at the shoulder.

Both angles are absolute (world frame), measured anti-clockwise from the
upright position, so the hanging configuration is ``theta1 = theta2 = pi``.
Masses are points at the link ends and the rods are massless.

All functions broadcast over leading batch dimensions: a state is an array
whose last axis is ``(theta1, theta2, omega1, omega2)``.
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numba
import numpy as np

GRAVITY = 9.81
U_MAX = 3.5
DT = 0.05
HORIZON = 50
SUBSTEPS = 10
OMEGA_LIMIT = 50.0
STATE_DIM = 4
ACTION_DIM = 1

HANGING = np.array([np.pi, np.pi, 0.0, 0.0])
UPRIGHT = np.zeros(4)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PendubotParams:
    m1: float = 0.5
    m2: float = 0.5
    l1: float = 0.5
    l2: float = 0.5
    b1: float = 0.1
    b2: float = 0.1

    def __post_init__(self):
        for name in ("m1", "m2", "l1", "l2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")
        for name in ("b1", "b2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be non-negative, got {v}")

    def replace(self, **changes) -> "PendubotParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PendubotParams":
        return cls(**{k: float(v) for k, v in d.items()})


ACTUAL = PendubotParams()

# Prior models of the real system, keyed by the experiment's prior name.
PRIORS = {
    "useful": PendubotParams(m1=0.65, l2=0.4),
    "tunable": PendubotParams(m2=0.75),
    "misleading": PendubotParams(l2=0.25),
    "partial": PendubotParams(m1=0.65, m2=0.35, b1=0.0, b2=0.0),
}

TUNABLE = ("m1", "m2", "l1", "l2")


def dynamics_deriv(state, u, params: PendubotParams):
    """Time derivative ``(omega1, omega2, alpha1, alpha2)`` of ``state``.

    ``u`` is the shoulder torque; it is not clamped here.
    """
    state = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    th1, th2, w1, w2 = state[..., 0], state[..., 1], state[..., 2], state[..., 3]
    m1, m2, l1, l2, b1, b2 = (params.m1, params.m2, params.l1, params.l2,
                              params.b1, params.b2)

    s12 = np.sin(th1 - th2)
    c12 = np.cos(th1 - th2)
    a = (m1 + m2) * l1 * l1
    b = m2 * l1 * l2 * c12
    d = m2 * l2 * l2
    det = a * d - b * b
    if np.any(det <= 0):
        raise FloatingPointError("singular pendubot mass matrix")

    # joint 2 friction acts on the relative (joint) velocity
    rel = w2 - w1
    q1 = u - b1 * w1 + b2 * rel
    q2 = -b2 * rel
    h = m2 * l1 * l2 * s12
    rhs1 = q1 - h * w2 * w2 + (m1 + m2) * GRAVITY * l1 * np.sin(th1)
    rhs2 = q2 + h * w1 * w1 + m2 * GRAVITY * l2 * np.sin(th2)

    out = np.empty(np.broadcast_shapes(state.shape, u.shape + (4,)))
    out[..., 0] = w1
    out[..., 1] = w2
    out[..., 2] = (d * rhs1 - b * rhs2) / det
    out[..., 3] = (a * rhs2 - b * rhs1) / det
    return out


@numba.njit(cache=True)
def _deriv(th1, th2, w1, w2, u, m1, m2, l1, l2, b1, b2):
    s12 = math.sin(th1 - th2)
    c12 = math.cos(th1 - th2)
    a = (m1 + m2) * l1 * l1
    b = m2 * l1 * l2 * c12
    d = m2 * l2 * l2
    det = a * d - b * b
    rel = w2 - w1
    h = m2 * l1 * l2 * s12
    rhs1 = u - b1 * w1 + b2 * rel - h * w2 * w2 + (m1 + m2) * GRAVITY * l1 * math.sin(th1)
    rhs2 = -b2 * rel + h * w1 * w1 + m2 * GRAVITY * l2 * math.sin(th2)
    return (d * rhs1 - b * rhs2) / det, (a * rhs2 - b * rhs1) / det


@numba.njit(cache=True)
def _rk4_batch(x, u, p, h, substeps):
    out = np.empty_like(x)
    m1, m2, l1, l2, b1, b2 = p[0], p[1], p[2], p[3], p[4], p[5]
    for i in range(x.shape[0]):
        t1, t2, w1, w2 = x[i, 0], x[i, 1], x[i, 2], x[i, 3]
        ui = u[i]
        for _ in range(substeps):
            a1, a2 = _deriv(t1, t2, w1, w2, ui, m1, m2, l1, l2, b1, b2)
            k1 = (w1, w2, a1, a2)
            a1, a2 = _deriv(t1 + 0.5 * h * k1[0], t2 + 0.5 * h * k1[1], w1 + 0.5 * h * k1[2],
                            w2 + 0.5 * h * k1[3], ui, m1, m2, l1, l2, b1, b2)
            k2 = (w1 + 0.5 * h * k1[2], w2 + 0.5 * h * k1[3], a1, a2)
            a1, a2 = _deriv(t1 + 0.5 * h * k2[0], t2 + 0.5 * h * k2[1], w1 + 0.5 * h * k2[2],
                            w2 + 0.5 * h * k2[3], ui, m1, m2, l1, l2, b1, b2)
            k3 = (w1 + 0.5 * h * k2[2], w2 + 0.5 * h * k2[3], a1, a2)
            a1, a2 = _deriv(t1 + h * k3[0], t2 + h * k3[1], w1 + h * k3[2], w2 + h * k3[3],
                            ui, m1, m2, l1, l2, b1, b2)
            k4 = (w1 + h * k3[2], w2 + h * k3[3], a1, a2)
            t1 += h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            t2 += h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            w1 += h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
            w2 += h / 6.0 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
        out[i, 0], out[i, 1], out[i, 2], out[i, 3] = t1, t2, w1, w2
    return out


def rk4(state, u, params: PendubotParams, dt: float = DT,
        substeps: int = SUBSTEPS):
    """Integrate over ``dt`` with ``substeps`` classical RK4 steps, holding ``u``.

    Same arithmetic as stepping ``dynamics_deriv``, compiled for speed.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], u.shape)
    xb = np.ascontiguousarray(np.broadcast_to(x, shape + (4,)).reshape(-1, 4))
    ub = np.ascontiguousarray(np.broadcast_to(u, shape).reshape(-1))
    p = np.array([params.m1, params.m2, params.l1, params.l2, params.b1, params.b2])
    return _rk4_batch(xb, ub, p, dt / substeps, substeps).reshape(shape + (4,))


def step(state, u, params: PendubotParams, dt: float = DT,
         substeps: int = SUBSTEPS):
    """One control step; raises DivergenceError past the velocity ceiling."""
    with np.errstate(over="ignore", invalid="ignore"):
        x = rk4(state, u, params, dt, substeps)
    if not np.all(np.isfinite(x)) or np.any(np.abs(x[..., 2:]) > OMEGA_LIMIT):
        raise DivergenceError(f"pendubot diverged: {x}")
    return x


def tip_position(state, params: PendubotParams):
    state = np.asarray(state, dtype=float)
    th1, th2 = state[..., 0], state[..., 1]
    x = -params.l1 * np.sin(th1) - params.l2 * np.sin(th2)
    y = params.l1 * np.cos(th1) + params.l2 * np.cos(th2)
    return x, y


def reward(state, params: PendubotParams = ACTUAL, sigma_c: float = 0.25):
    """Gaussian of the tip's distance to the upright tip position."""
    x, y = tip_position(state, params)
    d2 = x ** 2 + (y - (params.l1 + params.l2)) ** 2
    return np.exp(-0.5 * d2 / sigma_c ** 2)


def total_energy(state, params: PendubotParams):
    state = np.asarray(state, dtype=float)
    th1, th2, w1, w2 = np.moveaxis(state, -1, 0)
    m1, m2, l1, l2 = params.m1, params.m2, params.l1, params.l2
    kinetic = 0.5 * (m1 + m2) * l1 ** 2 * w1 ** 2 + 0.5 * m2 * l2 ** 2 * w2 ** 2 \
        + m2 * l1 * l2 * np.cos(th1 - th2) * w1 * w2
    potential = GRAVITY * ((m1 + m2) * l1 * np.cos(th1) + m2 * l2 * np.cos(th2))
    return kinetic + potential


def power_balance(state, u, params: PendubotParams):
    """Analytic dE/dt: input power minus frictional losses."""
    state = np.asarray(state, dtype=float)
    w1, w2 = state[..., 2], state[..., 3]
    return u * w1 - params.b1 * w1 ** 2 - params.b2 * (w2 - w1) ** 2


@dataclass
class EpisodeRecord:
    states: np.ndarray            # (n + 1, 4), includes the start state
    actions: np.ndarray           # (n, 1)
    rewards: np.ndarray           # (n,), reward of each state reached
    aborted: bool = False
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def cumulative_reward(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def inputs(self) -> np.ndarray:
        return np.hstack([self.states[:-1], self.actions])

    @property
    def targets(self) -> np.ndarray:
        return self.states[1:] - self.states[:-1]

    def __len__(self):
        return len(self.actions)


def run_episode(policy, system: PendubotParams = ACTUAL, noise_sd=0.0,
                seed=None, horizon: int = HORIZON, dt: float = DT,
                sigma_c: float = 0.25, start=HANGING) -> EpisodeRecord:
    """Run ``policy`` (state -> torque) on the simulated real system.

    Gaussian noise with per-dimension sd ``noise_sd`` is added to every
    state delta. The torque is clamped to the actuator limit.
    """
    rng = np.random.default_rng(seed)
    noise_sd = np.broadcast_to(np.asarray(noise_sd, dtype=float), (STATE_DIM,))
    t0 = time.perf_counter()
    x = np.array(start, dtype=float)
    states, actions, rewards = [x], [], []
    aborted = False
    for _ in range(horizon):
        u = float(np.clip(np.asarray(policy(x), dtype=float).reshape(-1)[0],
                          -U_MAX, U_MAX))
        try:
            nxt = step(x, u, system, dt)
        except DivergenceError:
            aborted = True
            break
        if np.any(noise_sd > 0):
            nxt = nxt + noise_sd * rng.standard_normal(STATE_DIM)
        x = nxt
        states.append(x)
        actions.append([u])
        rewards.append(float(reward(x, system, sigma_c)))
    return EpisodeRecord(
        states=np.array(states),
        actions=np.array(actions, dtype=float).reshape(-1, ACTION_DIM),
        rewards=np.array(rewards),
        aborted=aborted,
        wall_time=time.perf_counter() - t0,
    )
