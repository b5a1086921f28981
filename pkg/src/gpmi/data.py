"""Transition datasets: state-action inputs paired with state differences."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class TransitionDataset:
    """Inputs (x_t, u_t) and targets x_{t+1} - x_t, one row per transition."""

    inputs: np.ndarray
    targets: np.ndarray
    state_dim: int
    action_dim: int

    def __post_init__(self):
        E, U = self.state_dim, self.action_dim
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(-1, E + U)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1, E)
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets must have equal length")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("dataset entries must be finite")

    @classmethod
    def empty(cls, state_dim: int, action_dim: int) -> "TransitionDataset":
        return cls(np.zeros((0, state_dim + action_dim)), np.zeros((0, state_dim)),
                   state_dim, action_dim)

    @classmethod
    def from_trajectory(cls, states, actions) -> "TransitionDataset":
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float).reshape(len(states) - 1, -1)
        return cls(np.hstack([states[:-1], actions]), np.diff(states, axis=0),
                   states.shape[1], actions.shape[1])

    def __len__(self):
        return len(self.inputs)

    def column(self, i: int) -> np.ndarray:
        return self.targets[:, i]

    def extend(self, other: "TransitionDataset") -> "TransitionDataset":
        if (other.state_dim, other.action_dim) != (self.state_dim, self.action_dim):
            raise ValueError("dimension mismatch")
        return TransitionDataset(np.vstack([self.inputs, other.inputs]),
                                 np.vstack([self.targets, other.targets]),
                                 self.state_dim, self.action_dim)

    def subset(self, idx) -> "TransitionDataset":
        return TransitionDataset(self.inputs[idx], self.targets[idx],
                                 self.state_dim, self.action_dim)

    def header(self) -> list[str]:
        E, U = self.state_dim, self.action_dim
        return ([f"x{i}" for i in range(E)] + [f"u{i}" for i in range(U)]
                + [f"dx{i}" for i in range(E)])

    def to_csv(self, path, extra: dict | None = None, append: bool = False):
        """Write rows ``x..., u..., dx...``; ``extra`` adds constant columns
        (e.g. the episode index) in front."""
        path = Path(path)
        extra = extra or {}
        write_header = not (append and path.exists() and path.stat().st_size > 0)
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if write_header:
                w.writerow(list(extra) + self.header())
            for inp, tgt in zip(self.inputs, self.targets):
                w.writerow([*extra.values(), *map(repr, inp.tolist()),
                            *map(repr, tgt.tolist())])

    @classmethod
    def from_csv(cls, path) -> "TransitionDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: missing header row")
        header = rows[0]
        xs = [i for i, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()]
        us = [i for i, h in enumerate(header) if h.startswith("u") and h[1:].isdigit()]
        dxs = [i for i, h in enumerate(header) if h.startswith("dx")]
        if not xs or len(xs) != len(dxs):
            raise ValueError(f"{path}: header must contain x*, u*, dx* columns")
        data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(header))
        return cls(data[:, xs + us], data[:, dxs], len(xs), len(us))
