"""Hazard events and lookahead labels built from per-step costs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class HazardLabelConfig:
    threshold: float = 0.1  # cost level above which a step is a hazard event
    horizon: int = 8  # lookahead window length H

    def __post_init__(self) -> None:
        if not self.threshold > 0:
            raise ValueError("hazard cost threshold must be positive")
        if self.horizon < 0 or int(self.horizon) != self.horizon:
            raise ValueError("lookahead horizon must be a nonnegative integer")


def instantaneous(costs, threshold: float):
    """Hazard event bits ``1[c > threshold]`` (elementwise)."""
    out = np.greater(costs, threshold).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def lookahead(events, horizon: int, dones=None) -> np.ndarray:
    """Window-max of hazard events over ``[t, t + horizon]`` within each episode.

    ``events`` and ``dones`` share a leading time axis; any trailing axes (agents,
    instances) are treated independently. ``dones[t]`` marks ``t`` as the last
    step of its episode, so no window reaches past it. The sequence end is an
    implicit boundary.
    """
    z = np.asarray(events).astype(bool)
    T = z.shape[0]
    if dones is None:
        done = np.zeros(z.shape, dtype=bool)
    else:
        d = np.asarray(dones, dtype=bool)
        done = np.broadcast_to(d.reshape(d.shape + (1,) * (z.ndim - d.ndim)), z.shape)
    # backward scan: index of the next event at or after t inside the same episode
    big = np.iinfo(np.int64).max // 2
    nxt = np.full(z.shape[1:], big, dtype=np.int64)
    h = np.zeros(z.shape, dtype=np.int64)
    for t in range(T - 1, -1, -1):
        nxt = np.where(done[t], big, nxt)
        nxt = np.where(z[t], t, nxt)
        h[t] = (nxt - t) <= horizon
    return h


def label_batch(costs: np.ndarray, dones: np.ndarray, cfg: HazardLabelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Events and lookahead labels for a (T, ...) cost array; returns ``(z, h)``."""
    z = instantaneous(np.asarray(costs), cfg.threshold)
    return np.asarray(z), lookahead(z, cfg.horizon, dones)
