"""Per-instance shared blackboard with gated writes and cosine top-k reads."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

COSINE_EPS = 1e-8


@dataclass
class BlackboardEntry:
    x: np.ndarray  # state summary, (d_msg,)
    u: np.ndarray  # intent, (d_msg,)
    y: float  # yield flag in [0, 1]
    p: float  # hazard probability in [0, 1]
    w: int  # write bit
    env_id: int = 0
    agent_id: int = 0

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.u))):
            raise ValueError("entry vectors must be finite")
        if not (0.0 <= self.y <= 1.0 and 0.0 <= self.p <= 1.0):
            raise ValueError("yield flag and hazard probability must lie in [0, 1]")
        if self.w not in (0, 1):
            raise ValueError("write bit must be 0 or 1")

    def psi(self) -> np.ndarray:
        """Slot payload ``[x; u; y; p]``."""
        return np.concatenate([self.x, self.u, [self.y, self.p]])


@dataclass
class MemoryContext:
    vector: np.ndarray  # (k * (2 d_msg + 2),)
    occupancy: int
    senders: tuple[int, ...]  # ranked agent ids, length == occupancy


def gate(p, tau):
    """Write bit(s): 1 iff ``p > tau``. Works elementwise on arrays."""
    out = np.greater(p, tau).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def slot_width(d_msg: int) -> int:
    return 2 * d_msg + 2


def cosine_scores(candidates: np.ndarray, query: np.ndarray, eps: float = COSINE_EPS) -> np.ndarray:
    """``<x_j / (|x_j| + eps), q / (|q| + eps)>`` along the last axis."""
    cn = candidates / (np.linalg.norm(candidates, axis=-1, keepdims=True) + eps)
    qn = query / (np.linalg.norm(query, axis=-1, keepdims=True) + eps)
    return (cn * qn).sum(-1)


class Blackboard:
    """One current entry per (instance, agent); entries with ``w = 0`` are kept but inactive.

    Reads consider only active entries of *other* agents in the same instance,
    rank them by cosine similarity to the reader's query (ties by ascending agent
    id) and concatenate the top ``k`` payloads, zero-padding the rest.
    """

    def __init__(self, n_envs: int, n_agents: int, d_msg: int, eps: float = COSINE_EPS) -> None:
        self.n_envs = n_envs
        self.n_agents = n_agents
        self.d_msg = d_msg
        self.eps = eps
        self.x = np.zeros((n_envs, n_agents, d_msg))
        self.u = np.zeros((n_envs, n_agents, d_msg))
        self.y = np.zeros((n_envs, n_agents))
        self.p = np.zeros((n_envs, n_agents))
        self.w = np.zeros((n_envs, n_agents), dtype=np.int64)
        self.present = np.zeros((n_envs, n_agents), dtype=bool)
        self.n_writes = 0
        self.n_reads = 0

    # -- writes -----------------------------------------------------------
    def write(self, entry: BlackboardEntry) -> None:
        e, i = entry.env_id, entry.agent_id
        self.x[e, i] = entry.x
        self.u[e, i] = entry.u
        self.y[e, i] = entry.y
        self.p[e, i] = entry.p
        self.w[e, i] = entry.w
        self.present[e, i] = True
        self.n_writes += 1

    def write_all(self, x, u, y, p, w) -> None:
        """Overwrite every (instance, agent) slot at once; arrays are (E, n, ...)."""
        self.x[...] = x
        self.u[...] = u
        self.y[...] = y
        self.p[...] = p
        self.w[...] = w
        self.present[...] = True
        self.n_writes += self.n_envs * self.n_agents

    def entry(self, env_id: int, agent_id: int) -> BlackboardEntry | None:
        if not self.present[env_id, agent_id]:
            return None
        return BlackboardEntry(
            self.x[env_id, agent_id].copy(),
            self.u[env_id, agent_id].copy(),
            float(self.y[env_id, agent_id]),
            float(self.p[env_id, agent_id]),
            int(self.w[env_id, agent_id]),
            env_id,
            agent_id,
        )

    def active(self) -> np.ndarray:
        return self.present & (self.w == 1)

    def clear(self, env_id: int) -> None:
        self.x[env_id] = 0.0
        self.u[env_id] = 0.0
        self.y[env_id] = 0.0
        self.p[env_id] = 0.0
        self.w[env_id] = 0
        self.present[env_id] = False

    # -- reads ------------------------------------------------------------
    def payload(self) -> np.ndarray:
        """All slot payloads ``[x; u; y; p]`` as (E, n, 2 d_msg + 2)."""
        return np.concatenate([self.x, self.u, self.y[..., None], self.p[..., None]], axis=-1)

    def read_topk(self, env_id: int, agent_id: int, query: np.ndarray, k: int) -> MemoryContext:
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.d_msg,):
            raise ValueError(f"query must have length {self.d_msg}")
        ctx, senders, occ = self._rank(
            self.x[env_id][None], self.active()[env_id][None], self.payload()[env_id][None], query[None], k, agent_id
        )
        self.n_reads += 1
        occ0 = int(occ[0])
        return MemoryContext(ctx[0], occ0, tuple(int(s) for s in senders[0, :occ0]))

    def read_all(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Contexts for every reader at once.

        Returns ``(contexts (E, n, k*slot), senders (E, n, k) with -1 padding,
        occupancy (E, n))``.
        """
        E, n = self.n_envs, self.n_agents
        ctxs = np.zeros((E, n, k * slot_width(self.d_msg)))
        senders = np.full((E, n, k), -1, dtype=np.int64)
        occ = np.zeros((E, n), dtype=np.int64)
        active = self.active()
        payload = self.payload()
        for i in range(n):
            c, s, o = self._rank(self.x, active, payload, queries[:, i], k, i)
            ctxs[:, i], senders[:, i], occ[:, i] = c, s, o
        self.n_reads += E * n
        return ctxs, senders, occ

    def _rank(self, x, active, payload, queries, k, reader):
        # x: (B, n, d), active: (B, n), payload: (B, n, slot), queries: (B, d)
        B = x.shape[0]
        width = payload.shape[-1]
        scores = cosine_scores(x, queries[:, None, :], self.eps)
        valid = active.copy()
        valid[:, reader] = False
        keyed = np.where(valid, -scores, np.inf)
        # stable sort keeps ascending agent id among equal scores
        order = np.argsort(keyed, axis=1, kind="stable")[:, :k]
        chosen_valid = np.take_along_axis(valid, order, axis=1)
        occ = chosen_valid.sum(1)
        senders = np.where(chosen_valid, order, -1)
        slots = np.take_along_axis(payload, order[..., None], axis=1) * chosen_valid[..., None]
        ctx = np.zeros((B, k, width))
        m = min(k, slots.shape[1])
        ctx[:, :m] = slots
        if senders.shape[1] < k:
            senders = np.concatenate([senders, np.full((B, k - senders.shape[1]), -1)], axis=1)
        return ctx.reshape(B, k * width), senders, occ


@dataclass(frozen=True)
class ThresholdState:
    tau: float = 0.10
    rate_ema: float = 0.05
    beta: float = 0.99
    lr: float = 0.05
    target_rate: float = 0.05
    tau_min: float = 0.05
    tau_max: float = 0.95
    adaptive: bool = True

    def __post_init__(self) -> None:
        if not self.tau_min <= self.tau <= self.tau_max:
            raise ValueError("tau must lie within [tau_min, tau_max]")
        if not 0.0 <= self.rate_ema <= 1.0:
            raise ValueError("write-rate EMA must lie in [0, 1]")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if not self.lr > 0:
            raise ValueError("threshold step size must be positive")
        if not 0.0 < self.target_rate < 1.0:
            raise ValueError("target write rate must lie in (0, 1)")


def update_threshold(state: ThresholdState, rate: float) -> ThresholdState:
    """EMA the observed write rate, then step tau toward the target rate and clip.

    Writing more than the target raises the threshold.
    """
    if not state.adaptive:
        return state
    if not 0.0 <= rate <= 1.0:
        raise ValueError("observed write rate must lie in [0, 1]")
    ema = state.beta * state.rate_ema + (1.0 - state.beta) * rate
    tau = float(np.clip(state.tau + state.lr * (ema - state.target_rate), state.tau_min, state.tau_max))
    return replace(state, tau=tau, rate_ema=float(ema))
