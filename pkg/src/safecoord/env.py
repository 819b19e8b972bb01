"""Constrained cooperative multi-agent environments and a vectorized runner.

Two desk-scale tasks are provided:

* :class:`CorridorVelocityEnv` -- continuous 2D accelerations on a bounded strip.
  Agents are rewarded for forward speed; drag is lowest right next to the side
  walls, so the fastest behaviour is to hug a wall, which is exactly what the
  cost penalises.
* :class:`HazardGoalsEnv` -- a grid world with goal cells (resampled on capture)
  and hazard cells that cost when occupied or adjacent.

Every environment instance owns its own ``numpy.random.Generator``; nothing here
touches global random state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ActionError(ValueError):
    """Raised when a joint action does not belong to the action space."""


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "continuous" or "discrete"
    act_dim: int = 0
    low: float = -1.0
    high: float = 1.0
    n_actions: int = 0

    def __post_init__(self) -> None:
        if self.kind == "continuous":
            if self.act_dim < 1 or not self.low < self.high:
                raise ValueError("continuous action space needs act_dim >= 1 and low < high")
        elif self.kind == "discrete":
            if self.n_actions < 1:
                raise ValueError("discrete action space needs n_actions >= 1")
        else:
            raise ValueError(f"unknown action space kind {self.kind!r}")

    @property
    def continuous(self) -> bool:
        return self.kind == "continuous"

    @property
    def policy_out_dim(self) -> int:
        return self.act_dim if self.continuous else self.n_actions


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    obs_dim: int
    action_space: ActionSpace
    horizon: int
    cost_budget: float

    def __post_init__(self) -> None:
        if self.n_agents < 1:
            raise ValueError("n_agents must be positive")
        if self.obs_dim < 1:
            raise ValueError("obs_dim must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.cost_budget >= 0:
            raise ValueError("cost budget must be nonnegative")


@dataclass
class StepOutcome:
    next_obs: np.ndarray  # (n_agents, obs_dim)
    rewards: np.ndarray  # (n_agents,)
    costs: np.ndarray  # (n_agents,), nonnegative
    terminated: bool
    truncated: bool

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated


class MultiAgentEnv:
    """Common bookkeeping: seeding, step counter, horizon truncation, action checks."""

    spec: EnvSpec

    def __init__(self, seed: int | None = None) -> None:
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.episode_id = -1

    @property
    def n_agents(self) -> int:
        return self.spec.n_agents

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, int]:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self.episode_id += 1
        self._reset_state()
        return self._observe(), self.episode_id

    def step(self, joint_action) -> StepOutcome:
        actions = self.validate_action(joint_action)
        rewards, costs, terminated = self._transition(actions)
        self.t += 1
        truncated = (not terminated) and self.t >= self.spec.horizon
        return StepOutcome(
            next_obs=self._observe(),
            rewards=np.asarray(rewards, dtype=np.float64),
            costs=np.asarray(costs, dtype=np.float64),
            terminated=bool(terminated),
            truncated=bool(truncated),
        )

    def validate_action(self, joint_action) -> np.ndarray:
        space = self.spec.action_space
        a = np.asarray(joint_action)
        if space.continuous:
            a = a.astype(np.float64, copy=False)
            if a.shape != (self.n_agents, space.act_dim):
                raise ActionError(f"expected action shape {(self.n_agents, space.act_dim)}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ActionError("non-finite action")
            if np.any(a < space.low) or np.any(a > space.high):
                raise ActionError(f"action outside [{space.low}, {space.high}]")
            return a
        if a.shape != (self.n_agents,):
            raise ActionError(f"expected {self.n_agents} discrete actions, got shape {a.shape}")
        if not np.issubdtype(a.dtype, np.integer):
            if not np.all(np.equal(np.mod(a, 1), 0)):
                raise ActionError("discrete actions must be integers")
            a = a.astype(np.int64)
        if np.any(a < 0) or np.any(a >= space.n_actions):
            raise ActionError(f"discrete action outside [0, {space.n_actions})")
        return a

    # subclasses implement these
    def _reset_state(self) -> None:
        raise NotImplementedError

    def _observe(self) -> np.ndarray:
        raise NotImplementedError

    def _transition(self, actions: np.ndarray):
        raise NotImplementedError


@dataclass
class CorridorConfig:
    n_agents: int = 2
    horizon: int = 200
    length: float = 80.0
    width: float = 1.5
    dt: float = 0.1
    max_accel: float = 1.0
    drag_center: float = 1.0
    drag_wall: float = 0.25
    target_speed: float = 4.0
    proximity_radius: float = 0.3
    wall_margin: float = 0.05
    sensing_radius: float = 1.0
    wall_cost: float = 2.0
    contact_cost: float = 2.0
    cost_budget: float = 25.0


class CorridorVelocityEnv(MultiAgentEnv):
    """Velocity tracking on a walled strip ``[0, length] x [0, width]``.

    Per agent the observation is
    ``[x/L, y/W, vx/v*, vy/v*, wall_dist/(W/2), t/T]`` followed by, for every
    other agent, ``[dx, dy, dvx/v*, dvy/v*]`` (zeroed outside ``sensing_radius``).

    The shared reward is the agent-mean of ``clip(vx / v*, -1, 1)``.  Agent ``i``
    pays ``wall_cost`` while within ``wall_margin`` of any wall and
    ``contact_cost`` while another agent is within ``proximity_radius``.
    """

    def __init__(self, config: CorridorConfig | None = None, seed: int | None = None) -> None:
        super().__init__(seed)
        self.cfg = cfg = config or CorridorConfig()
        if cfg.n_agents > 8:
            raise ValueError("at most 8 agents")
        obs_dim = 6 + 4 * (cfg.n_agents - 1)
        self.spec = EnvSpec(
            n_agents=cfg.n_agents,
            obs_dim=obs_dim,
            action_space=ActionSpace("continuous", act_dim=2, low=-1.0, high=1.0),
            horizon=cfg.horizon,
            cost_budget=cfg.cost_budget,
        )
        self.pos = np.zeros((cfg.n_agents, 2))
        self.vel = np.zeros((cfg.n_agents, 2))

    def _reset_state(self) -> None:
        cfg = self.cfg
        n = cfg.n_agents
        # rejection-sample spawn points that are pairwise outside the proximity radius
        for _ in range(1000):
            x = self.rng.uniform(0.25 * cfg.length, 0.25 * cfg.length + 2.5 * n)
            xs = x + self.rng.uniform(-1.0, 1.0, size=n)
            ys = self.rng.uniform(0.3 * cfg.width, 0.7 * cfg.width, size=n)
            pos = np.stack([xs, ys], axis=1)
            if n == 1 or _min_pair_distance(pos) > 2.0 * cfg.proximity_radius:
                break
        self.pos = pos
        self.vel = np.zeros((n, 2))

    def drag(self, y: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        half = 0.5 * cfg.width
        dist = np.minimum(y, cfg.width - y)
        frac = np.clip(dist / half, 0.0, 1.0)
        return cfg.drag_wall + (cfg.drag_center - cfg.drag_wall) * frac

    def touching_wall(self) -> np.ndarray:
        cfg = self.cfg
        m = cfg.wall_margin
        x, y = self.pos[:, 0], self.pos[:, 1]
        return (y <= m) | (y >= cfg.width - m) | (x <= m) | (x >= cfg.length - m)

    def in_contact(self) -> np.ndarray:
        diff = self.pos[:, None, :] - self.pos[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        return (dist < self.cfg.proximity_radius).any(axis=1)

    def costs(self) -> np.ndarray:
        cfg = self.cfg
        return cfg.wall_cost * self.touching_wall() + cfg.contact_cost * self.in_contact()

    def _transition(self, actions: np.ndarray):
        cfg = self.cfg
        drag = self.drag(self.pos[:, 1])[:, None]
        self.vel = self.vel + cfg.dt * (cfg.max_accel * actions - drag * self.vel)
        self.pos = self.pos + cfg.dt * self.vel
        lo = np.array([0.0, 0.0])
        hi = np.array([cfg.length, cfg.width])
        clamped = (self.pos < lo) | (self.pos > hi)
        self.pos = np.clip(self.pos, lo, hi)
        self.vel[clamped] = 0.0
        speed = np.clip(self.vel[:, 0] / cfg.target_speed, -1.0, 1.0)
        rewards = np.full(cfg.n_agents, speed.mean())
        return rewards, self.costs(), False

    def _observe(self) -> np.ndarray:
        cfg = self.cfg
        n = cfg.n_agents
        v_scale = cfg.target_speed
        obs = np.zeros((n, self.spec.obs_dim))
        wall_dist = np.minimum(self.pos[:, 1], cfg.width - self.pos[:, 1])
        obs[:, 0] = self.pos[:, 0] / cfg.length
        obs[:, 1] = self.pos[:, 1] / cfg.width
        obs[:, 2:4] = self.vel / v_scale
        obs[:, 4] = wall_dist / (0.5 * cfg.width)
        obs[:, 5] = self.t / cfg.horizon
        for i in range(n):
            col = 6
            for j in range(n):
                if j == i:
                    continue
                d = self.pos[j] - self.pos[i]
                if np.hypot(d[0], d[1]) <= cfg.sensing_radius:
                    obs[i, col : col + 2] = d
                    obs[i, col + 2 : col + 4] = (self.vel[j] - self.vel[i]) / v_scale
                col += 4
        return obs


def _min_pair_distance(pos: np.ndarray) -> float:
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    return float(dist.min())


# stay + 8 compass moves
GRID_MOVES = np.array(
    [[0, 0], [0, 1], [1, 1], [1, 0], [1, -1], [0, -1], [-1, -1], [-1, 0], [-1, 1]],
    dtype=np.int64,
)


@dataclass
class HazardGoalsConfig:
    n_agents: int = 2
    horizon: int = 100
    width: int = 10
    height: int = 10
    n_goals: int = 2
    n_hazards: int = 5
    goal_bonus: float = 1.0
    hazard_cost: float = 1.0
    adjacent_cost: float = 0.5
    cost_budget: float = 25.0


class HazardGoalsEnv(MultiAgentEnv):
    """Grid navigation with resampled goals and costly hazard cells.

    Actions are ``0`` (stay) and ``1..8`` (compass moves, clamped at the border).
    Observation per agent: own cell (2), offset to the nearest goal (2), the 3x3
    hazard neighbourhood (9), offsets to every other agent (2 each), ``t/T``.
    Cells are in ``(col, row)`` order.

    Spawn cells are at Chebyshev distance >= 2 from every hazard, so an agent that
    never moves incurs no cost.
    """

    def __init__(self, config: HazardGoalsConfig | None = None, seed: int | None = None) -> None:
        super().__init__(seed)
        self.cfg = cfg = config or HazardGoalsConfig()
        if cfg.n_agents > 8:
            raise ValueError("at most 8 agents")
        if cfg.width < 4 or cfg.height < 4:
            raise ValueError("grid must be at least 4x4")
        obs_dim = 2 + 2 + 9 + 2 * (cfg.n_agents - 1) + 1
        self.spec = EnvSpec(
            n_agents=cfg.n_agents,
            obs_dim=obs_dim,
            action_space=ActionSpace("discrete", n_actions=len(GRID_MOVES)),
            horizon=cfg.horizon,
            cost_budget=cfg.cost_budget,
        )
        self.agents = np.zeros((cfg.n_agents, 2), dtype=np.int64)
        self.goals = np.zeros((cfg.n_goals, 2), dtype=np.int64)
        self.hazards = np.zeros((cfg.n_hazards, 2), dtype=np.int64)
        self.spawn_cells = np.zeros((cfg.n_agents, 2), dtype=np.int64)

    def _cells(self) -> np.ndarray:
        cols, rows = np.meshgrid(np.arange(self.cfg.width), np.arange(self.cfg.height), indexing="ij")
        return np.stack([cols.ravel(), rows.ravel()], axis=1)

    def _reset_state(self) -> None:
        cfg = self.cfg
        cells = self._cells()
        for _ in range(1000):
            order = self.rng.permutation(len(cells))
            hazards = cells[order[: cfg.n_hazards]]
            rest = cells[order[cfg.n_hazards :]]
            cheb = np.abs(rest[:, None, :] - hazards[None, :, :]).max(-1).min(-1) if cfg.n_hazards else np.full(len(rest), 99)
            safe = rest[cheb >= 2]
            if len(safe) < cfg.n_agents or len(rest) < cfg.n_agents + cfg.n_goals:
                continue
            spawn = safe[self.rng.choice(len(safe), size=cfg.n_agents, replace=False)]
            taken = {tuple(c) for c in spawn}
            free = np.array([c for c in rest if tuple(c) not in taken])
            goals = free[self.rng.choice(len(free), size=cfg.n_goals, replace=False)]
            break
        else:  # pragma: no cover - only reachable with absurd configs
            raise RuntimeError("could not place hazards, goals and spawn cells")
        self.hazards = hazards
        self.goals = goals
        self.spawn_cells = spawn.copy()
        self.agents = spawn.copy()

    def hazard_distance(self, cell: np.ndarray) -> int:
        if len(self.hazards) == 0:
            return 99
        return int(np.abs(self.hazards - cell).max(-1).min())

    def cell_cost(self, cell: np.ndarray) -> float:
        d = self.hazard_distance(cell)
        if d == 0:
            return self.cfg.hazard_cost
        if d == 1:
            return self.cfg.adjacent_cost
        return 0.0

    def _resample_goal(self, g: int) -> None:
        blocked = {tuple(c) for c in self.hazards} | {tuple(c) for c in self.agents} | {tuple(c) for c in self.goals}
        free = [c for c in self._cells() if tuple(c) not in blocked]
        self.goals[g] = free[self.rng.integers(len(free))]

    def _transition(self, actions: np.ndarray):
        cfg = self.cfg
        hi = np.array([cfg.width - 1, cfg.height - 1])
        self.agents = np.clip(self.agents + GRID_MOVES[actions], 0, hi)
        rewards = np.zeros(cfg.n_agents)
        for i in range(cfg.n_agents):
            for g in range(cfg.n_goals):
                if np.array_equal(self.agents[i], self.goals[g]):
                    rewards[i] += cfg.goal_bonus
                    self._resample_goal(g)
        costs = np.array([self.cell_cost(c) for c in self.agents])
        return rewards, costs, False

    def _observe(self) -> np.ndarray:
        cfg = self.cfg
        n = cfg.n_agents
        scale = np.array([cfg.width - 1, cfg.height - 1], dtype=np.float64)
        hazard_set = {tuple(c) for c in self.hazards}
        obs = np.zeros((n, self.spec.obs_dim))
        for i in range(n):
            me = self.agents[i]
            obs[i, 0:2] = me / scale
            offsets = self.goals - me
            nearest = offsets[np.abs(offsets).max(-1).argmin()]
            obs[i, 2:4] = nearest / scale
            k = 4
            for dc in (-1, 0, 1):
                for dr in (-1, 0, 1):
                    obs[i, k] = float((me[0] + dc, me[1] + dr) in hazard_set)
                    k += 1
            for j in range(n):
                if j != i:
                    obs[i, k : k + 2] = (self.agents[j] - me) / scale
                    k += 2
            obs[i, k] = self.t / cfg.horizon
        return obs


ENV_REGISTRY = {
    "corridor_velocity": (CorridorVelocityEnv, CorridorConfig),
    "hazard_goals": (HazardGoalsEnv, HazardGoalsConfig),
}


def make_env(name: str, params: dict | None = None, seed: int | None = None) -> MultiAgentEnv:
    try:
        env_cls, cfg_cls = ENV_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENV_REGISTRY)}") from None
    return env_cls(cfg_cls(**(params or {})), seed=seed)


@dataclass
class VecStepResult:
    outcomes: list[StepOutcome]
    obs: np.ndarray  # (E, n, obs_dim) observations to act on next (post auto-reset)
    reset_mask: np.ndarray  # (E,) bool, instance was reset after this step
    episode_ids: np.ndarray  # (E,) current episode id per instance


@dataclass
class VecRunner:
    """Steps ``E`` independent environment instances and auto-resets finished ones.

    Each instance draws its reset seeds from its own generator, seeded from
    ``seeds[e]``. A reset notification (``reset_mask[e]``) is emitted whenever
    instance ``e`` finished an episode on this step so callers can clear any
    per-instance state such as a blackboard.
    """

    envs: list[MultiAgentEnv]
    seeds: Sequence[int]
    obs: np.ndarray = field(init=False)
    episode_ids: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if len(self.envs) != len(self.seeds):
            raise ValueError("need one seed per environment instance")
        if not self.envs:
            raise ValueError("need at least one environment instance")
        self._seed_streams = [np.random.default_rng(int(s)) for s in self.seeds]
        self.reset_all()

    @classmethod
    def from_name(cls, name: str, params: dict | None, seeds: Sequence[int]) -> "VecRunner":
        return cls([make_env(name, params) for _ in seeds], list(seeds))

    @property
    def n_envs(self) -> int:
        return len(self.envs)

    @property
    def spec(self) -> EnvSpec:
        return self.envs[0].spec

    def _next_seed(self, e: int) -> int:
        return int(self._seed_streams[e].integers(2**31 - 1))

    def reset_all(self) -> np.ndarray:
        first = [env.reset(self._next_seed(e)) for e, env in enumerate(self.envs)]
        self.obs = np.stack([o for o, _ in first])
        self.episode_ids = np.array([ep for _, ep in first])
        return self.obs

    def step(self, joint_actions) -> VecStepResult:
        if len(joint_actions) != self.n_envs:
            raise ValueError(f"expected actions for {self.n_envs} instances, got {len(joint_actions)}")
        outcomes = []
        reset_mask = np.zeros(self.n_envs, dtype=bool)
        next_obs = np.empty_like(self.obs)
        for e, env in enumerate(self.envs):
            out = env.step(joint_actions[e])
            outcomes.append(out)
            if out.done:
                next_obs[e], self.episode_ids[e] = env.reset(self._next_seed(e))
                reset_mask[e] = True
            else:
                next_obs[e] = out.next_obs
        self.obs = next_obs
        return VecStepResult(outcomes, next_obs.copy(), reset_mask, self.episode_ids.copy())
