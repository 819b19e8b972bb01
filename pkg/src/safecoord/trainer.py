"""Constrained multi-agent PPO with a hazard-gated blackboard.

One iteration = collect ``rollout_length`` steps from ``n_envs`` instances, then
run ``epochs`` passes of minibatch updates for actors, message head and both
critics, then one projected dual step on the Lagrange multiplier.

Per rollout step the order is fixed: write-info, gate & write, adapt threshold,
read, act, store (clearing boards of instances that reset).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import hazard as hz
from .approx import (
    Actor,
    Critic,
    MessageHead,
    categorical_entropy_grads,
    categorical_log_prob_grads,
    clip_grad_norm,
    gaussian_log_prob_grads,
    make_optimizer,
    sigmoid,
)
from .blackboard import Blackboard, ThresholdState, gate, slot_width, update_threshold
from .config import ExperimentConfig
from .env import VecRunner, make_env
from .metrics import EvalCheckpoint, episodic_aggregate


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite during an update."""


# -- pure loss pieces ---------------------------------------------------------


def compute_gae(signal, values, bootstrap, gamma: float, lam: float, dones):
    """Generalized advantage estimates and return targets along axis 0.

    ``dones[t]`` zeroes both the bootstrap from ``t + 1`` and the recursion.
    ``bootstrap`` is the value after the last step. Trailing axes are independent;
    ``dones`` may omit trailing axes.
    """
    x = np.asarray(signal, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if x.shape != v.shape:
        raise ValueError(f"signal shape {x.shape} does not match values {v.shape}")
    d = np.asarray(dones, dtype=np.float64)
    if d.shape[0] != x.shape[0]:
        raise ValueError("dones must be time-aligned with the signal")
    d = d.reshape(d.shape + (1,) * (x.ndim - d.ndim))
    T = x.shape[0]
    adv = np.zeros_like(x)
    last = np.zeros(x.shape[1:])
    next_v = np.asarray(bootstrap, dtype=np.float64) * np.ones(x.shape[1:])
    for t in range(T - 1, -1, -1):
        nonterm = 1.0 - d[t]
        delta = x[t] + gamma * next_v * nonterm - v[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
        next_v = v[t]
    return adv, adv + v


def hybrid_advantage(adv_r, adv_c, lam: float):
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return np.asarray(adv_r) - lam * np.asarray(adv_c)


def normalize_advantages(a: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return (a - a.mean()) / max(a.std(), floor)


def clip_surrogate(new_logp, old_logp, adv, eps: float) -> float:
    ratio = np.exp(np.asarray(new_logp) - np.asarray(old_logp))
    adv = np.asarray(adv)
    return float(-np.mean(np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)))


def clip_surrogate_grad(new_logp, old_logp, adv, eps: float) -> np.ndarray:
    """Gradient of :func:`clip_surrogate` w.r.t. ``new_logp``."""
    ratio = np.exp(np.asarray(new_logp) - np.asarray(old_logp))
    adv = np.asarray(adv)
    unclipped = ratio * adv <= np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    return np.where(unclipped, -ratio * adv, 0.0) / adv.size


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def wbce(logits, labels, pos_weight: float) -> float:
    """Mean of ``-[w h log p + (1-h) log(1-p)]`` with ``p = sigmoid(logit)``."""
    z = np.asarray(logits, dtype=np.float64)
    h = np.asarray(labels, dtype=np.float64)
    return float(np.mean(pos_weight * h * _softplus(-z) + (1.0 - h) * _softplus(z)))


def wbce_grad(logits, labels, pos_weight: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    h = np.asarray(labels, dtype=np.float64)
    p = sigmoid(z)
    return (pos_weight * h * (p - 1.0) + (1.0 - h) * p) / z.size


def wbce_pos_weight(labels, lo: float = 1.0, hi: float = 20.0) -> float:
    """Positive-class weight ``clip((1-q)/q, lo, hi)`` for batch positive rate ``q``."""
    h = np.asarray(labels)
    q = max(float(h.mean()) if h.size else 0.0, 1.0 / max(h.size, 1))
    return float(np.clip((1.0 - q) / q, lo, hi))


@dataclass(frozen=True)
class DualState:
    lam: float = 0.1
    lr: float = 5e-4
    budget: float = 25.0
    lam_max: float = 100.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= self.lam_max:
            raise ValueError("lambda must lie in [0, lambda_max]")


def dual_update(state: DualState, episodic_cost: float) -> DualState:
    """Projected ascent: ``lam <- clip(lam + lr (C - d), 0, lam_max)``."""
    lam = min(max(state.lam + state.lr * (episodic_cost - state.budget), 0.0), state.lam_max)
    return replace(state, lam=lam)


@dataclass
class LossBreakdown:
    clip: float = 0.0
    write_rate: float = 0.0
    write_coef: float = 0.0
    wbce: float = 0.0
    hazard_coef: float = 0.0
    entropy: float = 0.0
    entropy_coef: float = 0.0
    critic_r: float = 0.0
    critic_c: float = 0.0
    approx_kl: float = 0.0
    clip_frac: float = 0.0
    objective: float = 0.0  # agent sum of per-agent actor losses; this is what gets differentiated

    @property
    def write_penalty(self) -> float:
        return self.write_coef * self.write_rate

    @property
    def actor_total(self) -> float:
        """Per-agent actor loss averaged over agents (terms are agent means)."""
        return self.clip + self.write_penalty + self.hazard_coef * self.wbce - self.entropy_coef * self.entropy


@dataclass
class Counters:
    message_head_calls: int = 0
    threshold_updates: int = 0
    hazard_label_calls: int = 0
    wbce_calls: int = 0
    wbce_grad_abs: float = 0.0
    board_writes: int = 0
    board_reads: int = 0

    def touched_coordination(self) -> bool:
        return any(
            [
                self.message_head_calls,
                self.threshold_updates,
                self.hazard_label_calls,
                self.wbce_calls,
                self.wbce_grad_abs,
                self.board_writes,
                self.board_reads,
            ]
        )


# -- model --------------------------------------------------------------------


class Model:
    """Message head (shared), per-agent actors and the two centralized critics."""

    def __init__(self, cfg: ExperimentConfig, obs_dim: int, n_agents: int, action_space, rng: np.random.Generator):
        m = cfg.model
        self.n_agents = n_agents
        self.obs_dim = obs_dim
        self.continuous = action_space.continuous
        self.k = cfg.blackboard.k
        self.d_msg = m.d_msg
        self.ctx_dim = self.k * slot_width(m.d_msg)
        self.head = MessageHead(obs_dim, m.hidden, m.d_msg, m.layers, rng, m.init_scale)

        def new_actor():
            return Actor(
                obs_dim,
                self.ctx_dim,
                m.embed_dim,
                m.hidden,
                action_space.policy_out_dim,
                self.continuous,
                m.layers,
                rng,
                m.init_scale,
                m.policy_out_scale,
                m.log_std_init,
            )

        if m.share_actor_params:
            shared = new_actor()
            self.actors = [shared] * n_agents
        else:
            self.actors = [new_actor() for _ in range(n_agents)]
        critic_in = n_agents * obs_dim + n_agents
        self.critic_r = Critic(critic_in, m.hidden, m.layers, rng, m.init_scale)
        self.critic_c = Critic(critic_in, m.hidden, m.layers, rng, m.init_scale)

    def unique_actors(self) -> list[Actor]:
        seen, out = set(), []
        for a in self.actors:
            if id(a) not in seen:
                seen.add(id(a))
                out.append(a)
        return out

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = list(zip(self.head.param_names("message_head."), self.head.params))
        for j, a in enumerate(self.unique_actors()):
            out += list(zip(a.param_names(f"actor.{j}."), a.params))
        out += list(zip(self.critic_r.param_names("critic_reward."), self.critic_r.params))
        out += list(zip(self.critic_c.param_names("critic_cost."), self.critic_c.params))
        return out

    def load_named(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in self.named_params():
            if name not in values:
                raise ValueError(f"checkpoint is missing parameter {name}")
            if values[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {values[name].shape} vs {arr.shape}")
            arr[...] = values[name]

    def critic_inputs(self, obs: np.ndarray) -> np.ndarray:
        """Centralized inputs ``[all observations, one-hot agent id]`` shaped (..., n, D)."""
        lead = obs.shape[:-2]
        n = self.n_agents
        joint = obs.reshape(lead + (1, n * self.obs_dim))
        joint = np.broadcast_to(joint, lead + (n, n * self.obs_dim))
        eye = np.broadcast_to(np.eye(n), lead + (n, n))
        return np.concatenate([joint, eye], axis=-1)

    def values(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = self.critic_inputs(obs)
        return self.critic_r.forward(x)[0], self.critic_c.forward(x)[0]


# -- rollout storage ----------------------------------------------------------


class RolloutBuffer:
    """Time-major storage shaped (T, E, n, ...) plus post-processed targets."""

    def __init__(self, T: int, E: int, n: int, obs_dim: int, ctx_dim: int, k: int, act_shape: tuple, discrete: bool):
        self.T, self.E, self.n = T, E, n
        self.obs = np.zeros((T, E, n, obs_dim))
        self.ctx = np.zeros((T, E, n, ctx_dim))
        self.senders = np.full((T, E, n, k), -1, dtype=np.int64)
        self.occupancy = np.zeros((T, E, n), dtype=np.int64)
        self.actions = np.zeros((T, E, n) + act_shape, dtype=np.int64 if discrete else np.float64)
        self.logp = np.zeros((T, E, n))
        self.rewards = np.zeros((T, E, n))
        self.costs = np.zeros((T, E, n))
        self.v_r = np.zeros((T, E, n))
        self.v_c = np.zeros((T, E, n))
        self.logits = np.zeros((T, E, n))
        self.writes = np.zeros((T, E, n), dtype=np.int64)
        self.terminated = np.zeros((T, E), dtype=bool)
        self.truncated = np.zeros((T, E), dtype=bool)
        self.ptr = 0
        self.sealed = False
        # post-processed
        self.events = self.labels = None
        self.adv_r = self.adv_c = self.ret_r = self.ret_c = None

    @property
    def dones(self) -> np.ndarray:
        return self.terminated | self.truncated

    def add(self, **fields) -> None:
        if self.sealed:
            raise RuntimeError("buffer is sealed")
        if self.ptr >= self.T:
            raise RuntimeError("buffer is full")
        t = self.ptr
        for name, value in fields.items():
            getattr(self, name)[t] = value
        self.ptr += 1

    def seal(self, last_v_r, last_v_c, gamma, gae_lambda, hazard_cfg: hz.HazardLabelConfig | None) -> None:
        if self.ptr != self.T:
            raise RuntimeError("buffer is not full")
        dones = self.dones
        self.adv_r, self.ret_r = compute_gae(self.rewards, self.v_r, last_v_r, gamma, gae_lambda, dones)
        self.adv_c, self.ret_c = compute_gae(self.costs, self.v_c, last_v_c, gamma, gae_lambda, dones)
        if hazard_cfg is not None:
            self.events, self.labels = hz.label_batch(self.costs, dones, hazard_cfg)
        self.sealed = True

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape((self.T * self.E,) + arr.shape[2:])


@dataclass
class Batch:
    obs: np.ndarray  # (B, n, obs_dim)
    senders: np.ndarray  # (B, n, k)
    actions: np.ndarray
    old_logp: np.ndarray  # (B, n)
    adv_r: np.ndarray
    adv_c: np.ndarray
    ret_r: np.ndarray
    ret_c: np.ndarray
    writes: np.ndarray
    labels: np.ndarray | None


def make_batch(buf: RolloutBuffer, idx: np.ndarray) -> Batch:
    return Batch(
        obs=buf.flat("obs")[idx],
        senders=buf.flat("senders")[idx],
        actions=buf.flat("actions")[idx],
        old_logp=buf.flat("logp")[idx],
        adv_r=buf.flat("adv_r")[idx],
        adv_c=buf.flat("adv_c")[idx],
        ret_r=buf.flat("ret_r")[idx],
        ret_c=buf.flat("ret_c")[idx],
        writes=buf.flat("writes")[idx],
        labels=None if buf.labels is None else buf.flat("labels")[idx],
    )


@dataclass
class LossCoefs:
    clip_eps: float = 0.2
    write_penalty: float = 0.001
    hazard: float = 0.5
    entropy: float = 0.0
    blackboard: bool = True
    uses_head: bool = True

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "LossCoefs":
        return cls(
            clip_eps=cfg.ppo.clip_eps,
            write_penalty=cfg.hazard.write_penalty,
            hazard=cfg.hazard.loss_coef,
            entropy=cfg.ppo.entropy_coef,
            blackboard=cfg.blackboard.enabled,
            uses_head=cfg.uses_message_head,
        )


def rebuild_contexts(psi: np.ndarray, senders: np.ndarray) -> np.ndarray:
    """Gather sender payloads: psi (B, n, slot), senders (B, n, k) -> (B, n, k*slot)."""
    B, n, k = senders.shape
    valid = senders >= 0
    rows = np.arange(B)[:, None, None]
    gathered = psi[rows, np.where(valid, senders, 0)] * valid[..., None]
    return gathered.reshape(B, n, k * psi.shape[-1])


def actor_loss_and_grads(model: Model, batch: Batch, lam: float, coefs: LossCoefs, counters: Counters | None = None):
    """Agent-summed actor loss and its gradients.

    The breakdown reports agent means; ``objective`` is the differentiated sum.
    Returns ``(LossBreakdown, {"actors": [grads per unique actor], "head": grads or None})``.
    Contexts are rebuilt from the current message head using the stored sender
    ranking, so the head also receives policy-gradient signal through the
    payloads other agents read.
    """
    B, n = batch.obs.shape[:2]
    d = model.d_msg
    lb = LossBreakdown(write_coef=coefs.write_penalty, hazard_coef=coefs.hazard, entropy_coef=coefs.entropy)

    head_out = head_cache = None
    if coefs.uses_head:
        head_out, head_cache = model.head.forward(batch.obs.reshape(B * n, -1))
        if counters is not None:
            counters.message_head_calls += 1
    if coefs.blackboard:
        psi = np.concatenate(
            [head_out.x, head_out.u, head_out.y[:, None], head_out.p[:, None]], axis=-1
        ).reshape(B, n, -1)
        ctx = rebuild_contexts(psi, batch.senders)
    else:
        ctx = np.zeros((B, n, model.ctx_dim))

    adv = normalize_advantages(hybrid_advantage(batch.adv_r, batch.adv_c, lam))
    g_ctx = np.zeros_like(ctx)
    actor_grads: dict[int, list[np.ndarray]] = {}
    kls, fracs = [], []
    for i, actor in enumerate(model.actors):
        dist, cache = actor.forward(batch.obs[:, i], ctx[:, i])
        new_logp = dist.log_prob(batch.actions[:, i])
        old = batch.old_logp[:, i]
        lb.clip += clip_surrogate(new_logp, old, adv[:, i], coefs.clip_eps)
        g_logp = clip_surrogate_grad(new_logp, old, adv[:, i], coefs.clip_eps)
        ent = dist.entropy()
        lb.entropy += float(ent.mean())
        if dist.continuous:
            g_mean_lp, g_lstd_lp = gaussian_log_prob_grads(dist.mean, dist.log_std, batch.actions[:, i])
            g_out = g_logp[:, None] * g_mean_lp
            # entropy of a state-independent Gaussian: d/dlog_std = 1 per dim
            g_lstd = (g_logp[:, None] * g_lstd_lp).sum(0) - coefs.entropy * np.ones_like(dist.log_std)
        else:
            g_out = g_logp[:, None] * categorical_log_prob_grads(dist.logits, batch.actions[:, i])
            g_out = g_out - coefs.entropy * categorical_entropy_grads(dist.logits) / B
            g_lstd = None
        grads, g_c = actor.backward(cache, g_out, g_lstd)
        g_ctx[:, i] = g_c
        key = id(actor)
        if key in actor_grads:
            actor_grads[key] = [a + b for a, b in zip(actor_grads[key], grads)]
        else:
            actor_grads[key] = grads
        ratio = np.exp(new_logp - old)
        kls.append(float(np.mean(old - new_logp)))
        fracs.append(float(np.mean(np.abs(ratio - 1.0) > coefs.clip_eps)))
        lb.write_rate += float(np.mean(batch.writes[:, i]))
    lb.approx_kl = float(np.mean(kls))
    lb.clip_frac = float(np.mean(fracs))
    lb.clip /= n
    lb.entropy /= n
    lb.write_rate /= n

    head_grads = None
    if coefs.uses_head:
        g_logit = np.zeros(B * n)
        if coefs.hazard > 0:
            omega = wbce_pos_weight(batch.labels)
            logits = head_out.logit.reshape(B, n)
            for i in range(n):
                lb.wbce += wbce(logits[:, i], batch.labels[:, i], omega)
            g_w = coefs.hazard * np.stack(
                [wbce_grad(logits[:, i], batch.labels[:, i], omega) for i in range(n)], axis=1
            ).reshape(B * n)
            g_logit += g_w
            if counters is not None:
                counters.wbce_calls += 1
                counters.wbce_grad_abs += float(np.abs(g_w).sum())
        g_x = g_u = g_y = g_p = None
        if coefs.blackboard:
            k = batch.senders.shape[-1]
            slot = slot_width(d)
            g_slots = g_ctx.reshape(B, n, k, slot)
            valid = batch.senders >= 0
            g_psi = np.zeros((B, n, slot))
            rows = np.broadcast_to(np.arange(B)[:, None, None], batch.senders.shape)
            np.add.at(g_psi, (rows[valid], batch.senders[valid]), g_slots[valid])
            g_psi = g_psi.reshape(B * n, slot)
            g_x, g_u, g_y, g_p = g_psi[:, :d], g_psi[:, d : 2 * d], g_psi[:, 2 * d], g_psi[:, 2 * d + 1]
        head_grads = model.head.backward(head_cache, g_logit=g_logit, g_p=g_p, g_u=g_u, g_y=g_y, g_x=g_x)
    lb.wbce /= n
    lb.objective = n * lb.actor_total

    grads = {"actors": [actor_grads[id(a)] for a in model.unique_actors()], "head": head_grads}
    return lb, grads


def value_loss_and_grads(critic: Critic, inputs: np.ndarray, targets: np.ndarray):
    v, acts = critic.forward(inputs)
    diff = v - targets
    loss = float(np.mean(diff * diff))
    grads = critic.backward(acts, 2.0 * diff / diff.size)
    return loss, grads


# -- trainer ------------------------------------------------------------------


@dataclass
class IterationStats:
    iteration: int
    env_steps: int
    mean_return: float
    mean_cost: float
    episodes: int
    lam: float
    tau: float
    write_rate: float
    occupancy: float
    event_rate: float
    label_rate: float
    losses: LossBreakdown
    epochs_run: int


@dataclass
class _EpisodeTracker:
    running_r: np.ndarray
    running_c: np.ndarray
    finished: list = field(default_factory=list)


class Trainer:
    """Owns the model, boards, runner, threshold and dual state for one seed."""

    def __init__(self, cfg: ExperimentConfig, seed: int | None = None) -> None:
        self.cfg = cfg = cfg.resolved()
        self.seed = cfg.seed if seed is None else seed
        ss = np.random.SeedSequence(self.seed)
        s_init, s_env, s_act, s_shuffle, s_eval = ss.spawn(5)
        self.eval_seed_seq = s_eval
        env_seeds = [int(x) for x in s_env.generate_state(cfg.n_envs)]
        self.runner = VecRunner.from_name(cfg.env.name, cfg.env.params, env_seeds)
        spec = self.spec = self.runner.spec
        self.model = Model(cfg, spec.obs_dim, spec.n_agents, spec.action_space, np.random.default_rng(s_init))
        self.act_rng = np.random.default_rng(s_act)
        self.shuffle_rng = np.random.default_rng(s_shuffle)
        self.board = Blackboard(cfg.n_envs, spec.n_agents, cfg.model.d_msg)
        b = cfg.blackboard
        self.threshold = ThresholdState(
            tau=b.tau_init,
            rate_ema=b.target_rate,
            beta=b.ema_beta,
            lr=b.threshold_lr,
            target_rate=b.target_rate,
            tau_min=b.tau_min,
            tau_max=b.tau_max,
            adaptive=b.adaptive,
        )
        self.dual = DualState(cfg.dual.lambda_init, cfg.dual.lr, cfg.dual.cost_budget, cfg.dual.lambda_max)
        self.coefs = LossCoefs.from_config(cfg)
        self.hazard_cfg = hz.HazardLabelConfig(cfg.hazard.threshold, cfg.hazard.horizon)
        p = cfg.ppo
        self.actor_opts = [make_optimizer(p.optimizer, a.params, p.actor_lr) for a in self.model.unique_actors()]
        self.head_opt = make_optimizer(p.optimizer, self.model.head.params, p.actor_lr)
        self.critic_r_opt = make_optimizer(p.optimizer, self.model.critic_r.params, p.critic_lr)
        self.critic_c_opt = make_optimizer(p.optimizer, self.model.critic_c.params, p.critic_lr)
        self.counters = Counters()
        self.env_steps = 0
        self.iteration = 0
        self.cost_estimate: float | None = None
        E, n = cfg.n_envs, spec.n_agents
        self.episodes = _EpisodeTracker(np.zeros(E), np.zeros(E))
        self.checkpoints: list[EvalCheckpoint] = []
        self.buffer: RolloutBuffer | None = None
        self._t = 0

    # -- acting ---------------------------------------------------------------
    def _act_env(self, actions: np.ndarray) -> np.ndarray:
        space = self.spec.action_space
        if space.continuous:
            return np.clip(actions, space.low, space.high)
        return actions

    def coordinate(self, obs, board: Blackboard, threshold: ThresholdState, adapt: bool, counters: Counters | None):
        """Write-info, gate & write, adapt, read. Returns (ctx, senders, occ, logits, writes, threshold)."""
        cfg = self.cfg
        E, n = obs.shape[:2]
        k, ctx_dim = self.model.k, self.model.ctx_dim
        ctx = np.zeros((E, n, ctx_dim))
        senders = np.full((E, n, k), -1, dtype=np.int64)
        occ = np.zeros((E, n), dtype=np.int64)
        logits = np.zeros((E, n))
        writes = np.zeros((E, n), dtype=np.int64)
        if not self.coefs.uses_head:
            return ctx, senders, occ, logits, writes, threshold
        out, _ = self.model.head.forward(obs.reshape(E * n, -1))
        if counters is not None:
            counters.message_head_calls += 1
        logits = out.logit.reshape(E, n)
        p = out.p.reshape(E, n)
        if cfg.blackboard.always_write:
            writes = np.ones((E, n), dtype=np.int64)
        else:
            writes = gate(p, threshold.tau)
        if cfg.blackboard.enabled:
            x = out.x.reshape(E, n, -1)
            board.write_all(x, out.u.reshape(E, n, -1), out.y.reshape(E, n), p, writes)
        if adapt and threshold.adaptive and not cfg.blackboard.always_write:
            threshold = update_threshold(threshold, float(writes.mean()))
            if counters is not None:
                counters.threshold_updates += 1
        if cfg.blackboard.enabled:
            ctx, senders, occ = board.read_all(x, k)
        return ctx, senders, occ, logits, writes, threshold

    def rollout_step(self) -> None:
        buf = self.buffer
        obs = self.runner.obs
        ctx, senders, occ, logits, writes, self.threshold = self.coordinate(
            obs, self.board, self.threshold, adapt=True, counters=self.counters
        )
        n = self.spec.n_agents
        actions, logps = [], []
        for i, actor in enumerate(self.model.actors):
            dist, _ = actor.forward(obs[:, i], ctx[:, i])
            a = dist.sample(self.act_rng)
            actions.append(a)
            logps.append(dist.log_prob(a))
        actions = np.stack(actions, axis=1)
        v_r, v_c = self.model.values(obs)
        res = self.runner.step(self._act_env(actions))
        rewards = np.stack([o.rewards for o in res.outcomes])
        costs = np.stack([o.costs for o in res.outcomes])
        buf.add(
            obs=obs,
            ctx=ctx,
            senders=senders,
            occupancy=occ,
            actions=actions,
            logp=np.stack(logps, axis=1),
            rewards=rewards,
            costs=costs,
            v_r=v_r,
            v_c=v_c,
            logits=logits,
            writes=writes,
            terminated=[o.terminated for o in res.outcomes],
            truncated=[o.truncated for o in res.outcomes],
        )
        tr = self.episodes
        tr.running_r += rewards.mean(1)
        tr.running_c += costs.mean(1)
        for e in np.flatnonzero(res.reset_mask):
            tr.finished.append((float(tr.running_r[e]), float(tr.running_c[e])))
            tr.running_r[e] = tr.running_c[e] = 0.0
            if self.cfg.blackboard.enabled:
                self.board.clear(e)
        self.env_steps += self.cfg.n_envs
        del n

    def collect(self) -> RolloutBuffer:
        cfg, spec = self.cfg, self.spec
        space = spec.action_space
        act_shape = (space.act_dim,) if space.continuous else ()
        self.buffer = RolloutBuffer(
            cfg.rollout_length,
            cfg.n_envs,
            spec.n_agents,
            spec.obs_dim,
            self.model.ctx_dim,
            self.model.k,
            act_shape,
            not space.continuous,
        )
        self.episodes.finished = []
        for _ in range(cfg.rollout_length):
            self.rollout_step()
        last_v_r, last_v_c = self.model.values(self.runner.obs)
        hazard_cfg = self.hazard_cfg if self.coefs.uses_head else None
        if hazard_cfg is not None:
            self.counters.hazard_label_calls += 1
        self.buffer.seal(last_v_r, last_v_c, cfg.ppo.gamma, cfg.ppo.gae_lambda, hazard_cfg)
        return self.buffer

    # -- learning -------------------------------------------------------------
    def update(self, buf: RolloutBuffer) -> tuple[LossBreakdown, int]:
        cfg = self.cfg
        p = cfg.ppo
        N = buf.T * buf.E
        lam = self.dual.lam
        totals = LossBreakdown(write_coef=self.coefs.write_penalty, hazard_coef=self.coefs.hazard, entropy_coef=self.coefs.entropy)
        n_mb = 0
        epochs_run = 0
        crit_in_all = self.model.critic_inputs(buf.flat("obs"))
        for _ in range(p.epochs):
            perm = self.shuffle_rng.permutation(N)
            epoch_kl = []
            for idx in np.array_split(perm, p.minibatches):
                if idx.size == 0:
                    continue
                batch = make_batch(buf, idx)
                lb, grads = actor_loss_and_grads(self.model, batch, lam, self.coefs, self.counters)
                lb.critic_r, g_cr = value_loss_and_grads(self.model.critic_r, crit_in_all[idx], batch.ret_r)
                lb.critic_c, g_cc = value_loss_and_grads(self.model.critic_c, crit_in_all[idx], batch.ret_c)
                check = [lb.objective, lb.critic_r, lb.critic_c]
                if not all(math.isfinite(v) for v in check):
                    raise NumericalError(f"non-finite loss at iteration {self.iteration}: {lb}")
                for opt, g in zip(self.actor_opts, grads["actors"]):
                    opt.step(clip_grad_norm(g, p.max_grad_norm)[0])
                if grads["head"] is not None:
                    self.head_opt.step(clip_grad_norm(grads["head"], p.max_grad_norm)[0])
                self.critic_r_opt.step(clip_grad_norm(g_cr, p.max_grad_norm)[0])
                self.critic_c_opt.step(clip_grad_norm(g_cc, p.max_grad_norm)[0])
                for name in ("clip", "write_rate", "wbce", "entropy", "critic_r", "critic_c", "approx_kl", "clip_frac"):
                    setattr(totals, name, getattr(totals, name) + getattr(lb, name))
                n_mb += 1
                epoch_kl.append(lb.approx_kl)
            epochs_run += 1
            if np.mean(epoch_kl) > p.target_kl:
                break
        for name in ("clip", "write_rate", "wbce", "entropy", "critic_r", "critic_c", "approx_kl", "clip_frac"):
            setattr(totals, name, getattr(totals, name) / max(n_mb, 1))
        for arr in [a for _, a in self.model.named_params()]:
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite parameters after iteration {self.iteration}")
        return totals, epochs_run

    def train_iteration(self) -> IterationStats:
        buf = self.collect()
        losses, epochs_run = self.update(buf)
        finished = self.episodes.finished
        if finished:
            self.cost_estimate = float(np.mean([c for _, c in finished]))
        if self.cost_estimate is not None:
            self.dual = dual_update(self.dual, self.cost_estimate)
        self.iteration += 1
        n = self.spec.n_agents
        return IterationStats(
            iteration=self.iteration,
            env_steps=self.env_steps,
            mean_return=float(np.mean([r for r, _ in finished])) if finished else float("nan"),
            mean_cost=float(np.mean([c for _, c in finished])) if finished else float("nan"),
            episodes=len(finished),
            lam=self.dual.lam,
            tau=self.threshold.tau,
            write_rate=float(buf.writes.mean()) if self.coefs.uses_head else float("nan"),
            occupancy=float(buf.occupancy.mean()),
            event_rate=float(buf.events.mean()) if buf.events is not None else float("nan"),
            label_rate=float(buf.labels.mean()) if buf.labels is not None else float("nan"),
            losses=losses,
            epochs_run=epochs_run,
        )

    def coordination_counters(self) -> Counters:
        c = replace(self.counters)
        c.board_writes = self.board.n_writes
        c.board_reads = self.board.n_reads
        return c

    # -- evaluation -----------------------------------------------------------
    def evaluate(self, n_episodes: int | None = None, seed_seq: np.random.SeedSequence | None = None) -> list[tuple[float, float]]:
        """Deterministic-action episodes; returns per-episode (R, C), agent-mean aggregated."""
        cfg = self.cfg
        n_episodes = n_episodes or cfg.eval_episodes
        seed_seq = seed_seq or self.eval_seed_seq
        seeds = [int(s) for s in seed_seq.generate_state(n_episodes)]
        runner = VecRunner([make_env(cfg.env.name, cfg.env.params) for _ in seeds], seeds)
        board = Blackboard(n_episodes, self.spec.n_agents, cfg.model.d_msg)
        threshold = self.threshold
        n = self.spec.n_agents
        rewards = [[] for _ in range(n_episodes)]
        costs = [[] for _ in range(n_episodes)]
        done = np.zeros(n_episodes, dtype=bool)
        while not done.all():
            obs = runner.obs
            ctx, *_ = self.coordinate(obs, board, threshold, adapt=False, counters=None)
            actions = np.stack([self.model.actors[i].forward(obs[:, i], ctx[:, i])[0].mode() for i in range(n)], axis=1)
            res = runner.step(self._act_env(actions))
            for e, out in enumerate(res.outcomes):
                if done[e]:
                    continue
                rewards[e].append(out.rewards)
                costs[e].append(out.costs)
                if out.done:
                    done[e] = True
            for e in np.flatnonzero(res.reset_mask):
                board.clear(e)
        return [episodic_aggregate(np.array(rewards[e]), np.array(costs[e])) for e in range(n_episodes)]

    def checkpoint(self) -> EvalCheckpoint:
        episodes = self.evaluate()
        ck = EvalCheckpoint.from_episodes(self.env_steps, episodes, self.cfg.dual.cost_budget)
        self.checkpoints.append(ck)
        return ck

    def train(self, on_iteration=None, on_checkpoint=None) -> list[IterationStats]:
        """Run the full budget, evaluating every ``eval_interval`` env steps and at the end."""
        cfg = self.cfg
        stats = []
        last_bucket = 0
        for it in range(cfg.n_iterations):
            s = self.train_iteration()
            stats.append(s)
            if on_iteration is not None:
                on_iteration(s)
            bucket = self.env_steps // cfg.eval_interval
            if bucket > last_bucket or it == cfg.n_iterations - 1:
                last_bucket = bucket
                ck = self.checkpoint()
                if on_checkpoint is not None:
                    on_checkpoint(ck)
        return stats
