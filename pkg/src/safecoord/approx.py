"""Small tanh MLPs with hand-written reverse-mode gradients.

Only the fixed computation graph needed for training is supported: message/hazard
head, context encoder, per-agent policy, and centralized value critics. All
arrays are float64. Parameters of an :class:`MLP` are flattened in the order
``layers.0.weight, layers.0.bias, layers.1.weight, ...``; weights are stored as
``(fan_in, fan_out)`` and flattened row-major.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0


def sigmoid(x):
    # split by sign to avoid overflow in exp
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite {what}")


class MLP:
    """Dense network, tanh on hidden layers, ``linear`` or ``tanh`` output."""

    def __init__(
        self,
        sizes: list[int],
        rng: np.random.Generator | None = None,
        out_act: str = "linear",
        init_scale: float = 1.0,
        out_scale: float = 1.0,
    ) -> None:
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if out_act not in ("linear", "tanh"):
            raise ValueError(f"unsupported output activation {out_act!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sizes = list(sizes)
        self.out_act = out_act
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_layers = len(sizes) - 1
        for l, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = (out_scale if l == n_layers - 1 else init_scale) / math.sqrt(fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def param_names(self, prefix: str = "") -> list[str]:
        names = []
        for l in range(len(self.weights)):
            names += [f"{prefix}layers.{l}.weight", f"{prefix}layers.{l}.bias"]
        return names

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {x.shape[-1]}")
        acts = [x]
        n = len(self.weights)
        h = x
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            if l < n - 1 or self.out_act == "tanh":
                h = np.tanh(z)
            else:
                h = z
            acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], gy: np.ndarray):
        """Returns (grads aligned with ``params``, gradient w.r.t. the input)."""
        n = len(self.weights)
        grads: list[np.ndarray] = [None] * (2 * n)  # type: ignore[list-item]
        g = gy
        for l in range(n - 1, -1, -1):
            out = acts[l + 1]
            if l < n - 1 or self.out_act == "tanh":
                g = g * (1.0 - out * out)
            inp = acts[l]
            grads[2 * l] = inp.reshape(-1, inp.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            grads[2 * l + 1] = g.reshape(-1, g.shape[-1]).sum(0)
            g = g @ self.weights[l].T
        return grads, g


@dataclass
class MessageHeadOutput:
    logit: np.ndarray  # (B,)
    p: np.ndarray  # (B,) = sigmoid(logit)
    u: np.ndarray  # (B, d_msg)
    y: np.ndarray  # (B,) yield flag in (0, 1)
    x: np.ndarray  # (B, d_msg) state summary


class MessageHead:
    """Maps an observation to hazard logit, intent, yield flag and state summary.

    A shared tanh trunk feeds one linear output layer laid out as
    ``[logit, u (d), yield pre-activation, x (d)]``.
    """

    def __init__(self, obs_dim: int, hidden: int, d_msg: int, n_layers: int = 2, rng=None, init_scale: float = 1.0):
        self.obs_dim = obs_dim
        self.d_msg = d_msg
        self.net = MLP([obs_dim] + [hidden] * n_layers + [2 * d_msg + 2], rng, init_scale=init_scale)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def param_names(self, prefix: str = "message_head.") -> list[str]:
        return self.net.param_names(prefix)

    def forward(self, obs: np.ndarray):
        obs = np.asarray(obs, dtype=np.float64)
        _check_finite(obs, "observation")
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation must have length {self.obs_dim}")
        out, cache = self.net.forward(obs)
        d = self.d_msg
        logit = out[..., 0]
        y = sigmoid(out[..., 1 + d])
        res = MessageHeadOutput(logit=logit, p=sigmoid(logit), u=out[..., 1 : 1 + d], y=y, x=out[..., 2 + d :])
        return res, (cache, res)

    def backward(self, cache, g_logit=None, g_p=None, g_u=None, g_y=None, g_x=None):
        acts, res = cache
        d = self.d_msg
        g = np.zeros(acts[-1].shape)
        if g_logit is not None:
            g[..., 0] += g_logit
        if g_p is not None:
            g[..., 0] += g_p * res.p * (1.0 - res.p)
        if g_u is not None:
            g[..., 1 : 1 + d] += g_u
        if g_y is not None:
            g[..., 1 + d] += g_y * res.y * (1.0 - res.y)
        if g_x is not None:
            g[..., 2 + d :] += g_x
        grads, _ = self.net.backward(acts, g)
        return grads


@dataclass
class PolicyOutput:
    """Gaussian (``mean``, ``log_std``) or categorical (``logits``) action distribution."""

    mean: np.ndarray | None = None
    log_std: np.ndarray | None = None  # (act_dim,), already clamped
    logits: np.ndarray | None = None

    @property
    def continuous(self) -> bool:
        return self.logits is None

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if self.continuous:
            return self.mean + np.exp(self.log_std) * rng.standard_normal(self.mean.shape)
        probs = softmax(self.logits)
        u = rng.random(probs.shape[:-1] + (1,))
        idx = (np.cumsum(probs, axis=-1) < u).sum(-1)
        return np.minimum(idx, probs.shape[-1] - 1)

    def mode(self) -> np.ndarray:
        if self.continuous:
            return self.mean.copy()
        return np.argmax(self.logits, axis=-1)

    def log_prob(self, action: np.ndarray) -> np.ndarray:
        if self.continuous:
            return gaussian_log_prob(self.mean, self.log_std, action)
        return categorical_log_prob(self.logits, action)

    def entropy(self) -> np.ndarray:
        if self.continuous:
            return np.full(self.mean.shape[:-1], gaussian_entropy(self.log_std))
        return categorical_entropy(self.logits)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def gaussian_log_prob(mean, log_std, action) -> np.ndarray:
    zs = (action - mean) * np.exp(-log_std)
    return (-0.5 * zs * zs - log_std - 0.5 * LOG_2PI).sum(-1)


def gaussian_log_prob_grads(mean, log_std, action):
    """d log_prob / d mean  and  d log_prob / d log_std, both shaped like ``mean``."""
    inv_var = np.exp(-2.0 * log_std)
    diff = action - mean
    return diff * inv_var, diff * diff * inv_var - 1.0


def gaussian_entropy(log_std) -> float:
    log_std = np.asarray(log_std)
    return float(log_std.sum() + 0.5 * log_std.size * (1.0 + LOG_2PI))


def categorical_log_prob(logits, action) -> np.ndarray:
    lp = log_softmax(logits)
    return np.take_along_axis(lp, np.asarray(action, dtype=np.int64)[..., None], axis=-1)[..., 0]


def categorical_log_prob_grads(logits, action) -> np.ndarray:
    g = -softmax(logits)
    idx = np.asarray(action, dtype=np.int64)[..., None]
    np.put_along_axis(g, idx, np.take_along_axis(g, idx, -1) + 1.0, -1)
    return g


def categorical_entropy(logits) -> np.ndarray:
    lp = log_softmax(logits)
    return -(np.exp(lp) * lp).sum(-1)


def categorical_entropy_grads(logits) -> np.ndarray:
    lp = log_softmax(logits)
    p = np.exp(lp)
    ent = -(p * lp).sum(-1, keepdims=True)
    return -p * (lp + ent)


class Actor:
    """Memory-conditioned decentralized policy for one agent.

    ``encoder`` maps the flat memory context to a tanh embedding that is
    concatenated with the observation before the policy body. Continuous
    policies carry a state-independent log-std vector, clamped to
    ``[LOG_STD_MIN, LOG_STD_MAX]`` when used.
    """

    def __init__(
        self,
        obs_dim: int,
        ctx_dim: int,
        embed_dim: int,
        hidden: int,
        out_dim: int,
        continuous: bool,
        n_layers: int = 2,
        rng=None,
        init_scale: float = 1.0,
        out_scale: float = 0.01,
        log_std_init: float = math.log(0.5),
    ) -> None:
        self.obs_dim = obs_dim
        self.ctx_dim = ctx_dim
        self.continuous = continuous
        self.encoder = MLP([ctx_dim, embed_dim], rng, out_act="tanh", init_scale=init_scale, out_scale=init_scale)
        self.body = MLP([obs_dim + embed_dim] + [hidden] * n_layers + [out_dim], rng, init_scale=init_scale, out_scale=out_scale)
        self.log_std = np.full(out_dim, float(log_std_init)) if continuous else None

    @property
    def params(self) -> list[np.ndarray]:
        ps = self.encoder.params + self.body.params
        return ps + [self.log_std] if self.continuous else ps

    def param_names(self, prefix: str = "") -> list[str]:
        names = self.encoder.param_names(prefix + "encoder.") + self.body.param_names(prefix + "policy.")
        return names + [prefix + "log_std"] if self.continuous else names

    def encode_context(self, ctx: np.ndarray):
        ctx = np.asarray(ctx, dtype=np.float64)
        if ctx.shape[-1] != self.ctx_dim:
            raise ValueError(f"memory context must have length {self.ctx_dim}, got {ctx.shape[-1]}")
        return self.encoder.forward(ctx)

    def policy_forward(self, obs: np.ndarray, emb: np.ndarray):
        for p in self.params:
            _check_finite(p, "policy parameters")
        out, acts = self.body.forward(np.concatenate([obs, emb], axis=-1))
        if self.continuous:
            return PolicyOutput(mean=out, log_std=np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)), acts
        return PolicyOutput(logits=out), acts

    def forward(self, obs: np.ndarray, ctx: np.ndarray):
        emb, enc_acts = self.encode_context(ctx)
        dist, body_acts = self.policy_forward(np.asarray(obs, dtype=np.float64), emb)
        return dist, (enc_acts, body_acts)

    def backward(self, cache, g_out: np.ndarray, g_log_std: np.ndarray | None = None):
        """Gradients for (encoder, body, log_std) plus the gradient w.r.t. the context."""
        enc_acts, body_acts = cache
        body_grads, g_in = self.body.backward(body_acts, g_out)
        g_emb = g_in[..., self.obs_dim :]
        enc_grads, g_ctx = self.encoder.backward(enc_acts, g_emb)
        grads = enc_grads + body_grads
        if self.continuous:
            g = np.zeros_like(self.log_std) if g_log_std is None else np.asarray(g_log_std, dtype=np.float64).copy()
            # clamp blocks gradient outside the admissible range
            g[(self.log_std < LOG_STD_MIN) | (self.log_std > LOG_STD_MAX)] = 0.0
            grads.append(g)
        return grads, g_ctx


class Critic:
    """Centralized scalar value function."""

    def __init__(self, in_dim: int, hidden: int, n_layers: int = 2, rng=None, init_scale: float = 1.0):
        self.in_dim = in_dim
        self.net = MLP([in_dim] + [hidden] * n_layers + [1], rng, init_scale=init_scale)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def param_names(self, prefix: str = "") -> list[str]:
        return self.net.param_names(prefix)

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"critic input must have width {self.in_dim}, got {x.shape[-1]}")
        out, acts = self.net.forward(x)
        return out[..., 0], acts

    def backward(self, acts, g_value: np.ndarray):
        grads, _ = self.net.backward(acts, np.asarray(g_value)[..., None])
        return grads


# -- optimisation -----------------------------------------------------------


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


class SGD:
    def __init__(self, params: list[np.ndarray], lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads: list[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            p -= self.lr * g


def make_optimizer(kind: str, params: list[np.ndarray], lr: float):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def global_norm(grads: list[np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


# -- flat parameter checkpoints ---------------------------------------------

CHECKPOINT_FORMAT = "safecoord-params/1"


def save_params(path: str | Path, named: list[tuple[str, np.ndarray]], meta: dict | None = None) -> None:
    """Write a JSON checkpoint.

    Layout: ``{"format", "meta", "order": [{"name", "shape", "offset"}...], "values": [...]}``
    where ``values`` is the row-major concatenation of all arrays in ``order``.
    Floats are written with ``repr`` precision so loading is exact.
    """
    order, values, offset = [], [], 0
    for name, arr in named:
        order.append({"name": name, "shape": list(arr.shape), "offset": offset})
        values.extend(float(v) for v in np.asarray(arr, dtype=np.float64).ravel())
        offset += arr.size
    doc = {"format": CHECKPOINT_FORMAT, "meta": meta or {}, "order": order, "values": values}
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    values = np.asarray(doc["values"], dtype=np.float64)
    out = {}
    for item in doc["order"]:
        size = int(np.prod(item["shape"])) if item["shape"] else 1
        chunk = values[item["offset"] : item["offset"] + size]
        if chunk.size != size:
            raise ValueError(f"checkpoint {path} is truncated at {item['name']}")
        out[item["name"]] = chunk.reshape(item["shape"])
    return out, doc.get("meta", {})
