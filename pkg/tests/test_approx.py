import math

import numpy as np
import pytest

from oracles import central_diff, max_rel_error
from safecoord.approx import (
    CHECKPOINT_FORMAT,
    LOG_STD_MAX,
    MLP,
    Actor,
    Adam,
    Critic,
    MessageHead,
    PolicyOutput,
    categorical_entropy,
    categorical_entropy_grads,
    categorical_log_prob,
    categorical_log_prob_grads,
    clip_grad_norm,
    gaussian_entropy,
    gaussian_log_prob,
    gaussian_log_prob_grads,
    global_norm,
    load_params,
    make_optimizer,
    save_params,
    sigmoid,
)

TOL = 1e-4
SEEDS = range(20)


def zero_params(params):
    for p in params:
        p[...] = 0.0


# -- forward examples ---------------------------------------------------------


def test_message_head_all_zero():
    head = MessageHead(4, 8, 3, rng=np.random.default_rng(0))
    zero_params(head.params)
    out, _ = head.forward(np.zeros((1, 4)))
    assert out.logit[0] == 0.0 and out.p[0] == 0.5 and out.y[0] == 0.5
    assert not out.x.any() and not out.u.any()


def test_message_head_probability_open_interval():
    head = MessageHead(4, 8, 3, rng=np.random.default_rng(0), init_scale=3.0)
    out, _ = head.forward(np.random.default_rng(1).normal(scale=5, size=(200, 4)))
    np.testing.assert_array_equal(out.p, sigmoid(out.logit))
    assert np.all((out.p > 0) & (out.p < 1))
    assert np.all((out.y >= 0) & (out.y <= 1))


def test_message_head_rejects_non_finite():
    head = MessageHead(4, 8, 3, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        head.forward(np.array([[0.0, np.inf, 0.0, 0.0]]))


def test_sigmoid_stable_at_extremes():
    s = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def test_encoder_zero_context_zero_embedding():
    actor = Actor(3, 10, 4, 8, 2, True, rng=np.random.default_rng(0))
    emb, _ = actor.encode_context(np.zeros((2, 10)))
    assert not emb.any()
    a, _ = actor.encode_context(np.ones(10))
    b, _ = actor.encode_context(np.ones(10))
    np.testing.assert_array_equal(a, b)


def test_encoder_rejects_wrong_length():
    actor = Actor(3, 10, 4, 8, 2, True, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        actor.encode_context(np.zeros(9))


def test_policy_rejects_non_finite_params():
    actor = Actor(3, 4, 4, 8, 2, True, rng=np.random.default_rng(0))
    actor.body.weights[0][0, 0] = np.nan
    with pytest.raises(ValueError):
        actor.forward(np.zeros(3), np.zeros(4))


def test_uniform_categorical_entropy():
    assert categorical_entropy(np.zeros(9)) == pytest.approx(math.log(9), abs=1e-12)


def test_unit_gaussian_entropy():
    assert gaussian_entropy(np.zeros(2)) == pytest.approx(math.log(2 * math.pi * math.e), abs=1e-12)
    assert gaussian_entropy(np.zeros(2)) == pytest.approx(2.8379, abs=1e-4)


def test_gaussian_log_prob_at_mode_matches_density():
    mean, log_std = np.array([0.3, -0.2]), np.log(np.array([0.5, 2.0]))
    density = np.prod(1.0 / (np.sqrt(2 * np.pi) * np.exp(log_std)))
    assert gaussian_log_prob(mean, log_std, mean) == pytest.approx(math.log(density), abs=1e-12)


def test_sampled_actions_have_finite_log_prob():
    rng = np.random.default_rng(0)
    for dist in (PolicyOutput(mean=rng.normal(size=(50, 2)), log_std=np.array([-1.0, 0.5])), PolicyOutput(logits=rng.normal(size=(50, 9)))):
        a = dist.sample(rng)
        assert np.all(np.isfinite(dist.log_prob(a)))
    d = PolicyOutput(logits=rng.normal(size=(50, 9)))
    assert np.all(d.entropy() >= 0)


def test_categorical_sampling_frequencies():
    rng = np.random.default_rng(0)
    probs = np.array([0.1, 0.6, 0.3])
    d = PolicyOutput(logits=np.tile(np.log(probs), (20000, 1)))
    freq = np.bincount(d.sample(rng), minlength=3) / 20000
    np.testing.assert_allclose(freq, probs, atol=0.015)


def test_log_std_clamped():
    actor = Actor(3, 4, 4, 8, 2, True, rng=np.random.default_rng(0), log_std_init=0.0)
    actor.log_std[:] = 3.0
    dist, _ = actor.forward(np.zeros(3), np.zeros(4))
    assert np.all(dist.log_std == LOG_STD_MAX)
    _, cache = actor.forward(np.zeros((1, 3)), np.zeros((1, 4)))
    grads, _ = actor.backward(cache, np.zeros((1, 2)), np.ones(2))
    assert not grads[-1].any()


def test_critic_zero_params_zero_value():
    c = Critic(6, 8, rng=np.random.default_rng(0))
    zero_params(c.params)
    v, _ = c.forward(np.ones((3, 6)))
    np.testing.assert_array_equal(v, 0.0)


def test_critics_have_disjoint_parameters():
    rng = np.random.default_rng(0)
    vr, vc = Critic(6, 8, rng=rng), Critic(6, 8, rng=rng)
    x = rng.normal(size=(4, 6))
    before = vc.forward(x)[0]
    for p in vr.params:
        p += 1.0
    np.testing.assert_array_equal(vc.forward(x)[0], before)


def test_critic_shape_mismatch():
    with pytest.raises(ValueError):
        Critic(6, 8, rng=np.random.default_rng(0)).forward(np.zeros(5))


# -- backward examples --------------------------------------------------------


def test_constant_loss_zero_gradients():
    net = MLP([3, 8, 2], np.random.default_rng(0))
    _, acts = net.forward(np.ones((4, 3)))
    grads, gx = net.backward(acts, np.zeros((4, 2)))
    assert all(not g.any() for g in grads) and not gx.any()


def test_sum_of_parameters_gives_ones():
    # a single linear layer fed ones: sum(x W + b) is the sum of all parameters
    net = MLP([3, 2], np.random.default_rng(0))
    _, acts = net.forward(np.ones((1, 3)))
    grads, _ = net.backward(acts, np.ones((1, 2)))
    for g in grads:
        np.testing.assert_array_equal(g, 1.0)


def test_unused_head_outputs_get_zero_gradient():
    head = MessageHead(4, 8, 3, rng=np.random.default_rng(0))
    _, cache = head.forward(np.random.default_rng(1).normal(size=(5, 4)))
    grads = head.backward(cache)
    assert all(not g.any() for g in grads)


def test_parameter_count_matches_architecture():
    net = MLP([5, 8, 8, 3], np.random.default_rng(0))
    assert net.n_params == 5 * 8 + 8 + 8 * 8 + 8 + 8 * 3 + 3
    assert net.param_names("p.")[:2] == ["p.layers.0.weight", "p.layers.0.bias"]


def test_forward_backward_bit_reproducible():
    net = MLP([4, 8, 8, 2], np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(6, 4))
    gy = np.random.default_rng(2).normal(size=(6, 2))
    y1, a1 = net.forward(x)
    y2, a2 = net.forward(x)
    np.testing.assert_array_equal(y1, y2)
    for g1, g2 in zip(net.backward(a1, gy)[0], net.backward(a2, gy)[0]):
        np.testing.assert_array_equal(g1, g2)


# -- finite-difference gradient checks ----------------------------------------


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("out_act", ["linear", "tanh"])
def test_mlp_gradients(seed, out_act):
    rng = np.random.default_rng(seed)
    net = MLP([4, 8, 8, 3], rng, out_act=out_act)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(5, 3))

    def loss():
        return float((net.forward(x)[0] * w).sum())

    _, acts = net.forward(x)
    grads, gx = net.backward(acts, w)
    assert max_rel_error(grads, central_diff(loss, net.params)) < TOL
    assert max_rel_error([gx], central_diff(loss, [x])) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_message_head_gradients(seed):
    rng = np.random.default_rng(seed)
    head = MessageHead(5, 8, 3, rng=rng)
    obs = rng.normal(size=(6, 5))
    wl, wp, wy = rng.normal(size=6), rng.normal(size=6), rng.normal(size=6)
    wu, wx = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))

    def loss():
        o, _ = head.forward(obs)
        return float((o.logit * wl).sum() + (o.p * wp).sum() + (o.y * wy).sum() + (o.u * wu).sum() + (o.x * wx).sum())

    _, cache = head.forward(obs)
    grads = head.backward(cache, g_logit=wl, g_p=wp, g_u=wu, g_y=wy, g_x=wx)
    assert max_rel_error(grads, central_diff(loss, head.params)) < TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("continuous", [True, False])
def test_actor_gradients(seed, continuous):
    rng = np.random.default_rng(seed)
    out_dim = 2 if continuous else 4
    actor = Actor(5, 6, 4, 8, out_dim, continuous, rng=rng, out_scale=1.0)
    if continuous:
        actor.log_std[:] = rng.uniform(-1, 0.5, size=2)
    obs, ctx = rng.normal(size=(7, 5)), rng.normal(size=(7, 6))
    w = rng.normal(size=(7, out_dim))
    ws = rng.normal(size=out_dim)

    def loss():
        d, _ = actor.forward(obs, ctx)
        val = float(((d.mean if continuous else d.logits) * w).sum())
        return val + (float((d.log_std * ws).sum()) if continuous else 0.0)

    _, cache = actor.forward(obs, ctx)
    grads, g_ctx = actor.backward(cache, w, ws if continuous else None)
    assert max_rel_error(grads, central_diff(loss, actor.params)) < TOL
    assert max_rel_error([g_ctx], central_diff(loss, [ctx])) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_critic_value_regression_gradients(seed):
    from safecoord.trainer import value_loss_and_grads

    rng = np.random.default_rng(seed)
    critic = Critic(6, 8, rng=rng)
    x, y = rng.normal(size=(9, 6)), rng.normal(size=9)
    _, grads = value_loss_and_grads(critic, x, y)
    num = central_diff(lambda: value_loss_and_grads(critic, x, y)[0], critic.params)
    assert max_rel_error(grads, num) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_distribution_gradients(seed):
    rng = np.random.default_rng(seed)
    mean, log_std = rng.normal(size=(5, 2)), rng.uniform(-1, 0.5, size=2)
    a = rng.normal(size=(5, 2))
    g_mean, g_lstd = gaussian_log_prob_grads(mean, log_std, a)
    num_mean = central_diff(lambda: float(gaussian_log_prob(mean, log_std, a).sum()), [mean])
    num_lstd = central_diff(lambda: float(gaussian_log_prob(mean, log_std, a).sum()), [log_std])
    assert max_rel_error([g_mean, g_lstd.sum(0) if g_lstd.ndim > 1 else g_lstd], num_mean + num_lstd) < TOL

    logits = rng.normal(size=(5, 4))
    act = rng.integers(0, 4, size=5)
    g = categorical_log_prob_grads(logits, act)
    assert max_rel_error([g], central_diff(lambda: float(categorical_log_prob(logits, act).sum()), [logits])) < TOL
    ge = categorical_entropy_grads(logits)
    assert max_rel_error([ge], central_diff(lambda: float(categorical_entropy(logits).sum()), [logits])) < TOL


# -- optimisation -------------------------------------------------------------


def test_adam_first_step_is_lr_times_sign():
    p = [np.array([1.0, -2.0, 3.0])]
    opt = Adam(p, lr=0.1)
    opt.step([np.array([0.5, -4.0, 0.0])])
    np.testing.assert_allclose(p[0], [0.9, -1.9, 3.0], atol=1e-6)


def test_zero_learning_rate_leaves_params():
    p = [np.ones(3)]
    for kind in ("adam", "sgd"):
        make_optimizer(kind, p, 0.0).step([np.ones(3)])
    np.testing.assert_array_equal(p[0], 1.0)


def test_adam_minimises_quadratic():
    p = [np.array([5.0, -3.0])]
    opt = Adam(p, lr=0.1)
    for _ in range(500):
        opt.step([2 * p[0]])
    assert np.abs(p[0]).max() < 1e-2


def test_clip_grad_norm():
    g = [np.array([3.0, 4.0])]
    clipped, norm = clip_grad_norm(g, 1.0)
    assert norm == 5.0 and global_norm(clipped) == pytest.approx(1.0)
    same, _ = clip_grad_norm(g, 10.0)
    np.testing.assert_array_equal(same[0], g[0])


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", [], 0.1)


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    actor = Actor(5, 6, 4, 8, 2, True, rng=rng)
    named = list(zip(actor.param_names("a."), actor.params))
    save_params(tmp_path / "m.json", named, {"tau": 0.3})
    values, meta = load_params(tmp_path / "m.json")
    assert meta == {"tau": 0.3} and list(values) == [n for n, _ in named]
    for name, arr in named:
        np.testing.assert_array_equal(values[name], arr)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ValueError):
        load_params(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ValueError):
        load_params(tmp_path / "bad.json")
    (tmp_path / "other.json").write_text('{"format": "x"}')
    with pytest.raises(ValueError):
        load_params(tmp_path / "other.json")
    (tmp_path / "short.json").write_text(
        '{"format": "%s", "order": [{"name": "w", "shape": [3], "offset": 0}], "values": [1.0]}' % CHECKPOINT_FORMAT
    )
    with pytest.raises(ValueError):
        load_params(tmp_path / "short.json")
