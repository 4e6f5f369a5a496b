"""Policy tests: gradient oracle for the surrogate loss, return
bootstrapping against a hand-rolled recursion, surgery invariants, and a
sanity check that updates move probability toward advantaged actions."""

import numpy as np
import pytest

from causalworld import autodiff as ad
from causalworld.envs import CartPoleParams, CartPoleTask, ReplayBuffer
from causalworld.policy import (
    Policy, PolicyConfig, epsilon_at, evaluate_policy, expand_policy,
    imagination_starts, imagine, load_policy, policy_input, policy_update,
    remove_policy_inputs, run_episode, _softmax,
)
from causalworld.worldmodel import ModelConfig, WorldModel


def tiny_model(**kw):
    base = dict(obs_dim=3, action_count=2, d=2, h_dim=4, theta_dim=2,
                hidden=6, hidden_layers=1, head_hidden=5, head_layers=1)
    base.update(kw)
    return WorldModel(ModelConfig(**base), seed=3)


def tiny_policy(action_count=2, **kw):
    cfg = PolicyConfig(hidden=8, layers=1, horizon=4, imagine_batch=8, **kw)
    return Policy(d=2, theta_dim=2, action_count=action_count, cfg=cfg, seed=5)


def test_epsilon_anneal_endpoints():
    cfg = PolicyConfig(eps_start=0.4, eps_end=0.05, eps_anneal_steps=1000)
    assert epsilon_at(0, cfg) == 0.4
    assert epsilon_at(1000, cfg) == pytest.approx(0.05)
    assert epsilon_at(10**9, cfg) == pytest.approx(0.05)
    mid = epsilon_at(500, cfg)
    assert 0.05 < mid < 0.4


def test_policy_input_applies_gates():
    model = tiny_model()
    model.params["theta.s"].value[...] = [1.0, 2.0]
    model.gates["state"][1] = 0.0
    model.gates["th_s"][0] = 0.0
    x = policy_input(model, np.array([3.0, 7.0]))
    assert x.shape == (2 + 6,)
    assert x[0] == 3.0 and x[1] == 0.0
    assert x[6] == 0.0 and x[7] == 2.0
    xb = policy_input(model, np.array([[3.0, 7.0], [1.0, 1.0]]))
    assert xb.shape == (2, 8)
    assert np.array_equal(xb[0], x)


def test_train_graph_gradients_match_fd():
    pol = tiny_policy()
    rng = ad.make_rng(11)
    rows = 6
    g = pol.train_graph(rows)
    onehot = np.zeros((rows, 2))
    onehot[np.arange(rows), rng.integers(0, 2, rows)] = 1.0
    bind = {
        g["x"]: rng.normal(size=(rows, pol.in_dim)),
        g["onehot"]: onehot,
        g["ret"]: rng.normal(size=(rows, 1)),
        g["adv"]: rng.normal(size=(rows, 1)),
    }
    params = [pol.params[n] for n in ("actor.out_w", "actor.b0", "critic.out_b")]
    g["runner"].params = params
    _, grads = g["runner"].forward_backward(bind)

    def loss_value():
        g["runner"].forward(bind)
        return float(g["loss"].value)

    h = 1e-6
    for p in params:
        flat = p.value.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            dn = loss_value()
            flat[i] = orig
            fd[i] = (up - dn) / (2 * h)
        fd = fd.reshape(p.value.shape)
        denom = np.maximum(np.abs(fd), 1.0)
        assert np.max(np.abs(grads[p] - fd) / denom) < 1e-4, p.name


def test_imagine_shapes_and_determinism():
    model = tiny_model()
    pol = tiny_policy()
    starts = ad.make_rng(13).normal(size=(5, 2))
    a = imagine(model, pol, starts, 4, ad.make_rng(17))
    b = imagine(model, pol, starts, 4, ad.make_rng(17))
    assert a["x"].shape == (5, 4, pol.in_dim)
    assert a["actions"].shape == (5, 4)
    assert a["rewards"].shape == (5, 4)
    assert np.array_equal(a["x"], b["x"])
    assert np.array_equal(a["actions"], b["actions"])
    assert set(np.unique(a["actions"])) <= {0, 1}


def test_returns_bootstrap_recursion():
    """policy_update's return calculation must match the explicit sum
    G_t = sum_i gamma^i r_{t+i} + gamma^{H-t} V(s_H)."""
    model = tiny_model()
    cfg = PolicyConfig(hidden=8, layers=1, horizon=3, gamma=0.5, imagine_batch=4)
    pol = Policy(d=2, theta_dim=2, action_count=2, cfg=cfg, seed=7)
    starts = ad.make_rng(19).normal(size=(4, 2))
    im = imagine(model, pol, starts, 3, ad.make_rng(23))
    v_last = pol.value(im["x_last"])
    r = im["rewards"]
    expected_G0 = r[:, 0] + 0.5 * r[:, 1] + 0.25 * r[:, 2] + 0.125 * v_last
    stats = policy_update(model, pol, starts, ad.make_rng(23))
    assert stats["mean_return"] == pytest.approx(float(expected_G0.mean()), rel=1e-9)


def test_policy_update_moves_toward_advantaged_action():
    """With a reward decoder that pays for action-0-ish latents, repeated
    updates should raise the probability of the rewarded action."""
    model = tiny_model(head_layers=0)
    # make rewards depend strongly on the first latent coordinate
    model.params["dec_rew.out_w"].value[...] = 0.0
    model.params["dec_rew.w0"].value[...] = 0.0
    model.params["dec_rew.w0"].value[0, 0] = 3.0
    model.params["dec_rew.out_w"].value[0, 0] = 3.0
    # transition: action 0 pushes coordinate 0 up, action 1 pushes it down
    model.params["prior0.mu_w"].value[...] = 0.0
    d, q = 2, 2
    model.params["prior0.mu_w"].value[d + q, 0] = 2.0      # action 0
    model.params["prior0.mu_w"].value[d + q + 1, 0] = -2.0  # action 1
    model.params["prior0.sig_w"].value[...] = 0.0
    model.params["prior0.sig_b"].value[...] = -5.0
    pol = tiny_policy(lr=3e-3)
    rng = ad.make_rng(29)
    starts = np.zeros((16, 2))
    x0 = policy_input(model, np.zeros(2))
    p_before = _softmax(pol.logits(x0))[0]
    for _ in range(150):
        policy_update(model, pol, starts, rng)
    p_after = _softmax(pol.logits(x0))[0]
    assert p_after > p_before
    assert p_after > 0.6


def test_imagination_starts_from_buffer():
    model = tiny_model()
    rng = ad.make_rng(31)
    buf = ReplayBuffer(obs_dim=3, action_count=2)
    for _ in range(3):
        buf.add_episode(rng.normal(size=(11, 3)), rng.integers(0, 2, 10),
                        np.zeros(10))
    starts = imagination_starts(model, buf, rng, 12)
    assert starts.shape == (12, 2)
    assert np.all(np.isfinite(starts))


def test_run_episode_and_evaluate_on_cartpole():
    params = CartPoleParams()
    env = CartPoleTask(params)
    model = WorldModel(ModelConfig(obs_dim=2, action_count=2, d=2, h_dim=4,
                                   hidden=6, hidden_layers=1, head_hidden=5,
                                   head_layers=1), seed=9)
    pol = tiny_policy()
    rng = ad.make_rng(37)
    obs, actions, rewards, score = run_episode(env, model, pol, rng, epsilon=0.3)
    assert obs.shape[0] == actions.shape[0] + 1
    assert score == rewards.sum()
    assert actions.shape[0] <= params.max_steps
    mean, scores = evaluate_policy(env, model, pol, rng, episodes=2)
    assert len(scores) == 2
    assert mean == pytest.approx(np.mean(scores))


def test_expand_policy_preserves_old_behavior_and_ranks_new_actions_last():
    pol = tiny_policy()
    pol.params["actor.out_b"].value[...] = [0.3, -0.2]
    rng = ad.make_rng(41)
    big = expand_policy(pol, new_d=2, new_actions=2, seed=43)
    x_old = rng.normal(size=pol.in_dim)
    x_pad = np.concatenate([x_old[:2], [0.0, 0.0], x_old[2:]])
    lo = pol.logits(x_old)
    ln = big.logits(x_pad)
    assert np.allclose(ln[:2], lo, atol=1e-12)
    # new actions carry zero weights and the minimum old bias, so their
    # logits are input-independent and start at the bottom of the biases
    assert np.all(big.params["actor.out_w"].value[:, 2:] == 0.0)
    assert np.all(big.params["actor.out_b"].value[2:] == -0.2)
    assert np.allclose(ln[2:], -0.2, atol=1e-12)
    assert np.allclose(big.value(x_pad), pol.value(x_old), atol=1e-12)


def test_remove_policy_inputs_inverts_expand():
    pol = tiny_policy()
    big = expand_policy(pol, new_d=2, seed=47)
    back = remove_policy_inputs(big, [2, 3])
    for name, v in pol.state_dict().items():
        assert np.array_equal(v, back.params[name].value), name


def test_policy_save_load_roundtrip(tmp_path):
    pol = tiny_policy(entropy_scale=0.01)
    rng = ad.make_rng(53)
    x = rng.normal(size=pol.in_dim)
    pol.save(tmp_path / "pol")
    loaded = load_policy(tmp_path / "pol")
    assert np.array_equal(loaded.logits(x), pol.logits(x))
    assert loaded.cfg == pol.cfg


def test_act_epsilon_one_is_uniformish():
    pol = tiny_policy(action_count=3)
    # sharply peaked actor
    pol.params["actor.out_b"].value[...] = [50.0, 0.0, 0.0]
    rng = ad.make_rng(59)
    x = np.zeros(pol.in_dim)
    picks = [pol.act(x, rng, epsilon=1.0) for _ in range(300)]
    counts = np.bincount(picks, minlength=3)
    assert counts.min() > 50
    greedy = [pol.act(x, rng, epsilon=0.0) for _ in range(20)]
    assert all(a == 0 for a in greedy)
