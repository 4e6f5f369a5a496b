"""Policy learning inside the learned model.

The actor and critic are small MLPs over the gated model state: latent
coordinates and change factors that survived pruning, everything else
zeroed. Training rolls the model forward in latent space ("imagination"),
scores the trajectories with n-step bootstrapped returns, and ascends
the critic-baselined score function estimator; gradients never flow
through the dynamics, so imagination runs in plain numpy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad


@dataclass
class PolicyConfig:
    hidden: int = 64
    layers: int = 2
    horizon: int = 8
    gamma: float = 0.99
    entropy_scale: float = 3e-3
    lr: float = 1e-3
    imagine_batch: int = 128
    eps_start: float = 0.4
    eps_end: float = 0.05
    eps_anneal_steps: int = 20000


def epsilon_at(step, cfg: PolicyConfig):
    if cfg.eps_anneal_steps <= 0:
        return cfg.eps_end
    frac = min(1.0, max(0.0, step / cfg.eps_anneal_steps))
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def policy_input(model, s):
    """Gated policy observation: pruned coordinates contribute zeros."""
    s = np.asarray(s, dtype=np.float64)
    g = model.gates
    th = np.concatenate([
        model.theta_value("obs") * g["th_obs"],
        model.theta_value("rew") * g["th_rew"],
        model.theta_value("s") * g["th_s"],
    ])
    s_gated = s * g["state"]
    if s.ndim == 1:
        return np.concatenate([s_gated, th])
    return np.concatenate([s_gated, np.broadcast_to(th, (s.shape[0], th.size))],
                          axis=-1)


class Policy:
    def __init__(self, d, theta_dim, action_count, cfg: PolicyConfig = None, seed=0):
        self.cfg = cfg or PolicyConfig()
        self.d = d
        self.theta_dim = theta_dim
        self.action_count = action_count
        self.in_dim = d + 3 * theta_dim
        self.params = {}
        rng = ad.make_rng(seed, 505)
        c = self.cfg
        for prefix, n_out in (("actor", action_count), ("critic", 1)):
            cur = self.in_dim
            for i in range(c.layers):
                self._p(f"{prefix}.w{i}", ad.uniform_fanin(rng, cur, c.hidden))
                self._p(f"{prefix}.b{i}", np.zeros(c.hidden))
                cur = c.hidden
            self._p(f"{prefix}.out_w", ad.uniform_fanin(rng, cur, n_out))
            self._p(f"{prefix}.out_b", np.zeros(n_out))
        self.opt = ad.AdamState(lr=c.lr)
        self._graph_cache = {}
        self.updates = 0

    def _p(self, name, value):
        node = ad.parameter(name, value)
        self.params[name] = node
        return node

    def state_dict(self):
        return {n: p.value.copy() for n, p in self.params.items()}

    def load_state_dict(self, sd):
        for n, v in sd.items():
            self.params[n].value[...] = v

    def clone(self):
        out = Policy(self.d, self.theta_dim, self.action_count, self.cfg, seed=0)
        out.load_state_dict(self.state_dict())
        out.updates = self.updates
        return out

    # ---------- eager heads ----------

    def _mlp_eager(self, prefix, x):
        cur = np.asarray(x, dtype=np.float64)
        for i in range(self.cfg.layers):
            cur = np.tanh(cur @ self.params[f"{prefix}.w{i}"].value
                          + self.params[f"{prefix}.b{i}"].value)
        return cur @ self.params[f"{prefix}.out_w"].value \
            + self.params[f"{prefix}.out_b"].value

    def logits(self, x):
        return self._mlp_eager("actor", x)

    def value(self, x):
        return self._mlp_eager("critic", x)[..., 0]

    def act(self, x, rng, epsilon=0.0):
        """Sample from the actor distribution, mixed with epsilon-uniform
        exploration. Returns an int action index."""
        if epsilon > 0 and rng.random() < epsilon:
            return int(rng.integers(0, self.action_count))
        p = _softmax(self.logits(x))
        u = rng.random()
        return int(min(np.searchsorted(np.cumsum(p), u), self.action_count - 1))

    def act_greedy(self, x):
        return int(np.argmax(self.logits(x)))

    # ---------- training graph ----------

    def _mlp_graph(self, prefix, x):
        cur = x
        for i in range(self.cfg.layers):
            cur = ad.tanh(ad.affine(cur, self.params[f"{prefix}.w{i}"],
                                    self.params[f"{prefix}.b{i}"]))
        return ad.affine(cur, self.params[f"{prefix}.out_w"],
                         self.params[f"{prefix}.out_b"])

    def _train_graph(self, rows):
        x = ad.input_node("x", (None, self.in_dim))
        onehot = ad.input_node("onehot", (None, self.action_count))
        ret = ad.input_node("ret", (None, 1))
        adv = ad.input_node("adv", (None, 1))
        logits = self._mlp_graph("actor", x)
        logp = ad.log_softmax(logits)
        chosen = ad.mul(logp, onehot)
        actor_loss = ad.scale(ad.reduce_sum(ad.mul(chosen, adv)), -1.0 / rows)
        entropy = ad.scale(ad.reduce_sum(ad.mul(ad.exp(logp), logp)), -1.0 / rows)
        v = self._mlp_graph("critic", x)
        err = ad.add(v, ad.scale(ret, -1.0))
        critic_loss = ad.scale(ad.reduce_sum(ad.square(err)), 0.5 / rows)
        loss = ad.add(ad.add(actor_loss, ad.scale(entropy, -self.cfg.entropy_scale)),
                      critic_loss)
        runner = ad.Runner(outputs=[actor_loss, critic_loss, entropy], loss=loss,
                           params=list(self.params.values()))
        return {"runner": runner, "x": x, "onehot": onehot, "ret": ret, "adv": adv,
                "actor_loss": actor_loss, "critic_loss": critic_loss,
                "entropy": entropy, "loss": loss, "rows": rows}

    def train_graph(self, rows):
        if rows not in self._graph_cache:
            self._graph_cache[rows] = self._train_graph(rows)
        return self._graph_cache[rows]

    # ---------- persistence ----------

    def save(self, prefix):
        # suffixes keep a policy distinct from a world model saved at
        # the same checkpoint prefix
        ad.save_arrays(str(prefix) + ".policy.bin", self.state_dict())
        meta = {"format_version": 1, "d": self.d, "theta_dim": self.theta_dim,
                "action_count": self.action_count, "config": asdict(self.cfg)}
        with open(str(prefix) + ".policy.json", "w") as f:
            json.dump(meta, f, sort_keys=True, indent=1)


def load_policy(prefix):
    with open(str(prefix) + ".policy.json") as f:
        meta = json.load(f)
    if meta.get("format_version") != 1:
        raise ValueError("unsupported policy checkpoint version")
    pol = Policy(meta["d"], meta["theta_dim"], meta["action_count"],
                 PolicyConfig(**meta["config"]), seed=0)
    pol.load_state_dict(ad.load_arrays(str(prefix) + ".policy.bin"))
    return pol


# ============================================================
# Imagination
# ============================================================

def imagination_starts(model, buffer, rng, n, seq_len=16):
    """Posterior samples from replayed subsequences, used as imagination
    start states."""
    L = min(seq_len, max(2, len(buffer) // max(buffer.n_episodes, 1)))
    B = min(8, buffer.n_episodes)
    batch = buffer.sample_sequences(rng, B, L)
    c = model.cfg
    th = model.theta_all_value()
    th_b = np.broadcast_to(th, (B, th.size))
    h = np.zeros((B, c.h_dim))
    s = np.zeros((B, c.d))
    from .worldmodel import _EAGER
    states, weights = [], []
    for t in range(batch["obs"].shape[1] - 1):
        x = np.concatenate([s, batch["prev_action"][:, t], th_b], axis=-1)
        h = model.gru_step(_EAGER, h, x)
        mu, sig = model.posterior_net(
            _EAGER, h, model.normalize_obs(batch["obs"][:, t]), th_b)
        s = mu + sig * rng.normal(size=mu.shape)
        states.append(s)
        weights.append(batch["weight"][:, t])
    states = np.concatenate(states, axis=0)
    weights = np.concatenate(weights, axis=0)
    pool = states[weights > 0]
    if pool.shape[0] == 0:
        raise ValueError("no valid start states in buffer sample")
    idx = rng.integers(0, pool.shape[0], size=n)
    return pool[idx]


def imagine(model, policy, starts, horizon, rng):
    """Roll the policy through the model prior. Returns flat arrays plus
    the policy inputs at each step and at the bootstrap state. When the
    model carries a terminal classifier, cont holds the per-step survival
    probability; otherwise it stays at one."""
    s = np.asarray(starts, dtype=np.float64)
    N = s.shape[0]
    xs = np.zeros((N, horizon, policy.in_dim))
    acts = np.zeros((N, horizon), dtype=np.int64)
    rews = np.zeros((N, horizon))
    cont = np.ones((N, horizon))
    for t in range(horizon):
        x = policy_input(model, s)
        xs[:, t] = x
        logits = policy.logits(x)
        p = _softmax(logits)
        u = rng.random(size=(N, 1))
        a = (u > np.cumsum(p, axis=-1)).sum(axis=-1)
        a = np.minimum(a, policy.action_count - 1)
        acts[:, t] = a
        rews[:, t] = model.decode_rew(s)
        if model.cfg.done_head:
            cont[:, t] = 1.0 - model.decode_done(s)
        onehot = np.zeros((N, policy.action_count))
        onehot[np.arange(N), a] = 1.0
        s = model.prior_sample(s, onehot, rng)
    x_last = policy_input(model, s)
    return {"x": xs, "actions": acts, "rewards": rews, "cont": cont,
            "x_last": x_last}


def policy_update(model, policy, starts, rng):
    """One imagination rollout and one gradient step on actor + critic.

    Returns summary stats of the update. Returns are bootstrapped with
    the critic at the horizon; advantages are normalized per update.
    """
    cfg = policy.cfg
    H = cfg.horizon
    im = imagine(model, policy, starts, H, rng)
    N = im["x"].shape[0]
    v_steps = policy.value(im["x"].reshape(N * H, -1)).reshape(N, H)
    v_last = policy.value(im["x_last"])
    G = np.zeros((N, H))
    nxt = v_last
    for t in range(H - 1, -1, -1):
        # a step that ends the episode keeps its reward but no future
        nxt = im["rewards"][:, t] + cfg.gamma * im["cont"][:, t] * nxt
        G[:, t] = nxt
    adv = G - v_steps
    adv_n = (adv - adv.mean()) / (adv.std() + 1e-8)

    rows = N * H
    g = policy.train_graph(rows)
    onehot = np.zeros((rows, policy.action_count))
    onehot[np.arange(rows), im["actions"].reshape(-1)] = 1.0
    bind = {
        g["x"]: im["x"].reshape(rows, -1),
        g["onehot"]: onehot,
        g["ret"]: G.reshape(rows, 1),
        g["adv"]: adv_n.reshape(rows, 1),
    }
    _, grads = g["runner"].forward_backward(bind)
    total = np.sqrt(sum(float((gr * gr).sum()) for gr in grads.values()))
    if total > 100.0:
        sc = 100.0 / total
        grads = {p: gr * sc for p, gr in grads.items()}
    ad.adam_step(policy.opt, grads)
    policy.updates += 1
    return {
        "mean_return": float(G[:, 0].mean()),
        "entropy": float(g["entropy"].value),
        "actor_loss": float(g["actor_loss"].value),
        "critic_loss": float(g["critic_loss"].value),
    }


# ============================================================
# Acting in the real environment
# ============================================================

def run_episode(env, model, policy, rng, epsilon=0.0, greedy=False, max_steps=None):
    """Filter observations through the model posterior and act.

    Returns (obs array (T+1, O), actions (T,), rewards (T,), score,
    terminated), where terminated distinguishes a true terminal state
    from a step-limit cutoff.
    """
    obs0 = env.reset(rng)
    fs = model.init_filter()
    prev_a = np.zeros(model.cfg.action_count)
    obs_list, actions, rewards = [np.asarray(obs0, dtype=np.float64)], [], []
    score = 0.0
    steps = 0
    terminated = False
    while True:
        fs, _, _ = model.filter_step(fs, obs_list[-1], prev_a)
        x = policy_input(model, fs["s"])
        a = policy.act_greedy(x) if greedy else policy.act(x, rng, epsilon)
        obs, r, done, truncated = env.step(a, rng)
        obs_list.append(np.asarray(obs, dtype=np.float64))
        actions.append(a)
        rewards.append(float(r))
        score += float(r)
        prev_a = np.zeros(model.cfg.action_count)
        prev_a[a] = 1.0
        steps += 1
        if done or truncated:
            terminated = bool(done)
            break
        if max_steps is not None and steps >= max_steps:
            break
    return (np.asarray(obs_list), np.asarray(actions, dtype=np.int64),
            np.asarray(rewards), score, terminated)


def evaluate_policy(env, model, policy, rng, episodes=5):
    """Mean greedy-episode score; does not touch the replay buffer."""
    scores = []
    for _ in range(episodes):
        score = run_episode(env, model, policy, rng, greedy=True)[3]
        scores.append(score)
    return float(np.mean(scores)), scores


# ============================================================
# Policy surgery
# ============================================================

def expand_policy(policy, new_d=0, new_actions=0, seed=0):
    """Widened copy. Old input rows keep their values; new latent input
    rows are freshly initialized. New action logits start with zero
    weights and the minimum existing bias, so unexplored actions begin
    as least-preferred but remain reachable."""
    cfg = policy.cfg
    out = Policy(policy.d + new_d, policy.theta_dim,
                 policy.action_count + new_actions, cfg, seed=seed)
    d, q = policy.d, policy.theta_dim
    d2 = d + new_d
    for prefix in ("actor", "critic"):
        w0 = out.params[f"{prefix}.w0"].value
        w0_old = policy.params[f"{prefix}.w0"].value
        w0[:d] = w0_old[:d]
        w0[d2:] = w0_old[d:]
        for i in range(1, cfg.layers):
            out.params[f"{prefix}.w{i}"].value[...] = policy.params[f"{prefix}.w{i}"].value
        for i in range(cfg.layers):
            out.params[f"{prefix}.b{i}"].value[...] = policy.params[f"{prefix}.b{i}"].value
    out.params["critic.out_w"].value[...] = policy.params["critic.out_w"].value
    out.params["critic.out_b"].value[...] = policy.params["critic.out_b"].value
    A = policy.action_count
    ow = out.params["actor.out_w"].value
    ow[:, :A] = policy.params["actor.out_w"].value
    ow[:, A:] = 0.0
    ob = out.params["actor.out_b"].value
    ob[:A] = policy.params["actor.out_b"].value
    if new_actions:
        ob[A:] = policy.params["actor.out_b"].value.min()
    return out


def remove_policy_inputs(policy, coords):
    """Copy with the given latent input rows dropped."""
    keep = [k for k in range(policy.d) if k not in set(coords)]
    out = Policy(len(keep), policy.theta_dim, policy.action_count, policy.cfg, seed=0)
    rows = np.asarray(keep + list(range(policy.d, policy.in_dim)))
    for prefix in ("actor", "critic"):
        out.params[f"{prefix}.w0"].value[...] = policy.params[f"{prefix}.w0"].value[rows]
        for i in range(1, policy.cfg.layers):
            out.params[f"{prefix}.w{i}"].value[...] = policy.params[f"{prefix}.w{i}"].value
        for i in range(policy.cfg.layers):
            out.params[f"{prefix}.b{i}"].value[...] = policy.params[f"{prefix}.b{i}"].value
        out.params[f"{prefix}.out_w"].value[...] = policy.params[f"{prefix}.out_w"].value
        out.params[f"{prefix}.out_b"].value[...] = policy.params[f"{prefix}.out_b"].value
    return out
