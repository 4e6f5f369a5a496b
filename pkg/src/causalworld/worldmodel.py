"""Masked factored world model.

Latent state s_t (d stochastic coordinates) with:
  * a recurrent deterministic context h_t (gated cell) that summarizes
    (s_{t-1}, a_{t-1}, theta) for the posterior only;
  * posterior q(s_t | h_t, o_t, theta) as a diagonal Gaussian;
  * one transition head per coordinate, p(s_{k,t} | masked inputs), a
    pure function of mask-gated (s_{t-1}, theta_s, a_{t-1}) so structure
    is not bypassed through the context;
  * observation / reward decoders over mask-gated (s_t, theta).

Structural masks are continuous logits pushed through a temperature-1
sigmoid; the binary view thresholds at 0.5. Pruning multiplies the
outgoing soft masks of non-compact coordinates by a 0/1 gate while
keeping the underlying logits for later tasks.

The same forward definitions run in two backends: one builds autodiff
graphs for training, the other evaluates eagerly with numpy for
filtering, imagination, and prediction-error scoring.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import expit

from . import autodiff as ad


# ============================================================
# Configs
# ============================================================

@dataclass
class ModelConfig:
    obs_dim: int
    action_count: int
    d: int = 4
    h_dim: int = 30
    theta_dim: int = 2
    hidden: int = 64
    hidden_layers: int = 2
    head_hidden: int = 32
    head_layers: int = 1
    mask_temp: float = 1.0
    mask_init: float = 2.0
    sigma_floor: float = 1e-4
    mask_mode: str = "learned"   # "learned" | "ones" (ablation)
    theta_mode: str = "learned"  # "learned" | "zero" (ablation)
    # optional terminal-state classifier; imagination uses it to cut
    # returns at predicted episode ends
    done_head: bool = False
    done_scale: float = 20.0


@dataclass
class TrainConfig:
    batch: int = 20
    seq_len: int = 30
    lr: float = 1e-3
    kl_scale: float = 0.02
    reg_scale: float = 0.02
    grad_clip: float = 100.0
    steps: int = 100
    log_every: int = 100
    snapshot_every: int = 100


@dataclass
class FitReport:
    steps: int = 0
    diverged: bool = False
    epochs: list = field(default_factory=list)  # dicts of mean J parts

    @property
    def final(self):
        return self.epochs[-1] if self.epochs else {}


# ============================================================
# Backends
# ============================================================

class _GraphB:
    """Builds autodiff nodes; runtime constants become auto-bound inputs."""

    is_graph = True

    def __init__(self):
        self.auto = {}  # name -> (input node, fetch fn)
        self.memo = {}  # dedups mask subgraphs across timesteps

    def const(self, name, fetch):
        if name not in self.auto:
            self.auto[name] = (ad.input_node(name), fetch)
        return self.auto[name][0]

    def pvalue(self, node):
        return node

    affine = staticmethod(ad.affine)
    tanh = staticmethod(ad.tanh)
    sigmoid = staticmethod(ad.sigmoid)
    softplus = staticmethod(ad.softplus)
    concat = staticmethod(ad.concat)
    mul = staticmethod(ad.mul)
    add = staticmethod(ad.add)
    scale = staticmethod(ad.scale)


class _EagerB:
    """Evaluates with numpy arrays; parameters are read live."""

    is_graph = False

    def const(self, name, fetch):
        return fetch()

    def pvalue(self, node):
        return node.value

    @staticmethod
    def affine(x, w, b):
        return x @ w.value + b.value

    tanh = staticmethod(np.tanh)

    @staticmethod
    def sigmoid(x):
        return expit(x)

    @staticmethod
    def softplus(x):
        return np.logaddexp(0.0, x)

    @staticmethod
    def concat(xs):
        xs = list(xs)
        want = max(np.ndim(x) for x in xs)
        xs = [np.broadcast_to(x, (xs[0].shape[0], x.shape[-1])) if np.ndim(x) < want else x
              for x in xs]
        return np.concatenate(xs, axis=-1)

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def scale(x, alpha, beta=0.0):
        return alpha * x + beta


_EAGER = _EagerB()

MASK_NAMES = ("s_obs", "s_rew", "s_s", "a_s", "th_s", "th_obs", "th_rew")


# ============================================================
# Model
# ============================================================

class WorldModel:
    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        self.params = {}
        self.new_param_masks = {}
        self.task_id = 0
        rng = ad.make_rng(seed, 404)
        c = cfg
        self.gates = {
            "state": np.ones(c.d),
            "th_obs": np.ones(c.theta_dim),
            "th_rew": np.ones(c.theta_dim),
            "th_s": np.ones(c.theta_dim),
        }
        # fixed affine observation transform; training and filtering run
        # in the whitened space so unit decoder noise weighs dims evenly
        self.obs_loc = np.zeros(c.obs_dim)
        self.obs_scale = np.ones(c.obs_dim)
        q3 = 3 * c.theta_dim
        gru_in = c.d + c.action_count + q3
        for g in ("z", "r", "c"):
            self._p(f"gru.w{g}", ad.uniform_fanin(rng, gru_in + c.h_dim, c.h_dim))
            self._p(f"gru.b{g}", np.zeros(c.h_dim))
        self._mlp_init(rng, "post", c.h_dim + c.obs_dim + q3, c.hidden, c.hidden_layers,
                       heads={"mu": c.d, "sig": c.d})
        for k in range(c.d):
            self._head_init(rng, k)
        self._mlp_init(rng, "dec_obs", c.d + c.theta_dim, c.hidden, c.hidden_layers,
                       heads={"out": c.obs_dim})
        self._mlp_init(rng, "dec_rew", c.d + c.theta_dim, c.hidden, c.hidden_layers,
                       heads={"out": 1})
        init = c.mask_init
        self._p("mask.s_obs", np.full(c.d, init))
        self._p("mask.s_rew", np.full(c.d, init))
        self._p("mask.th_obs", np.full(c.theta_dim, init))
        self._p("mask.th_rew", np.full(c.theta_dim, init))
        for k in range(c.d):
            self._p(f"mask.s_s.{k}", np.full(c.d, init))
            self._p(f"mask.a_s.{k}", np.full(c.action_count, init))
            self._p(f"mask.th_s.{k}", np.full(c.theta_dim, init))
        self._p("theta.obs", np.zeros(c.theta_dim))
        self._p("theta.rew", np.zeros(c.theta_dim))
        self._p("theta.s", np.zeros(c.theta_dim))
        if c.done_head:
            # initialized after everything else so enabling the head
            # never changes the draws behind the shared parameters
            self._mlp_init(rng, "dec_done", c.d, c.head_hidden, c.head_layers,
                           heads={"out": 1})
            # start near "episode continues" so early imagined returns
            # are not halved by an untrained classifier
            self.params["dec_done.out_b"].value[...] = -2.0
        self._graph_cache = {}

    # ---------- parameter plumbing ----------

    def _p(self, name, value):
        node = ad.parameter(name, value)
        self.params[name] = node
        return node

    def _mlp_init(self, rng, prefix, n_in, hidden, layers, heads):
        cur = n_in
        for i in range(layers):
            self._p(f"{prefix}.w{i}", ad.uniform_fanin(rng, cur, hidden))
            self._p(f"{prefix}.b{i}", np.zeros(hidden))
            cur = hidden
        for hname, n_out in heads.items():
            self._p(f"{prefix}.{hname}_w", ad.uniform_fanin(rng, cur, n_out))
            self._p(f"{prefix}.{hname}_b", np.zeros(n_out))

    def _head_init(self, rng, k):
        c = self.cfg
        n_in = c.d + c.theta_dim + c.action_count
        self._mlp_init(rng, f"prior{k}", n_in, c.head_hidden, c.head_layers,
                       heads={"mu": 1, "sig": 1})

    def state_dict(self):
        return {n: p.value.copy() for n, p in self.params.items()}

    def load_state_dict(self, sd):
        for n, v in sd.items():
            if n not in self.params:
                raise KeyError(f"unknown parameter {n!r}")
            if self.params[n].value.shape != v.shape:
                raise ValueError(f"shape mismatch for {n!r}")
            self.params[n].value[...] = v

    def clone(self):
        other = WorldModel(copy.deepcopy(self.cfg), seed=0)
        other.load_state_dict(self.state_dict())
        other.gates = {k: v.copy() for k, v in self.gates.items()}
        other.new_param_masks = {k: v.copy() for k, v in self.new_param_masks.items()}
        other.task_id = self.task_id
        other.obs_loc = self.obs_loc.copy()
        other.obs_scale = self.obs_scale.copy()
        return other

    def set_obs_norm(self, loc, scale):
        loc = np.asarray(loc, dtype=np.float64)
        scale = np.asarray(scale, dtype=np.float64)
        if loc.shape != (self.cfg.obs_dim,) or scale.shape != (self.cfg.obs_dim,):
            raise ValueError("observation transform has the wrong shape")
        if np.any(scale <= 0):
            raise ValueError("observation scale must be positive")
        self.obs_loc = loc.copy()
        self.obs_scale = scale.copy()

    def normalize_obs(self, obs):
        return (np.asarray(obs, dtype=np.float64) - self.obs_loc) / self.obs_scale

    # ---------- masks ----------

    def soft_masks(self):
        """Pre-gate soft masks, assembled into matrices (row = output)."""
        c = self.cfg
        if c.mask_mode == "ones":
            return {
                "s_obs": np.ones(c.d), "s_rew": np.ones(c.d),
                "s_s": np.ones((c.d, c.d)), "a_s": np.ones((c.d, c.action_count)),
                "th_s": np.ones((c.d, c.theta_dim)),
                "th_obs": np.ones(c.theta_dim), "th_rew": np.ones(c.theta_dim),
            }
        sig = lambda x: expit(x / c.mask_temp)
        out = {
            "s_obs": sig(self.params["mask.s_obs"].value),
            "s_rew": sig(self.params["mask.s_rew"].value),
            "th_obs": sig(self.params["mask.th_obs"].value),
            "th_rew": sig(self.params["mask.th_rew"].value),
        }
        out["s_s"] = np.stack([sig(self.params[f"mask.s_s.{k}"].value) for k in range(c.d)])
        out["a_s"] = np.stack([sig(self.params[f"mask.a_s.{k}"].value) for k in range(c.d)])
        out["th_s"] = np.stack([sig(self.params[f"mask.th_s.{k}"].value) for k in range(c.d)])
        return out

    def binary_masks(self):
        """Binarized pre-gate masks: entry is 1 iff soft value >= 0.5."""
        return {k: (v >= 0.5).astype(np.float64) for k, v in self.soft_masks().items()}

    def _mask_handle(self, B, name, gate=None):
        """Soft mask (optionally gate-multiplied) as a backend handle."""
        c = self.cfg
        memo = getattr(B, "memo", None)
        if memo is not None and (name, gate) in memo:
            return memo[(name, gate)]
        if c.mask_mode == "ones":
            def fetch_ones(nm=name):
                p = self.params[f"mask.{nm}"].value
                return np.ones_like(p)
            m = B.const(f"ones_mask.{name}", fetch_ones)
        else:
            logits = self.params[f"mask.{name}"]
            lh = logits if B.is_graph else logits.value
            m = B.sigmoid(B.scale(lh, 1.0 / c.mask_temp))
            if gate is not None:
                g = B.const(f"gate.{gate}", lambda gt=gate: self.gates[gt])
                m = B.mul(m, g)
        if memo is not None:
            memo[(name, gate)] = m
        return m

    # ---------- forward pieces (backend-parametric) ----------

    def _mlp(self, B, prefix, x, layers, head):
        cur = x
        for i in range(layers):
            cur = B.tanh(B.affine(cur, self.params[f"{prefix}.w{i}"],
                                  self.params[f"{prefix}.b{i}"]))
        return B.affine(cur, self.params[f"{prefix}.{head}_w"],
                        self.params[f"{prefix}.{head}_b"])

    def _mlp_two_heads(self, B, prefix, x, layers, h1, h2):
        cur = x
        for i in range(layers):
            cur = B.tanh(B.affine(cur, self.params[f"{prefix}.w{i}"],
                                  self.params[f"{prefix}.b{i}"]))
        a = B.affine(cur, self.params[f"{prefix}.{h1}_w"], self.params[f"{prefix}.{h1}_b"])
        b = B.affine(cur, self.params[f"{prefix}.{h2}_w"], self.params[f"{prefix}.{h2}_b"])
        return a, b

    def _sigma(self, B, raw):
        return B.scale(B.softplus(raw), 1.0, self.cfg.sigma_floor)

    def _theta(self, B, which):
        node = self.params[f"theta.{which}"]
        if self.cfg.theta_mode == "zero":
            return B.const(f"zero_theta.{which}",
                           lambda w=which: np.zeros(self.cfg.theta_dim))
        return B.pvalue(node) if not B.is_graph else node

    def gru_step(self, B, h, x):
        xh = B.concat([x, h])
        z = B.sigmoid(B.affine(xh, self.params["gru.wz"], self.params["gru.bz"]))
        r = B.sigmoid(B.affine(xh, self.params["gru.wr"], self.params["gru.br"]))
        xc = B.concat([x, B.mul(r, h)])
        c = B.tanh(B.affine(xc, self.params["gru.wc"], self.params["gru.bc"]))
        return B.add(B.mul(z, h), B.mul(B.scale(z, -1.0, 1.0), c))

    def posterior_net(self, B, h, obs, theta_all):
        x = B.concat([h, obs, theta_all])
        mu, raw = self._mlp_two_heads(B, "post", x, self.cfg.hidden_layers, "mu", "sig")
        return mu, self._sigma(B, raw)

    def prior_net(self, B, s_prev, a_prev, theta_s, masked_theta_rows=None):
        """Per-coordinate transition heads; returns (mu, sigma) stacked on
        the last axis. Inputs are gated by each head's mask row."""
        c = self.cfg
        mus, sigs = [], []
        for k in range(c.d):
            m_s = self._mask_handle(B, f"s_s.{k}", gate="state")
            m_a = self._mask_handle(B, f"a_s.{k}")
            if masked_theta_rows is not None:
                th_m = masked_theta_rows[k]
            else:
                m_t = self._mask_handle(B, f"th_s.{k}", gate="th_s")
                th_m = B.mul(theta_s, m_t)
            x = B.concat([B.mul(s_prev, m_s), th_m, B.mul(a_prev, m_a)])
            mu, raw = self._mlp_two_heads(B, f"prior{k}", x, c.head_layers, "mu", "sig")
            mus.append(mu)
            sigs.append(self._sigma(B, raw))
        return B.concat(mus), B.concat(sigs)

    def decode_obs_net(self, B, s, theta_o):
        m_s = self._mask_handle(B, "s_obs", gate="state")
        m_t = self._mask_handle(B, "th_obs", gate="th_obs")
        x = B.concat([B.mul(s, m_s), B.mul(theta_o, m_t)])
        return self._mlp(B, "dec_obs", x, self.cfg.hidden_layers, "out")

    def decode_rew_net(self, B, s, theta_r):
        m_s = self._mask_handle(B, "s_rew", gate="state")
        m_t = self._mask_handle(B, "th_rew", gate="th_rew")
        x = B.concat([B.mul(s, m_s), B.mul(theta_r, m_t)])
        return self._mlp(B, "dec_rew", x, self.cfg.hidden_layers, "out")

    def decode_done_net(self, B, s):
        # bookkeeping head, not part of the structural model: unmasked,
        # reads the full state
        return self._mlp(B, "dec_done", s, self.cfg.head_layers, "out")

    # ---------- eager API ----------

    def theta_value(self, which):
        if self.cfg.theta_mode == "zero":
            return np.zeros(self.cfg.theta_dim)
        return self.params[f"theta.{which}"].value.copy()

    def theta_all_value(self):
        return np.concatenate([self.theta_value("obs"), self.theta_value("rew"),
                               self.theta_value("s")])

    def init_filter(self):
        return {"h": np.zeros(self.cfg.h_dim), "s": np.zeros(self.cfg.d)}

    def filter_step(self, fs, obs, prev_action_onehot):
        """Advance the context with (s_prev, a_prev, theta), absorb obs
        through the posterior, and return the new filter state (posterior
        mean) plus the posterior (mu, sigma)."""
        th = self.theta_all_value()
        x = np.concatenate([fs["s"], prev_action_onehot, th])
        h = self.gru_step(_EAGER, fs["h"], x)
        mu, sig = self.posterior_net(_EAGER, h, self.normalize_obs(obs), th)
        return {"h": h, "s": mu}, mu, sig

    def posterior_step(self, fs, obs, prev_action_onehot):
        fs2, mu, sig = self.filter_step(fs, obs, prev_action_onehot)
        return fs2, (mu, sig)

    def prior_step(self, s_prev, a_onehot, theta_s=None):
        """Eager per-coordinate transition distribution (mu, sigma)."""
        th = self.theta_value("s") if theta_s is None else np.asarray(theta_s)
        return self.prior_net(_EAGER, np.asarray(s_prev, dtype=np.float64),
                              np.asarray(a_onehot, dtype=np.float64), th)

    def prior_sample(self, s_prev, a_onehot, rng, theta_s=None):
        mu, sig = self.prior_step(s_prev, a_onehot, theta_s)
        return mu + sig * rng.normal(size=mu.shape)

    def decode_obs(self, s):
        out = self.decode_obs_net(_EAGER, np.asarray(s, dtype=np.float64),
                                  self.theta_value("obs"))
        return self.obs_loc + self.obs_scale * out

    def decode_rew(self, s):
        out = self.decode_rew_net(_EAGER, np.asarray(s, dtype=np.float64),
                                  self.theta_value("rew"))
        return out[..., 0]

    def decode_done(self, s):
        """Probability the step taken from state s ends the episode."""
        out = self.decode_done_net(_EAGER, np.asarray(s, dtype=np.float64))
        return expit(out[..., 0])

    # ---------- training graph ----------

    def _build_train_graph(self, Bsz, L, kl_scale, reg_scale):
        c = self.cfg
        gb = _GraphB()
        h0 = ad.input_node("h0", (None, c.h_dim))
        s0 = ad.input_node("s0", (None, c.d))
        ones_b1 = ad.input_node("ones_b1", (None, 1))

        def bcast(vec_handle):
            return ad.mul(ones_b1, vec_handle)

        th_o = self._theta(gb, "obs")
        th_r = self._theta(gb, "rew")
        th_s = self._theta(gb, "s")
        th_all_b = bcast(ad.concat([th_o, th_r, th_s]))
        th_s_b = bcast(th_s)
        th_o_b = bcast(th_o)
        th_r_b = bcast(th_r)
        # theta mask products do not change across time; hoist them
        masked_theta_rows = []
        for k in range(c.d):
            m_t = self._mask_handle(gb, f"th_s.{k}", gate="th_s")
            masked_theta_rows.append(ad.mul(th_s_b, m_t))

        obs_in, pa_in, eps_in, w_in, rew_in, done_in = [], [], [], [], [], []
        h, s = h0, s0
        nll_obs_sum = None
        nll_rew_sum = None
        bce_done_sum = None
        kl_sum = None
        s_nodes = []

        for t in range(L):
            obs_t = ad.input_node(f"obs.{t}", (None, c.obs_dim))
            pa_t = ad.input_node(f"pa.{t}", (None, c.action_count))
            eps_t = ad.input_node(f"eps.{t}", (None, c.d))
            w_t = ad.input_node(f"w.{t}", (None, 1))
            rew_t = ad.input_node(f"rew.{t}", (None, 1))
            obs_in.append(obs_t); pa_in.append(pa_t); eps_in.append(eps_t)
            w_in.append(w_t); rew_in.append(rew_t)

            x = ad.concat([s, pa_t, th_all_b])
            h = self.gru_step(gb, h, x)
            mu_q, sig_q = self.posterior_net(gb, h, obs_t, th_all_b)
            mu_p, sig_p = self.prior_net(gb, s, pa_t, None,
                                         masked_theta_rows=masked_theta_rows)
            kl_t = ad.reduce_sum(ad.mul(
                ad.kl_diag_gaussian(mu_q, sig_q, mu_p, sig_p), w_t))
            kl_sum = kl_t if kl_sum is None else ad.add(kl_sum, kl_t)

            s = ad.add(mu_q, ad.mul(sig_q, eps_t))
            s_nodes.append(s)

            obs_hat = self.decode_obs_net(gb, s, th_o_b)
            nll_o = ad.reduce_sum(ad.mul(ad.gaussian_nll(obs_t, obs_hat, 1.0), w_t))
            nll_obs_sum = nll_o if nll_obs_sum is None else ad.add(nll_obs_sum, nll_o)
            rew_hat = self.decode_rew_net(gb, s, th_r_b)
            nll_r = ad.reduce_sum(ad.mul(ad.gaussian_nll(rew_t, rew_hat, 1.0), w_t))
            nll_rew_sum = nll_r if nll_rew_sum is None else ad.add(nll_rew_sum, nll_r)
            if c.done_head:
                done_t = ad.input_node(f"done.{t}", (None, 1))
                done_in.append(done_t)
                logit = self.decode_done_net(gb, s)
                # cross entropy from logits: softplus(l) - l * y
                bce = ad.add(ad.softplus(logit),
                             ad.mul(logit, ad.scale(done_t, -1.0)))
                bce_t = ad.reduce_sum(ad.mul(bce, w_t))
                bce_done_sum = bce_t if bce_done_sum is None \
                    else ad.add(bce_done_sum, bce_t)

        inv_b = 1.0 / Bsz
        rec_sum = ad.add(nll_obs_sum, nll_rew_sum)
        if bce_done_sum is not None:
            rec_sum = ad.add(rec_sum, ad.scale(bce_done_sum, c.done_scale))
        j_rec = ad.scale(rec_sum, -inv_b)
        j_kl = ad.scale(kl_sum, kl_scale * inv_b)
        if c.mask_mode == "ones":
            reg_total = None
        else:
            reg_terms = ["mask.s_rew", "mask.th_obs", "mask.th_rew"]
            reg_terms += [f"mask.s_s.{k}" for k in range(c.d)]
            reg_terms += [f"mask.a_s.{k}" for k in range(c.d)]
            reg_terms += [f"mask.th_s.{k}" for k in range(c.d)]
            soft = lambda nm: ad.sigmoid(ad.scale(self.params[nm], 1.0 / c.mask_temp))
            reg_total = ad.l1_norm(soft("mask.s_obs"))
            for nm in reg_terms:
                reg_total = ad.add(reg_total, ad.l1_norm(soft(nm)))
        if self.cfg.theta_mode != "zero":
            th_l1 = ad.add(ad.add(ad.l1_norm(self.params["theta.obs"]),
                                  ad.l1_norm(self.params["theta.rew"])),
                           ad.l1_norm(self.params["theta.s"]))
            reg_total = th_l1 if reg_total is None else ad.add(reg_total, th_l1)
        if reg_total is None:
            j_reg = ad.scale(j_kl, 0.0)  # constant zero of matching shape
        else:
            j_reg = ad.scale(reg_total, -reg_scale)
        j = ad.add(ad.add(j_rec, ad.scale(j_kl, -1.0)), j_reg)
        loss = ad.scale(j, -1.0)

        runner = ad.Runner(outputs=[j, j_rec, j_kl, j_reg] + s_nodes, loss=loss)
        return {
            "runner": runner, "loss": loss,
            "j": j, "j_rec": j_rec, "j_kl": j_kl, "j_reg": j_reg,
            "obs": obs_in, "pa": pa_in, "eps": eps_in, "w": w_in, "rew": rew_in,
            "done": done_in, "h0": h0, "s0": s0, "ones": ones_b1, "auto": gb.auto,
            "s_nodes": s_nodes, "B": Bsz, "L": L,
        }

    def train_graph(self, Bsz, L, kl_scale, reg_scale):
        key = (Bsz, L, round(kl_scale, 12), round(reg_scale, 12))
        if key not in self._graph_cache:
            self._graph_cache[key] = self._build_train_graph(Bsz, L, kl_scale, reg_scale)
        return self._graph_cache[key]

    def _graph_bindings(self, g, batch, rng):
        B, L = g["B"], g["L"]
        bind = {
            g["h0"]: np.zeros((B, self.cfg.h_dim)),
            g["s0"]: np.zeros((B, self.cfg.d)),
            g["ones"]: np.ones((B, 1)),
        }
        eps = rng.normal(size=(B, L, self.cfg.d)) if rng is not None else np.zeros((B, L, self.cfg.d))
        for t in range(L):
            bind[g["obs"][t]] = self.normalize_obs(batch["obs"][:, t])
            bind[g["pa"][t]] = batch["prev_action"][:, t]
            bind[g["eps"][t]] = eps[:, t]
            bind[g["w"][t]] = batch["weight"][:, t][:, None]
            bind[g["rew"][t]] = batch["reward"][:, t][:, None]
            if g["done"]:
                bind[g["done"][t]] = batch["done"][:, t][:, None]
        for name, (node, fetch) in g["auto"].items():
            bind[node] = fetch()
        return bind

    # ---------- trainable subsets ----------

    def trainable(self, subset="all"):
        """Returns (params list, {param: 0/1 mask} or None)."""
        if subset == "theta":
            if self.cfg.theta_mode == "zero":
                return [], None
            return [self.params[f"theta.{w}"] for w in ("obs", "rew", "s")], None
        if subset == "new":
            params, masks = [], {}
            for name, m in self.new_param_masks.items():
                node = self.params[name]
                params.append(node)
                if not m.all():
                    masks[node] = m.astype(np.float64)
            return params, (masks or None)
        if subset != "all":
            raise ValueError(f"unknown trainable subset {subset!r}")
        skip_mask = self.cfg.mask_mode == "ones"
        skip_theta = self.cfg.theta_mode == "zero"
        out = []
        for name, node in self.params.items():
            if skip_mask and name.startswith("mask."):
                continue
            if skip_theta and name.startswith("theta."):
                continue
            out.append(node)
        return out, None

    # ---------- objective and fitting ----------

    def objective(self, batch, cfg: TrainConfig, rng):
        """One forward evaluation of the objective on a prepared batch.

        Returns dict with J, J_rec, J_KL, J_reg (J_KL already carries its
        scale factor; J = J_rec - J_KL + J_reg exactly as recombined).
        """
        B, L = batch["obs"].shape[0], batch["obs"].shape[1] - 1
        g = self.train_graph(B, L, cfg.kl_scale, cfg.reg_scale)
        vals = g["runner"].forward(self._graph_bindings(g, batch, rng))
        return {
            "J": float(vals[g["j"]]), "J_rec": float(vals[g["j_rec"]]),
            "J_KL": float(vals[g["j_kl"]]), "J_reg": float(vals[g["j_reg"]]),
        }


def fit(model, buffer, cfg: TrainConfig, rng, subset="all", group_prox=None, opt=None):
    """Optimize the model objective on buffer subsequences.

    Args:
        subset: "all", "theta" (change factors only), or "new" (parameters
            flagged by the last expansion; frozen entries stay bit-exact).
        group_prox: optional (groups, lam) applied after each step, where
            groups is a list of [(param name, index tuple), ...] blocks;
            each block is soft-thresholded toward zero as a unit.
        opt: optional AdamState carried across calls for online training;
            it must not be shared between different trainable subsets.

    Returns FitReport with per-epoch objective components. If the
    objective goes non-finite the last snapshot is restored and the fit
    aborts with diverged=True.
    """
    params, masks = model.trainable(subset)
    report = FitReport()
    if not params or buffer.n_episodes == 0:
        return report
    g = model.train_graph(cfg.batch, cfg.seq_len, cfg.kl_scale, cfg.reg_scale)
    runner = g["runner"]
    runner.params = params
    if opt is None:
        opt = ad.AdamState(lr=cfg.lr)
    snapshot = model.state_dict()
    acc = []
    for step in range(cfg.steps):
        batch = buffer.sample_sequences(rng, cfg.batch, cfg.seq_len)
        bind = model._graph_bindings(g, batch, rng)
        _, grads = runner.forward_backward(bind)
        j_val = float(g["j"].value)
        if not np.isfinite(j_val):
            model.load_state_dict(snapshot)
            report.diverged = True
            break
        if cfg.grad_clip > 0:
            total = np.sqrt(sum(float((gr * gr).sum()) for gr in grads.values()))
            if total > cfg.grad_clip:
                sc = cfg.grad_clip / total
                grads = {p: gr * sc for p, gr in grads.items()}
        ad.adam_step(opt, grads, masks=masks)
        if group_prox is not None:
            groups, lam = group_prox
            _apply_group_prox(model, groups, lam * cfg.lr)
        acc.append((j_val, float(g["j_rec"].value), float(g["j_kl"].value),
                    float(g["j_reg"].value)))
        report.steps += 1
        if (step + 1) % cfg.snapshot_every == 0:
            snapshot = model.state_dict()
        if (step + 1) % cfg.log_every == 0 or step == cfg.steps - 1:
            arr = np.asarray(acc)
            report.epochs.append({
                "J": float(arr[:, 0].mean()), "J_rec": float(arr[:, 1].mean()),
                "J_KL": float(arr[:, 2].mean()), "J_reg": float(arr[:, 3].mean()),
            })
            acc = []
    return report


def fit_multitask(model, buffers, cfg: TrainConfig, rng, thetas=None,
                  subset="all", opt=None):
    """Optimize one model on several task buffers, round-robin.

    Every task keeps its own change-factor values. Before each step the
    current task's values are loaded into the model; afterwards they are
    copied back out. The change factors also get one optimizer state per
    task so momentum never bleeds across tasks, while all remaining
    parameters share a single state and update on every step.

    Args:
        buffers: one replay buffer per task, all with matching spaces.
        thetas: optional per-task {"obs", "rew", "s"} value dicts seeding
            the change factors (default: the model's current values).
        opt: optional shared AdamState for the non-factor parameters.

    Returns (report, thetas) with the trained per-task values. The model
    is left holding task 0's factors.
    """
    if not buffers:
        raise ValueError("need at least one task buffer")
    for i, buf in enumerate(buffers):
        if buf.n_episodes == 0:
            raise ValueError(f"task {i} buffer is empty")
    words = () if model.cfg.theta_mode == "zero" else ("obs", "rew", "s")
    th_nodes = [model.params[f"theta.{w}"] for w in words]
    if thetas is None:
        thetas = [{w: model.params[f"theta.{w}"].value.copy() for w in words}
                  for _ in buffers]
    else:
        thetas = [{w: np.asarray(t[w], dtype=np.float64).copy() for w in words}
                  for t in thetas]
    params, masks = model.trainable(subset)
    report = FitReport()
    if not params:
        return report, thetas
    th_set = set(th_nodes)
    shared = [p for p in params if p not in th_set]
    owned = [p for p in th_nodes if p in set(params)]
    g = model.train_graph(cfg.batch, cfg.seq_len, cfg.kl_scale, cfg.reg_scale)
    runner = g["runner"]
    runner.params = params
    if opt is None:
        opt = ad.AdamState(lr=cfg.lr)
    task_opts = [ad.AdamState(lr=cfg.lr) for _ in buffers]
    snapshot = model.state_dict()
    thetas_snap = [{w: t[w].copy() for w in t} for t in thetas]
    acc = []
    for step in range(cfg.steps):
        task = step % len(buffers)
        for w in words:
            model.params[f"theta.{w}"].value[...] = thetas[task][w]
        batch = buffers[task].sample_sequences(rng, cfg.batch, cfg.seq_len)
        bind = model._graph_bindings(g, batch, rng)
        _, grads = runner.forward_backward(bind)
        j_val = float(g["j"].value)
        if not np.isfinite(j_val):
            model.load_state_dict(snapshot)
            thetas = [{w: t[w].copy() for w in t} for t in thetas_snap]
            report.diverged = True
            break
        if cfg.grad_clip > 0:
            total = np.sqrt(sum(float((gr * gr).sum()) for gr in grads.values()))
            if total > cfg.grad_clip:
                sc = cfg.grad_clip / total
                grads = {p: gr * sc for p, gr in grads.items()}
        ad.adam_step(opt, {p: grads[p] for p in shared}, masks=masks)
        if owned:
            ad.adam_step(task_opts[task], {p: grads[p] for p in owned})
        for w in words:
            thetas[task][w] = model.params[f"theta.{w}"].value.copy()
        acc.append((j_val, float(g["j_rec"].value), float(g["j_kl"].value),
                    float(g["j_reg"].value)))
        report.steps += 1
        if (step + 1) % cfg.snapshot_every == 0:
            snapshot = model.state_dict()
            thetas_snap = [{w: t[w].copy() for w in t} for t in thetas]
        if (step + 1) % cfg.log_every == 0 or step == cfg.steps - 1:
            arr = np.asarray(acc)
            report.epochs.append({
                "J": float(arr[:, 0].mean()), "J_rec": float(arr[:, 1].mean()),
                "J_KL": float(arr[:, 2].mean()), "J_reg": float(arr[:, 3].mean()),
            })
            acc = []
    for w in words:
        model.params[f"theta.{w}"].value[...] = thetas[0][w]
    return report, thetas


def _apply_group_prox(model, groups, thresh):
    for block in groups:
        norm2 = 0.0
        for name, idx in block:
            v = model.params[name].value[idx]
            norm2 += float((v * v).sum())
        norm = np.sqrt(norm2)
        if norm == 0.0:
            continue
        factor = max(0.0, 1.0 - thresh / norm)
        for name, idx in block:
            model.params[name].value[idx] *= factor


def group_norms(model, groups):
    out = []
    for block in groups:
        norm2 = 0.0
        for name, idx in block:
            v = model.params[name].value[idx]
            norm2 += float((v * v).sum())
        out.append(np.sqrt(norm2))
    return np.asarray(out)


# ============================================================
# Prediction error (the detection statistic)
# ============================================================

def predict_error(model, episodes, max_episodes=None):
    """Mean squared one-step open-loop observation error.

    Filters each episode with the posterior mean, pushes the filtered
    state through the transition prior mean, decodes the next
    observation, and averages ||o_hat - o||^2 over all predictable steps.
    """
    if max_episodes is not None:
        episodes = episodes[:max_episodes]
    if not episodes:
        raise ValueError("predict_error needs at least one episode")
    c = model.cfg
    th = model.theta_all_value()
    total, count = 0.0, 0
    # pad episodes to a common length and filter them as one batch
    lens = [len(ep["actions"]) for ep in episodes]
    Tmax = max(lens)
    N = len(episodes)
    obs = np.zeros((N, Tmax + 1, c.obs_dim))
    pa = np.zeros((N, Tmax + 1, c.action_count))
    valid = np.zeros((N, Tmax + 1), dtype=bool)
    for i, ep in enumerate(episodes):
        T = lens[i]
        obs[i, :T + 1] = ep["obs"]
        onehot = np.zeros((T, c.action_count))
        onehot[np.arange(T), ep["actions"]] = 1.0
        pa[i, 1:T + 1] = onehot
        valid[i, :T + 1] = True
    h = np.zeros((N, c.h_dim))
    s = np.zeros((N, c.d))
    th_b = np.broadcast_to(th, (N, th.size))
    for t in range(Tmax):
        x = np.concatenate([s, pa[:, t], th_b], axis=-1)
        h_new = model.gru_step(_EAGER, h, x)
        mu_q, _ = model.posterior_net(_EAGER, h_new, model.normalize_obs(obs[:, t]), th_b)
        upd = valid[:, t][:, None]
        h = np.where(upd, h_new, h)
        s = np.where(upd, mu_q, s)
        # one-step prediction of o_{t+1} via the prior mean
        mu_p, _ = model.prior_step(s, pa[:, t + 1])
        o_hat = model.decode_obs(mu_p)
        mask = valid[:, t + 1] & valid[:, t]
        if mask.any():
            err = ((o_hat - obs[:, t + 1]) ** 2).sum(axis=-1)
            total += float(err[mask].sum())
            count += int(mask.sum())
    if count == 0:
        raise ValueError("no predictable transitions in the given episodes")
    return total / count


# ============================================================
# Compactness and pruning
# ============================================================

@dataclass
class CompactSets:
    state: np.ndarray    # bool (d,)
    th_obs: np.ndarray   # bool (q,)
    th_rew: np.ndarray
    th_s: np.ndarray


def compute_compact(binary):
    """Classify coordinates from binarized masks.

    State coordinate k is compact iff it feeds the observation, the
    reward, or some other coordinate j != k at the next step (a pure
    self-loop does not count). Change-factor coordinates are compact iff
    they feed their respective decoder or any transition head.
    """
    d = binary["s_s"].shape[0]
    off_diag = binary["s_s"].copy()
    np.fill_diagonal(off_diag, 0.0)
    state = (binary["s_obs"] > 0) | (binary["s_rew"] > 0) | (off_diag.sum(axis=0) > 0)
    return CompactSets(
        state=state,
        th_obs=binary["th_obs"] > 0,
        th_rew=binary["th_rew"] > 0,
        th_s=binary["th_s"].sum(axis=0) > 0,
    )


def apply_pruning(model, compact: CompactSets):
    """Install 0/1 gates for non-compact coordinates. Logits are kept so
    later tasks can revive the edges. Raises if nothing stays compact."""
    if not compact.state.any():
        raise ValueError("pruning would remove every state coordinate")
    model.gates["state"] = compact.state.astype(np.float64)
    model.gates["th_obs"] = compact.th_obs.astype(np.float64)
    model.gates["th_rew"] = compact.th_rew.astype(np.float64)
    model.gates["th_s"] = compact.th_s.astype(np.float64)


def clear_pruning(model):
    for k, v in model.gates.items():
        model.gates[k] = np.ones_like(v)


# ============================================================
# Model surgery: growth and removal
# ============================================================

def _copy_rows(dst, src, dst_rows, src_rows):
    dst[np.asarray(dst_rows)] = src[np.asarray(src_rows)]


def grow_model(model, new_d=0, new_actions=0, new_obs=0, seed=0):
    """Return a widened copy of the model.

    Every pre-existing parameter entry is preserved bit-exact; fresh
    entries are initialized from `seed` and flagged as the "new"
    trainable subset. Gates extend with ones. The original model is not
    touched.
    """
    c = model.cfg
    cfg2 = copy.deepcopy(c)
    cfg2.d = c.d + new_d
    cfg2.action_count = c.action_count + new_actions
    cfg2.obs_dim = c.obs_dim + new_obs
    out = WorldModel(cfg2, seed=seed)
    out.task_id = model.task_id

    q = c.theta_dim
    d, d2 = c.d, cfg2.d
    A, A2 = c.action_count, cfg2.action_count
    O = c.obs_dim

    new_masks = {}

    def seg_rows(segs_old, segs_new):
        """Row index map old->new for a segmented input layout."""
        rows_old, rows_new = [], []
        off_o, off_n = 0, 0
        for so, sn in zip(segs_old, segs_new):
            rows_old.extend(range(off_o, off_o + so))
            rows_new.extend(range(off_n, off_n + so))
            off_o += so
            off_n += sn
        return rows_old, rows_new

    def copy_matrix(name, segs_old=None, segs_new=None, cols_old=None):
        src = model.params[name].value
        dst = out.params[name].value
        flag = np.ones(dst.shape, dtype=bool)
        if dst.ndim == 1:
            n = src.shape[0]
            dst[:n] = src
            flag[:n] = False
        else:
            if segs_old is None:
                rows_o = rows_n = list(range(src.shape[0]))
            else:
                rows_o, rows_n = seg_rows(segs_old, segs_new)
            nc = src.shape[1] if cols_old is None else cols_old
            dst[np.asarray(rows_n)[:, None], np.arange(nc)] = src[rows_o][:, :nc]
            flag[np.asarray(rows_n)[:, None], np.arange(nc)] = False
        if flag.any():
            new_masks[name] = flag
        return dst

    # GRU input layout [s | a | theta*3]
    gsegs_o = [d, A, 3 * q, c.h_dim]
    gsegs_n = [d2, A2, 3 * q, c.h_dim]
    for gname in ("wz", "wr", "wc"):
        copy_matrix(f"gru.{gname}", gsegs_o, gsegs_n)
    for gname in ("bz", "br", "bc"):
        out.params[f"gru.{gname}"].value[...] = model.params[f"gru.{gname}"].value

    # posterior input [h | obs | theta*3]; outputs widen by new_d
    psegs_o = [c.h_dim, O, 3 * q]
    psegs_n = [c.h_dim, cfg2.obs_dim, 3 * q]
    for i in range(c.hidden_layers):
        copy_matrix(f"post.w{i}", psegs_o if i == 0 else None,
                    psegs_n if i == 0 else None)
        out.params[f"post.b{i}"].value[...] = model.params[f"post.b{i}"].value
    for hname in ("mu", "sig"):
        # with no hidden layers the head reads the segmented input itself
        copy_matrix(f"post.{hname}_w",
                    psegs_o if c.hidden_layers == 0 else None,
                    psegs_n if c.hidden_layers == 0 else None, cols_old=d)
        out.params[f"post.{hname}_b"].value[:d] = model.params[f"post.{hname}_b"].value
        if new_d:
            flag = np.zeros(d2, dtype=bool)
            flag[d:] = True
            new_masks[f"post.{hname}_b"] = flag

    # prior heads: input [s | theta | a]
    hsegs_o = [d, q, A]
    hsegs_n = [d2, q, A2]
    for k in range(d):
        for i in range(c.head_layers):
            copy_matrix(f"prior{k}.w{i}", hsegs_o if i == 0 else None,
                        hsegs_n if i == 0 else None)
            out.params[f"prior{k}.b{i}"].value[...] = model.params[f"prior{k}.b{i}"].value
        for hname in ("mu", "sig"):
            copy_matrix(f"prior{k}.{hname}_w",
                        hsegs_o if c.head_layers == 0 else None,
                        hsegs_n if c.head_layers == 0 else None)
            out.params[f"prior{k}.{hname}_b"].value[...] = \
                model.params[f"prior{k}.{hname}_b"].value
    for k in range(d, d2):
        for i in range(c.head_layers):
            new_masks[f"prior{k}.w{i}"] = np.ones_like(
                out.params[f"prior{k}.w{i}"].value, dtype=bool)
            new_masks[f"prior{k}.b{i}"] = np.ones_like(
                out.params[f"prior{k}.b{i}"].value, dtype=bool)
        for hname in ("mu", "sig"):
            new_masks[f"prior{k}.{hname}_w"] = np.ones_like(
                out.params[f"prior{k}.{hname}_w"].value, dtype=bool)
            new_masks[f"prior{k}.{hname}_b"] = np.ones_like(
                out.params[f"prior{k}.{hname}_b"].value, dtype=bool)

    # decoders: input [s | theta]; obs decoder output widens by new_obs
    dsegs_o = [d, q]
    dsegs_n = [d2, q]
    for prefix in ("dec_obs", "dec_rew"):
        for i in range(c.hidden_layers):
            copy_matrix(f"{prefix}.w{i}", dsegs_o if i == 0 else None,
                        dsegs_n if i == 0 else None)
            out.params[f"{prefix}.b{i}"].value[...] = model.params[f"{prefix}.b{i}"].value
    dsegs_direct_o = dsegs_o if c.hidden_layers == 0 else None
    dsegs_direct_n = dsegs_n if c.hidden_layers == 0 else None
    copy_matrix("dec_obs.out_w", dsegs_direct_o, dsegs_direct_n, cols_old=O)
    out.params["dec_obs.out_b"].value[:O] = model.params["dec_obs.out_b"].value
    if new_obs:
        flag = np.zeros(cfg2.obs_dim, dtype=bool)
        flag[O:] = True
        new_masks["dec_obs.out_b"] = flag
    copy_matrix("dec_rew.out_w", dsegs_direct_o, dsegs_direct_n)
    out.params["dec_rew.out_b"].value[...] = model.params["dec_rew.out_b"].value

    # terminal classifier reads the bare state
    if c.done_head:
        for i in range(c.head_layers):
            copy_matrix(f"dec_done.w{i}", [d] if i == 0 else None,
                        [d2] if i == 0 else None)
            out.params[f"dec_done.b{i}"].value[...] = \
                model.params[f"dec_done.b{i}"].value
        copy_matrix("dec_done.out_w", [d] if c.head_layers == 0 else None,
                    [d2] if c.head_layers == 0 else None)
        out.params["dec_done.out_b"].value[...] = \
            model.params["dec_done.out_b"].value

    # masks: widen vectors/rows; new rows are wholly new
    copy_matrix("mask.s_obs")
    copy_matrix("mask.s_rew")
    out.params["mask.th_obs"].value[...] = model.params["mask.th_obs"].value
    out.params["mask.th_rew"].value[...] = model.params["mask.th_rew"].value
    for k in range(d):
        copy_matrix(f"mask.s_s.{k}")
        copy_matrix(f"mask.a_s.{k}")
        out.params[f"mask.th_s.{k}"].value[...] = model.params[f"mask.th_s.{k}"].value
    for k in range(d, d2):
        for nm in (f"mask.s_s.{k}", f"mask.a_s.{k}", f"mask.th_s.{k}"):
            new_masks[nm] = np.ones_like(out.params[nm].value, dtype=bool)

    for w in ("obs", "rew", "s"):
        out.params[f"theta.{w}"].value[...] = model.params[f"theta.{w}"].value

    out.gates["state"][:d] = model.gates["state"]
    for gname in ("th_obs", "th_rew", "th_s"):
        out.gates[gname][...] = model.gates[gname]
    out.obs_loc[:O] = model.obs_loc
    out.obs_scale[:O] = model.obs_scale

    out.new_param_masks = new_masks
    return out


def new_unit_groups(model):
    """Weight groups carrying each newly added coordinate's outgoing
    influence, used by the deterministic strategy's shrink step."""
    flags = model.new_param_masks.get("mask.s_obs")
    if flags is None:
        return [], []
    new_coords = list(np.flatnonzero(flags))
    c = model.cfg
    dec_first = "w0" if c.hidden_layers > 0 else "out_w"
    head_first = ("w0",) if c.head_layers > 0 else ("mu_w", "sig_w")
    done_first = "w0" if c.head_layers > 0 else "out_w"
    groups = []
    for k in new_coords:
        block = [(f"dec_obs.{dec_first}", (k,)), (f"dec_rew.{dec_first}", (k,))]
        if c.done_head:
            block.append((f"dec_done.{done_first}", (k,)))
        for j in range(c.d):
            for hname in head_first:
                block.append((f"prior{j}.{hname}", (k,)))
        for gname in ("wz", "wr", "wc"):
            block.append((f"gru.{gname}", (k,)))
        groups.append(block)
    return new_coords, groups


def remove_state_units(model, coords):
    """Return a copy of the model with the given latent coordinates
    removed (inverse of growth for those indices)."""
    coords = sorted(set(int(k) for k in coords))
    c = model.cfg
    if not coords:
        return model.clone()
    keep = [k for k in range(c.d) if k not in coords]
    if not keep:
        raise ValueError("cannot remove every state coordinate")
    cfg2 = copy.deepcopy(c)
    cfg2.d = len(keep)
    out = WorldModel(cfg2, seed=0)
    out.task_id = model.task_id
    q, A = c.theta_dim, c.action_count
    keep_arr = np.asarray(keep)

    def rows_for(segs, seg_keeps):
        rows = []
        off = 0
        for size, kp in zip(segs, seg_keeps):
            base = list(range(off, off + size)) if kp is None else [off + i for i in kp]
            rows.extend(base)
            off += size
        return np.asarray(rows)

    sd = model.state_dict()
    new_sd = {}
    gsel = rows_for([c.d, A, 3 * q, c.h_dim], [keep, None, None, None])
    for gname in ("wz", "wr", "wc"):
        new_sd[f"gru.{gname}"] = sd[f"gru.{gname}"][gsel]
    for gname in ("bz", "br", "bc"):
        new_sd[f"gru.{gname}"] = sd[f"gru.{gname}"]
    for i in range(c.hidden_layers):
        new_sd[f"post.w{i}"] = sd[f"post.w{i}"]
        new_sd[f"post.b{i}"] = sd[f"post.b{i}"]
    for hname in ("mu", "sig"):
        new_sd[f"post.{hname}_w"] = sd[f"post.{hname}_w"][:, keep_arr]
        new_sd[f"post.{hname}_b"] = sd[f"post.{hname}_b"][keep_arr]
    hsel = rows_for([c.d, q, A], [keep, None, None])
    for new_k, old_k in enumerate(keep):
        for i in range(c.head_layers):
            w = sd[f"prior{old_k}.w{i}"]
            new_sd[f"prior{new_k}.w{i}"] = w[hsel] if i == 0 else w
            new_sd[f"prior{new_k}.b{i}"] = sd[f"prior{old_k}.b{i}"]
        for hname in ("mu", "sig"):
            w = sd[f"prior{old_k}.{hname}_w"]
            if c.head_layers == 0:
                w = w[hsel]
            new_sd[f"prior{new_k}.{hname}_w"] = w
            new_sd[f"prior{new_k}.{hname}_b"] = sd[f"prior{old_k}.{hname}_b"]
    dsel = rows_for([c.d, q], [keep, None])
    for prefix in ("dec_obs", "dec_rew"):
        for i in range(c.hidden_layers):
            w = sd[f"{prefix}.w{i}"]
            new_sd[f"{prefix}.w{i}"] = w[dsel] if i == 0 else w
            new_sd[f"{prefix}.b{i}"] = sd[f"{prefix}.b{i}"]
        ow = sd[f"{prefix}.out_w"]
        if c.hidden_layers == 0:
            ow = ow[dsel]
        new_sd[f"{prefix}.out_w"] = ow
        new_sd[f"{prefix}.out_b"] = sd[f"{prefix}.out_b"]
    if c.done_head:
        for i in range(c.head_layers):
            w = sd[f"dec_done.w{i}"]
            new_sd[f"dec_done.w{i}"] = w[keep_arr] if i == 0 else w
            new_sd[f"dec_done.b{i}"] = sd[f"dec_done.b{i}"]
        ow = sd["dec_done.out_w"]
        if c.head_layers == 0:
            ow = ow[keep_arr]
        new_sd["dec_done.out_w"] = ow
        new_sd["dec_done.out_b"] = sd["dec_done.out_b"]
    new_sd["mask.s_obs"] = sd["mask.s_obs"][keep_arr]
    new_sd["mask.s_rew"] = sd["mask.s_rew"][keep_arr]
    new_sd["mask.th_obs"] = sd["mask.th_obs"]
    new_sd["mask.th_rew"] = sd["mask.th_rew"]
    for new_k, old_k in enumerate(keep):
        new_sd[f"mask.s_s.{new_k}"] = sd[f"mask.s_s.{old_k}"][keep_arr]
        new_sd[f"mask.a_s.{new_k}"] = sd[f"mask.a_s.{old_k}"]
        new_sd[f"mask.th_s.{new_k}"] = sd[f"mask.th_s.{old_k}"]
    for w in ("obs", "rew", "s"):
        new_sd[f"theta.{w}"] = sd[f"theta.{w}"]
    out.load_state_dict(new_sd)
    out.gates["state"] = model.gates["state"][keep_arr].copy()
    for gname in ("th_obs", "th_rew", "th_s"):
        out.gates[gname] = model.gates[gname].copy()
    out.obs_loc = model.obs_loc.copy()
    out.obs_scale = model.obs_scale.copy()
    # removal reindexes heads, so stale new-param flags would mislabel;
    # training after a removal uses the full parameter set anyway
    out.new_param_masks = {}
    return out


# ============================================================
# Checkpointing
# ============================================================

def save_model(model, prefix):
    arrays = model.state_dict()
    for gname, v in model.gates.items():
        arrays[f"__gate__.{gname}"] = v
    arrays["__norm__.loc"] = model.obs_loc
    arrays["__norm__.scale"] = model.obs_scale
    ad.save_arrays(str(prefix) + ".params.bin", arrays)
    meta = {"format_version": 1, "config": asdict(model.cfg), "task_id": model.task_id}
    with open(str(prefix) + ".meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)


def load_model(prefix):
    with open(str(prefix) + ".meta.json") as f:
        meta = json.load(f)
    if meta.get("format_version") != 1:
        raise ValueError("unsupported model checkpoint version")
    cfg = ModelConfig(**meta["config"])
    model = WorldModel(cfg, seed=0)
    arrays = ad.load_arrays(str(prefix) + ".params.bin")
    gates = {}
    params = {}
    for name, v in arrays.items():
        if name.startswith("__gate__."):
            gates[name.split(".", 1)[1]] = v
        elif name == "__norm__.loc":
            model.obs_loc = v
        elif name == "__norm__.scale":
            model.obs_scale = v
        else:
            params[name] = v
    model.load_state_dict(params)
    for gname, v in gates.items():
        model.gates[gname] = v
    model.task_id = meta.get("task_id", 0)
    return model
