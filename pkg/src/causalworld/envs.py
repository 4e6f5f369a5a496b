"""Environment suite: a synthetic latent-factor family with known causal
structure, a linear-Gaussian family for identifiability checks, and a
physically corrected cart-pole with friction and task variants.

All environments draw their randomness from generators passed in
explicitly; nothing touches numpy's global RNG. Observations and rewards
of the synthetic family are emitted by the state being left, so both are
functions of the same internal state index.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import make_rng

DEG_12 = 12.0 * np.pi / 180.0


def _he_uniform(rng, n_in, n_out):
    b = np.sqrt(6.0 / n_in)
    return rng.uniform(-b, b, size=(n_in, n_out))


def _glorot_uniform(rng, n_in, n_out):
    b = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-b, b, size=(n_in, n_out))


def draw_theta(theta_dim, rng):
    """Task change factor, uniform on [-1, 1] per coordinate."""
    return rng.uniform(-1.0, 1.0, size=theta_dim)


# ============================================================
# Synthetic latent-factor environments
# ============================================================

@dataclass
class SyntheticSpec:
    """Generator networks plus the ground-truth structural masks.

    The observation map is a single dense layer of the state, the reward
    map a small relu MLP, and the transition a single tanh layer over
    (theta, state, one-hot action). Structure comes from dropout applied
    at mask granularity when the spec is generated: per state coordinate
    for the observation/reward maps (whole input rows zeroed), per weight
    for the transition layer, whose single dense layer gives a one-to-one
    weight/edge correspondence.
    """

    d: int
    obs_dim: int
    action_dim: int
    theta_dim: int
    noise_std: float
    w_obs: np.ndarray   # (d, obs_dim)
    b_obs: np.ndarray
    w_r1: np.ndarray    # (d, 128)
    b_r1: np.ndarray
    w_r2: np.ndarray    # (128, 64)
    b_r2: np.ndarray
    w_r3: np.ndarray    # (64, 1)
    b_r3: np.ndarray
    w_tr: np.ndarray    # (theta_dim + d + action_dim, d)
    b_tr: np.ndarray
    # ground-truth binary masks, row = output coordinate
    mask_s_obs: np.ndarray    # (d,)
    mask_s_rew: np.ndarray    # (d,)
    mask_s_s: np.ndarray      # (d, d)
    mask_a_s: np.ndarray      # (d, action_dim)
    mask_th_s: np.ndarray     # (d, theta_dim)

    def true_masks(self):
        return {
            "s_obs": self.mask_s_obs.copy(),
            "s_rew": self.mask_s_rew.copy(),
            "s_s": self.mask_s_s.copy(),
            "a_s": self.mask_a_s.copy(),
            "th_s": self.mask_th_s.copy(),
        }


def gen_synthetic_env(seed, d=4, obs_dim=128, action_dim=2, theta_dim=2,
                      dropout_p=0.5, noise_std=0.2):
    """Sample a synthetic environment spec with recorded ground truth.

    Args:
        seed: generator seed; identical seeds give identical specs.
        dropout_p: probability that a weight group is zeroed. 0 disables
            structure (all masks become ones).

    Returns:
        SyntheticSpec.
    """
    if d < 1 or obs_dim < 1 or action_dim < 1 or theta_dim < 1:
        raise ValueError("all dimensions must be positive")
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError("dropout_p must lie in [0, 1)")
    rng = make_rng(seed, 101)

    w_obs = _glorot_uniform(rng, d, obs_dim)
    b_obs = np.zeros(obs_dim)
    w_r1 = _he_uniform(rng, d, 128)
    b_r1 = np.zeros(128)
    w_r2 = _he_uniform(rng, 128, 64)
    b_r2 = np.zeros(64)
    w_r3 = _glorot_uniform(rng, 64, 1)
    b_r3 = np.zeros(1)
    in_tr = theta_dim + d + action_dim
    w_tr = _glorot_uniform(rng, in_tr, d)
    b_tr = np.zeros(d)

    keep = lambda shape: (rng.random(shape) >= dropout_p).astype(np.float64)
    mask_s_obs = keep(d)
    mask_s_rew = keep(d)
    mask_th_s = keep((d, theta_dim))
    mask_s_s = keep((d, d))
    mask_a_s = keep((d, action_dim))

    w_obs *= mask_s_obs[:, None]
    w_r1 *= mask_s_rew[:, None]
    w_tr[:theta_dim] *= mask_th_s.T
    w_tr[theta_dim:theta_dim + d] *= mask_s_s.T
    w_tr[theta_dim + d:] *= mask_a_s.T

    return SyntheticSpec(
        d=d, obs_dim=obs_dim, action_dim=action_dim, theta_dim=theta_dim,
        noise_std=noise_std,
        w_obs=w_obs, b_obs=b_obs, w_r1=w_r1, b_r1=b_r1, w_r2=w_r2, b_r2=b_r2,
        w_r3=w_r3, b_r3=b_r3, w_tr=w_tr, b_tr=b_tr,
        mask_s_obs=mask_s_obs, mask_s_rew=mask_s_rew, mask_s_s=mask_s_s,
        mask_a_s=mask_a_s, mask_th_s=mask_th_s)


def synthetic_observe(spec, s):
    return s @ spec.w_obs + spec.b_obs


def synthetic_reward(spec, s):
    h = np.maximum(s @ spec.w_r1 + spec.b_r1, 0.0)
    h = np.maximum(h @ spec.w_r2 + spec.b_r2, 0.0)
    return float((h @ spec.w_r3 + spec.b_r3)[0])


def synthetic_transition_mean(spec, theta, s, action):
    """Noise-free next state."""
    a = np.zeros(spec.action_dim)
    a[action] = 1.0
    u = np.concatenate([theta, s, a])
    return np.tanh(u @ spec.w_tr + spec.b_tr)


def synthetic_transition(spec, theta, s, action, rng):
    nxt = synthetic_transition_mean(spec, theta, s, action)
    return nxt + rng.normal(0.0, spec.noise_std, size=spec.d)


def synthetic_step(spec, theta, s, action, rng):
    """Pure step: returns (s_next, obs, reward) where obs and reward are
    emitted by the state being left."""
    o = synthetic_observe(spec, s)
    r = synthetic_reward(spec, s)
    s2 = synthetic_transition(spec, theta, s, action, rng)
    return s2, o, r


def expand_synthetic_env(spec, n, rng, dropout_p=0.5):
    """Grow the latent space by n fresh coordinates.

    Every existing weight is preserved exactly; new rows/columns are
    sampled with the original init distributions and dropout-masked, so
    the ground-truth masks extend accordingly. New coordinates may feed
    old ones and vice versa.
    """
    if n < 1:
        raise ValueError("expansion size must be >= 1")
    d, d2 = spec.d, spec.d + n
    q, adim = spec.theta_dim, spec.action_dim

    keep = lambda shape: (rng.random(shape) >= dropout_p).astype(np.float64)

    mask_s_obs = np.concatenate([spec.mask_s_obs, keep(n)])
    w_obs = np.vstack([spec.w_obs, _glorot_uniform(rng, d2, spec.obs_dim)[d:]])
    w_obs[d:] *= mask_s_obs[d:, None]

    mask_s_rew = np.concatenate([spec.mask_s_rew, keep(n)])
    w_r1 = np.vstack([spec.w_r1, _he_uniform(rng, d2, 128)[d:]])
    w_r1[d:] *= mask_s_rew[d:, None]

    in2 = q + d2 + adim
    w_tr = _glorot_uniform(rng, in2, d2)
    mask_th_s = np.vstack([spec.mask_th_s, keep((n, q))])
    mask_s_s = np.block([
        [spec.mask_s_s, keep((d, n))],
        [keep((n, d)), keep((n, n))],
    ])
    mask_a_s = np.vstack([spec.mask_a_s, keep((n, adim))])

    w_tr[:q] *= mask_th_s.T
    w_tr[q:q + d2] *= mask_s_s.T
    w_tr[q + d2:] *= mask_a_s.T
    # overwrite the old block last so existing weights survive bit-exact
    w_tr[:q, :d] = spec.w_tr[:q]
    w_tr[q:q + d, :d] = spec.w_tr[q:q + d]
    w_tr[q + d2:, :d] = spec.w_tr[q + d:]
    b_tr = np.concatenate([spec.b_tr, np.zeros(n)])

    return replace(
        spec, d=d2, w_obs=w_obs, w_r1=w_r1, w_tr=w_tr, b_tr=b_tr,
        mask_s_obs=mask_s_obs, mask_s_rew=mask_s_rew, mask_s_s=mask_s_s,
        mask_a_s=mask_a_s, mask_th_s=mask_th_s)


class SyntheticTask:
    """Stateful wrapper used by collection loops; episodes run a fixed
    number of steps (no failure state)."""

    family = "synthetic"

    def __init__(self, spec, theta, episode_len=256):
        if len(theta) != spec.theta_dim:
            raise ValueError("theta has wrong dimension")
        self.spec = spec
        self.theta = np.asarray(theta, dtype=np.float64)
        self.episode_len = episode_len
        self._s = None
        self._t = 0

    @property
    def obs_dim(self):
        return self.spec.obs_dim

    @property
    def action_count(self):
        return self.spec.action_dim

    @property
    def state(self):
        return None if self._s is None else self._s.copy()

    def reset(self, rng):
        self._s = rng.normal(size=self.spec.d)
        self._t = 0
        return synthetic_observe(self.spec, self._s)

    def step(self, action, rng):
        if self._s is None:
            raise RuntimeError("step before reset")
        r = synthetic_reward(self.spec, self._s)
        self._s = synthetic_transition(self.spec, self.theta, self._s, action, rng)
        self._t += 1
        obs = synthetic_observe(self.spec, self._s)
        truncated = self._t >= self.episode_len
        return obs, r, False, truncated


# ============================================================
# Linear-Gaussian environments
# ============================================================

@dataclass
class LinearEnvSpec:
    A: np.ndarray          # (d, d), full rank, spectral radius < 1
    B: np.ndarray          # (d, action_dim)
    C: np.ndarray          # (d, theta_dim), full column rank
    noise_std: float

    @property
    def d(self):
        return self.A.shape[0]

    @property
    def action_dim(self):
        return self.B.shape[1]

    @property
    def theta_dim(self):
        return self.C.shape[1]


def gen_linear_env(seed, d=4, action_dim=2, theta_dim=1, noise_std=0.2,
                   spectral_radius=0.95, max_draws=100):
    """Sample s' = A s + B a + C theta + eps with A full rank and C full
    column rank. A is rescaled to the requested spectral radius so long
    rollouts stay bounded; raises if 100 draws cannot satisfy the rank
    checks."""
    rng = make_rng(seed, 202)
    A = None
    for _ in range(max_draws):
        cand = rng.normal(size=(d, d)) / np.sqrt(d)
        rho = np.abs(np.linalg.eigvals(cand)).max()
        if rho < 1e-12:
            continue
        cand = cand * (spectral_radius / rho)
        if np.linalg.svd(cand, compute_uv=False).min() > 1e-6:
            A = cand
            break
    if A is None:
        raise RuntimeError("could not draw a full-rank A in 100 attempts")
    C = None
    for _ in range(max_draws):
        cand = rng.normal(size=(d, theta_dim))
        if np.linalg.svd(cand, compute_uv=False).min() > 1e-6:
            C = cand
            break
    if C is None:
        raise RuntimeError("could not draw a full-column-rank C in 100 attempts")
    B = rng.normal(size=(d, action_dim))
    return LinearEnvSpec(A=A, B=B, C=C, noise_std=noise_std)


def linear_step(spec, theta, s, action, rng):
    a = np.zeros(spec.action_dim)
    a[action] = 1.0
    eps = rng.normal(0.0, spec.noise_std, size=spec.d) if spec.noise_std > 0 else 0.0
    return spec.A @ s + spec.B @ a + spec.C @ theta + eps


def linear_rollout(spec, theta, steps, rng):
    """One episode of (states, actions); s_0 ~ N(0, I), actions uniform."""
    states = np.empty((steps + 1, spec.d))
    actions = rng.integers(0, spec.action_dim, size=steps)
    states[0] = rng.normal(size=spec.d)
    for t in range(steps):
        states[t + 1] = linear_step(spec, theta, states[t], int(actions[t]), rng)
    return states, actions


# ============================================================
# Cart-pole with corrected friction dynamics
# ============================================================

@dataclass
class CartPoleParams:
    """Physical constants plus task variants.

    `actions` lists signed force multipliers; the applied force is
    multiplier * force_mag. Action expansion appends to this tuple so
    existing action indices keep their meaning.
    """

    m_c: float = 1.0
    m_p: float = 0.1
    l: float = 0.5
    g: float = 9.8
    force_mag: float = 10.0
    mu_p: float = 0.0
    friction_cycle: tuple = ()      # e.g. (3e-4, 5e-4, 7e-4); empty = frictionless
    cycle_every: int = 5
    surface_in_obs: bool = False
    actions: tuple = (-1.0, 1.0)
    dt: float = 0.02
    obs_noise_std: float = 0.01
    max_steps: int = 500
    x_limit: float = 2.4
    psi_limit: float = DEG_12


def cartpole_accel(p, state, force, mu_c):
    """Closed-form accelerations (x_dd, psi_dd, N_c).

    Friction enters through sgn(N_c * x_dot); the sign is first assumed
    with N_c > 0, then corrected in a single pass if the computed normal
    force turns out negative.
    """
    x, x_dot, psi, psi_dot = state
    total = p.m_c + p.m_p
    sin, cos = np.sin(psi), np.cos(psi)

    def solve(sgn):
        tmp = (-force - p.m_p * p.l * psi_dot ** 2 * (sin + mu_c * sgn * cos)) / total
        num = p.g * sin + cos * (tmp + mu_c * p.g * sgn)
        if p.m_p > 0 and p.mu_p > 0:
            num -= p.mu_p * psi_dot / (p.m_p * p.l)
        den = p.l * (4.0 / 3.0 - (p.m_p * cos / total) * (cos - mu_c * sgn))
        psi_dd = num / den
        n_c = total * p.g - p.m_p * p.l * (psi_dd * sin + psi_dot ** 2 * cos)
        return psi_dd, n_c

    sgn = np.sign(x_dot)  # N_c assumed positive on the first pass
    psi_dd, n_c = solve(sgn)
    if mu_c != 0.0 and n_c < 0.0:
        sgn = np.sign(n_c * x_dot)
        psi_dd, n_c = solve(sgn)
    x_dd = (force + p.m_p * p.l * (psi_dot ** 2 * sin - psi_dd * cos)
            - mu_c * n_c * np.sign(n_c * x_dot)) / total
    return x_dd, psi_dd, n_c


def cartpole_step(p, state, force, mu_c=0.0):
    """Semi-implicit Euler update at dt = 0.02."""
    x, x_dot, psi, psi_dot = state
    x_dd, psi_dd, _ = cartpole_accel(p, state, force, mu_c)
    x_dot = x_dot + p.dt * x_dd
    x = x + p.dt * x_dot
    psi_dot = psi_dot + p.dt * psi_dd
    psi = psi + p.dt * psi_dot
    return np.array([x, x_dot, psi, psi_dot])


def cartpole_energy(p, state):
    """Total mechanical energy of the frictionless system (test oracle)."""
    x, x_dot, psi, psi_dot = state
    ke = (0.5 * (p.m_c + p.m_p) * x_dot ** 2
          + p.m_p * p.l * x_dot * psi_dot * np.cos(psi)
          + (2.0 / 3.0) * p.m_p * p.l ** 2 * psi_dot ** 2)
    return ke + p.m_p * p.g * p.l * np.cos(psi)


class CartPoleTask:
    """Stateful cart-pole. Observation is (x, psi) with additive Gaussian
    noise, velocities withheld, plus a 3-way one-hot surface code when the
    friction cycle is active and exposed. Reward is 1 per step while
    balanced and 0 on the transition that leaves the bounds; hitting the
    step limit still pays 1, so a full episode scores max_steps."""

    family = "cartpole"

    def __init__(self, params):
        self.params = params
        self._state = None
        self._t = 0

    @property
    def obs_dim(self):
        return 2 + (3 if self.params.surface_in_obs else 0)

    @property
    def action_count(self):
        return len(self.params.actions)

    @property
    def state(self):
        return None if self._state is None else self._state.copy()

    def _surface_index(self):
        if not self.params.friction_cycle:
            return 0
        return (self._t // self.params.cycle_every) % len(self.params.friction_cycle)

    def current_mu_c(self):
        if not self.params.friction_cycle:
            return 0.0
        return self.params.friction_cycle[self._surface_index()]

    def _observe(self, rng):
        p = self.params
        obs = np.array([self._state[0], self._state[2]])
        obs = obs + rng.normal(0.0, p.obs_noise_std, size=2)
        if p.surface_in_obs:
            code = np.zeros(3)
            code[self._surface_index()] = 1.0
            obs = np.concatenate([obs, code])
        return obs

    def reset(self, rng):
        self._state = rng.uniform(-0.05, 0.05, size=4)
        self._t = 0
        return self._observe(rng)

    def step(self, action, rng):
        if self._state is None:
            raise RuntimeError("step before reset")
        p = self.params
        if not 0 <= action < len(p.actions):
            raise ValueError(f"action index {action} out of range")
        force = p.actions[action] * p.force_mag
        mu_c = self.current_mu_c()
        self._state = cartpole_step(p, self._state, force, mu_c)
        self._t += 1
        x, _, psi, _ = self._state
        failed = abs(x) > p.x_limit or abs(psi) > p.psi_limit
        truncated = (not failed) and self._t >= p.max_steps
        reward = 0.0 if failed else 1.0
        return self._observe(rng), reward, failed, truncated


# ============================================================
# Task sequences
# ============================================================

@dataclass
class Task:
    """One entry of a sequence: environment plus ground-truth notes the
    evaluation code is allowed to peek at."""

    name: str
    env: object
    info: dict = field(default_factory=dict)


CARTPOLE_MASS_GRID = (0.5, 1.0, 2.5, 3.5, 4.5)
CARTPOLE_GRAVITY_GRID = (5.0, 9.8, 20.0, 30.0, 40.0)
FRICTION_CYCLE = (3e-4, 5e-4, 7e-4)
EXPANDED_ACTIONS = (-1.0, 1.0, -0.5, 0.5, -1.5, 1.5)


def make_task_sequence(family, seed, d=4, obs_dim=128, action_dim=2,
                       theta_dim=2, episode_len=256, dropout_p=0.5):
    """Build the four-task benchmark sequence for a family.

    cartpole: T1 baseline; T2 redraws (m_c, g) from the paper grids
    (excluding the T1 combination); T3 adds the cyclic floor friction and
    the surface-code observation channel; T4 widens the action set to 6.

    synthetic: T1 baseline; T2 redraws theta; T3 expands the latent space
    by n ~ U{3..7} (theta kept); T4 expands again with a fresh theta.
    """
    rng = make_rng(seed, 303)
    if family == "cartpole":
        base = CartPoleParams()
        while True:
            m_c = float(rng.choice(CARTPOLE_MASS_GRID))
            g = float(rng.choice(CARTPOLE_GRAVITY_GRID))
            if (m_c, g) != (base.m_c, base.g):
                break
        p2 = replace(base, m_c=m_c, g=g)
        p3 = replace(p2, friction_cycle=FRICTION_CYCLE, surface_in_obs=True)
        p4 = replace(p3, actions=EXPANDED_ACTIONS)
        return [
            Task("cartpole-1-baseline", CartPoleTask(base), {"kind": "source"}),
            Task("cartpole-2-distribution", CartPoleTask(p2),
                 {"kind": "distribution", "m_c": m_c, "g": g}),
            Task("cartpole-3-friction", CartPoleTask(p3),
                 {"kind": "space", "new_obs": 3, "true_n": 1}),
            Task("cartpole-4-actions", CartPoleTask(p4),
                 {"kind": "space", "new_actions": 4}),
        ]
    if family == "synthetic":
        spec1 = gen_synthetic_env(int(rng.integers(2 ** 31)), d=d, obs_dim=obs_dim,
                                  action_dim=action_dim, theta_dim=theta_dim,
                                  dropout_p=dropout_p)
        th1 = draw_theta(theta_dim, rng)
        th2 = draw_theta(theta_dim, rng)
        n3 = int(rng.integers(3, 8))
        spec3 = expand_synthetic_env(spec1, n3, rng, dropout_p=dropout_p)
        n4 = int(rng.integers(3, 8))
        spec4 = expand_synthetic_env(spec3, n4, rng, dropout_p=dropout_p)
        th4 = draw_theta(theta_dim, rng)
        mk = lambda spec, th: SyntheticTask(spec, th, episode_len=episode_len)
        return [
            Task("synthetic-1-baseline", mk(spec1, th1), {"kind": "source"}),
            Task("synthetic-2-theta", mk(spec1, th2), {"kind": "distribution"}),
            Task("synthetic-3-expansion", mk(spec3, th2),
                 {"kind": "space", "true_n": n3}),
            Task("synthetic-4-expansion-theta", mk(spec4, th4),
                 {"kind": "space", "true_n": n4}),
        ]
    raise ValueError(f"unknown family {family!r}")


# ============================================================
# Replay buffer
# ============================================================

_RB_MAGIC = b"CWRB"
RB_FORMAT_VERSION = 2


class ReplayBuffer:
    """Episode store. Each episode keeps obs with one trailing entry
    (T + 1 observations for T transitions) so next-step prediction targets
    never cross episode boundaries. Episodes ending in a true terminal
    state (as opposed to a step-limit cutoff) carry a terminated flag."""

    def __init__(self, obs_dim, action_count, capacity_steps=200_000):
        self.obs_dim = int(obs_dim)
        self.action_count = int(action_count)
        self.capacity_steps = int(capacity_steps)
        self.episodes = []
        self.total_steps = 0

    def add_episode(self, obs, actions, rewards, terminated=False):
        obs = np.asarray(obs, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.int64)
        rewards = np.asarray(rewards, dtype=np.float64)
        T = len(actions)
        if obs.shape != (T + 1, self.obs_dim):
            raise ValueError(f"obs must be (T+1, {self.obs_dim}), got {obs.shape}")
        if rewards.shape != (T,):
            raise ValueError("rewards length must match actions")
        if T == 0:
            raise ValueError("empty episode")
        if actions.min() < 0 or actions.max() >= self.action_count:
            raise ValueError("action index out of range")
        self.episodes.append({"obs": obs, "actions": actions, "rewards": rewards,
                              "terminated": bool(terminated)})
        self.total_steps += T
        while self.total_steps > self.capacity_steps and len(self.episodes) > 1:
            dropped = self.episodes.pop(0)
            self.total_steps -= len(dropped["actions"])

    def __len__(self):
        return self.total_steps

    @property
    def n_episodes(self):
        return len(self.episodes)

    def sample_sequences(self, rng, batch, length):
        """Sample fixed-length windows with padding for short episodes.

        Returns dict with obs (B, L+1, obs_dim), prev_action one-hots
        (B, L, A) where the step before a window start is the episode's
        preceding action (zeros at episode start), rewards (B, L),
        weight (B, L) marking real vs padded steps, and done (B, L)
        marking the final transition of terminated episodes.
        """
        if not self.episodes:
            raise RuntimeError("cannot sample from an empty buffer")
        B, L = batch, length
        obs = np.zeros((B, L + 1, self.obs_dim))
        prev_a = np.zeros((B, L, self.action_count))
        act = np.zeros((B, L), dtype=np.int64)
        rew = np.zeros((B, L))
        weight = np.zeros((B, L))
        done = np.zeros((B, L))
        for i in range(B):
            ep = self.episodes[int(rng.integers(0, len(self.episodes)))]
            T = len(ep["actions"])
            hi = max(T - L, 0)
            start = int(rng.integers(0, hi + 1))
            n = min(L, T - start)
            obs[i, :n + 1] = ep["obs"][start:start + n + 1]
            obs[i, n + 1:] = ep["obs"][start + n]
            rew[i, :n] = ep["rewards"][start:start + n]
            act[i, :n] = ep["actions"][start:start + n]
            weight[i, :n] = 1.0
            if ep.get("terminated") and start + n == T:
                done[i, n - 1] = 1.0
            # previous action entering each window step; zeros before start
            for t in range(n):
                j = start + t - 1
                if j >= 0:
                    prev_a[i, t, ep["actions"][j]] = 1.0
        return {"obs": obs, "prev_action": prev_a, "action": act,
                "reward": rew, "weight": weight, "done": done}

    def split_episodes(self, n_eval):
        """Deterministic train/eval split: the last n_eval episodes are
        held out."""
        n_eval = min(n_eval, max(len(self.episodes) - 1, 0))
        if n_eval == 0:
            return self.episodes, self.episodes
        return self.episodes[:-n_eval], self.episodes[-n_eval:]

    def save(self, path):
        lengths = [len(ep["actions"]) for ep in self.episodes]
        header = json.dumps({
            "format_version": RB_FORMAT_VERSION,
            "obs_dim": self.obs_dim,
            "action_count": self.action_count,
            "capacity_steps": self.capacity_steps,
            "episode_lengths": lengths,
            "terminated": [int(bool(ep.get("terminated"))) for ep in self.episodes],
        }, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(_RB_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for ep in self.episodes:
                f.write(np.ascontiguousarray(ep["obs"]).astype("<f8").tobytes())
                f.write(ep["actions"].astype("<f8").tobytes())
                f.write(ep["rewards"].astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != _RB_MAGIC:
            raise ValueError("not a replay buffer file (bad magic)")
        (hlen,) = struct.unpack("<I", blob[4:8])
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
        # version 1 predates terminated flags; treat all episodes as cutoffs
        if header.get("format_version") not in (1, RB_FORMAT_VERSION):
            raise ValueError(f"unsupported format version {header.get('format_version')!r}")
        buf = cls(header["obs_dim"], header["action_count"], header["capacity_steps"])
        flags = header.get("terminated") or [0] * len(header["episode_lengths"])
        off = 8 + hlen
        for T, flag in zip(header["episode_lengths"], flags):
            n_obs = (T + 1) * buf.obs_dim
            need = 8 * (n_obs + 2 * T)
            if off + need > len(blob):
                raise ValueError("truncated replay buffer payload")
            obs = np.frombuffer(blob[off:off + 8 * n_obs], dtype="<f8").reshape(T + 1, buf.obs_dim)
            off += 8 * n_obs
            actions = np.frombuffer(blob[off:off + 8 * T], dtype="<f8").astype(np.int64)
            off += 8 * T
            rewards = np.frombuffer(blob[off:off + 8 * T], dtype="<f8")
            off += 8 * T
            buf.add_episode(obs.astype(np.float64), actions, rewards.astype(np.float64),
                            terminated=bool(flag))
        return buf


def collect_episode(env, policy_fn, rng, max_steps=None):
    """Roll one episode with policy_fn(obs_history tail) -> action index.

    policy_fn receives the latest observation and the running step index;
    filtering policies keep their own recurrent state between calls.

    Returns (obs (T+1, obs_dim), actions (T,), rewards (T,), score).
    """
    obs_list = [env.reset(rng)]
    actions, rewards = [], []
    t = 0
    while True:
        a = int(policy_fn(obs_list[-1], t))
        obs, r, done, truncated = env.step(a, rng)
        obs_list.append(obs)
        actions.append(a)
        rewards.append(r)
        t += 1
        if done or truncated:
            break
        if max_steps is not None and t >= max_steps:
            break
    return (np.asarray(obs_list), np.asarray(actions, dtype=np.int64),
            np.asarray(rewards), float(np.sum(rewards)))
