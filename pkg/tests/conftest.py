"""Shared builders: a hand-planted linear world model whose one-step
predictions are exact, and matching episode generators. Several suites
use these to get known-truth models without any training."""

import numpy as np

from causalworld.worldmodel import ModelConfig, WorldModel


def planted_linear_model(A, B, C, theta, seed=20, sig_b=0.0):
    """World model computing s' = A s + B a + C theta exactly.

    Masks saturate at logit 50 (sigmoid rounds to 1.0), the posterior
    copies the observation, and the observation decoder is the identity,
    so prediction error on matching linear data vanishes. All sigma
    heads are planted constant at softplus(sig_b).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    d = A.shape[0]
    n_act = B.shape[1]
    q = C.shape[1]
    cfg = ModelConfig(obs_dim=d, action_count=n_act, d=d, h_dim=3,
                      theta_dim=q, hidden_layers=0, head_layers=0)
    model = WorldModel(cfg, seed=seed)
    for name, p in model.params.items():
        if name.startswith("mask."):
            p.value[...] = 50.0
    model.params["theta.s"].value[...] = theta
    model.params["theta.obs"].value[...] = 0.0
    model.params["theta.rew"].value[...] = 0.0

    mu_w = np.zeros((cfg.h_dim + d + 3 * q, d))
    mu_w[cfg.h_dim:cfg.h_dim + d] = np.eye(d)
    model.params["post.mu_w"].value[...] = mu_w
    model.params["post.mu_b"].value[...] = 0.0
    model.params["post.sig_w"].value[...] = 0.0
    model.params["post.sig_b"].value[...] = sig_b

    for k in range(d):
        w = np.concatenate([A[k], C[k], B[k]])[:, None]
        model.params[f"prior{k}.mu_w"].value[...] = w
        model.params[f"prior{k}.mu_b"].value[...] = 0.0
        model.params[f"prior{k}.sig_w"].value[...] = 0.0
        model.params[f"prior{k}.sig_b"].value[...] = sig_b

    out_w = np.zeros((d + q, d))
    out_w[:d] = np.eye(d)
    model.params["dec_obs.out_w"].value[...] = out_w
    model.params["dec_obs.out_b"].value[...] = 0.0
    model.params["dec_rew.out_w"].value[...] = 0.0
    model.params["dec_rew.out_b"].value[...] = 0.0
    return model


def linear_episodes(A, B, C, theta, rng, n_ep=3, T=40, noise=0.0,
                    hidden=None):
    """Episodes from s' = A s + B a + C theta (+ noise); obs = s.

    hidden, if given, is (A_big, coupling columns) for simulating one
    extra latent coordinate the model cannot see: the visible state also
    receives coupling * z where z follows its own row of A_big.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    d = A.shape[0]
    n_act = B.shape[1]
    episodes = []
    for _ in range(n_ep):
        s = rng.normal(size=d)
        z = rng.normal() if hidden is not None else 0.0
        obs, acts = [s.copy()], []
        for _ in range(T):
            a = int(rng.integers(0, n_act))
            onehot = np.zeros(n_act)
            onehot[a] = 1.0
            s_next = A @ s + B @ onehot + C @ theta
            if hidden is not None:
                rho, coupling = hidden
                s_next += coupling * z
                z = rho * z + 0.3 * rng.normal()
            if noise:
                s_next += noise * rng.normal(size=d)
            s = s_next
            obs.append(s.copy())
            acts.append(a)
        episodes.append({"obs": np.asarray(obs),
                         "actions": np.asarray(acts),
                         "rewards": np.zeros(T)})
    return episodes
