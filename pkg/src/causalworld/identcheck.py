"""Numerical checks for identifiability of change factors and masks.

For the linear family s' = A s + B a + C theta + eps, pooled regression
across tasks recovers the shared dynamics (A, B) plus one intercept per
task; factoring the centered intercept matrix then exposes the change
factors up to an invertible linear map and a shift. With a single
change dimension that leaves a scalar affinity, so rank correlation
against the ground truth is the right invariant metric. A separate sweep certifies the geometric-series
condition behind the recovery argument, and mask comparisons score the
learned structure against ground truth up to latent relabeling.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.linalg import subspace_angles
from scipy.optimize import linear_sum_assignment
from scipy.stats import spearmanr


# ============================================================
# Linear system estimation
# ============================================================

@dataclass
class LinearEstimate:
    A: np.ndarray            # (d, d)
    B: np.ndarray            # (d, action_dim)
    intercepts: np.ndarray   # (n_tasks, d), one c_i = C theta_i per task
    residual: float          # mean squared one-step residual


def estimate_linear(trajectories, action_dim, ridge=1e-6):
    """Pooled ridge regression of s_{t+1} on [s_t, onehot(a_t), task id].

    Because the action one-hots sum to one on every row, B and the task
    intercepts share a flat direction: adding a constant vector to every
    column of B while subtracting it from every intercept leaves the
    predictions unchanged. A is unaffected, and so are intercept
    differences across tasks, which is all the downstream factorization
    consumes.

    Args:
        trajectories: list of (states (T+1, d), actions (T,)) pairs, one
            per task; all tasks share A and B but not their intercept.
        action_dim: number of discrete actions (columns of B).
        ridge: Tikhonov weight, kept tiny so the estimator stays
            consistent while tolerating short trajectories.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    d = trajectories[0][0].shape[1]
    n = len(trajectories)
    p = d + action_dim + n
    xtx = np.zeros((p, p))
    xty = np.zeros((p, d))
    count = 0
    for i, (states, actions) in enumerate(trajectories):
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions)
        T = actions.shape[0]
        if states.shape[0] != T + 1:
            raise ValueError("states must have one more row than actions")
        X = np.zeros((T, p))
        X[:, :d] = states[:-1]
        X[np.arange(T), d + actions] = 1.0
        X[:, d + action_dim + i] = 1.0
        Y = states[1:]
        xtx += X.T @ X
        xty += X.T @ Y
        count += T
    xtx += ridge * np.eye(p)
    W = np.linalg.solve(xtx, xty)
    A = W[:d].T
    B = W[d:d + action_dim].T
    intercepts = W[d + action_dim:]
    res = 0.0
    for i, (states, actions) in enumerate(trajectories):
        pred = states[:-1] @ A.T
        pred += B.T[np.asarray(actions)]
        pred += intercepts[i]
        res += float(((states[1:] - pred) ** 2).sum())
    return LinearEstimate(A=A, B=B, intercepts=intercepts, residual=res / count)


def factor_intercepts(intercepts, q, center=True):
    """Best rank-q factorization of the per-task intercepts.

    With centering (the default) the factorization targets the
    intercepts minus their mean across tasks, which strips the flat
    direction the regression cannot pin down; the result satisfies
    centered ~= theta_hat @ C_hat.T. Change factors are then recovered
    up to an invertible q x q map plus a per-component shift, and with
    q = 1 that means scale, sign and offset, all invisible to rank
    correlation.

    Returns (C_hat (d, q), theta_hat (n, q), singular_values).
    """
    M = np.asarray(intercepts, dtype=np.float64)
    n, d = M.shape
    if not (1 <= q <= min(n, d)):
        raise ValueError("q out of range for the intercept matrix")
    if center:
        M = M - M.mean(axis=0)
    U, S, Vt = np.linalg.svd(M.T, full_matrices=False)
    C_hat = U[:, :q] * S[:q]
    theta_hat = Vt[:q].T
    return C_hat, theta_hat, S


def recover_change_factors(trajectories, action_dim, q, ridge=1e-6):
    """estimate_linear followed by intercept factorization."""
    est = estimate_linear(trajectories, action_dim, ridge)
    C_hat, theta_hat, sv = factor_intercepts(est.intercepts, q)
    return est, C_hat, theta_hat, sv


# ============================================================
# Component comparison
# ============================================================

def _abs_spearman(x, y):
    if np.std(x) == 0 or np.std(y) == 0:
        raise ValueError("degenerate component: zero variance")
    rho = spearmanr(x, y).statistic
    if not np.isfinite(rho):
        raise ValueError("degenerate component: undefined rank correlation")
    return abs(float(rho))


def component_match(theta_hat, theta_true):
    """Match estimated to true components by rank correlation.

    Components are paired with a one-to-one assignment maximizing
    |Spearman rho|; raises on zero-variance components. Returns a dict
    with the pairing and its correlation summary.
    """
    theta_hat = np.atleast_2d(np.asarray(theta_hat, dtype=np.float64))
    theta_true = np.atleast_2d(np.asarray(theta_true, dtype=np.float64))
    if theta_hat.shape[0] == 1 and theta_hat.shape[1] > 1:
        theta_hat = theta_hat.T
    if theta_true.shape[0] == 1 and theta_true.shape[1] > 1:
        theta_true = theta_true.T
    if theta_hat.shape[0] != theta_true.shape[0]:
        raise ValueError("component tables disagree on the number of tasks")
    q1, q2 = theta_hat.shape[1], theta_true.shape[1]
    if q1 != q2:
        raise ValueError("component tables disagree on dimensionality")
    rho = np.zeros((q1, q2))
    for i in range(q1):
        for j in range(q2):
            rho[i, j] = _abs_spearman(theta_hat[:, i], theta_true[:, j])
    rows, cols = linear_sum_assignment(1.0 - rho)
    pairs = [(int(i), int(j), float(rho[i, j])) for i, j in zip(rows, cols)]
    vals = [p[2] for p in pairs]
    return {"pairs": pairs, "mean_abs_rho": float(np.mean(vals)),
            "min_abs_rho": float(np.min(vals))}


def subspace_alignment(theta_hat, theta_true):
    """Largest principal angle (radians) between the column spans; the
    invariant comparison when q > 1."""
    angles = subspace_angles(np.asarray(theta_hat, dtype=np.float64),
                             np.asarray(theta_true, dtype=np.float64))
    return float(np.max(angles)) if angles.size else 0.0


# ============================================================
# Geometric-series condition sweep
# ============================================================

def check_prop1(A, t_values=tuple(range(2, 11))):
    """Minimum singular value of S_t = I + A + ... + A^{t-1} for each t.

    The recovery argument needs S_t nonsingular so that accumulated
    intercept effects cannot cancel. Returns {"per_t": {t: min_sv},
    "min_sv": overall minimum}.
    """
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    if A.shape != (d, d):
        raise ValueError("A must be square")
    per_t = {}
    S = np.eye(d)
    P = np.eye(d)
    t = 1
    for target in sorted(int(t) for t in t_values):
        while t < target:
            P = P @ A
            S = S + P
            t += 1
        per_t[target] = float(np.linalg.svd(S, compute_uv=False).min())
    return {"per_t": per_t, "min_sv": float(min(per_t.values()))}


# ============================================================
# Mask recovery scoring
# ============================================================

MASK_KEYS = ("s_obs", "s_rew", "s_s", "a_s", "th_s")


@dataclass
class MaskScore:
    f1: float
    precision: float
    recall: float
    permutation: np.ndarray        # est latent i corresponds to true perm[i]
    theta_permutation: np.ndarray
    per_group: dict


def _aligned(est, perm, th_perm):
    """View of the estimated masks with latent i relabeled perm[i]."""
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    out = {
        "s_obs": est["s_obs"][inv],
        "s_rew": est["s_rew"][inv],
        "s_s": est["s_s"][inv][:, inv],
        "a_s": est["a_s"][inv],
        "th_s": est["th_s"][inv][:, :],
    }
    inv_t = np.empty_like(th_perm)
    inv_t[th_perm] = np.arange(th_perm.size)
    out["th_s"] = out["th_s"][:, inv_t]
    return out


def _counts(est_aligned, true):
    tp = fp = fn = 0
    per_group = {}
    for key in MASK_KEYS:
        e = est_aligned[key] > 0.5
        t = true[key] > 0.5
        g_tp = int(np.sum(e & t))
        g_fp = int(np.sum(e & ~t))
        g_fn = int(np.sum(~e & t))
        tp += g_tp
        fp += g_fp
        fn += g_fn
        per_group[key] = _f1(g_tp, g_fp, g_fn)
    return tp, fp, fn, per_group


def _f1(tp, fp, fn):
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def mask_recovery_score(est, true):
    """Pooled F1 of binarized masks against ground truth, maximized over
    latent relabelings (and change-factor relabelings for th_s).

    The latent permutation is seeded with an assignment on per-coordinate
    agreements and refined by pairwise-swap hill climbing on the pooled
    F1; theta permutations are brute-forced (q is small).
    """
    for key in MASK_KEYS:
        if key not in est or key not in true:
            raise KeyError(f"missing mask group {key!r}")
        if np.asarray(est[key]).shape != np.asarray(true[key]).shape:
            raise ValueError(f"mask group {key!r} has mismatched shape")
    est = {k: np.asarray(est[k], dtype=np.float64) for k in MASK_KEYS}
    true = {k: np.asarray(true[k], dtype=np.float64) for k in MASK_KEYS}
    d = est["s_obs"].shape[0]
    q = est["th_s"].shape[1]

    # unary agreement seed: how well est coordinate i matches true j on
    # the masks that do not couple coordinates
    agree = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            a = float(np.sum((est["s_obs"][i] > 0.5) == (true["s_obs"][j] > 0.5)))
            a += float(np.sum((est["s_rew"][i] > 0.5) == (true["s_rew"][j] > 0.5)))
            a += float(np.sum((est["a_s"][i] > 0.5) == (true["a_s"][j] > 0.5)))
            agree[i, j] = a
    rows, cols = linear_sum_assignment(-agree)
    perm = np.empty(d, dtype=np.int64)
    perm[rows] = cols

    th_perms = [np.asarray(p, dtype=np.int64) for p in permutations(range(q))]

    def score(p):
        best = None
        for tp_ in th_perms:
            tpv, fpv, fnv, groups = _counts(_aligned(est, p, tp_), true)
            f1 = _f1(tpv, fpv, fnv)
            if best is None or f1 > best[0]:
                prec = tpv / (tpv + fpv) if (tpv + fpv) else 1.0
                rec = tpv / (tpv + fnv) if (tpv + fnv) else 1.0
                best = (f1, prec, rec, tp_, groups)
        return best

    best = score(perm)
    improved = True
    while improved:
        improved = False
        for i in range(d):
            for j in range(i + 1, d):
                cand = perm.copy()
                cand[[i, j]] = cand[[j, i]]
                trial = score(cand)
                if trial[0] > best[0] + 1e-12:
                    best = trial
                    perm = cand
                    improved = True
    f1, prec, rec, th_perm, groups = best
    return MaskScore(f1=float(f1), precision=float(prec), recall=float(rec),
                     permutation=perm, theta_permutation=th_perm,
                     per_group=groups)
