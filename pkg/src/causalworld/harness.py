"""Experiment orchestration: typed flat configs, the end-to-end task
sequence pipeline, adaptation metrics, and result emission.

A run is determined by (config, seed). Seeds are independent workers:
each owns its environments, model, policy, and random streams, so runs
can execute in parallel processes and merge afterwards. Metrics files
are written with fixed formatting so a rerun with the same config and
seed produces bit-identical CSVs.

Environment-step accounting counts real environment interactions only:
prefill, adaptation data collection, and online training steps. Policy
evaluations and imagination rollouts are excluded; evaluation episodes
are tracked separately so the cost is still visible.
"""

from __future__ import annotations

import configparser
import copy
import io
import json
import os
import time
from dataclasses import dataclass, field, fields, asdict

import numpy as np

from . import autodiff as ad
from .envs import ReplayBuffer, make_task_sequence
from .worldmodel import (ModelConfig, TrainConfig, WorldModel, fit,
                         predict_error, save_model)
from .policy import (Policy, PolicyConfig, epsilon_at, imagination_starts,
                     policy_input, policy_update, run_episode)
from .adapt import AdaptConfig, Threshold, adapt_task

OUT_ENV_VAR = "CAUSALWORLD_OUT"

NOT_ACHIEVED = None  # min_adaptation_steps marker, rendered as "x"


# ============================================================
# Configuration
# ============================================================

@dataclass
class RunConfig:
    """Sequence-level settings: family, budgets, seeds, output."""

    family: str = "cartpole"
    seeds: tuple = (0, 1, 2, 3, 4)
    out_dir: str = "results"
    source_budget: int = 50_000
    adapt_budget: int = 30_000
    prefill_steps: int = 2_000
    collect_steps: int = 2_000
    eval_every: int = 500
    source_eval_every: int = 5_000
    eval_episodes: int = 5
    success_threshold: float = 475.0
    train_every: int = 5
    policy_updates: int = 1
    finetune_eps_start: float = 0.2
    finetune_eps_anneal: int = 5_000
    strategy: str = "sa"
    masks: bool = True
    theta: bool = True
    scratch: bool = True
    workers: int = 1
    # task generator parameters (synthetic family)
    env_d: int = 4
    env_obs_dim: int = 128
    env_action_dim: int = 2
    env_theta_dim: int = 2
    episode_len: int = 256
    dropout_p: float = 0.5


@dataclass
class ModelSection:
    """World-model shape; observation/action sizes come from the env."""

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


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    model: ModelSection = field(default_factory=ModelSection)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1))
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def sections(self):
        return {"run": self.run, "model": self.model, "policy": self.policy,
                "train": self.train, "adapt": self.adapt}


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return " ".join(str(x) for x in v)
    return str(v)


def _parse_value(text, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, (tuple, list)):
        parts = text.replace(",", " ").split()
        return tuple(int(p) for p in parts)
    return text


def dump_config(cfg: ExperimentConfig = None):
    """Render a config (default: all defaults) as flat INI text."""
    cfg = cfg or ExperimentConfig()
    out = io.StringIO()
    for name, section in cfg.sections().items():
        out.write(f"[{name}]\n")
        for f in fields(section):
            out.write(f"{f.name} = {_format_value(getattr(section, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def parse_config(text):
    """Parse INI text into an ExperimentConfig; unknown keys rejected."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    cfg = ExperimentConfig()
    sections = cfg.sections()
    for sec in cp.sections():
        if sec not in sections:
            raise ValueError(f"unknown config section [{sec}]")
        target = sections[sec]
        known = {f.name for f in fields(target)}
        for key, raw in cp.items(sec):
            if key not in known:
                raise ValueError(f"unknown config key {key!r} in [{sec}]")
            setattr(target, key, _parse_value(raw, getattr(target, key)))
    return cfg


def load_config(path):
    with open(path) as f:
        return parse_config(f.read())


def ablation_mode(cfg: ExperimentConfig, mode):
    """Return a copy of cfg with one mechanism disabled or switched.

    Modes: "no-masks" (structural masks frozen all-ones), "no-theta"
    (change factors frozen at zero), "strategy=rnd|det|sa".
    """
    out = copy.deepcopy(cfg)
    if mode == "no-masks":
        out.run.masks = False
    elif mode == "no-theta":
        out.run.theta = False
    elif mode.startswith("strategy="):
        name = mode.split("=", 1)[1]
        if name not in ("rnd", "det", "sa"):
            raise ValueError(f"unknown expansion strategy {name!r}")
        out.run.strategy = name
    else:
        raise ValueError(f"unknown ablation mode {mode!r}")
    return out


def resolve_out_dir(cfg: ExperimentConfig):
    """Output root: config out_dir, based at $CAUSALWORLD_OUT if set."""
    out = cfg.run.out_dir
    base = os.environ.get(OUT_ENV_VAR)
    if base and not os.path.isabs(out):
        out = os.path.join(base, out)
    return out


# ============================================================
# Run records
# ============================================================

@dataclass
class RunRecord:
    """Everything measured for one task of one seed's sequence."""

    task: str = ""
    index: int = 0
    seed: int = 0
    kind: str = ""
    verdict: str = "-"
    env_steps: int = 0
    eval_steps: int = 0
    trace: list = field(default_factory=list)  # [step, score, l_pred]
    adapt: dict = None
    tau_star: float = float("nan")
    checkpoint: str = ""
    masks: dict = None
    scratch: dict = None
    wall_seconds: float = 0.0
    error: str = None

    def add_eval(self, step, score, l_pred):
        if self.trace and step <= self.trace[-1][0]:
            raise ValueError("evaluation steps must be strictly increasing")
        self.trace.append([int(step), float(score), float(l_pred)])

    def to_dict(self):
        return asdict(self)


def min_adaptation_steps(record, threshold):
    """Smallest env-step count where the rolling mean of the last five
    evaluations reaches threshold, or NOT_ACHIEVED (None).

    Accepts a RunRecord or a raw [[step, score, ...], ...] trace.
    """
    trace = record.trace if isinstance(record, RunRecord) else record
    scores = [row[1] for row in trace]
    for i, row in enumerate(trace):
        lo = max(0, i - 4)
        if np.mean(scores[lo:i + 1]) >= threshold:
            return int(row[0])
    return NOT_ACHIEVED


def _masks_jsonable(model):
    return {k: v.astype(int).tolist() for k, v in model.binary_masks().items()}


# ============================================================
# Pipeline building blocks
# ============================================================

def _build_model(cfg: ExperimentConfig, obs_dim, action_count, seed):
    m = cfg.model
    mc = ModelConfig(
        obs_dim=obs_dim, action_count=action_count, d=m.d, h_dim=m.h_dim,
        theta_dim=m.theta_dim, hidden=m.hidden, hidden_layers=m.hidden_layers,
        head_hidden=m.head_hidden, head_layers=m.head_layers,
        mask_temp=m.mask_temp, mask_init=m.mask_init,
        sigma_floor=m.sigma_floor,
        mask_mode="learned" if cfg.run.masks else "ones",
        theta_mode="learned" if cfg.run.theta else "zero")
    return WorldModel(mc, seed=seed)


def _build_policy(model, cfg: ExperimentConfig, seed):
    return Policy(d=model.cfg.d, theta_dim=model.cfg.theta_dim,
                  action_count=model.cfg.action_count,
                  cfg=copy.deepcopy(cfg.policy), seed=seed)


def _prefill(env, buf, rng, steps_target):
    """Random-action episodes until the buffer holds steps_target steps."""
    steps = 0
    while len(buf) < steps_target:
        obs = [np.asarray(env.reset(rng), dtype=np.float64)]
        acts, rews = [], []
        while True:
            a = int(rng.integers(0, env.action_count))
            o, r, done, trunc = env.step(a, rng)
            obs.append(np.asarray(o, dtype=np.float64))
            acts.append(a)
            rews.append(float(r))
            steps += 1
            if done or trunc:
                break
        buf.add_episode(np.asarray(obs), np.asarray(acts, dtype=np.int64),
                        np.asarray(rews), terminated=bool(done))
    return steps


def _collect_episodes(env, model, policy, rng, step_cap, epsilon):
    """Roll the current policy on a new task, capped by env steps.

    Returns (buffer sized to the env's spaces, steps consumed, scores).
    """
    buf = ReplayBuffer(obs_dim=env.obs_dim, action_count=env.action_count)
    steps, scores = 0, []
    while steps < step_cap:
        obs, acts, rews, score, term = run_episode(env, model, policy, rng,
                                                   epsilon=epsilon)
        buf.add_episode(obs, acts, rews, terminated=term)
        steps += len(acts)
        scores.append(score)
    return buf, steps, scores


def _evaluate(env, model, policy, rng, episodes):
    """Greedy evaluation that also reports env interactions spent."""
    scores, used = [], 0
    for _ in range(episodes):
        _, acts, _, score, _ = run_episode(env, model, policy, rng, greedy=True)
        scores.append(score)
        used += len(acts)
    return float(np.mean(scores)), used


def _train_online(env, model, policy, buf, cfg, seed, index, record,
                  budget, eval_every, epsilon_fn, rng, start_steps=0,
                  stop_at_success=True):
    """Interleaved environment stepping, model fitting, policy updates,
    and periodic greedy evaluation.

    Steps count from start_steps (data already consumed for this task).
    Returns total env steps consumed for the task.
    """
    run = cfg.run
    tcfg = copy.deepcopy(cfg.train)
    opt = ad.AdamState(lr=tcfg.lr)
    steps = start_steps
    next_eval = (steps // eval_every + 1) * eval_every
    obs_cur = np.asarray(env.reset(rng), dtype=np.float64)
    fs = model.init_filter()
    prev_a = np.zeros(model.cfg.action_count)
    ep_obs, ep_acts, ep_rews = [obs_cur], [], []
    since_train = 0
    recent = [row[1] for row in record.trace]

    while steps < budget:
        fs, _, _ = model.filter_step(fs, ep_obs[-1], prev_a)
        a = policy.act(policy_input(model, fs["s"]), rng, epsilon_fn(steps))
        o, r, done, trunc = env.step(a, rng)
        ep_obs.append(np.asarray(o, dtype=np.float64))
        ep_acts.append(a)
        ep_rews.append(float(r))
        prev_a = np.zeros(model.cfg.action_count)
        prev_a[a] = 1.0
        steps += 1
        since_train += 1
        if done or trunc:
            buf.add_episode(np.asarray(ep_obs),
                            np.asarray(ep_acts, dtype=np.int64),
                            np.asarray(ep_rews), terminated=bool(done))
            obs_cur = np.asarray(env.reset(rng), dtype=np.float64)
            fs = model.init_filter()
            prev_a = np.zeros(model.cfg.action_count)
            ep_obs, ep_acts, ep_rews = [obs_cur], [], []
        if since_train >= run.train_every and buf.n_episodes > 0:
            since_train = 0
            fit(model, buf, tcfg, rng, opt=opt)
            for _ in range(run.policy_updates):
                starts = imagination_starts(model, buf, rng,
                                            policy.cfg.imagine_batch)
                policy_update(model, policy, starts, rng)
        if steps >= next_eval:
            next_eval += eval_every
            ev_rng = ad.make_rng(seed, 777, index, steps)
            mean, used = _evaluate(env, model, policy, ev_rng,
                                   run.eval_episodes)
            record.eval_steps += used
            l_pred = predict_error(model, buf.episodes[-5:])
            record.add_eval(steps, mean, l_pred)
            recent.append(mean)
            if (stop_at_success and len(recent) >= 2
                    and np.mean(recent[-2:]) >= run.success_threshold):
                break
    return steps


# ============================================================
# Sequence pipeline
# ============================================================

def _sequence_tasks(cfg: ExperimentConfig, seed):
    r = cfg.run
    return make_task_sequence(
        r.family, seed, d=r.env_d, obs_dim=r.env_obs_dim,
        action_dim=r.env_action_dim, theta_dim=r.env_theta_dim,
        episode_len=r.episode_len, dropout_p=r.dropout_p)


def _train_source(task, cfg, seed, index, out_dir):
    """Task-1 training from scratch; sets the detection threshold."""
    env = task.env
    rng = ad.make_rng(seed, 11, index)
    model = _build_model(cfg, env.obs_dim, env.action_count, seed)
    policy = _build_policy(model, cfg, seed)
    buf = ReplayBuffer(obs_dim=env.obs_dim, action_count=env.action_count)
    record = RunRecord(task=task.name, index=index, seed=seed,
                       kind=task.info.get("kind", ""), verdict="-")
    t0 = time.time()
    steps = _prefill(env, buf, rng, cfg.run.prefill_steps)
    flat = np.concatenate([ep["obs"] for ep in buf.episodes], axis=0)
    model.set_obs_norm(flat.mean(axis=0), flat.std(axis=0) + 1e-6)
    eps_fn = lambda s: epsilon_at(s, policy.cfg)
    steps = _train_online(env, model, policy, buf, cfg, seed, index, record,
                          cfg.run.source_budget, cfg.run.source_eval_every,
                          eps_fn, rng, start_steps=steps)
    tau_star = predict_error(model, buf.episodes[-10:])
    record.env_steps = steps
    record.tau_star = float(tau_star)
    record.masks = _masks_jsonable(model)
    record.wall_seconds = time.time() - t0
    ckpt = os.path.join(out_dir, f"seed{seed}", f"task{index + 1}")
    os.makedirs(os.path.dirname(ckpt), exist_ok=True)
    save_model(model, ckpt)
    policy.save(ckpt)
    record.checkpoint = ckpt
    return model, policy, buf, record


def _adapt_and_finetune(task, model, policy, cfg, seed, index, tau_star,
                        out_dir):
    """Collection, shift handling, and policy fine-tuning for one task."""
    env = task.env
    run = cfg.run
    rng = ad.make_rng(seed, 11, index)
    record = RunRecord(task=task.name, index=index, seed=seed,
                       kind=task.info.get("kind", ""), tau_star=float(tau_star))
    t0 = time.time()
    buf, steps, _ = _collect_episodes(env, model, policy, rng,
                                      run.collect_steps,
                                      epsilon=policy.cfg.eps_end)
    threshold = Threshold(tau_star, cfg.adapt.margin)
    model2, policy2, report = adapt_task(model, policy, buf, threshold,
                                         run.strategy, cfg.adapt, rng)
    record.adapt = report.to_dict()
    record.verdict = "+".join(dict.fromkeys(report.kinds))
    ev_rng = ad.make_rng(seed, 777, index, steps)
    mean, used = _evaluate(env, model2, policy2, ev_rng, run.eval_episodes)
    record.eval_steps += used
    record.add_eval(steps, mean, report.l_final)

    anneal = max(run.finetune_eps_anneal, 1)
    lo = policy2.cfg.eps_end
    hi = run.finetune_eps_start
    eps_fn = lambda s: lo + (hi - lo) * max(0.0, 1.0 - s / anneal)
    steps = _train_online(env, model2, policy2, buf, cfg, seed, index,
                          record, run.adapt_budget, run.eval_every, eps_fn,
                          rng, start_steps=steps)
    record.env_steps = steps
    record.masks = _masks_jsonable(model2)
    record.wall_seconds = time.time() - t0
    ckpt = os.path.join(out_dir, f"seed{seed}", f"task{index + 1}")
    os.makedirs(os.path.dirname(ckpt), exist_ok=True)
    save_model(model2, ckpt)
    policy2.save(ckpt)
    record.checkpoint = ckpt
    return model2, policy2, record


def _scratch_baseline(task, cfg, seed, index):
    """Fresh model and policy on one task, same budget as adaptation."""
    env = task.env
    rng = ad.make_rng(seed, 13, index)
    model = _build_model(cfg, env.obs_dim, env.action_count, seed + 1000)
    policy = _build_policy(model, cfg, seed + 1000)
    buf = ReplayBuffer(obs_dim=env.obs_dim, action_count=env.action_count)
    record = RunRecord(task=task.name, index=index, seed=seed)
    steps = _prefill(env, buf, rng, cfg.run.prefill_steps)
    flat = np.concatenate([ep["obs"] for ep in buf.episodes], axis=0)
    model.set_obs_norm(flat.mean(axis=0), flat.std(axis=0) + 1e-6)
    eps_fn = lambda s: epsilon_at(s, policy.cfg)
    steps = _train_online(env, model, policy, buf, cfg, seed, index, record,
                          cfg.run.adapt_budget, cfg.run.eval_every, eps_fn,
                          rng, start_steps=steps)
    return {"trace": record.trace, "env_steps": int(steps),
            "eval_steps": int(record.eval_steps)}


def run_sequence(cfg: ExperimentConfig, seed):
    """Run the full task sequence for one seed. Returns RunRecords.

    Failures are contained per task: the record carries the error text
    and the sequence continues with the last good model and policy.
    """
    out_dir = resolve_out_dir(cfg)
    tasks = _sequence_tasks(cfg, seed)
    records = []
    try:
        model, policy, _, record = _train_source(tasks[0], cfg, seed, 0,
                                                 out_dir)
        tau_star = record.tau_star
    except Exception as exc:  # noqa: BLE001 - contained by contract
        record = RunRecord(task=tasks[0].name, index=0, seed=seed,
                           error=f"{type(exc).__name__}: {exc}")
        records.append(record)
        for i, task in enumerate(tasks[1:], start=1):
            records.append(RunRecord(task=task.name, index=i, seed=seed,
                                     error="no source model"))
        return records
    records.append(record)

    for i, task in enumerate(tasks[1:], start=1):
        try:
            model2, policy2, rec = _adapt_and_finetune(
                task, model, policy, cfg, seed, i, tau_star, out_dir)
            model, policy = model2, policy2
        except Exception as exc:  # noqa: BLE001 - contained by contract
            rec = RunRecord(task=task.name, index=i, seed=seed,
                            kind=task.info.get("kind", ""),
                            error=f"{type(exc).__name__}: {exc}")
        if cfg.run.scratch and rec.error is None:
            try:
                rec.scratch = _scratch_baseline(task, cfg, seed, i)
            except Exception as exc:  # noqa: BLE001 - contained by contract
                rec.scratch = {"error": f"{type(exc).__name__}: {exc}"}
        records.append(rec)
    return records


# ============================================================
# Result emission
# ============================================================

def _fmt(x, digits=6):
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return ""
    return f"{x:.{digits}f}"


def emit_results(records, out_dir, threshold=475.0):
    """Write metrics.csv, adapt_reports.json, masks.json, summary.md.

    Returns {name: path}. CSV rows are ordered by (seed, task index,
    step) with fixed float formatting, so reruns are bit-identical.
    """
    if not records:
        raise ValueError("no records to emit")
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    ordered = sorted(records, key=lambda r: (r.seed, r.index))
    lines = ["task,seed,step,score,L_pred,verdict"]
    for rec in ordered:
        for step, score, l_pred in rec.trace:
            lines.append(f"{rec.task},{rec.seed},{step},{_fmt(score)},"
                         f"{_fmt(l_pred, 8)},{rec.verdict}")
    paths["metrics"] = os.path.join(out_dir, "metrics.csv")
    with open(paths["metrics"], "w") as f:
        f.write("\n".join(lines) + "\n")

    reports = {f"seed{r.seed}/{r.task}": r.adapt
               for r in ordered if r.adapt is not None}
    paths["adapt_reports"] = os.path.join(out_dir, "adapt_reports.json")
    with open(paths["adapt_reports"], "w") as f:
        json.dump(reports, f, sort_keys=True, indent=2)

    masks = {f"seed{r.seed}/{r.task}": r.masks
             for r in ordered if r.masks is not None}
    paths["masks"] = os.path.join(out_dir, "masks.json")
    with open(paths["masks"], "w") as f:
        json.dump(masks, f, sort_keys=True, indent=2)

    paths["summary"] = os.path.join(out_dir, "summary.md")
    with open(paths["summary"], "w") as f:
        f.write(render_summary(ordered, threshold=threshold))
    return paths


def render_summary(records, threshold=475.0):
    """Task-by-seed score table with a mean/std block and adaptation
    step counts; scratch baselines shown when measured."""
    by_task = {}
    for r in records:
        by_task.setdefault((r.index, r.task), []).append(r)
    out = ["# Task sequence results", ""]
    out.append(f"Success threshold: {_fmt(threshold, 1)}")
    out.append("")
    out.append("| task | seed | final score | min adapt steps | "
               "scratch steps | verdict | error |")
    out.append("|---|---|---|---|---|---|---|")
    for (_, task), recs in sorted(by_task.items()):
        for r in sorted(recs, key=lambda x: x.seed):
            final = r.trace[-1][1] if r.trace else float("nan")
            mas = min_adaptation_steps(r, threshold)
            mas_s = "x" if mas is NOT_ACHIEVED else str(mas)
            if r.scratch and "trace" in (r.scratch or {}):
                s_mas = min_adaptation_steps(r.scratch["trace"], threshold)
                scratch_s = "x" if s_mas is NOT_ACHIEVED else str(s_mas)
            else:
                scratch_s = ""
            out.append(f"| {task} | {r.seed} | {_fmt(final, 1)} | {mas_s} | "
                       f"{scratch_s} | {r.verdict} | {r.error or ''} |")
    out.append("")
    out.append("| task | mean | std |")
    out.append("|---|---|---|")
    for (_, task), recs in sorted(by_task.items()):
        finals = [r.trace[-1][1] for r in recs if r.trace]
        if finals:
            out.append(f"| {task} | {_fmt(float(np.mean(finals)), 1)} | "
                       f"{_fmt(float(np.std(finals)), 1)} |")
        else:
            out.append(f"| {task} |  |  |")
    out.append("")
    return "\n".join(out)


# ============================================================
# Multi-seed driver
# ============================================================

def _seed_worker(payload):
    text, seed = payload
    cfg = parse_config(text)
    return [r.to_dict() for r in run_sequence(cfg, seed)]


def _records_from_dicts(dicts):
    return [RunRecord(**d) for d in dicts]


def run_experiment(cfg: ExperimentConfig):
    """Run every seed, merge records, and emit result files.

    Returns (records, paths, failures). Seeds run as independent
    workers: in-process when run.workers == 1, forked otherwise.
    """
    seeds = list(cfg.run.seeds)
    out_dir = resolve_out_dir(cfg)
    if cfg.run.workers > 1 and len(seeds) > 1:
        import multiprocessing as mp
        text = dump_config(cfg)
        with mp.get_context("fork").Pool(min(cfg.run.workers,
                                             len(seeds))) as pool:
            chunks = pool.map(_seed_worker, [(text, s) for s in seeds])
        records = [r for chunk in chunks
                   for r in _records_from_dicts(chunk)]
    else:
        records = []
        for s in seeds:
            records.extend(run_sequence(cfg, s))
    paths = emit_results(records, out_dir,
                         threshold=cfg.run.success_threshold)
    failures = [r for r in records
                if r.error or (r.scratch or {}).get("error")]
    return records, paths, failures
