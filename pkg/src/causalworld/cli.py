"""Command line front end.

Thin wrappers over the library: every subcommand parses arguments,
calls into the corresponding module, prints a small plain-text summary,
and returns a process exit code. 0 means no recorded failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .envs import (ReplayBuffer, gen_linear_env, gen_synthetic_env,
                   linear_rollout, make_task_sequence)
from .worldmodel import load_model, save_model
from .policy import load_policy
from .adapt import Threshold, adapt_task
from .identcheck import (check_prop1, component_match,
                         recover_change_factors, subspace_alignment)
from . import harness


def _add_config_arg(p):
    p.add_argument("--config", help="experiment config INI file")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=V",
                   help="override one config value, e.g. run.seeds=0")


def _load_cfg(args):
    cfg = harness.load_config(args.config) if args.config \
        else harness.ExperimentConfig()
    for item in args.set:
        try:
            key, value = item.split("=", 1)
            sec, name = key.split(".", 1)
        except ValueError:
            raise SystemExit(f"bad --set {item!r}; expected sec.key=value")
        section = cfg.sections().get(sec)
        if section is None or not hasattr(section, name):
            raise SystemExit(f"unknown config entry {key!r}")
        setattr(section, name,
                harness._parse_value(value, getattr(section, name)))
    return cfg


# ============================================================
# Subcommands
# ============================================================

def cmd_config(args):
    if args.dump:
        cfg = harness.load_config(args.file) if args.file \
            else harness.ExperimentConfig()
        sys.stdout.write(harness.dump_config(cfg))
        return 0
    print("nothing to do; use config --dump", file=sys.stderr)
    return 2


def cmd_train(args):
    cfg = _load_cfg(args)
    if args.out:
        cfg.run.out_dir = args.out
    out_dir = harness.resolve_out_dir(cfg)
    tasks = harness._sequence_tasks(cfg, args.seed)
    model, policy, buf, record = harness._train_source(
        tasks[0], cfg, args.seed, 0, out_dir)
    final = record.trace[-1][1] if record.trace else float("nan")
    print(f"task {tasks[0].name} seed {args.seed}: "
          f"env steps {record.env_steps}, final eval {final:.1f}, "
          f"tau_star {record.tau_star:.6g}")
    print(f"checkpoint {record.checkpoint}")
    return 0


def cmd_adapt(args):
    model = load_model(args.model)
    policy = load_policy(args.model)
    buf = ReplayBuffer.load(args.buffer)
    rng = ad.make_rng(args.seed, 909)
    model2, policy2, report = adapt_task(
        model, policy, buf, Threshold(args.tau), args.strategy, rng=rng)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        save_model(model2, args.out)
        policy2.save(args.out)
        print(f"saved {args.out}")
    return 0


def cmd_eval(args):
    model = load_model(args.model)
    policy = load_policy(args.model)
    cfg = _load_cfg(args)
    if args.family:
        cfg.run.family = args.family
    tasks = harness._sequence_tasks(cfg, args.seed)
    if not 1 <= args.task <= len(tasks):
        raise SystemExit(f"task must be in 1..{len(tasks)}")
    task = tasks[args.task - 1]
    rng = ad.make_rng(args.seed, 777)
    mean, used = harness._evaluate(task.env, model, policy, rng,
                                   args.episodes)
    print(f"{task.name}: mean score {mean:.2f} over {args.episodes} "
          f"episodes ({used} env steps)")
    return 0


def cmd_identcheck(args):
    rng = ad.make_rng(args.seed, 505)
    rows, fails = [], 0
    for trial in range(args.trials):
        spec = gen_linear_env(int(rng.integers(2 ** 31)), d=args.d,
                              theta_dim=args.q, noise_std=args.sigma)
        thetas = [rng.normal(size=args.q) for _ in range(args.tasks)]
        trajs = [linear_rollout(spec, th, args.steps, rng)
                 for th in thetas]
        est, C_hat, th_hat, _ = recover_change_factors(
            trajs, spec.action_dim, args.q)
        match = component_match(th_hat, np.asarray(thetas))
        align = subspace_alignment(th_hat, np.asarray(thetas))
        a_err = float(np.linalg.norm(est.A - spec.A) /
                      np.linalg.norm(spec.A))
        rho = match["min_abs_rho"]
        ok = rho >= args.min_spearman and a_err < args.max_a_err
        fails += 0 if ok else 1
        rows.append((trial, rho, a_err, align, ok))
    print("trial  |spearman|  A_rel_err  subspace  ok")
    for t, sp, ae, al, ok in rows:
        print(f"{t:5d}  {sp:10.4f}  {ae:9.5f}  {al:8.4f}  {'yes' if ok else 'NO'}")
    sweep_rng = ad.make_rng(args.seed, 506)
    min_sv = float("inf")
    for _ in range(args.prop1_instances):
        spec = gen_linear_env(int(sweep_rng.integers(2 ** 31)), d=args.d,
                              theta_dim=args.q)
        res = check_prop1(spec.A)
        min_sv = min(min_sv, res["min_sv"])
    sv_ok = min_sv > args.min_sv
    print(f"rank sweep over {args.prop1_instances} instances: "
          f"min singular value {min_sv:.3e} ({'ok' if sv_ok else 'FAIL'})")
    print(f"{args.trials - fails}/{args.trials} trials passed")
    return 0 if fails == 0 and sv_ok else 1


def cmd_gen_env(args):
    rng = ad.make_rng(args.seed, 42)
    if args.family == "synthetic":
        spec = gen_synthetic_env(args.seed, d=args.d, obs_dim=args.obs_dim,
                                 theta_dim=args.q)
        arrays = {k: v for k, v in spec.__dict__.items()
                  if isinstance(v, np.ndarray)}
        meta = {k: v for k, v in spec.__dict__.items()
                if not isinstance(v, np.ndarray)}
        np.savez(args.out, __meta__=json.dumps(meta, sort_keys=True),
                 **arrays)
        masks = spec.true_masks()
        density = {k: float(np.mean(v)) for k, v in masks.items()}
        print(f"wrote {args.out}: d={spec.d} obs={spec.obs_dim} "
              f"actions={spec.action_dim} q={spec.theta_dim}")
        print("mask densities: " +
              " ".join(f"{k}={v:.2f}" for k, v in sorted(density.items())))
    else:
        spec = gen_linear_env(args.seed, d=args.d, theta_dim=args.q,
                              noise_std=args.sigma)
        np.savez(args.out, A=spec.A, B=spec.B, C=spec.C,
                 noise_std=spec.noise_std)
        print(f"wrote {args.out}: d={spec.d} actions={spec.action_dim} "
              f"q={spec.theta_dim} sigma={spec.noise_std}")
    if args.buffer:
        tasks = make_task_sequence("synthetic", args.seed, d=args.d,
                                   obs_dim=args.obs_dim, theta_dim=args.q)
        env = tasks[0].env
        buf = ReplayBuffer(obs_dim=env.obs_dim,
                           action_count=env.action_count)
        for _ in range(args.episodes):
            obs = [env.reset(rng)]
            acts, rews = [], []
            for _ in range(args.steps):
                a = int(rng.integers(0, env.action_count))
                o, r, done, trunc = env.step(a, rng)
                obs.append(o)
                acts.append(a)
                rews.append(r)
                if done or trunc:
                    break
            buf.add_episode(np.asarray(obs), np.asarray(acts, np.int64),
                            np.asarray(rews))
        buf.save(args.buffer)
        print(f"wrote {args.buffer}: {buf.n_episodes} episodes, "
              f"{len(buf)} steps")
    return 0


def cmd_run_sequence(args):
    cfg = _load_cfg(args)
    if args.seeds is not None:
        cfg.run.seeds = tuple(int(s) for s in args.seeds.replace(",", " ").split())
    if args.out:
        cfg.run.out_dir = args.out
    if args.ablation:
        cfg = harness.ablation_mode(cfg, args.ablation)
    records, paths, failures = harness.run_experiment(cfg)
    print(harness.render_summary(
        sorted(records, key=lambda r: (r.seed, r.index)),
        threshold=cfg.run.success_threshold))
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    if failures:
        for f in failures:
            err = f.error or (f.scratch or {}).get("error")
            print(f"FAILED seed {f.seed} {f.task}: {err}", file=sys.stderr)
        return 1
    return 0


# ============================================================
# Parser
# ============================================================

def build_parser():
    p = argparse.ArgumentParser(
        prog="causalworld",
        description="Factored world models with structural masks: train, "
                    "adapt across task shifts, and check identifiability.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", help="print configuration")
    c.add_argument("--dump", action="store_true",
                   help="print the full config as INI")
    c.add_argument("--file", help="render this config file instead of defaults")
    c.set_defaults(fn=cmd_config)

    t = sub.add_parser("train", help="train the source task")
    _add_config_arg(t)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", help="output directory override")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("adapt", help="adapt a checkpoint to new-task data")
    a.add_argument("--model", required=True, help="checkpoint prefix")
    a.add_argument("--buffer", required=True, help="replay buffer file")
    a.add_argument("--tau", type=float, required=True,
                   help="source-task final prediction loss")
    a.add_argument("--strategy", default="sa", choices=("rnd", "det", "sa"))
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", help="prefix for the adapted checkpoint")
    a.set_defaults(fn=cmd_adapt)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a task")
    _add_config_arg(e)
    e.add_argument("--model", required=True, help="checkpoint prefix")
    e.add_argument("--family", choices=("cartpole", "synthetic"),
                   help="override the config family")
    e.add_argument("--task", type=int, default=1, help="1-based task index")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--episodes", type=int, default=5)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("identcheck", help="linear identifiability bench")
    i.add_argument("--trials", type=int, default=10)
    i.add_argument("--tasks", type=int, default=8)
    i.add_argument("--steps", type=int, default=400)
    i.add_argument("--d", type=int, default=4)
    i.add_argument("--q", type=int, default=1)
    i.add_argument("--sigma", type=float, default=0.2)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--min-spearman", type=float, default=0.9)
    i.add_argument("--max-a-err", type=float, default=0.05)
    i.add_argument("--prop1-instances", type=int, default=100)
    i.add_argument("--min-sv", type=float, default=1e-8)
    i.set_defaults(fn=cmd_identcheck)

    g = sub.add_parser("gen-env", help="generate an environment spec")
    g.add_argument("--family", default="synthetic",
                   choices=("synthetic", "linear"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--d", type=int, default=4)
    g.add_argument("--q", type=int, default=2)
    g.add_argument("--obs-dim", type=int, default=128)
    g.add_argument("--sigma", type=float, default=0.2)
    g.add_argument("--out", required=True, help="spec output .npz path")
    g.add_argument("--buffer", help="also write a random-rollout buffer")
    g.add_argument("--episodes", type=int, default=10)
    g.add_argument("--steps", type=int, default=100)
    g.set_defaults(fn=cmd_gen_env)

    r = sub.add_parser("run-sequence", help="full task-sequence pipeline")
    _add_config_arg(r)
    r.add_argument("--seeds", help="override seed list, e.g. '0 1 2'")
    r.add_argument("--out", help="output directory override")
    r.add_argument("--ablation",
                   help="no-masks | no-theta | strategy=rnd|det|sa")
    r.set_defaults(fn=cmd_run_sequence)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
