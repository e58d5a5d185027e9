"""Command-line entry points for the full pipeline.

Every subcommand reads a key=value config file plus `--set` overrides,
prints human-readable progress to stdout, and exits nonzero with a
one-line `error: ...` message on failure.
"""

import argparse
import csv
import json
import struct
import sys

import numpy as np

from .autodiff import ContractError, backward, finite_difference_grad
from .checkpoint import (
    CheckpointError,
    checkpoint_digest,
    decode_array,
    encode_array,
    load_dataset,
    load_model,
    read_container,
    save_dataset,
    save_model,
    write_container,
)
from .config import (
    REGISTRY,
    distill_config,
    format_config,
    load_config,
    ppo_config,
)
from .imitation import DistillBatch, distill_loss, rollout_imitation, train_imitation
from .latent_models import LatentModel, freeze
from .metrics import build_archive, evaluate_rollouts, tracking_errors
from .task import HighLevelPolicy, make_value_net, task_spec, train_task, evaluate_task
from .toy_world import ACTION_DIM, PROPRIO_DIM, TARGET_DIM, generate_dataset

TASKS = ("inbetween", "tracking", "navigation")


# ---------------------------------------------------------------------------
# policy persistence (thin wrapper over the container format)


def save_policy(path, policy, value_net, task, config_text=""):
    meta = {
        "task": task.kind,
        "episode_steps": task.episode_steps,
        "goal_dim": task.goal_dim,
        "m": policy.m,
        "hidden": list(policy.hidden),
    }
    write_container(
        path,
        [
            ("meta", json.dumps(meta, sort_keys=True).encode("utf-8")),
            ("config", config_text.encode("utf-8")),
            ("pi_params", encode_array(policy.params.values)),
            ("v_params", encode_array(value_net.params.values)),
        ],
    )


def load_policy(path, model):
    sections = read_container(path)
    meta = json.loads(sections["meta"].decode("utf-8"))
    task = task_spec(meta["task"], clip_steps=meta["episode_steps"] + 1)
    if task.goal_dim != meta["goal_dim"]:
        raise CheckpointError("goal dimension mismatch")
    hidden = tuple(meta["hidden"])
    policy = HighLevelPolicy(model, task, meta["m"], np.random.default_rng(0), hidden)
    value_net = make_value_net(task, np.random.default_rng(0), hidden)
    policy.params.values[:] = decode_array(sections["pi_params"])
    value_net.params.values[:] = decode_array(sections["v_params"])
    return policy, value_net, task


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg, args):
    dataset = generate_dataset(
        families=cfg["world.families"],
        clips_per_family=cfg["world.clips_per_family"],
        clip_seconds=cfg["world.clip_seconds"],
        seed=cfg["seed"],
    )
    save_dataset(args.out, dataset)
    n_states = sum(len(c.states) for c in dataset.clips)
    print(f"wrote {len(dataset.clips)} clips ({n_states} states) to {args.out}")
    return 0


def cmd_train_imitate(cfg, args):
    dataset = load_dataset(args.dataset)
    dcfg = distill_config(cfg)
    model, curve = train_imitation(cfg["model.kind"], dcfg, dataset, args.curve)
    freeze(model)
    save_model(args.out, model, config_text=format_config(cfg), step=dcfg.steps)
    final = [row["eval_reward"] for row in curve if row["eval_reward"] != ""]
    print(f"final eval reward {float(final[-1]):.4f}" if final else "no eval rows")
    print(f"checkpoint {args.out} digest {checkpoint_digest(args.out)}")
    return 0


def cmd_train_task(cfg, args):
    model, _, _ = load_model(args.checkpoint)
    if not model.frozen:
        raise ContractError("task training needs a frozen imitation checkpoint")
    dataset = load_dataset(args.dataset)
    clip_steps = len(dataset.clips[0].states) if dataset.clips else 121
    task = task_spec(args.task, clip_steps=clip_steps)
    pcfg = ppo_config(cfg)
    policy, value_net, curve = train_task(
        task, model, pcfg, cfg["ppo.m"], dataset, curve_path=args.curve
    )
    save_policy(args.out, policy, value_net, task, config_text=format_config(cfg))
    if curve:
        print(f"final mean return {curve[-1]['mean_return']:.4f}")
    print(f"policy {args.out} digest {checkpoint_digest(args.out)}")
    return 0


def cmd_rollout(cfg, args):
    model, _, _ = load_model(args.checkpoint)
    dataset = load_dataset(args.dataset)
    clips = dataset.clips[: args.clips] if args.clips else dataset.clips
    _, reward = rollout_imitation(model, clips, dataset)
    print(f"imitation rollout over {len(clips)} clips: mean reward {reward:.4f}")
    return 0


def cmd_eval_prior(cfg, args):
    model, _, _ = load_model(args.checkpoint)
    dataset = load_dataset(args.dataset)
    archive = build_archive(dataset)
    m = cfg["metrics.m"] or None
    report = evaluate_rollouts(
        model,
        archive,
        dataset,
        m=m,
        episodes=cfg["metrics.episodes"],
        seconds=cfg["metrics.seconds"],
        threshold=cfg["metrics.threshold"],
        seed=cfg["seed"],
        coverage_mode=cfg["metrics.coverage_mode"],
    )
    print(report.text_block())
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            row = report.csv_row(model.kind, m or model.n_books, cfg["metrics.episodes"])
            writer = csv.DictWriter(fh, fieldnames=list(row))
            writer.writeheader()
            writer.writerow(row)
    return 0


def cmd_eval_track(cfg, args):
    model, _, _ = load_model(args.checkpoint)
    dataset = load_dataset(args.dataset)
    if args.policy:
        policy, _, task = load_policy(args.policy, model)
        stats = evaluate_task(
            task, model, policy, dataset, episodes=args.episodes, seed=cfg["seed"]
        )
        for key, value in sorted(stats.items()):
            print(f"{key} {value:.4f}")
        return 0
    # no policy: score the imitation model itself against each reference clip
    # (early termination can truncate a rollout; compare the shared prefix)
    trajectories, reward = rollout_imitation(model, dataset.clips, dataset)
    errs = [
        tracking_errors(
            traj, np.stack([s.as_row() for s in clip.states[: len(traj)]])
        )
        for traj, clip in zip(trajectories, dataset.clips)
    ]
    print(f"mean reward   {reward:.4f}")
    for key in ("mean_pos_err", "mean_tip_err", "vel_err", "acc_err"):
        print(f"{key} {np.mean([e[key] for e in errs]):.4f}")
    return 0


def _gradcheck_once(seed):
    """Max relative gradient error of the fully differentiable composite
    losses (continuous-kind distillation objective) at one random point."""
    rng = np.random.default_rng(seed)
    model = LatentModel("continuous", rng, latent_dim=3, hidden=(6,))
    dcfg = distill_config(load_config())
    b = 4
    batch = DistillBatch(
        s=rng.standard_normal((b, PROPRIO_DIM)),
        s_tilde=rng.standard_normal((b, TARGET_DIM)),
        a_expert=rng.standard_normal((b, ACTION_DIM)),
        prev_latent=rng.standard_normal((b, model.latent_dim)),
        prev_prior=rng.standard_normal((b, model.latent_dim)),
        prev_mask=np.ones(b),
        m=None,
    )
    noise = rng.standard_normal((b, model.latent_dim))

    class _FixedNoise:
        """Replays the same reparameterization noise at every evaluation."""

        @staticmethod
        def standard_normal(shape):
            return noise

    def loss_at(theta):
        model.params.values[:] = theta
        model.params.clear_leaves()
        total, _, _ = distill_loss(model, batch, dcfg, t=100, rng=_FixedNoise())
        return float(total.value)

    theta0 = model.params.values.copy()
    total, _, _ = distill_loss(model, batch, dcfg, t=100, rng=_FixedNoise())
    backward(total)
    g_ad = model.params.collect_grad()
    model.params.values[:] = theta0
    g_fd = finite_difference_grad(loss_at, theta0)
    denom = max(np.linalg.norm(g_fd), np.linalg.norm(g_ad), 1e-12)
    return np.linalg.norm(g_fd - g_ad) / denom


def cmd_gradcheck(cfg, args):
    errs = [_gradcheck_once(seed) for seed in range(args.seeds)]
    worst = max(errs)
    print(f"max relative gradient error {worst:.3e} over {args.seeds} seeds")
    return 0 if worst < 1e-4 else 1


def cmd_inspect_checkpoint(cfg, args):
    sections = read_container(args.path)
    print(f"digest {checkpoint_digest(args.path)}")
    for name, payload in sections.items():
        print(f"section {name:24s} {len(payload)} bytes")
    if "meta" in sections:
        meta = json.loads(sections["meta"].decode("utf-8"))
        for key, value in sorted(meta.items()):
            if key != "clips":
                print(f"meta.{key} = {value}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(prog="mqprior")
    parser.add_argument("--print-config", action="store_true",
                        help="print the config key registry and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key")

    p = sub.add_parser("gen-data", help="generate and save a reference dataset")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-imitate", help="phase-1 distillation training")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", default=None, help="training-curve CSV path")

    p = sub.add_parser("train-task", help="phase-2 PPO over a frozen model")
    common(p)
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", default=None)

    p = sub.add_parser("rollout", help="imitation rollout reward on the dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--clips", type=int, default=0, help="limit clip count")

    p = sub.add_parser("eval-prior", help="prior-rollout generation metrics")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--csv", default=None)

    p = sub.add_parser("eval-track", help="tracking-error evaluation")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--policy", default=None, help="task-policy checkpoint")
    p.add_argument("--episodes", type=int, default=16)

    p = sub.add_parser("gradcheck", help="finite-difference check of the losses")
    common(p)
    p.add_argument("--seeds", type=int, default=5)

    p = sub.add_parser("inspect-checkpoint", help="print container contents")
    common(p)
    p.add_argument("--path", required=True)

    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-imitate": cmd_train_imitate,
    "train-task": cmd_train_task,
    "rollout": cmd_rollout,
    "eval-prior": cmd_eval_prior,
    "eval-track": cmd_eval_track,
    "gradcheck": cmd_gradcheck,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        for key, (default, kind) in REGISTRY.items():
            print(f"{key} = {default}  # {kind}")
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    try:
        cfg = load_config(args.config, overrides=args.set)
        return COMMANDS[args.command](cfg, args)
    except (ContractError, CheckpointError, OSError, RuntimeError,
            struct.error, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
