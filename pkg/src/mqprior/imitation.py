"""Phase-1 training: online distillation of latent models from the PD expert.

The student policy is rolled in the toy world; at every visited state the
analytic expert is queried for a supervision action.  The loss is

    L = w_a * L_action + alpha * L_reg + beta * L_commit + gamma(t) * L_prior

where L_prior is the margin-magnitude loss plus a prior-prediction term for
the hybrid kinds, the posterior/prior KL for the continuous kind, and zero
for the purely discrete kinds.  gamma ramps linearly over training, as does
the KL weight for the continuous model.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    AdamState,
    ContractError,
    adam_step,
    backward,
    constant,
    stop_gradient,
)
from .latent_models import LatentModel
from .quantizer import code_reset, ema_update, sample_dropout_m
from .toy_world import (
    early_terminate_imitation,
    expert_action,
    imitation_reward,
    proprio,
    step,
    target_feature,
    ToyAction,
)

CURVE_COLUMNS = (
    "step",
    "loss_action",
    "loss_reg",
    "loss_commit",
    "loss_mm_or_kl",
    "loss_total",
    "eval_reward",
)


@dataclass
class DistillConfig:
    alpha: float = 0.05  # regularizer weight (0.005 for continuous)
    beta: float = 1.0  # commitment weight
    gamma_start: float = 0.1  # prior-term weight ramp (hybrid)
    gamma_end: float = 1.0
    kl_start: float = 0.05  # KL weight ramp (continuous)
    kl_end: float = 0.5
    action_weight: float = 1.0
    horizon: int = 16
    envs: int = 8
    lr: float = 2e-4
    steps: int = 2000
    seed: int = 0
    eval_every: int = 200
    eval_clips: int = 4
    reset_every: int = 50
    reset_threshold: float = 1e-3
    hidden: tuple = (64, 64)
    latent_dim: int = 8
    total_codes: int = 256
    n_books: int = 4
    dropout: bool = True  # sample M ~ U[1, N] per batch; False trains at M = N

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma_start, self.gamma_end) < 0:
            raise ContractError("loss weights must be non-negative")
        if self.horizon < 1:
            raise ContractError("horizon must be >= 1")


def gamma_at(cfg, t):
    """Linear ramp of the prior-term weight over the training run."""
    frac = min(1.0, t / max(cfg.steps, 1))
    return cfg.gamma_start + (cfg.gamma_end - cfg.gamma_start) * frac


def kl_weight_at(cfg, t):
    frac = min(1.0, t / max(cfg.steps, 1))
    return cfg.kl_start + (cfg.kl_end - cfg.kl_start) * frac


def featurize(state, ref, dataset):
    """Model inputs: normalized proprioception plus raw target differences."""
    s = (proprio(state) - dataset.mean) / dataset.std
    return s, target_feature(state, ref)


@dataclass
class DistillBatch:
    """One optimizer step's worth of student-rolled transitions."""

    s: np.ndarray
    s_tilde: np.ndarray
    a_expert: np.ndarray
    prev_latent: np.ndarray  # cached y_bar (quantized) or z (continuous)
    prev_prior: np.ndarray  # cached z_p
    prev_mask: np.ndarray  # 0 on each episode's first transition
    m: int  # active quantizer stages sampled for this batch


def _prior_terms(model, bundle):
    """Kind-specific prior loss tensor and the latents to cache for L_reg."""
    if model.kind == "continuous":
        return bundle.kl_loss, bundle.z, bundle.z_p
    if model.kind in ("hybrid", "hybrid_vq"):
        prior_fit = ((bundle.z_p - stop_gradient(bundle.z)) ** 2).sum(axis=1).mean()
        return bundle.mm_loss + prior_fit, bundle.y_bar, bundle.z_p
    return None, bundle.z_bar, None


def distill_loss(model, batch, cfg, t, rng=None):
    """Build the full distillation objective graph for one batch.

    Returns (total tensor, breakdown dict of component values, bundle).
    """
    action, bundle = model.forward(batch.s, batch.s_tilde, rng=rng, m=batch.m)
    loss_action = ((action - constant(batch.a_expert)) ** 2).sum(axis=1).mean()

    prior_loss, reg_latent, reg_prior = _prior_terms(model, bundle)
    mask = constant(batch.prev_mask[:, None])
    reg = ((reg_latent - constant(batch.prev_latent)) ** 2 * mask).sum(axis=1).mean()
    if reg_prior is not None:
        reg = reg + ((reg_prior - constant(batch.prev_prior)) ** 2 * mask).sum(axis=1).mean()

    total = loss_action * cfg.action_weight + reg * cfg.alpha
    commit_val = 0.0
    if model.quantizer is not None:
        total = total + bundle.commit_loss * cfg.beta
        commit_val = float(bundle.commit_loss.value)
    prior_val = 0.0
    if prior_loss is not None:
        w = kl_weight_at(cfg, t) if model.kind == "continuous" else gamma_at(cfg, t)
        total = total + prior_loss * w
        prior_val = float(prior_loss.value)

    breakdown = {
        "action": float(loss_action.value),
        "reg": float(reg.value),
        "commit": commit_val,
        "mm_or_kl": prior_val,
        "total": float(total.value),
    }
    return total, breakdown, bundle


def distill_step(model, batch, cfg, opt, t, rng=None):
    """One gradient step on a collected batch; returns the loss breakdown."""
    total, breakdown, bundle = distill_loss(model, batch, cfg, t, rng=rng)
    if not np.isfinite(breakdown["total"]) or breakdown["total"] > 1e6:
        raise RuntimeError(f"distillation diverged at step {t}: {breakdown}")

    backward(total)
    adam_step(model.params, model.params.collect_grad(), opt, lr=cfg.lr)
    return breakdown, bundle


def _ema_pass(model, bundle, batch, cfg, t, reset_rng):
    """EMA codebook update (+ periodic dead-code reset) on the active stages."""
    if model.quantizer is None:
        return
    residual = np.asarray(
        (bundle.y if model.kind in ("hybrid", "hybrid_vq") else bundle.z).value
    )
    for n, book in enumerate(model.quantizer.books[: batch.m]):
        idx = np.asarray(bundle.indices[n])
        ema_update(book, (idx, residual))
        if t > 0 and t % cfg.reset_every == 0:
            code_reset(book, residual, cfg.reset_threshold, reset_rng)
        residual = residual - book.codes[idx]


class _Env:
    """One imitation episode: a clip, a cursor, and previous-step caches."""

    def __init__(self, clip):
        self.reset(clip)

    def reset(self, clip):
        self.clip = clip
        self.t = 0
        self.state = clip.states[0].copy()
        self.prev_latent = None
        self.prev_prior = None


def collect_batch(model, envs, dataset, cfg, m, clip_rng, sample_rng=None):
    """Roll the student for `horizon` steps per env; query the expert."""
    d = model.latent_dim
    rows = {k: [] for k in ("s", "st", "a", "pl", "pp", "mask")}
    for _ in range(cfg.horizon):
        refs = [env.clip.states[env.t + 1] for env in envs]
        feats = [featurize(env.state, ref, dataset) for env, ref in zip(envs, refs)]
        s = np.stack([f[0] for f in feats])
        st = np.stack([f[1] for f in feats])
        actions, bundle = model.act(s, st, rng=sample_rng, m=m)
        latent = np.asarray(
            bundle.y_bar if model.kind in ("hybrid", "hybrid_vq")
            else (bundle.z if model.kind == "continuous" else bundle.z_bar)
        )
        prior = np.asarray(bundle.z_p) if bundle.z_p is not None else np.zeros((len(envs), d))
        for i, (env, ref) in enumerate(zip(envs, refs)):
            rows["s"].append(s[i])
            rows["st"].append(st[i])
            rows["a"].append(expert_action(env.state, ref).as_array())
            first = env.prev_latent is None
            rows["mask"].append(0.0 if first else 1.0)
            rows["pl"].append(np.zeros(d) if first else env.prev_latent)
            rows["pp"].append(np.zeros(d) if first else env.prev_prior)
            env.prev_latent = latent[i]
            env.prev_prior = prior[i]
            env.state = step(env.state, ToyAction.from_array(actions[i]))
            env.t += 1
            done = env.t + 1 >= len(env.clip.states) or early_terminate_imitation(
                env.state, env.clip.states[env.t]
            )
            if done:
                env.reset(dataset.clips[clip_rng.integers(len(dataset.clips))])
    return DistillBatch(
        s=np.stack(rows["s"]),
        s_tilde=np.stack(rows["st"]),
        a_expert=np.stack(rows["a"]),
        prev_latent=np.stack(rows["pl"]),
        prev_prior=np.stack(rows["pp"]),
        prev_mask=np.asarray(rows["mask"]),
        m=m,
    )


def rollout_imitation(model, clips, dataset, rng=None, m=None):
    """Roll the student along each clip; returns (trajectories, mean reward)."""
    if not clips:
        raise ContractError("rollout needs at least one clip")
    trajectories, rewards = [], []
    for clip in clips:
        state = clip.states[0].copy()
        rows = [state.as_row()]
        for k in range(1, len(clip.states)):
            s, st = featurize(state, clip.states[k], dataset)
            action, _ = model.act(s[None], st[None], rng=rng, m=m)
            state = step(state, ToyAction.from_array(action[0]))
            rows.append(state.as_row())
            rewards.append(imitation_reward(state, clip.states[k]))
            if early_terminate_imitation(state, clip.states[k]):
                break
        trajectories.append(np.stack(rows))
    return trajectories, float(np.mean(rewards))


def train_imitation(kind, cfg, dataset, curve_path=None):
    """Full phase-1 run; returns (model, curve rows).

    Deterministic for a given config seed: every stream of randomness is
    spawned from one seed sequence.
    """
    if not dataset.clips:
        raise ContractError("empty dataset")
    seeds = np.random.SeedSequence(cfg.seed, spawn_key=(1,)).spawn(5)
    init_rng, clip_rng, drop_rng, reset_rng, sample_rng = (
        np.random.default_rng(s) for s in seeds
    )
    model = LatentModel(
        kind, init_rng, latent_dim=cfg.latent_dim, hidden=cfg.hidden,
        total_codes=cfg.total_codes, n_books=cfg.n_books,
    )
    opt = AdamState(model.params.size)
    envs = [
        _Env(dataset.clips[clip_rng.integers(len(dataset.clips))])
        for _ in range(cfg.envs)
    ]
    eval_clips = dataset.clips[: cfg.eval_clips]
    curve = []
    for t in range(cfg.steps):
        if model.quantizer is None:
            m = None
        elif cfg.dropout:
            m = sample_dropout_m(model.n_books, drop_rng)
        else:
            m = model.n_books
        batch = collect_batch(
            model, envs, dataset, cfg, m, clip_rng,
            sample_rng=sample_rng if kind == "continuous" else None,
        )
        breakdown, bundle = distill_step(
            model, batch, cfg, opt, t,
            rng=sample_rng if kind == "continuous" else None,
        )
        _ema_pass(model, bundle, batch, cfg, t, reset_rng)
        row = {
            "step": t,
            "loss_action": breakdown["action"],
            "loss_reg": breakdown["reg"],
            "loss_commit": breakdown["commit"],
            "loss_mm_or_kl": breakdown["mm_or_kl"],
            "loss_total": breakdown["total"],
            "eval_reward": "",
        }
        if (t + 1) % cfg.eval_every == 0 or t == cfg.steps - 1:
            _, reward = rollout_imitation(model, eval_clips, dataset)
            row["eval_reward"] = f"{reward:.6f}"
        curve.append(row)
    if curve_path is not None:
        with open(curve_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
            writer.writeheader()
            writer.writerows(curve)
    return model, curve
