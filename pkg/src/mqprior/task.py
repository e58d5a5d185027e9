"""Phase-2 learning: PPO over a frozen latent prior on three downstream tasks.

The high-level policy picks one code index per active codebook (categorical,
for the quantized kinds) or a residual on the prior mean (Gaussian, for the
continuous kind); the frozen imitation-phase decoder turns the resulting
latent into an action.  Tasks: keyframe in-betweening, tip-trajectory
tracking, and point-goal navigation.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    AdamState,
    ContractError,
    GaussianHead,
    Mlp,
    ParamVector,
    Tensor,
    adam_step,
    backward,
    constant,
    logsumexp_rows,
    minimum,
)
from .toy_world import (
    DT,
    PROPRIO_DIM,
    ToyAction,
    ToyState,
    early_terminate_tracking,
    proprio,
    step,
    wrap_angle,
)

GOAL_RADIUS = 0.5  # navigation arrival radius, metres
NAV_RESPAWN_STEPS = 120  # new navigation target every 4 s
NAV_EPISODE_STEPS = 240  # 8 s episodes
NAV_SPAWN_RANGE = 10.0  # targets land within 10 m of the agent
TRACK_LOOKAHEAD = 5  # current + 4 future tip targets
TIME_ENC_BASE = 100.0

CURVE_COLUMNS = ("step", "mean_return", "mean_ep_len", "success_rate", "entropy")


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.1
    lr: float = 5e-5
    horizon: int = 16
    envs: int = 16
    epochs: int = 4
    minibatches: int = 4
    entropy_coef: float = 0.003
    updates: int = 500
    seed: int = 0
    eval_every: int = 100
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ContractError("gamma must be in (0, 1]")
        if self.clip <= 0:
            raise ContractError("clip range must be positive")


@dataclass
class TaskSpec:
    kind: str  # inbetween | tracking | navigation
    goal_dim: int
    episode_steps: int


def task_spec(kind, clip_steps=121):
    if kind == "inbetween":
        return TaskSpec(kind, goal_dim=10, episode_steps=clip_steps - 1)
    if kind == "tracking":
        return TaskSpec(kind, goal_dim=2 * TRACK_LOOKAHEAD, episode_steps=clip_steps - 1)
    if kind == "navigation":
        return TaskSpec(kind, goal_dim=2, episode_steps=NAV_EPISODE_STEPS)
    raise ContractError(f"unknown task kind {kind!r}")


# ---------------------------------------------------------------------------
# goals and rewards


def time_encoding(tta, dim=10):
    """Sinusoidal encoding of time-to-arrival in steps: [sin, cos] pairs."""
    enc = np.empty(dim)
    for i in range(dim // 2):
        w = 1.0 / TIME_ENC_BASE ** (i / (dim // 2))
        enc[2 * i] = np.sin(tta * w)
        enc[2 * i + 1] = np.cos(tta * w)
    return enc


def _keyframe_diff(state, kf):
    return np.concatenate(
        [state.p - kf.p, state.tip - kf.tip, [wrap_angle(state.theta - kf.theta)]]
    )


def goal_inbetween(state, kf_start, kf_goal, tta):
    """Keyframe goal: differences to both keyframes plus a time encoding."""
    if tta < 0:
        raise ContractError("time-to-arrival must be >= 0")
    g_hat = np.concatenate([_keyframe_diff(state, kf_start), _keyframe_diff(state, kf_goal)])
    return g_hat + time_encoding(tta, dim=g_hat.size)


def reward_inbetween(state, ref):
    """Summation-format tracking reward with the imitation exponents."""
    r_root = np.exp(-10.0 * np.sum((state.p - ref.p) ** 2))
    r_q = np.exp(-2.0 * wrap_angle(state.theta - ref.theta) ** 2)
    r_w = np.exp(-0.5 * (state.omega - ref.omega) ** 2)
    r_ee = np.exp(-40.0 * np.sum((state.tip - ref.tip) ** 2))
    return float(0.1 * r_root + 0.65 * r_q + 0.1 * r_w + 0.15 * r_ee)


def reward_navigation(state, target):
    """Position/speed shaping with maximum reward inside the goal radius."""
    delta = np.asarray(target, dtype=float) - state.p
    dist = np.linalg.norm(delta)
    if dist < GOAL_RADIUS:
        return 1.0
    direction = delta / dist
    r_pos = np.exp(-0.5 * dist**2)
    r_speed = np.exp(-max(0.0, 1.0 - float(state.v @ direction)) ** 2)
    return float(0.7 * r_pos + 0.3 * r_speed)


def goal_tracking(state, future_tips):
    """Differences from the tip to the next TRACK_LOOKAHEAD target tips."""
    future_tips = np.asarray(future_tips, dtype=float)
    if future_tips.shape != (TRACK_LOOKAHEAD, 2):
        raise ContractError(f"expected {TRACK_LOOKAHEAD} target tips")
    return (future_tips - state.tip).ravel()


def reward_tracking(state, target_tip):
    return float(np.exp(-40.0 * np.sum((state.tip - np.asarray(target_tip)) ** 2)))


# ---------------------------------------------------------------------------
# high-level policy


class HighLevelPolicy:
    """Code selector over a frozen prior: categorical heads per active book,
    or a Gaussian residual on the prior mean for the continuous kind."""

    def __init__(self, model, task, m, rng, hidden=(64, 64)):
        if model.kind != "continuous" and not 1 <= m <= model.n_books:
            raise ContractError(f"M={m} outside [1, {model.n_books}]")
        self.kind = "gaussian" if model.kind == "continuous" else "categorical"
        self.m = m
        self.hidden = tuple(hidden)
        self.latent_dim = model.latent_dim
        obs_dim = PROPRIO_DIM + task.goal_dim
        if self.kind == "categorical":
            self.k_per_book = [b.n_codes for b in model.quantizer.books[:m]]
            out = sum(self.k_per_book)
        else:
            out = 2 * model.latent_dim
        self.params = ParamVector()
        self.net = _init_policy_mlp(self.params, (obs_dim, *hidden, out), rng, "pi.")

    # ----- numpy rollout path

    def act(self, model, s, g, rng, greedy=False):
        """Sample latents for a batch of observations.

        Returns (z_bar, log_prob, choice) where `choice` is the per-book
        index matrix (categorical) or the residual u (gaussian).
        """
        obs = np.concatenate([np.atleast_2d(s), np.atleast_2d(g)], axis=1)
        out = self.net.eval_np(obs)
        b = obs.shape[0]
        if self.kind == "categorical":
            idx = np.empty((b, self.m), dtype=np.int64)
            logp = np.zeros(b)
            ofs = 0
            for n, k in enumerate(self.k_per_book):
                logits = out[:, ofs : ofs + k]
                logits = logits - logits.max(axis=1, keepdims=True)
                probs = np.exp(logits)
                probs /= probs.sum(axis=1, keepdims=True)
                if greedy:
                    idx[:, n] = probs.argmax(axis=1)
                else:
                    u = rng.uniform(size=(b, 1))
                    idx[:, n] = (probs.cumsum(axis=1) < u).sum(axis=1)
                logp += np.log(probs[np.arange(b), idx[:, n]])
                ofs += k
            z_bar = np.zeros((b, self.latent_dim))
            for n, book in enumerate(model.quantizer.books[: self.m]):
                z_bar += book.codes[idx[:, n]]
            if model.kind in ("hybrid", "hybrid_vq"):
                z_bar += model.prior_net.eval_np(np.atleast_2d(s))
            return z_bar, logp, idx
        mean = out[:, : self.latent_dim]
        log_std = np.clip(out[:, self.latent_dim :], -5.0, 2.0)
        u = mean if greedy else mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        resid = (u - mean) / np.exp(log_std)
        logp = (-0.5 * resid**2 - log_std - 0.5 * np.log(2 * np.pi)).sum(axis=1)
        mu_p, _ = model._split_head(model.prior_net.eval_np(np.atleast_2d(s)))
        return mu_p + u, logp, u

    # ----- graph path for PPO updates

    def log_prob_entropy(self, obs, choice):
        """Graph-building joint log-prob and entropy of stored choices."""
        out = self.net.forward(obs)
        if self.kind == "categorical":
            logp, ent = None, None
            ofs = 0
            for n, k in enumerate(self.k_per_book):
                seg = out.cols(ofs, ofs + k)
                log_z = logsumexp_rows(seg).reshape(-1, 1)
                log_probs = seg - log_z
                term = log_probs.select_cols(choice[:, n])
                probs = log_probs.exp()
                ent_n = (probs * log_probs).sum(axis=1) * -1.0
                logp = term if logp is None else logp + term
                ent = ent_n if ent is None else ent + ent_n
                ofs += k
            return logp, ent
        head = GaussianHead.from_net_output(out, self.latent_dim)
        return head.log_prob(choice), head.entropy()


def _init_policy_mlp(pv, widths, rng, prefix):
    for i, (nin, nout) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(nin)
        scale = 0.01 if i == len(widths) - 2 else 1.0  # near-uniform initial policy
        pv.add(f"{prefix}W{i}", scale * rng.uniform(-bound, bound, (nin, nout)))
        pv.add(f"{prefix}b{i}", np.zeros(nout))
    return Mlp(widths, params=pv, prefix=prefix)


def make_value_net(task, rng, hidden=(64, 64)):
    pv = ParamVector()
    return _init_policy_mlp(pv, (PROPRIO_DIM + task.goal_dim, *hidden, 1), rng, "v.")


# ---------------------------------------------------------------------------
# GAE + PPO update


def gae_advantages(rewards, values, dones, last_values, gamma, lam):
    """Generalized advantage estimation over a (T, E) rollout block."""
    t_len, n_env = rewards.shape
    adv = np.zeros((t_len, n_env))
    next_adv = np.zeros(n_env)
    next_val = last_values
    for t in reversed(range(t_len)):
        mask = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_val * mask - values[t]
        next_adv = delta + gamma * lam * mask * next_adv
        adv[t] = next_adv
        next_val = values[t]
    return adv, adv + values


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (T, E, obs_dim)
    choice: np.ndarray  # (T, E, m) int or (T, E, D) float
    log_prob: np.ndarray  # (T, E)
    reward: np.ndarray
    value: np.ndarray
    done: np.ndarray
    last_value: np.ndarray  # (E,)


def ppo_update(policy, value_net, buf, cfg, opt_policy, opt_value, rng):
    """Clipped-surrogate PPO epoch(s) over one rollout buffer."""
    adv, returns = gae_advantages(
        buf.reward, buf.value, buf.done, buf.last_value, cfg.gamma, cfg.lam
    )
    if not np.all(np.isfinite(adv)):
        raise RuntimeError("non-finite advantage")
    obs = buf.obs.reshape(-1, buf.obs.shape[-1])
    choice = buf.choice.reshape(-1, buf.choice.shape[-1])
    old_logp = buf.log_prob.ravel()
    adv = adv.ravel()
    returns = returns.ravel()
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    n = obs.shape[0]
    losses = {"policy": 0.0, "value": 0.0, "entropy": 0.0}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for chunk in np.array_split(perm, cfg.minibatches):
            logp, ent = policy.log_prob_entropy(obs[chunk], choice[chunk])
            ratio = (logp - constant(old_logp[chunk])).exp()
            a = constant(adv[chunk])
            surrogate = minimum(ratio * a, ratio.clip(1 - cfg.clip, 1 + cfg.clip) * a)
            entropy = ent.mean()
            policy_loss = -(surrogate.mean()) - entropy * cfg.entropy_coef
            backward(policy_loss)
            adam_step(policy.params, policy.params.collect_grad(), opt_policy, lr=cfg.lr)

            v = value_net.forward(obs[chunk]).reshape(-1)
            value_loss = ((v - constant(returns[chunk])) ** 2).mean()
            backward(value_loss)
            adam_step(
                value_net.params, value_net.params.collect_grad(), opt_value, lr=cfg.lr
            )
            losses["policy"] += float(policy_loss.value)
            losses["value"] += float(value_loss.value)
            losses["entropy"] += float(entropy.value)
            count += 1
    return {k: v / count for k, v in losses.items()}


# ---------------------------------------------------------------------------
# task environments


class _TaskEnv:
    """Shared bookkeeping: episode return/length accounting."""

    def __init__(self, dataset):
        self.dataset = dataset
        self.ep_return = 0.0
        self.ep_len = 0

    def norm_proprio(self, state):
        return (proprio(state) - self.dataset.mean) / self.dataset.std


class InbetweenEnv(_TaskEnv):
    """Track a clip given only 4 keyframes and a time-to-arrival signal."""

    N_KEYFRAMES = 4

    def reset(self, rng):
        self.clip = self.dataset.clips[rng.integers(len(self.dataset.clips))]
        n = len(self.clip.states)
        self.kf_idx = np.linspace(0, n - 1, self.N_KEYFRAMES + 1).astype(int)
        self.t = 0
        self.state = self.clip.states[0].copy()
        self.ep_return, self.ep_len = 0.0, 0
        return self.observe()

    def observe(self):
        nxt = self.kf_idx[np.searchsorted(self.kf_idx, self.t, side="right")]
        prev = self.kf_idx[np.searchsorted(self.kf_idx, self.t, side="right") - 1]
        g = goal_inbetween(
            self.state,
            self.clip.states[prev],
            self.clip.states[nxt],
            nxt - self.t,
        )
        return self.norm_proprio(self.state), g

    def step_env(self, action):
        self.state = step(self.state, ToyAction.from_array(action))
        self.t += 1
        reward = reward_inbetween(self.state, self.clip.states[self.t])
        done = self.t >= len(self.clip.states) - 1
        self.ep_return += reward
        self.ep_len += 1
        return reward, done, {}


class TrackingEnv(_TaskEnv):
    """Follow a reference tip trajectory with a short lookahead window."""

    def __init__(self, dataset, clips=None):
        super().__init__(dataset)
        self.clips = clips if clips is not None else dataset.clips

    def reset(self, rng):
        self.clip = self.clips[rng.integers(len(self.clips))]
        self.tips = np.stack([s.tip for s in self.clip.states])
        self.t = 0
        self.state = self.clip.states[0].copy()
        self.ep_return, self.ep_len = 0.0, 0
        return self.observe()

    def _window(self):
        idx = np.minimum(np.arange(self.t + 1, self.t + 1 + TRACK_LOOKAHEAD),
                         len(self.tips) - 1)  # repeat the last target at clip end
        return self.tips[idx]

    def observe(self):
        return self.norm_proprio(self.state), goal_tracking(self.state, self._window())

    def step_env(self, action):
        self.state = step(self.state, ToyAction.from_array(action))
        self.t += 1
        target = self.tips[min(self.t, len(self.tips) - 1)]
        reward = reward_tracking(self.state, target)
        done = self.t >= len(self.clip.states) - 1 or early_terminate_tracking(
            self.state, target
        )
        self.ep_return += reward
        self.ep_len += 1
        return reward, done, {"tip_err": float(np.linalg.norm(self.state.tip - target))}


class NavigationEnv(_TaskEnv):
    """Reach a point goal; the target respawns every 4 s within 10 m."""

    def reset(self, rng):
        self.rng_state_heading = float(rng.uniform(-np.pi, np.pi))
        self.state = ToyState(np.zeros(2), np.zeros(2), self.rng_state_heading, 0.0)
        self.t = 0
        self.target = self._spawn(rng)
        self.first_goal_reached = False
        self.ep_return, self.ep_len = 0.0, 0
        self._rng = rng
        return self.observe()

    def _spawn(self, rng):
        radius = rng.uniform(1.0, NAV_SPAWN_RANGE)
        ang = rng.uniform(0, 2 * np.pi)
        return self.state.p + radius * np.array([np.cos(ang), np.sin(ang)])

    def observe(self):
        return self.norm_proprio(self.state), self.target - self.state.p

    def step_env(self, action):
        self.state = step(self.state, ToyAction.from_array(action))
        self.t += 1
        reward = reward_navigation(self.state, self.target)
        if (
            not self.first_goal_reached
            and np.linalg.norm(self.state.p - self.target) < GOAL_RADIUS
        ):
            self.first_goal_reached = True
        if self.t % NAV_RESPAWN_STEPS == 0:
            self.target = self._spawn(self._rng)
        done = self.t >= NAV_EPISODE_STEPS or np.linalg.norm(self.state.v) > 10.0
        self.ep_return += reward
        self.ep_len += 1
        return reward, done, {"reached": self.first_goal_reached}


def make_env(task, dataset, clips=None):
    if task.kind == "inbetween":
        return InbetweenEnv(dataset)
    if task.kind == "tracking":
        return TrackingEnv(dataset, clips)
    return NavigationEnv(dataset)


# ---------------------------------------------------------------------------
# training


def _frozen_digest(model):
    import hashlib

    h = hashlib.sha256(model.params.values.tobytes())
    if model.quantizer is not None:
        for book in model.quantizer.books:
            h.update(book.codes.tobytes())
    return h.hexdigest()


def train_task(task, model, cfg, m, dataset, curve_path=None, clips=None):
    """PPO training of the high-level policy over a frozen latent model."""
    if not model.frozen:
        raise ContractError("task training requires a frozen model")
    digest_before = _frozen_digest(model)
    seeds = np.random.SeedSequence(cfg.seed, spawn_key=(2,)).spawn(4)
    init_rng, env_rng, act_rng, shuffle_rng = (np.random.default_rng(s) for s in seeds)

    policy = HighLevelPolicy(model, task, m, init_rng, hidden=cfg.hidden)
    value_net = make_value_net(task, init_rng, hidden=cfg.hidden)
    opt_pi = AdamState(policy.params.size)
    opt_v = AdamState(value_net.params.size)

    envs = [make_env(task, dataset, clips) for _ in range(cfg.envs)]
    obs = [env.reset(env_rng) for env in envs]
    finished_returns, finished_lens, finished_success = [], [], []
    curve = []

    for update in range(cfg.updates):
        t_obs, t_choice, t_logp, t_rew, t_val, t_done = [], [], [], [], [], []
        for _ in range(cfg.horizon):
            s = np.stack([o[0] for o in obs])
            g = np.stack([o[1] for o in obs])
            o_mat = np.concatenate([s, g], axis=1)
            z_bar, logp, choice = policy.act(model, s, g, act_rng)
            actions = model.decode(s, z_bar)
            values = value_net.eval_np(o_mat)[:, 0]
            rewards, dones = np.zeros(cfg.envs), np.zeros(cfg.envs)
            for i, env in enumerate(envs):
                r, done, info = env.step_env(actions[i])
                rewards[i], dones[i] = r, float(done)
                if done:
                    finished_returns.append(env.ep_return)
                    finished_lens.append(env.ep_len)
                    if task.kind == "navigation":
                        finished_success.append(float(info.get("reached", False)))
                    obs[i] = env.reset(env_rng)
                else:
                    obs[i] = env.observe()
            t_obs.append(o_mat)
            t_choice.append(choice)
            t_logp.append(logp)
            t_rew.append(rewards)
            t_val.append(values)
            t_done.append(dones)
        s = np.stack([o[0] for o in obs])
        g = np.stack([o[1] for o in obs])
        last_values = value_net.eval_np(np.concatenate([s, g], axis=1))[:, 0]
        buf = RolloutBuffer(
            obs=np.stack(t_obs),
            choice=np.stack(t_choice),
            log_prob=np.stack(t_logp),
            reward=np.stack(t_rew),
            value=np.stack(t_val),
            done=np.stack(t_done),
            last_value=last_values,
        )
        losses = ppo_update(policy, value_net, buf, cfg, opt_pi, opt_v, shuffle_rng)
        if not np.isfinite(losses["policy"]) or abs(losses["policy"]) > 1e6:
            raise RuntimeError(f"task training diverged at update {update}")
        if (update + 1) % cfg.eval_every == 0 or update == cfg.updates - 1:
            window = finished_returns[-50:] or [0.0]
            lens = finished_lens[-50:] or [0]
            succ = float(np.mean(finished_success[-50:])) if finished_success else ""
            curve.append(
                {
                    "step": update,
                    "mean_return": float(np.mean(window)),
                    "mean_ep_len": float(np.mean(lens)),
                    "success_rate": succ,
                    "entropy": losses["entropy"],
                }
            )
    if _frozen_digest(model) != digest_before:
        raise RuntimeError("frozen model mutated during task training")
    if curve_path is not None:
        with open(curve_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
            writer.writeheader()
            writer.writerows(curve)
    return policy, value_net, curve


# ---------------------------------------------------------------------------
# evaluation


def evaluate_task(task, model, policy, dataset, episodes, seed, clips=None, greedy=True):
    """Greedy policy evaluation; returns task-specific success statistics."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    env = make_env(task, dataset, clips)
    returns, lens, reached, tip_errs = [], [], [], []
    for _ in range(episodes):
        s, g = env.reset(rng)
        done = False
        while not done:
            z_bar, _, _ = policy.act(model, s[None], g[None], rng, greedy=greedy)
            action = model.decode(s[None], z_bar)[0]
            _, done, info = env.step_env(action)
            if not done:
                s, g = env.observe()
            if "tip_err" in info:
                tip_errs.append(info["tip_err"])
        returns.append(env.ep_return)
        lens.append(env.ep_len)
        if task.kind == "navigation":
            reached.append(float(info.get("reached", False)))
    out = {
        "mean_return": float(np.mean(returns)),
        "mean_ep_len": float(np.mean(lens)),
        "reward_per_step": float(np.sum(returns) / np.sum(lens)),
    }
    if reached:
        out["success_rate"] = float(np.mean(reached))
    if tip_errs:
        out["mean_tip_err"] = float(np.mean(tip_errs))
    return out
