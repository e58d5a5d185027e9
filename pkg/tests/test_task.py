import numpy as np
import pytest

from mqprior.autodiff import ContractError, backward, constant, minimum
from mqprior.latent_models import LatentModel, freeze
from mqprior.task import (
    GOAL_RADIUS,
    NAV_RESPAWN_STEPS,
    NAV_SPAWN_RANGE,
    HighLevelPolicy,
    NavigationEnv,
    PpoConfig,
    RolloutBuffer,
    TrackingEnv,
    evaluate_task,
    gae_advantages,
    goal_inbetween,
    goal_tracking,
    make_value_net,
    ppo_update,
    reward_inbetween,
    reward_navigation,
    reward_tracking,
    task_spec,
    time_encoding,
    train_task,
)
from mqprior.toy_world import ToyState, generate_dataset, wrap_angle


def state(p=(0, 0), v=(0, 0), theta=0.0, omega=0.0):
    return ToyState(np.array(p, float), np.array(v, float), theta, omega)


def frozen_model(kind="hybrid", seed=0):
    return freeze(
        LatentModel(kind, np.random.default_rng(seed), hidden=(16,), total_codes=16, n_books=4)
    )


# ---------------------------------------------------------------------- goals


def test_task_spec_dims():
    assert task_spec("inbetween").goal_dim == 10
    assert task_spec("tracking").goal_dim == 10
    assert task_spec("navigation").goal_dim == 2
    with pytest.raises(ContractError):
        task_spec("flying")


def test_time_encoding_at_zero():
    enc = time_encoding(0)
    assert np.array_equal(enc[0::2], np.zeros(5))
    assert np.array_equal(enc[1::2], np.ones(5))


def test_goal_inbetween_zero_block_at_goal():
    kf_s = state(p=(1, 1), theta=0.3)
    kf_g = state(p=(2, -1), theta=-0.4)
    s = kf_g.copy()
    g = goal_inbetween(s, kf_s, kf_g, 0)
    g_hat = g - time_encoding(0)
    assert np.allclose(g_hat[5:], 0.0, atol=1e-15)  # goal-keyframe block


def test_goal_inbetween_matches_recomputation():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = state(rng.normal(size=2), rng.normal(size=2), rng.uniform(-3, 3), rng.normal())
        k1 = state(rng.normal(size=2), rng.normal(size=2), rng.uniform(-3, 3), rng.normal())
        k2 = state(rng.normal(size=2), rng.normal(size=2), rng.uniform(-3, 3), rng.normal())
        tta = int(rng.integers(0, 100))
        got = goal_inbetween(s, k1, k2, tta)
        want = np.concatenate([
            s.p - k1.p, s.tip - k1.tip, [wrap_angle(s.theta - k1.theta)],
            s.p - k2.p, s.tip - k2.tip, [wrap_angle(s.theta - k2.theta)],
        ]) + time_encoding(tta)
        assert np.allclose(got, want, atol=1e-15)
    with pytest.raises(ContractError):
        goal_inbetween(s, k1, k2, -1)


def test_reward_inbetween_perfect_match_is_one():
    s = state(p=(2, 3), v=(1, 0), theta=0.5, omega=-0.2)
    assert reward_inbetween(s, s.copy()) == pytest.approx(1.0)


def test_reward_inbetween_matches_weighted_sum_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        s = state(rng.normal(size=2), rng.normal(size=2), rng.uniform(-3, 3), rng.normal())
        r = state(rng.normal(size=2), rng.normal(size=2), rng.uniform(-3, 3), rng.normal())
        want = (
            0.1 * np.exp(-10 * np.sum((s.p - r.p) ** 2))
            + 0.65 * np.exp(-2 * wrap_angle(s.theta - r.theta) ** 2)
            + 0.1 * np.exp(-0.5 * (s.omega - r.omega) ** 2)
            + 0.15 * np.exp(-40 * np.sum((s.tip - r.tip) ** 2))
        )
        assert reward_inbetween(s, r) == pytest.approx(want, rel=1e-12)


def test_reward_navigation_at_goal_max():
    assert reward_navigation(state(p=(0, 0)), (0.3, 0.2)) == 1.0


def test_reward_navigation_stationary_two_meters():
    got = reward_navigation(state(p=(0, 0)), (2.0, 0.0))
    assert got == pytest.approx(0.7 * np.exp(-2.0) + 0.3 * np.exp(-1.0), abs=1e-12)
    assert got == pytest.approx(0.2051, abs=5e-4)


def test_reward_navigation_fast_approach_full_speed_term():
    got = reward_navigation(state(p=(0, 0), v=(2.0, 0.0)), (3.0, 0.0))
    assert got == pytest.approx(0.7 * np.exp(-0.5 * 9.0) + 0.3, abs=1e-12)


def test_goal_tracking_zero_on_target_and_dim():
    s = state(p=(1, 1))
    tips = np.tile(s.tip, (5, 1))
    g = goal_tracking(s, tips)
    assert g.shape == (10,)
    assert np.array_equal(g, np.zeros(10))
    with pytest.raises(ContractError):
        goal_tracking(s, tips[:4])


def test_goal_tracking_matches_recomputation():
    rng = np.random.default_rng(2)
    s = state(rng.normal(size=2), theta=0.7)
    tips = rng.normal(size=(5, 2))
    assert np.array_equal(goal_tracking(s, tips), (tips - s.tip).ravel())


# ----------------------------------------------------------------------- GAE


def test_gae_hand_recursion():
    rewards = np.ones((3, 1))
    values = np.zeros((3, 1))
    dones = np.zeros((3, 1))
    adv, ret = gae_advantages(rewards, values, dones, np.zeros(1), 0.99, 0.95)
    lam_g = 0.99 * 0.95
    want = [1 + lam_g * (1 + lam_g * 1), 1 + lam_g * 1, 1.0]
    assert np.allclose(adv.ravel(), want, atol=1e-12)
    assert np.allclose(ret, adv + values)


def test_gae_done_masks_bootstrap():
    rewards = np.array([[1.0], [1.0]])
    values = np.array([[5.0], [7.0]])
    dones = np.array([[1.0], [0.0]])
    adv, _ = gae_advantages(rewards, values, dones, np.array([2.0]), 0.9, 0.8)
    # step 1 bootstraps the last value; step 0's episode ends, no bootstrap
    want1 = 1.0 + 0.9 * 2.0 - 7.0
    want0 = 1.0 - 5.0  # done: no bootstrap, no trace
    assert adv[1, 0] == pytest.approx(want1, abs=1e-12)
    assert adv[0, 0] == pytest.approx(want0, abs=1e-12)


# --------------------------------------------------------------------- policy


def test_policy_m_out_of_range():
    model = frozen_model()
    with pytest.raises(ContractError):
        HighLevelPolicy(model, task_spec("navigation"), 5, np.random.default_rng(0))


def test_policy_indices_in_range_logp_finite():
    model = frozen_model()
    policy = HighLevelPolicy(model, task_spec("navigation"), 2, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    s = rng.standard_normal((32, 7))
    g = rng.standard_normal((32, 2))
    z, logp, idx = policy.act(model, s, g, rng)
    assert idx.shape == (32, 2)
    assert idx.min() >= 0 and idx.max() < 4
    assert np.all(np.isfinite(logp))
    assert z.shape == (32, 8)


def test_policy_logp_factorizes_over_books():
    model = frozen_model()
    policy = HighLevelPolicy(model, task_spec("navigation"), 3, np.random.default_rng(0))
    rng = np.random.default_rng(2)
    s = rng.standard_normal((4, 7))
    g = rng.standard_normal((4, 2))
    _, logp, idx = policy.act(model, s, g, rng)
    obs = np.concatenate([s, g], axis=1)
    out = policy.net.eval_np(obs)
    want = np.zeros(4)
    ofs = 0
    for n, k in enumerate(policy.k_per_book):
        seg = out[:, ofs : ofs + k]
        lp = seg - np.log(np.exp(seg - seg.max(1, keepdims=True)).sum(1, keepdims=True)) - seg.max(1, keepdims=True)
        want += lp[np.arange(4), idx[:, n]]
        ofs += k
    assert np.allclose(logp, want, atol=1e-10)
    # graph path agrees with the sampling path
    lp_graph, ent = policy.log_prob_entropy(obs, idx)
    policy.params.clear_leaves()
    assert np.allclose(lp_graph.value, want, atol=1e-10)
    assert np.all(ent.value > 0)


def test_policy_sampling_matches_softmax_frequencies():
    model = frozen_model()
    policy = HighLevelPolicy(model, task_spec("navigation"), 1, np.random.default_rng(3))
    rng = np.random.default_rng(4)
    n = 100_000
    s = np.zeros((n, 7))
    g = np.zeros((n, 2))
    _, _, idx = policy.act(model, s, g, rng)
    out = policy.net.eval_np(np.concatenate([s[:1], g[:1]], axis=1))[0, :4]
    p = np.exp(out - out.max())
    p /= p.sum()
    counts = np.bincount(idx[:, 0], minlength=4)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 5 * sigma)


def test_policy_greedy_deterministic():
    model = frozen_model()
    policy = HighLevelPolicy(model, task_spec("navigation"), 2, np.random.default_rng(0))
    s = np.random.default_rng(5).standard_normal((3, 7))
    g = np.zeros((3, 2))
    z1, _, i1 = policy.act(model, s, g, np.random.default_rng(0), greedy=True)
    z2, _, i2 = policy.act(model, s, g, np.random.default_rng(9), greedy=True)
    assert np.array_equal(i1, i2) and np.array_equal(z1, z2)


def test_gaussian_policy_composes_with_prior_mean():
    model = frozen_model("continuous")
    policy = HighLevelPolicy(model, task_spec("navigation"), 1, np.random.default_rng(0))
    s = np.random.default_rng(6).standard_normal((4, 7))
    g = np.zeros((4, 2))
    z, logp, u = policy.act(model, s, g, np.random.default_rng(0))
    mu_p, _ = model._split_head(model.prior_net.eval_np(s))
    assert np.allclose(z, mu_p + u, atol=1e-15)
    assert np.all(np.isfinite(logp))


# ----------------------------------------------------------------------- PPO


def test_ppo_zero_advantage_leaves_policy_unchanged():
    model = frozen_model()
    spec = task_spec("navigation")
    cfg = PpoConfig(envs=2, horizon=4, entropy_coef=0.0, epochs=1, minibatches=1,
                    updates=1, hidden=(8,))
    policy = HighLevelPolicy(model, spec, 1, np.random.default_rng(0), hidden=(8,))
    vnet = make_value_net(spec, np.random.default_rng(1), hidden=(8,))
    rng = np.random.default_rng(2)
    obs = rng.standard_normal((4, 2, 9))
    s, g = obs[..., :7], obs[..., 7:]
    choices, logps = [], []
    for t in range(4):
        _, lp, idx = policy.act(model, s[t], g[t], rng)
        choices.append(idx)
        logps.append(lp)
    buf = RolloutBuffer(
        obs=obs,
        choice=np.stack(choices),
        log_prob=np.stack(logps),
        reward=np.zeros((4, 2)),
        value=np.zeros((4, 2)),
        done=np.zeros((4, 2)),
        last_value=np.zeros(2),
    )
    from mqprior.autodiff import AdamState

    before = policy.params.values.copy()
    ppo_update(policy, vnet, buf, cfg, AdamState(policy.params.size),
               AdamState(vnet.params.size), np.random.default_rng(3))
    assert np.array_equal(policy.params.values, before)


def test_clipped_branch_has_zero_gradient():
    model = frozen_model()
    policy = HighLevelPolicy(model, task_spec("navigation"), 1, np.random.default_rng(0), hidden=(8,))
    obs = np.random.default_rng(1).standard_normal((1, 9))
    choice = np.array([[2]])
    # old log-prob far below current: ratio >> 1 + clip, positive advantage
    lp, _ = policy.log_prob_entropy(obs, choice)
    old = float(lp.value[0]) - 3.0
    ratio = (lp - constant(np.array([old]))).exp()
    adv = constant(np.array([1.5]))
    loss = -(minimum(ratio * adv, ratio.clip(0.9, 1.1) * adv)).mean()
    backward(loss)
    grad = policy.params.collect_grad()
    assert np.array_equal(grad, np.zeros_like(grad))


def test_ppo_non_finite_advantage_aborts():
    model = frozen_model()
    spec = task_spec("navigation")
    cfg = PpoConfig(hidden=(8,))
    policy = HighLevelPolicy(model, spec, 1, np.random.default_rng(0), hidden=(8,))
    vnet = make_value_net(spec, np.random.default_rng(1), hidden=(8,))
    buf = RolloutBuffer(
        obs=np.zeros((2, 1, 9)),
        choice=np.zeros((2, 1, 1), dtype=int),
        log_prob=np.zeros((2, 1)),
        reward=np.array([[np.nan], [0.0]]),
        value=np.zeros((2, 1)),
        done=np.zeros((2, 1)),
        last_value=np.zeros(1),
    )
    from mqprior.autodiff import AdamState

    with pytest.raises(RuntimeError):
        ppo_update(policy, vnet, buf, cfg, AdamState(policy.params.size),
                   AdamState(vnet.params.size), np.random.default_rng(0))


# ----------------------------------------------------------------- train_task


def test_train_task_requires_frozen_model():
    ds = generate_dataset(families=("circle",), clips_per_family=1, seed=0)
    model = LatentModel("hybrid", np.random.default_rng(0), hidden=(16,), total_codes=16)
    with pytest.raises(ContractError):
        train_task(task_spec("navigation"), model, PpoConfig(updates=1), 1, ds)


def test_train_task_deterministic():
    ds = generate_dataset(families=("circle",), clips_per_family=1, seed=0)
    model = frozen_model()
    cfg = PpoConfig(updates=2, envs=2, horizon=8, eval_every=1, hidden=(8,), seed=7)
    runs = []
    for _ in range(2):
        policy, _, curve = train_task(task_spec("navigation"), model, cfg, 1, ds)
        runs.append((policy.params.values.copy(), curve))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_train_task_preserves_frozen_model():
    ds = generate_dataset(families=("circle",), clips_per_family=1, seed=0)
    model = frozen_model()
    before = model.params.values.copy()
    codes = [b.codes.copy() for b in model.quantizer.books]
    train_task(task_spec("inbetween"), model, PpoConfig(updates=2, envs=2, horizon=8, hidden=(8,)), 1, ds)
    assert np.array_equal(model.params.values, before)
    assert all(np.array_equal(a, b.codes) for a, b in zip(codes, model.quantizer.books))


# --------------------------------------------------------------- environments


def test_navigation_spawn_and_respawn_invariants():
    ds = generate_dataset(families=("circle",), clips_per_family=1, seed=0)
    env = NavigationEnv(ds)
    rng = np.random.default_rng(0)
    env.reset(rng)
    assert np.linalg.norm(env.target - env.state.p) <= NAV_SPAWN_RANGE
    last_target = env.target.copy()
    for t in range(1, 2 * NAV_RESPAWN_STEPS + 1):
        env.step_env(np.zeros(3))
        if t % NAV_RESPAWN_STEPS == 0:
            assert not np.array_equal(env.target, last_target)
            assert np.linalg.norm(env.target - env.state.p) <= NAV_SPAWN_RANGE
            last_target = env.target.copy()
        else:
            assert np.array_equal(env.target, last_target)


def test_tracking_env_repeats_last_target_at_clip_end():
    ds = generate_dataset(families=("circle",), clips_per_family=1, seed=0)
    env = TrackingEnv(ds)
    env.reset(np.random.default_rng(0))
    env.t = len(env.tips) - 2
    window = env._window()
    assert np.array_equal(window[-1], env.tips[-1])
    assert np.array_equal(window[1], env.tips[-1])


def test_reward_tracking_perfect():
    s = state(p=(1, 2), theta=0.4)
    assert reward_tracking(s, s.tip) == pytest.approx(1.0)


def test_entropy_gradient_matches_finite_differences():
    # the entropy bonus must carry gradient back to the logits
    rng = np.random.default_rng(5)
    model = freeze(
        LatentModel("hybrid", rng, latent_dim=3, hidden=(4,), total_codes=8, n_books=2)
    )
    spec = task_spec("navigation")
    policy = HighLevelPolicy(model, spec, 2, rng, hidden=(4,))
    obs = rng.standard_normal((4, 7 + spec.goal_dim))
    choice = np.stack([rng.integers(0, k, size=4) for k in policy.k_per_book], axis=1)

    total = policy.log_prob_entropy(obs, choice)[1].mean()
    backward(total)
    g_ad = policy.params.collect_grad()
    assert np.linalg.norm(g_ad) > 1e-6  # a detached entropy would be all zeros

    theta0 = policy.params.values.copy()

    def value_at(theta):
        policy.params.values[:] = theta
        policy.params.clear_leaves()
        return float(policy.log_prob_entropy(obs, choice)[1].mean().value)

    idx = rng.choice(theta0.size, size=20, replace=False)
    for i in idx:
        t = theta0.copy()
        t[i] = theta0[i] + 1e-5
        hi = value_at(t)
        t[i] = theta0[i] - 1e-5
        lo = value_at(t)
        fd = (hi - lo) / 2e-5
        assert fd == pytest.approx(g_ad[i], rel=1e-4, abs=1e-9)
