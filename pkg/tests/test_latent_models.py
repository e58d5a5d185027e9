import numpy as np
import pytest

from mqprior.autodiff import (
    AdamState,
    ContractError,
    adam_step,
    backward,
    finite_difference_grad,
)
from mqprior.latent_models import (
    KINDS,
    LatentModel,
    freeze,
    sample_prior,
)
from mqprior.quantizer import FrozenError, ema_update
from mqprior.toy_world import PROPRIO_DIM, TARGET_DIM


def make(kind, seed=0, **kw):
    kw.setdefault("hidden", (16,))
    kw.setdefault("total_codes", 16)
    kw.setdefault("n_books", 4)
    return LatentModel(kind, np.random.default_rng(seed), **kw)


def batch(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, PROPRIO_DIM)), rng.standard_normal((n, TARGET_DIM))


def zero_nets(model, post_bias=None, prior_bias=None):
    """Zero all weights so each net outputs its final-layer bias."""
    for name in list(model.params.table):
        model.params.set(name, np.zeros(model.params.table[name][1]))
    last = model.posterior_net.n_layers - 1
    if post_bias is not None:
        model.params.set(f"post.b{last}", post_bias)
    if prior_bias is not None:
        model.params.set(f"prior.b{last}", prior_bias)


def grad_slice(pv, grad, prefix):
    parts = []
    for name, (ofs, shape) in pv.table.items():
        if name.startswith(prefix):
            parts.append(grad[ofs : ofs + int(np.prod(shape))])
    return np.concatenate(parts)


# ----------------------------------------------------------------- continuous


def test_continuous_posterior_equal_prior_zero_kl():
    m = make("continuous")
    head_bias = np.concatenate([np.full(8, 0.3), np.full(8, -0.2)])
    zero_nets(m, post_bias=head_bias, prior_bias=head_bias)
    _, bundle = m.forward(*batch(), rng=np.random.default_rng(0))
    m.params.clear_leaves()
    assert float(bundle.kl_loss.value) == pytest.approx(0.0, abs=1e-14)


def test_continuous_forward_deterministic_given_seed():
    m = make("continuous")
    s, st = batch()
    a1, b1 = m.forward(s, st, rng=np.random.default_rng(3))
    m.params.clear_leaves()
    a2, b2 = m.forward(s, st, rng=np.random.default_rng(3))
    m.params.clear_leaves()
    assert np.array_equal(a1.value, a2.value)
    assert np.array_equal(b1.z.value, b2.z.value)
    assert float(b1.kl_loss.value) == float(b2.kl_loss.value)


def kl_oracle(mu_q, ls_q, mu_p, ls_p):
    var_q, var_p = np.exp(2 * ls_q), np.exp(2 * ls_p)
    per = ls_p - ls_q + (var_q + (mu_q - mu_p) ** 2) / (2 * var_p) - 0.5
    return per.sum(axis=1).mean()


def test_continuous_kl_matches_closed_form():
    m = make("continuous", seed=5)
    s, st = batch(6, seed=2)
    _, bundle = m.forward(s, st, rng=np.random.default_rng(0))
    m.params.clear_leaves()
    q_out = m.posterior_net.eval_np(np.concatenate([s, st], axis=1))
    p_out = m.prior_net.eval_np(s)
    mu_q, ls_q = m._split_head(q_out)
    mu_p, ls_p = m._split_head(p_out)
    want = kl_oracle(mu_q, ls_q, mu_p, ls_p)
    assert float(bundle.kl_loss.value) == pytest.approx(want, rel=1e-12)


def test_continuous_act_mean_without_rng():
    m = make("continuous")
    s, st = batch()
    a1, b1 = m.act(s, st)
    a2, b2 = m.act(s, st)
    assert np.array_equal(a1, a2)
    assert np.array_equal(b1.z, b2.z)


def test_continuous_posterior_collapse_under_heavy_kl():
    m = make("continuous", seed=1)
    s, st = batch(8, seed=4)
    opt = AdamState(m.params.size)
    for _ in range(400):
        _, bundle = m.forward(s, st, rng=np.random.default_rng(0))
        loss = bundle.kl_loss * 1e3
        backward(loss)
        adam_step(m.params, m.params.collect_grad(), opt, lr=1e-2)
    _, bundle = m.forward(s, st, rng=np.random.default_rng(0))
    m.params.clear_leaves()
    assert float(bundle.kl_loss.value) < 1e-3


# ------------------------------------------------------------------- discrete


def test_discrete_exact_code_zero_commit():
    m = make("discrete")
    code = m.quantizer.books[0].codes[5].copy()
    zero_nets(m, post_bias=code)
    s, st = batch()
    _, bundle = m.forward(s, st)
    m.params.clear_leaves()
    assert np.allclose(bundle.z_bar.value, code, atol=0)
    assert float(bundle.commit_loss.value) == pytest.approx(0.0, abs=1e-15)


def test_discrete_single_book_indices():
    m = make("discrete")
    _, bundle = m.act(*batch())
    assert len(bundle.indices) == 1


def test_discrete_plus_multi_book_indices():
    m = make("discrete_plus")
    _, bundle = m.act(*batch())
    assert len(bundle.indices) == 4


def test_discrete_zbar_in_reachable_set():
    m = make("discrete_plus", seed=2)
    s, st = batch(16, seed=9)
    _, bundle = m.act(s, st)
    want = np.zeros_like(bundle.z_bar)
    for book, idx in zip(m.quantizer.books, bundle.indices):
        want += book.codes[idx]
    assert np.array_equal(bundle.z_bar, want)


def test_discrete_straight_through_gradient_matches_surrogate_fd():
    m = make("discrete_plus", seed=3)
    s, st = batch(2, seed=1)
    target = np.random.default_rng(0).standard_normal((2, 3))

    action, bundle = m.forward(s, st)
    offset = bundle.z_bar.value - bundle.z.value  # frozen code offset
    loss = ((action - target) ** 2).sum(axis=1).mean()
    backward(loss)
    got = m.params.collect_grad()

    theta0 = m.params.values.copy()

    def surrogate(flat):
        m.params.values[:] = flat
        x = np.concatenate([s, st], axis=1)
        z = m.posterior_net.eval_np(x)
        a = m.low_net.eval_np(np.concatenate([s, z + offset], axis=1))
        return float(np.mean(np.sum((a - target) ** 2, axis=1)))

    want = finite_difference_grad(surrogate, theta0)
    m.params.values[:] = theta0
    post = grad_slice(m.params, got, "post.")
    assert np.linalg.norm(post) > 0  # straight-through keeps the encoder live
    denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), 1e-6)
    assert np.max(np.abs(got - want) / denom) < 1e-4


# --------------------------------------------------------------------- hybrid


def test_hybrid_identity_zbar_minus_zp_is_ybar():
    for kind in ("hybrid", "hybrid_vq"):
        m = make(kind, seed=4)
        for seed in range(5):
            s, st = batch(8, seed=seed)
            _, bundle = m.act(s, st)
            assert np.max(np.abs((bundle.z_bar - bundle.z_p) - bundle.y_bar)) < 1e-12


def test_hybrid_perfect_quantization_recovers_posterior():
    m = make("hybrid", seed=6)
    s, st = batch(1, seed=3)
    _, b0 = m.act(s, st)
    m.quantizer.books[0].codes[1] = b0.y[0]
    _, b1 = m.act(s, st)
    assert np.max(np.abs(b1.z_bar - b1.z)) < 1e-12
    assert b1.mm_loss == pytest.approx(float(np.sum((b1.z - b1.z_p) ** 2)), abs=1e-12)


def test_hybrid_zero_margin_zero_mm():
    m = make("hybrid")
    bias = np.full(8, 0.25)
    zero_nets(m, post_bias=bias, prior_bias=bias)
    s, st = batch()
    _, bundle = m.forward(s, st)
    m.params.clear_leaves()
    assert np.array_equal(bundle.y_bar.value, np.zeros((4, 8)))
    assert np.array_equal(bundle.z_bar.value, bundle.z_p.value)
    assert float(bundle.mm_loss.value) == 0.0


def test_hybrid_mm_equals_ybar_norm():
    m = make("hybrid", seed=7)
    s, st = batch(6, seed=8)
    _, bundle = m.forward(s, st)
    m.params.clear_leaves()
    want = np.mean(np.sum(np.asarray(bundle.y_bar.value) ** 2, axis=1))
    assert float(bundle.mm_loss.value) == pytest.approx(want, rel=1e-15)


def test_hybrid_gradient_partition():
    m = make("hybrid", seed=8)
    s, st = batch(3, seed=5)
    action, bundle = m.forward(s, st)
    # action path only: gradients reach the posterior but never the prior
    loss = (action * action).sum(axis=1).mean()
    backward(loss)
    grad = m.params.collect_grad()
    assert np.array_equal(grad_slice(m.params, grad, "prior."), 0 * grad_slice(m.params, grad, "prior."))
    assert np.linalg.norm(grad_slice(m.params, grad, "post.")) > 0
    # mm path also stays off the prior (stop-gradient on both sides)
    action, bundle = m.forward(s, st)
    backward(bundle.mm_loss)
    grad = m.params.collect_grad()
    assert np.all(grad_slice(m.params, grad, "prior.") == 0.0)


def test_hybrid_prior_trainable_through_direct_path():
    from mqprior.autodiff import stop_gradient

    m = make("hybrid", seed=9)
    s, st = batch(3, seed=6)
    _, bundle = m.forward(s, st)
    prior_fit = ((bundle.z_p - stop_gradient(bundle.z)) ** 2).sum(axis=1).mean()
    backward(prior_fit)
    grad = m.params.collect_grad()
    assert np.linalg.norm(grad_slice(m.params, grad, "prior.")) > 0


# --------------------------------------------------------------- sample_prior


def test_sample_prior_requires_frozen():
    m = make("hybrid")
    s, _ = batch()
    with pytest.raises(ContractError):
        sample_prior(m, s, np.random.default_rng(0), 1)


def test_sample_prior_zero_codes_returns_prior_latent():
    m = make("hybrid", total_codes=4, n_books=4)  # one pinned zero code per book
    freeze(m)
    s, _ = batch()
    z = sample_prior(m, s, np.random.default_rng(0), 4)
    assert np.array_equal(z, m.prior_latent(s))


def test_sample_prior_single_code_deterministic():
    m = make("discrete_plus", total_codes=4, n_books=4)
    for book in m.quantizer.books:
        book.codes[0] = np.random.default_rng(1).standard_normal(8)
    freeze(m)
    s, _ = batch()
    a = sample_prior(m, s, np.random.default_rng(0), 4)
    b = sample_prior(m, s, np.random.default_rng(5), 4)
    assert np.array_equal(a, b)


def test_sample_prior_m_out_of_range():
    m = freeze(make("discrete_plus"))
    s, _ = batch()
    for bad in (0, 5):
        with pytest.raises(ContractError):
            sample_prior(m, s, np.random.default_rng(0), bad)


def test_sample_prior_uniform_indices():
    m = make("discrete", total_codes=8)
    book = m.quantizer.books[0]
    book.codes[:] = np.eye(8)  # one-hot codes expose the index directly
    freeze(m)
    s = np.zeros((100_000, PROPRIO_DIM))
    rng = np.random.default_rng(42)
    z = sample_prior(m, s, rng, 1)
    counts = z.sum(axis=0)
    p = 1 / 8
    sigma = np.sqrt(len(s) * p * (1 - p))
    assert np.all(np.abs(counts - len(s) * p) < 5 * sigma)


def test_sample_prior_continuous_matches_prior_head():
    m = freeze(make("continuous", seed=11))
    s, _ = batch(1000, seed=12)
    z = sample_prior(m, s, np.random.default_rng(0))
    mu, ls = m._split_head(m.prior_net.eval_np(s))
    resid = (z - mu) / np.exp(ls)
    assert abs(resid.mean()) < 0.05
    assert abs(resid.std() - 1.0) < 0.05


# --------------------------------------------------------------------- freeze


def test_freeze_idempotent_and_immutable():
    m = make("hybrid")
    freeze(m)
    freeze(m)
    assert m.frozen and m.quantizer.frozen
    with pytest.raises(FrozenError):
        ema_update(m.quantizer.books[0], (np.array([0]), np.zeros((1, 8))))
    with pytest.raises(FrozenError):
        m.forward(*batch())


def test_frozen_forward_reproducible():
    m = freeze(make("discrete_plus", seed=13))
    s, st = batch(5, seed=14)
    a1, b1 = m.act(s, st)
    a2, b2 = m.act(s, st)
    assert np.array_equal(a1, a2)
    assert np.array_equal(b1.z_bar, b2.z_bar)


# ------------------------------------------------------------------ interface


def test_all_kinds_share_forward_signature():
    s, st = batch()
    rng = np.random.default_rng(0)
    for kind in KINDS:
        m = make(kind)
        action, bundle = m.forward(s, st, rng=np.random.default_rng(0))
        m.params.clear_leaves()
        assert action.value.shape == (4, 3)
        assert bundle.z_bar.value.shape == (4, 8)
        a_np, b_np = m.act(s, st)
        assert a_np.shape == (4, 3)


def test_graph_and_numpy_paths_agree():
    for kind in ("discrete", "discrete_plus", "hybrid", "hybrid_vq"):
        m = make(kind, seed=15)
        s, st = batch(6, seed=16)
        a_g, b_g = m.forward(s, st)
        m.params.clear_leaves()
        a_n, b_n = m.act(s, st)
        assert np.allclose(a_g.value, a_n, atol=1e-12)
        assert np.allclose(b_g.z_bar.value, b_n.z_bar, atol=1e-12)


def test_unknown_kind_rejected():
    with pytest.raises(ContractError):
        LatentModel("mystery", np.random.default_rng(0))
