"""Latent motion-prior models over the planar toy world.

Five variants share one encoder/decoder scaffold and a common forward
signature:

* ``continuous``    -- Gaussian posterior with a learned Gaussian prior (VAE).
* ``discrete``      -- posterior latent snapped to one large codebook.
* ``discrete_plus`` -- posterior latent through a residual quantizer stack.
* ``hybrid``        -- only the margin between posterior and prior latents is
                       residual-quantized; the prior latent is re-added with
                       its gradient stopped.
* ``hybrid_vq``     -- the hybrid scheme with a single codebook holding the
                       full code budget (ablation).

The graph-building :meth:`LatentModel.forward` is used for training; the
numpy :meth:`LatentModel.act` path serves rollouts and evaluation.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ContractError,
    GaussianHead,
    Mlp,
    ParamVector,
    Tensor,
    hstack,
    kl_diag_gaussian,
    stop_gradient,
)
from .quantizer import FrozenError, RvqStack, rvq_quantize
from .toy_world import ACTION_DIM, PROPRIO_DIM, TARGET_DIM

LATENT_DIM = 8
HIDDEN = (64, 64)
TOTAL_CODES = 256
N_BOOKS = 4
CODE_SCALE = 0.1

KINDS = ("continuous", "discrete", "discrete_plus", "hybrid", "hybrid_vq")
_QUANTIZED = ("discrete", "discrete_plus", "hybrid", "hybrid_vq")
_HYBRID = ("hybrid", "hybrid_vq")


@dataclass
class LatentBundle:
    """Intermediate latents of one forward pass; unused scalars are zero."""

    z: object = None  # posterior latent
    z_p: object = None  # prior latent
    y: object = None  # margin z - sg(z_p)
    y_bar: object = None  # quantized margin
    z_bar: object = None  # final latent fed to the action decoder
    indices: list = field(default_factory=list)
    commit_loss: object = 0.0
    mm_loss: object = 0.0
    kl_loss: object = 0.0


def _init_mlp(pv, widths, rng, prefix, activation="elu"):
    """Add fan-in-uniform initialized layers to a shared parameter vector."""
    for i, (nin, nout) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(nin)
        pv.add(f"{prefix}W{i}", rng.uniform(-bound, bound, (nin, nout)))
        pv.add(f"{prefix}b{i}", np.zeros(nout))
    return Mlp(widths, activation=activation, params=pv, prefix=prefix)


class LatentModel:
    """One latent prior variant: posterior, prior, decoder, optional quantizer.

    All network weights live in a single flat :class:`ParamVector` so one
    optimizer state covers the whole model.
    """

    def __init__(self, kind, rng, latent_dim=LATENT_DIM, hidden=HIDDEN,
                 n_books=N_BOOKS, total_codes=TOTAL_CODES, code_scale=CODE_SCALE):
        if kind not in KINDS:
            raise ContractError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.latent_dim = int(latent_dim)
        self.hidden = tuple(hidden)
        self.n_books_arg = int(n_books)
        self.total_codes_arg = int(total_codes)
        self.code_scale = float(code_scale)
        self.frozen = False
        self.params = ParamVector()

        d = self.latent_dim
        post_out = 2 * d if kind == "continuous" else d
        prior_out = 2 * d if kind == "continuous" else d
        self.posterior_net = _init_mlp(
            self.params, (PROPRIO_DIM + TARGET_DIM, *hidden, post_out), rng, "post."
        )
        self.prior_net = _init_mlp(
            self.params, (PROPRIO_DIM, *hidden, prior_out), rng, "prior."
        )
        self.low_net = _init_mlp(
            self.params, (PROPRIO_DIM + d, *hidden, ACTION_DIM), rng, "low."
        )

        if kind == "continuous":
            self.quantizer = None
        else:
            books = 1 if kind in ("discrete", "hybrid_vq") else n_books
            per_book = total_codes // books
            self.quantizer = RvqStack.init_random(
                books, per_book, d, rng, scale=code_scale, pin_zero=True
            )

    @property
    def n_books(self):
        return 0 if self.quantizer is None else self.quantizer.n_books

    # -------------------------------------------------------------- training

    def forward(self, s, s_tilde, rng=None, m=None):
        """Graph-building forward pass: (action, LatentBundle) of tensors.

        `m` selects the active quantizer stages (default: all); `rng` drives
        the continuous model's reparameterized sampling and is ignored by
        the quantized kinds.
        """
        if self.frozen:
            raise FrozenError("forward pass on a frozen model builds no graph")
        s = np.asarray(s, dtype=np.float64)
        s_tilde = np.asarray(s_tilde, dtype=np.float64)
        x = np.concatenate([s, s_tilde], axis=1)
        bundle = LatentBundle()

        if self.kind == "continuous":
            q_head = GaussianHead.from_net_output(
                self.posterior_net.forward(x), self.latent_dim
            )
            p_head = GaussianHead.from_net_output(
                self.prior_net.forward(s), self.latent_dim
            )
            if rng is None:
                raise ContractError("continuous forward needs an rng")
            z = q_head.sample(rng)
            bundle.z = z
            bundle.z_p = p_head.mean
            bundle.z_bar = z
            bundle.kl_loss = kl_diag_gaussian(q_head, p_head).mean()
        elif self.kind in _HYBRID:
            z = self.posterior_net.forward(x)
            z_p = self.prior_net.forward(s)
            y = z - stop_gradient(z_p)
            res = rvq_quantize(y, self.quantizer, m)
            y_bar = res.quantized
            z_bar = y_bar + stop_gradient(z_p)
            bundle.z, bundle.z_p, bundle.y, bundle.y_bar = z, z_p, y, y_bar
            bundle.z_bar = z_bar
            bundle.indices = res.indices
            bundle.commit_loss = res.commit_encoder
            # the identity z_bar - z_p = y_bar holds exactly, so the
            # margin-magnitude loss is computed from y_bar directly
            bundle.mm_loss = (y_bar * y_bar).sum(axis=1).mean()
        else:  # discrete, discrete_plus
            z = self.posterior_net.forward(x)
            res = rvq_quantize(z, self.quantizer, m)
            bundle.z = z
            bundle.z_bar = res.quantized
            bundle.indices = res.indices
            bundle.commit_loss = res.commit_encoder

        action = self.low_net.forward(hstack([Tensor._wrap(s), bundle.z_bar]))
        return action, bundle

    # ------------------------------------------------------------- inference

    def act(self, s, s_tilde, rng=None, m=None):
        """Numpy-only forward for rollouts: (action, LatentBundle) of arrays.

        Deterministic except for the continuous posterior, which uses the
        mean when `rng` is None.
        """
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        s_tilde = np.atleast_2d(np.asarray(s_tilde, dtype=np.float64))
        x = np.concatenate([s, s_tilde], axis=1)
        bundle = LatentBundle()

        if self.kind == "continuous":
            out = self.posterior_net.eval_np(x)
            mean, log_std = self._split_head(out)
            z = mean if rng is None else mean + np.exp(log_std) * rng.standard_normal(mean.shape)
            bundle.z = z
            bundle.z_bar = z
            p_out = self.prior_net.eval_np(s)
            bundle.z_p = p_out[:, : self.latent_dim]
        elif self.kind in _HYBRID:
            z = self.posterior_net.eval_np(x)
            z_p = self.prior_net.eval_np(s)
            y = z - z_p
            res = rvq_quantize(y, self.quantizer, m)
            bundle.z, bundle.z_p, bundle.y = z, z_p, y
            bundle.y_bar = res.quantized
            bundle.z_bar = res.quantized + z_p
            bundle.indices = res.indices
            bundle.commit_loss = res.commit_codebook
            bundle.mm_loss = float(np.mean(np.sum(res.quantized**2, axis=1)))
        else:
            z = self.posterior_net.eval_np(x)
            res = rvq_quantize(z, self.quantizer, m)
            bundle.z = z
            bundle.z_bar = res.quantized
            bundle.indices = res.indices
            bundle.commit_loss = res.commit_codebook

        action = self.low_net.eval_np(np.concatenate([s, bundle.z_bar], axis=1))
        return action, bundle

    def decode(self, s, z_bar):
        """Action decoder only: a = pi_low(s, z_bar), numpy path."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        z_bar = np.atleast_2d(np.asarray(z_bar, dtype=np.float64))
        return self.low_net.eval_np(np.concatenate([s, z_bar], axis=1))

    def prior_latent(self, s):
        """Prior-net latent for a batch of states (mean for continuous)."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        out = self.prior_net.eval_np(s)
        return out[:, : self.latent_dim] if self.kind == "continuous" else out

    def _split_head(self, out):
        from .autodiff import LOG_STD_MAX, LOG_STD_MIN

        d = self.latent_dim
        return out[:, :d], np.clip(out[:, d:], LOG_STD_MIN, LOG_STD_MAX)


def sample_prior(model, s, rng, m=None):
    """Draw latents from the frozen prior: Gaussian sample (continuous),
    uniform codes (discrete), or prior latent plus uniform codes (hybrid).
    """
    if not model.frozen:
        raise ContractError("prior sampling requires a frozen model")
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    b = s.shape[0]
    if model.kind == "continuous":
        out = model.prior_net.eval_np(s)
        mean, log_std = model._split_head(out)
        return mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    if m is None:
        m = model.n_books
    if not 1 <= m <= model.n_books:
        raise ContractError(f"M={m} outside [1, {model.n_books}]")
    z_bar = np.zeros((b, model.latent_dim))
    for book in model.quantizer.books[:m]:
        idx = rng.integers(0, book.n_codes, size=b)
        z_bar += book.codes[idx]
    if model.kind in _HYBRID:
        z_bar += model.prior_net.eval_np(s)
    return z_bar


def freeze(model):
    """Make the model immutable for the task phase; idempotent."""
    model.frozen = True
    if model.quantizer is not None:
        model.quantizer.freeze()
    return model
