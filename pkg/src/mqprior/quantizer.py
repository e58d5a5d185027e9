"""Vector quantization: EMA codebooks, residual stacks, dropout, code reset."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import ContractError, Tensor, constant, straight_through

EMA_EPS = 1e-5


class FrozenError(RuntimeError):
    """Mutation attempted on a frozen codebook."""


@dataclass
class Codebook:
    """Single codebook with EMA statistics for code training.

    After every `ema_update`, codes with ema_count > EMA_EPS satisfy
    codes[i] = ema_sum[i] / ema_count[i].
    """

    codes: np.ndarray  # (K, D)
    decay: float = 0.99
    ema_count: np.ndarray = None
    ema_sum: np.ndarray = None
    usage_epoch: np.ndarray = None
    frozen: bool = False
    pin_zero: bool = False  # code 0 held at the origin (pass-through option)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise ContractError("codes must be a nonempty (K, D) matrix")
        if not 0.0 <= self.decay < 1.0:
            raise ContractError("decay must be in [0, 1)")
        k = self.codes.shape[0]
        if self.ema_count is None:
            self.ema_count = np.ones(k)
        if self.ema_sum is None:
            self.ema_sum = self.codes * self.ema_count[:, None]
        if self.usage_epoch is None:
            self.usage_epoch = np.zeros(k, dtype=np.int64)
        if self.pin_zero:
            self.codes[0] = 0.0
            self.ema_sum[0] = 0.0

    @property
    def n_codes(self):
        return self.codes.shape[0]

    @property
    def dim(self):
        return self.codes.shape[1]

    @classmethod
    def init_random(cls, n_codes, dim, rng, scale=1.0, decay=0.99, pin_zero=False):
        return cls(
            codes=rng.uniform(-scale, scale, (n_codes, dim)),
            decay=decay,
            pin_zero=pin_zero,
        )


@dataclass
class QuantizeResult:
    """Output of a (residual) quantization pass.

    `quantized` is a straight-through tensor when the input carried
    gradients, otherwise a plain array.  `commit_encoder` is the loss term
    that propagates to the encoder, `commit_codebook` the reported
    codebook-side term (no gradient under EMA training).
    """

    quantized: object  # Tensor or ndarray, same shape as input
    indices: list
    commit_encoder: object  # scalar Tensor or float
    commit_codebook: float
    residual_norms: list = field(default_factory=list)

    @property
    def commit_loss(self):
        cb = self.commit_codebook
        ce = self.commit_encoder
        return (ce.value.item() if isinstance(ce, Tensor) else float(ce)) + cb


def _values(y):
    return y.value if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)


def vq_quantize(y, book: Codebook):
    """Nearest-code quantization of a batch (B, D) or single vector (D,)."""
    stack = RvqStack([book])
    return rvq_quantize(y, stack, 1)


class RvqStack:
    """Ordered codebooks quantizing successive residuals."""

    def __init__(self, books, dropout_enabled=True):
        if not books:
            raise ContractError("stack needs at least one codebook")
        dim = books[0].dim
        if any(b.dim != dim for b in books):
            raise ContractError("all codebooks must share the same dimension")
        self.books = list(books)
        self.dropout_enabled = dropout_enabled

    @property
    def n_books(self):
        return len(self.books)

    @property
    def dim(self):
        return self.books[0].dim

    @property
    def frozen(self):
        return all(b.frozen for b in self.books)

    def freeze(self):
        for b in self.books:
            b.frozen = True

    @classmethod
    def init_random(cls, n_books, n_codes, dim, rng, scale=1.0, decay=0.99, pin_zero=False):
        return cls(
            [
                Codebook.init_random(n_codes, dim, rng, scale, decay, pin_zero)
                for _ in range(n_books)
            ]
        )


def rvq_quantize(y, stack: RvqStack, m=None):
    """Quantize `y` through the first `m` stages of the stack.

    Stage n quantizes the residual left by stages < n; the output is the
    sum of the selected codes, passed through a straight-through node so
    encoder gradients are the identity.
    """
    if m is None:
        m = stack.n_books
    if not 1 <= m <= stack.n_books:
        raise ContractError(f"M={m} outside [1, {stack.n_books}]")
    vals = _values(y)
    single = vals.ndim == 1
    batch = vals[None, :] if single else vals
    if batch.shape[1] != stack.dim:
        raise ContractError(
            f"input dim {batch.shape[1]} does not match codebook dim {stack.dim}"
        )

    indices = []
    residual_norms = []
    residual = batch
    total = np.zeros_like(batch)
    commit_cb = 0.0
    for book in stack.books[:m]:
        idx, _ = kernels.nearest_code(residual, book.codes)
        selected = book.codes[idx]
        residual = residual - selected
        total = total + selected
        indices.append(idx[0] if single else idx)
        residual_norms.append(float(np.mean(np.linalg.norm(residual, axis=1))))
        commit_cb += float(np.mean(np.sum(residual**2, axis=1)))

    if isinstance(y, Tensor) and y.requires_grad:
        # encoder-side commitment: sum over stages of ||r_n - sg(e*_n)||^2,
        # i.e. ||y - partial_sum_n||^2 with the codes as constants
        partials = np.cumsum(
            np.stack(
                [np.zeros_like(batch)]
                + [stack.books[n].codes[np.atleast_1d(indices[n])] for n in range(m)]
            ),
            axis=0,
        )
        commit_enc = None
        yb = y if not single else y.reshape(1, -1)
        for n in range(1, m + 1):
            term = ((yb - constant(partials[n])) ** 2).sum(axis=1).mean()
            commit_enc = term if commit_enc is None else commit_enc + term
        quantized = straight_through(total[0] if single else total, y)
    else:
        commit_enc = commit_cb
        quantized = total[0] if single else total

    return QuantizeResult(
        quantized=quantized,
        indices=indices,
        commit_encoder=commit_enc,
        commit_codebook=commit_cb,
        residual_norms=residual_norms,
    )


def ema_update(book: Codebook, assignments, step=None):
    """EMA update of cluster sizes and code positions, in place.

    `assignments` is (indices, vectors) for one batch.  Unassigned codes
    only decay their counts.
    """
    if book.frozen:
        raise FrozenError("ema_update on a frozen codebook")
    idx, vecs = assignments
    idx = np.asarray(idx, dtype=np.int64)
    vecs = np.asarray(vecs, dtype=np.float64)
    if vecs.ndim == 1:
        vecs = vecs[None, :]
    if idx.size and (idx.min() < 0 or idx.max() >= book.n_codes):
        raise ContractError("assignment index out of range")
    if vecs.shape[0] != idx.size or (idx.size and vecs.shape[1] != book.dim):
        raise ContractError("assignment vectors shape mismatch")

    counts = np.bincount(idx, minlength=book.n_codes).astype(np.float64)
    sums = np.zeros_like(book.ema_sum)
    np.add.at(sums, idx, vecs)

    lam = book.decay
    book.ema_count = lam * book.ema_count + (1 - lam) * counts
    book.ema_sum = lam * book.ema_sum + (1 - lam) * sums
    book.codes = book.ema_sum / np.maximum(book.ema_count, EMA_EPS)[:, None]
    if book.pin_zero:
        book.codes[0] = 0.0
        book.ema_sum[0] = 0.0
    if step is not None:
        book.usage_epoch[counts > 0] = step
    return book


def code_reset(book: Codebook, batch, threshold, rng):
    """Replace codes whose EMA count fell below `threshold`.

    Replacements are drawn from `batch` without replacement while possible.
    Returns (book, reset_count, starved_flag); starved means dead codes were
    pending but the batch was empty.
    """
    if book.frozen:
        raise FrozenError("code_reset on a frozen codebook")
    batch = np.asarray(batch, dtype=np.float64)
    dead = np.flatnonzero(book.ema_count < threshold)
    if book.pin_zero:
        dead = dead[dead != 0]
    if dead.size == 0:
        return book, 0, False
    if batch.size == 0:
        return book, 0, True
    if batch.shape[0] >= dead.size:
        picks = rng.choice(batch.shape[0], size=dead.size, replace=False)
    else:
        picks = rng.choice(batch.shape[0], size=dead.size, replace=True)
    new_codes = batch[picks]
    book.codes[dead] = new_codes
    book.ema_count[dead] = 1.0
    book.ema_sum[dead] = new_codes
    return book, int(dead.size), False


def sample_dropout_m(n, rng):
    """Uniform draw of the active-stage count M in {1, ..., N}."""
    if n < 1:
        raise ContractError("N must be >= 1")
    return int(rng.integers(1, n + 1))


def active_code_fraction(stack: RvqStack, threshold):
    """Fraction of codes, over all books, with EMA count above threshold."""
    alive = sum(int(np.sum(b.ema_count >= threshold)) for b in stack.books)
    total = sum(b.n_codes for b in stack.books)
    return alive / total
