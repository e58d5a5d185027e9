"""Minimal reverse-mode autodiff on numpy arrays.

Everything trainable in this package (posterior/prior nets, low- and
high-level policies, value nets) is built from flat parameter vectors and
the small op set below.  Graphs are built per batch and differentiated
once; all math is float64 so gradients can be checked tightly against
finite differences.
"""

from __future__ import annotations

import math

import numpy as np


class ContractError(ValueError):
    """Raised when an operation's input contract is violated."""


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    # sum over leading axes added by broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Node in the computation graph.

    Leaf tensors carry `requires_grad=True` and accumulate into `.grad`
    during `backward`.  Constants are wrapped on the fly.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = _as_array(value)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    # -- graph construction helpers ------------------------------------

    @staticmethod
    def _wrap(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._wrap(other)
        out = Tensor(self.value + other.value, parents=(self, other))

        def bwd(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))

        out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.value, parents=(self,))
        out._backward = lambda g: (-g,)
        return out

    def __sub__(self, other):
        return self + (-Tensor._wrap(other))

    def __rsub__(self, other):
        return Tensor._wrap(other) + (-self)

    def __mul__(self, other):
        other = Tensor._wrap(other)
        out = Tensor(self.value * other.value, parents=(self, other))

        def bwd(g):
            return (
                _unbroadcast(g * other.value, self.shape),
                _unbroadcast(g * self.value, other.shape),
            )

        out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._wrap(other)
        out = Tensor(self.value / other.value, parents=(self, other))

        def bwd(g):
            return (
                _unbroadcast(g / other.value, self.shape),
                _unbroadcast(-g * self.value / other.value**2, other.shape),
            )

        out._backward = bwd
        return out

    def __matmul__(self, other):
        other = Tensor._wrap(other)
        a, b = self.value, other.value
        out = Tensor(a @ b, parents=(self, other))

        def bwd(g):
            ga = g @ b.T if b.ndim == 2 else np.outer(g, b)
            gb = a.T @ g if a.ndim == 2 else np.outer(a, g)
            return (ga.reshape(a.shape), gb.reshape(b.shape))

        out._backward = bwd
        return out

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise ContractError("only scalar exponents are supported")
        out = Tensor(self.value**n, parents=(self,))
        out._backward = lambda g: (g * n * self.value ** (n - 1),)
        return out

    def sum(self, axis=None):
        out = Tensor(self.value.sum(axis=axis), parents=(self,))

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), self.shape).copy(),)

        out._backward = bwd
        return out

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def exp(self):
        v = np.exp(self.value)
        out = Tensor(v, parents=(self,))
        out._backward = lambda g: (g * v,)
        return out

    def log(self):
        out = Tensor(np.log(self.value), parents=(self,))
        out._backward = lambda g: (g / self.value,)
        return out

    def tanh(self):
        v = np.tanh(self.value)
        out = Tensor(v, parents=(self,))
        out._backward = lambda g: (g * (1.0 - v * v),)
        return out

    def relu(self):
        mask = self.value > 0
        out = Tensor(np.where(mask, self.value, 0.0), parents=(self,))
        out._backward = lambda g: (g * mask,)
        return out

    def elu(self):
        neg = np.expm1(np.minimum(self.value, 0.0))
        v = np.where(self.value > 0, self.value, neg)
        out = Tensor(v, parents=(self,))
        out._backward = lambda g: (g * np.where(self.value > 0, 1.0, neg + 1.0),)
        return out

    def clip(self, lo, hi):
        """Clamp with zero gradient outside [lo, hi]."""
        mask = (self.value >= lo) & (self.value <= hi)
        out = Tensor(np.clip(self.value, lo, hi), parents=(self,))
        out._backward = lambda g: (g * mask,)
        return out

    def reshape(self, *shape):
        out = Tensor(self.value.reshape(*shape), parents=(self,))
        out._backward = lambda g: (g.reshape(self.shape),)
        return out

    def cols(self, start, stop):
        """Column slice of a 2-D tensor."""
        out = Tensor(self.value[:, start:stop], parents=(self,))

        def bwd(g):
            full = np.zeros(self.shape)
            full[:, start:stop] = g
            return (full,)

        out._backward = bwd
        return out

    def select_cols(self, idx):
        """Pick one column per row: out[i] = self[i, idx[i]]."""
        idx = np.asarray(idx, dtype=np.intp)
        rows = np.arange(self.shape[0])
        out = Tensor(self.value[rows, idx], parents=(self,))

        def bwd(g):
            full = np.zeros(self.shape)
            np.add.at(full, (rows, idx), g)
            return (full,)

        out._backward = bwd
        return out


def constant(x):
    return Tensor(x)


def leaf(x):
    return Tensor(x, requires_grad=True)


def hstack(tensors):
    """Concatenate 2-D tensors along columns."""
    tensors = [Tensor._wrap(t) for t in tensors]
    widths = [t.shape[1] for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=1), parents=tuple(tensors))

    def bwd(g):
        grads, ofs = [], 0
        for w in widths:
            grads.append(g[:, ofs : ofs + w])
            ofs += w
        return tuple(grads)

    out._backward = bwd
    return out


def minimum(a, b):
    """Elementwise min; gradient follows the smaller branch (ties -> first)."""
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    take_a = a.value <= b.value
    out = Tensor(np.where(take_a, a.value, b.value), parents=(a, b))

    def bwd(g):
        return (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        )

    out._backward = bwd
    return out


def stop_gradient(x):
    """Detach: value passes, no gradient flows."""
    x = Tensor._wrap(x)
    return Tensor(x.value)


def straight_through(pass_value, grad_carrier):
    """Forward the quantized value, route the full gradient to the carrier.

    Implements z_bar = carrier + sg(pass_value - carrier): the output value
    is `pass_value` while backward treats the node as the identity on
    `grad_carrier`.
    """
    carrier = Tensor._wrap(grad_carrier)
    pv = pass_value.value if isinstance(pass_value, Tensor) else _as_array(pass_value)
    if pv.shape != carrier.shape:
        raise ContractError(
            f"straight_through shape mismatch: {pv.shape} vs {carrier.shape}"
        )
    out = Tensor(pv, parents=(carrier,))
    out._backward = lambda g: (g,)
    return out


def logsumexp_rows(x):
    """Row-wise logsumexp of a 2-D tensor (stable)."""
    m = x.value.max(axis=1, keepdims=True)
    shifted = x - constant(m)
    return shifted.exp().sum(axis=1).log() + constant(m[:, 0])


def backward(loss):
    """Reverse-mode sweep from a scalar loss; accumulates into leaf `.grad`."""
    if loss.value.ndim != 0:
        raise ContractError("backward requires a scalar loss node")

    topo, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    grads = {id(loss): np.ones(())}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = _as_array(pg)
    # leaves that were never visited are simply left with grad None


# ---------------------------------------------------------------------------
# parameter vectors and networks


class ParamVector:
    """Flat float64 parameter array with a named slice table.

    Slices are disjoint and cover the array exactly; each named slice has a
    shape used when materializing leaf tensors for a forward pass.
    """

    def __init__(self):
        self.values = np.zeros(0)
        self.table = {}  # name -> (offset, shape)
        self._leaves = []  # (name, Tensor) created since last collect

    def add(self, name, array):
        array = _as_array(array)
        if name in self.table:
            raise ContractError(f"duplicate parameter slice {name!r}")
        self.table[name] = (self.values.size, array.shape)
        self.values = np.concatenate([self.values, array.ravel()])

    @property
    def size(self):
        return self.values.size

    def get(self, name):
        ofs, shape = self.table[name]
        return self.values[ofs : ofs + math.prod(shape)].reshape(shape)

    def set(self, name, array):
        ofs, shape = self.table[name]
        array = _as_array(array)
        if array.shape != shape:
            raise ContractError(f"shape mismatch for {name!r}")
        self.values[ofs : ofs + array.size] = array.ravel()

    def leaf(self, name):
        """Materialize a leaf tensor for one slice and register it."""
        t = leaf(self.get(name))
        self._leaves.append((name, t))
        return t

    def clear_leaves(self):
        self._leaves = []

    def collect_grad(self):
        """Assemble the flat gradient from all live leaves, then clear them.

        Slices never touched by the loss come back as zeros.
        """
        grad = np.zeros_like(self.values)
        for name, t in self._leaves:
            if t.grad is None:
                continue
            ofs, shape = self.table[name]
            grad[ofs : ofs + t.grad.size] += t.grad.ravel()
        self._leaves = []
        return grad

    def copy(self):
        pv = ParamVector()
        pv.values = self.values.copy()
        pv.table = dict(self.table)
        return pv


ACTIVATIONS = ("elu", "tanh", "relu")


class Mlp:
    """Fully connected network over a ParamVector.

    `widths` includes input and output sizes, e.g. (7, 64, 64, 8).
    """

    def __init__(self, widths, activation="elu", params=None, rng=None, prefix=""):
        if activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        if any(w <= 0 for w in widths) or len(widths) < 2:
            raise ContractError("widths must be >= 2 positive integers")
        self.widths = tuple(int(w) for w in widths)
        self.activation = activation
        self.prefix = prefix
        if params is None:
            params = ParamVector()
            rng = rng if rng is not None else np.random.default_rng(0)
            for i, (nin, nout) in enumerate(zip(widths[:-1], widths[1:])):
                bound = 1.0 / np.sqrt(nin)
                params.add(f"{prefix}W{i}", rng.uniform(-bound, bound, (nin, nout)))
                params.add(f"{prefix}b{i}", np.zeros(nout))
        self.params = params

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def forward(self, x):
        """Graph-building forward; `x` may be a Tensor or ndarray (B, in)."""
        x = Tensor._wrap(x)
        if x.value.ndim != 2 or x.value.shape[1] != self.widths[0]:
            raise ContractError(
                f"expected input (*, {self.widths[0]}), got {x.value.shape}"
            )
        h = x
        for i in range(self.n_layers):
            h = h @ self.params.leaf(f"{self.prefix}W{i}") + self.params.leaf(
                f"{self.prefix}b{i}"
            )
            if i < self.n_layers - 1:
                h = getattr(h, self.activation)()
        return h

    def eval_np(self, x):
        """Fast numpy-only forward, no graph."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[1] != self.widths[0]:
            raise ContractError(
                f"expected input (*, {self.widths[0]}), got {x.shape}"
            )
        for i in range(self.n_layers):
            h = h @ self.params.get(f"{self.prefix}W{i}") + self.params.get(
                f"{self.prefix}b{i}"
            )
            if i < self.n_layers - 1:
                if self.activation == "elu":
                    h = np.where(h > 0, h, np.expm1(np.minimum(h, 0.0)))
                elif self.activation == "tanh":
                    h = np.tanh(h)
                else:
                    h = np.maximum(h, 0.0)
        return h[0] if squeeze else h


LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


class GaussianHead:
    """Diagonal Gaussian given by mean and clamped log-std tensors."""

    def __init__(self, mean, log_std):
        self.mean = Tensor._wrap(mean)
        self.log_std = Tensor._wrap(log_std).clip(LOG_STD_MIN, LOG_STD_MAX)
        if self.mean.shape != self.log_std.shape:
            raise ContractError("mean / log-std shape mismatch")

    @classmethod
    def from_net_output(cls, out, dim):
        return cls(out.cols(0, dim), out.cols(dim, 2 * dim))

    def sample(self, rng):
        """Reparameterized sample mean + std * eps."""
        eps = rng.standard_normal(self.mean.shape)
        return self.mean + self.log_std.exp() * constant(eps)

    def log_prob(self, x):
        """Row-wise log density of `x` (constant) under the head."""
        x = Tensor._wrap(x)
        z = (x - self.mean) * (-self.log_std).exp()
        return (
            (z * z) * -0.5 - self.log_std - constant(0.5 * np.log(2 * np.pi))
        ).sum(axis=1)

    def entropy(self):
        return (self.log_std + constant(0.5 * (1.0 + np.log(2 * np.pi)))).sum(axis=1)


def kl_diag_gaussian(q, p):
    """Closed-form KL(q || p) between diagonal Gaussians, summed over dims.

    Returns a scalar for 1-row heads, a per-row vector otherwise (summed
    over the latent dimension either way).
    """
    if q.mean.shape != p.mean.shape:
        raise ContractError("KL dimension mismatch")
    log_ratio = p.log_std - q.log_std
    var_ratio = ((q.log_std - p.log_std) * 2.0).exp()
    mean_term = ((q.mean - p.mean) * (-p.log_std).exp()) ** 2
    per_dim = log_ratio + (var_ratio + mean_term) * 0.5 - 0.5
    axis = None if per_dim.value.ndim == 1 else 1
    return per_dim.sum(axis=axis)


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    def __init__(self, n):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0


def adam_step(params, grad, state, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update in place on `params.values`.

    Refuses non-finite gradients (params and moments untouched).
    """
    grad = _as_array(grad)
    if grad.shape != params.values.shape:
        raise ContractError("gradient / parameter shape mismatch")
    if not np.all(np.isfinite(grad)):
        raise ContractError("non-finite gradient; update refused")
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1**state.t)
    v_hat = state.v / (1 - beta2**state.t)
    params.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


def finite_difference_grad(fn, x, step=1e-5):
    """Central finite differences of scalar fn at flat array x."""
    x = _as_array(x).copy()
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        hi = fn(x)
        x[i] = orig - step
        lo = fn(x)
        x[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad
