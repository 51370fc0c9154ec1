"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` over raw arrays and a ``backward`` that maps the output gradient
to one gradient per input. ``Function.apply`` wires the result into the
graph. Backward rules live on the classes so they can be inspected and, in
fault-injection tests, replaced.
"""
from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True
DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx", "_done", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._ctx = None
        self._done = False
        self.name = name

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autograd ---------------------------------------------------------
    def backward(self):
        """Populate ``.grad`` on every leaf that requires grad.

        The graph is released afterwards; calling backward again on the same
        result raises, and a fresh forward pass is needed.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._done:
            raise RuntimeError("backward() already ran on this graph; recompute the forward pass")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            ctx = node._ctx
            if ctx is None:
                if g is not None:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            in_grads = ctx.backward(g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for parent, pg in zip(ctx.parents, in_grads):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"{type(ctx).__name__}.backward produced grad {pg.shape} for input {parent.shape}"
                    )
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            node._ctx = None
            node._done = True

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, _wrap(other, self))

    def __rsub__(self, other):
        return Sub.apply(_wrap(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, _wrap(other, self))

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, _wrap(other, self))

    def __getitem__(self, idx):
        return GetItem.apply(self, idx=idx)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2)
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Permute.apply(self, axes=axes)

    @property
    def T(self):
        return self.transpose()


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _topological(root: Tensor) -> list:
    """Nodes in reverse topological order (root first) without recursion."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for p in node._ctx.parents:
                if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    order.reverse()
    return order


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` following numpy broadcasting rules."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}") from None


class Function:
    """Base class for differentiable operations.

    ``stochastic`` marks operations whose forward draws random numbers;
    gradient checking refuses graphs containing them.
    """

    stochastic = False

    def __init__(self):
        self.parents = ()
        self.needs = ()

    @classmethod
    def apply(cls, *inputs, **kwargs):
        ctx = cls()
        ctx.needs = tuple(isinstance(x, Tensor) and x.requires_grad and _GRAD_ENABLED for x in inputs)
        raw = [x.data if isinstance(x, Tensor) else x for x in inputs]
        out = Tensor(ctx.forward(*raw, **kwargs))
        if _GRAD_ENABLED and any(isinstance(x, Tensor) and x.requires_grad for x in inputs):
            out.requires_grad = True
            ctx.parents = inputs
            out._ctx = ctx
        return out

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


# -- elementwise arithmetic ----------------------------------------------

class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "add")
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "sub")
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        na, nb = self.needs
        ga = unbroadcast(g * self.b, self.a.shape) if na else None
        gb = unbroadcast(g * self.a, self.b.shape) if nb else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "div")
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        na, nb = self.needs
        ga = unbroadcast(g / self.b, self.a.shape) if na else None
        gb = unbroadcast(-g * self.a / (self.b * self.b), self.b.shape) if nb else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return -g


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
        self.a, self.b = a, b
        if a.ndim > 2 and b.ndim == 2:
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
        return a @ b

    def backward(self, g):
        na, nb = self.needs
        ga = gb = None
        if na:
            if self.b.ndim == 2 and g.ndim > 2:
                ga = (g.reshape(-1, g.shape[-1]) @ self.b.T).reshape(self.a.shape)
            else:
                ga = unbroadcast(g @ np.swapaxes(self.b, -1, -2), self.a.shape)
        if nb:
            if self.a.ndim > 2 and self.b.ndim == 2:
                # fold batch axes into one GEMM instead of a stack of small ones
                a2 = self.a.reshape(-1, self.a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(self.a, -1, -2) @ g, self.b.shape)
        return ga, gb


# -- nonlinearities --------------------------------------------------------

class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.maximum(x, 0)

    def backward(self, g):
        return g * self.mask


class Sigmoid(Function):
    def forward(self, x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self.out = out
        return out

    def backward(self, g):
        return g * self.out * (1.0 - self.out)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, g):
        return g * self.out


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, g):
        return g / self.x


class Sqrt(Function):
    def forward(self, x):
        self.out = np.sqrt(x)
        return self.out

    def backward(self, g):
        return g * 0.5 / self.out


# -- shape manipulation ----------------------------------------------------

class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, tuple(a % len(self.shape) for a in np.atleast_1d(self.axis)))
        return np.broadcast_to(g, self.shape).copy()


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, g):
        return g.reshape(self.shape)


class Permute(Function):
    def forward(self, x, axes):
        self.axes = tuple(axes)
        return np.transpose(x, self.axes)

    def backward(self, g):
        return np.transpose(g, np.argsort(self.axes))


class GetItem(Function):
    """Basic or advanced indexing; repeated indices accumulate in backward."""

    def forward(self, x, idx):
        self.shape, self.dtype, self.idx = x.shape, x.dtype, idx
        return x[idx]

    def backward(self, g):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.idx, g)
        return out


class Scatter(Function):
    """Place ``values`` at ``index`` (unique positions) of a zero array of ``shape``."""

    def forward(self, values, index, shape):
        self.index = index
        out = np.zeros(shape, dtype=values.dtype)
        out[index] = values
        return out

    def backward(self, g):
        return g[self.index]


class Concat(Function):
    def forward(self, *xs, axis=-1):
        ref = xs[0].shape
        ax = axis % len(ref)
        for x in xs[1:]:
            if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
                raise ShapeError(f"concat along axis {axis}: incompatible shapes {ref} and {x.shape}")
        self.axis = ax
        self.splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
        return np.concatenate(xs, axis=ax)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


class Stack(Function):
    def forward(self, *xs, axis=-1):
        self.axis = axis
        return np.stack(xs, axis=axis)

    def backward(self, g):
        n = g.shape[self.axis]
        return tuple(np.take(g, i, axis=self.axis) for i in range(n))


class MaskedFill(Function):
    """Replace entries where ``mask`` is False by a constant; no grad flows there."""

    def forward(self, x, mask, value):
        self.mask = np.broadcast_to(mask, x.shape)
        return np.where(self.mask, x, value).astype(x.dtype, copy=False)

    def backward(self, g):
        return np.where(self.mask, g, 0.0).astype(g.dtype, copy=False)


# -- normalisations and losses --------------------------------------------

class L1RowNormalize(Function):
    """Divide each last-axis row by its L1 norm; zero rows map to zero."""

    def forward(self, x):
        s = np.abs(x).sum(axis=-1, keepdims=True)
        self.zero = s == 0
        self.s = np.where(self.zero, 1.0, s)
        self.x = x
        self.out = np.where(self.zero, 0.0, x / self.s)
        return self.out

    def backward(self, g):
        dot = (g * self.out).sum(axis=-1, keepdims=True)
        gx = (g - np.sign(self.x) * dot) / self.s
        return np.where(self.zero, 0.0, gx)


class BatchNormState:
    """Running statistics for one batch-norm site."""

    def __init__(self, num_channels, momentum=0.1, eps=1e-5, dtype=DEFAULT_DTYPE):
        self.running_mean = np.zeros(num_channels, dtype=dtype)
        self.running_var = np.ones(num_channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


class BatchNorm(Function):
    """Per-channel normalisation over every axis but the last.

    ``mask`` (shape ``x.shape[:-1]``) may be boolean or carry nonnegative
    multiplicities: statistics are weighted by it, and positions with weight
    zero come out as exactly zero. A weight ``w`` makes a position count as
    ``w`` identical copies, so a deduplicated batch reproduces the statistics
    and gradients of the full one.
    """

    def forward(self, x, gamma, beta, state: BatchNormState, training: bool, mask=None):
        C = x.shape[-1]
        if gamma.shape != (C,) or beta.shape != (C,):
            raise ShapeError(f"batch_norm: affine params {gamma.shape}/{beta.shape} for {C} channels")
        self.shape = x.shape
        x2 = x.reshape(-1, C)
        w = ind = None
        if mask is not None:
            m = np.asarray(mask).reshape(-1)
            if m.shape[0] != x2.shape[0]:
                raise ShapeError(f"batch_norm: mask {np.shape(mask)} does not match {x.shape[:-1]}")
            if m.dtype == bool:
                if not m.all():
                    w = ind = m.astype(x.dtype)[:, None]
            elif not (m == 1).all():
                w = m.astype(x.dtype)[:, None]
                ind = (m > 0).astype(x.dtype)[:, None]
        self.training = training
        if training:
            count = x2.shape[0] if w is None else max(float(w.sum()), 1.0)
            if w is None:
                mean = x2.mean(axis=0)
                xc = x2 - mean
                var = np.einsum("ij,ij->j", xc, xc) / count
            else:
                mean = (w[:, 0] @ x2) / count
                xc = x2 - mean
                var = np.einsum("ij,ij->j", xc * w, xc) / count
            mom = state.momentum
            unbiased = var * (count / (count - 1)) if count > 1 else var
            state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(x.dtype)
            state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(x.dtype)
            self.count = count
        else:
            mean, var = state.running_mean, state.running_var
            xc = x2 - mean
        invstd = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
        xhat = xc * invstd
        if ind is not None:
            xhat *= ind
        out = xhat * gamma + beta
        if ind is not None:
            out *= ind
        self.xhat, self.invstd, self.gamma, self.w, self.ind = xhat, invstd, gamma, w, ind
        return out.reshape(x.shape)

    def backward(self, g):
        C = self.shape[-1]
        g = g.reshape(-1, C)
        if self.ind is not None:
            g = g * self.ind
        dgamma = np.einsum("ij,ij->j", g, self.xhat)
        dbeta = g.sum(axis=0)
        scale = self.gamma * self.invstd
        if not self.training:
            return (g * scale).reshape(self.shape), dgamma, dbeta
        n = self.count
        # sum(dxhat) = gamma*dbeta and sum(dxhat*xhat) = gamma*dgamma
        if self.w is None:
            dx = (g - dbeta / n - self.xhat * (dgamma / n)) * scale
        else:
            dx = (g - self.w * (dbeta / n) - (self.w * self.xhat) * (dgamma / n)) * scale
        return dx.reshape(self.shape), dgamma, dbeta


class Dropout(Function):
    stochastic = True

    def forward(self, x, p, rng):
        keep = rng.random(x.shape) >= p
        self.scale = keep.astype(x.dtype) / (1.0 - p)
        return x * self.scale

    def backward(self, g):
        return g * self.scale


class CrossEntropy(Function):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""

    def forward(self, logits, labels):
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise ValueError("cross_entropy: label out of range")
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        self.p = np.exp(logp)
        self.labels = labels
        n = max(labels.shape[0], 1)
        self.n = n
        return np.asarray(-logp[np.arange(labels.shape[0]), labels].sum() / n, dtype=logits.dtype)

    def backward(self, g):
        d = self.p.copy()
        d[np.arange(self.labels.shape[0]), self.labels] -= 1.0
        return d * (g / self.n)


def parameter(data, name=None, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=True, name=name)
