"""Minimal reverse-mode automatic differentiation on top of numpy.

Only the operations needed by the pruned CNNs, the graph aggregator, the
weight generators and the actor/critic networks are provided.  Tensors are
thin wrappers around ``numpy.ndarray``; each non-leaf tensor keeps a closure
mapping the output gradient to the gradients of its parents.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Build no backward graph inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """Dense array that records how it was computed.

    Leaf tensors created with ``requires_grad=True`` own a ``grad`` buffer of
    the same shape, zero until :func:`backward` accumulates into it.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward: Callable | None = None):
        if dtype is None:
            dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.grad = np.zeros_like(self.data) if (requires_grad and not _parents) else None

    # -- introspection --------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, dtype=data.dtype)
    return Tensor(data, requires_grad=True, dtype=data.dtype,
                  _parents=tuple(parents), _backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _result(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is taken as 0."""
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.data.dtype)
    return _result(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out, (a, b), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T, (a,), lambda g: (g.T,))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(np.ascontiguousarray(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(out, tensors, backward)


# ----------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape N x F, weight F x G."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = add(out, bias)
    return out


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, hout: int, wout: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (hout - 1) * stride + 1 : stride, : (wout - 1) * stride + 1 : stride]


def _scatter_windows(dcols: np.ndarray, xshape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    # dcols: N, C, H', W', K, K
    n, c, h, w = xshape
    hout, wout = dcols.shape[2], dcols.shape[3]
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + stride * (hout - 1) + 1 : stride,
                kj : kj + stride * (wout - 1) + 1 : stride] += dcols[:, :, :, :, ki, kj]
    return dxp[:, :, padding : padding + h, padding : padding + w]


def _check_conv_args(x: Tensor, k: int, stride: int, padding: int):
    if x.ndim != 4:
        raise ValueError(f"conv input must be N x C x H x W, got shape {x.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Bias-free 2-D cross-correlation, ``weight`` shaped Cout x Cin x K x K."""
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d weight must be Cout x Cin x K x K, got {weight.shape}")
    cout, cin, k, _ = weight.shape
    _check_conv_args(x, k, stride, padding)
    if x.shape[1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    n, _, h, w = x.shape
    hout, wout = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    if hout < 1 or wout < 1:
        raise ValueError(f"conv2d: input {x.shape} too small for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, k, stride, hout, wout)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * hout * wout, cin * k * k)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = (cols @ wmat.T).reshape(n, hout, wout, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * hout * wout, cout)
        dw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, hout, wout, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
            dx = _scatter_windows(dcols, x.shape, k, stride, padding)
        return dx, dw

    return _result(np.ascontiguousarray(out), (x, weight), backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution, ``weight`` shaped C x 1 x K x K."""
    if weight.ndim != 4 or weight.shape[1] != 1 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"depthwise weight must be C x 1 x K x K, got {weight.shape}")
    c, _, k, _ = weight.shape
    _check_conv_args(x, k, stride, padding)
    if x.shape[1] != c:
        raise ValueError(f"depthwise channel mismatch: input {x.shape} vs weight {weight.shape}")
    h, w = x.shape[2], x.shape[3]
    hout, wout = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, k, stride, hout, wout)
    kern = weight.data[:, 0]
    out = np.einsum("nchwkl,ckl->nchw", win, kern)

    def backward(g):
        dw = np.einsum("nchwkl,nchw->ckl", win, g)[:, None] if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.einsum("nchw,ckl->nchwkl", g, kern)
            dx = _scatter_windows(dcols, x.shape, k, stride, padding)
        return dx, dw

    return _result(out, (x, weight), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


class BatchNormState:
    """Scale/shift parameters plus recalibrated moving statistics.

    One instance serves one (layer, channel-width bucket) pair.  Moving
    statistics are only ever produced by an explicit recalibration pass; the
    running averages are exact averages of the per-batch statistics seen since
    :meth:`reset_statistics`.
    """

    def __init__(self, channels: int, width_key: int = 0, eps: float = 1e-5, dtype=None):
        self.channels = int(channels)
        self.width_key = int(width_key)
        self.eps = float(eps)
        self.scale = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.shift = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.moving_mean: np.ndarray | None = None
        self.moving_var: np.ndarray | None = None
        self._count = 0
        self._mean_sum = np.zeros(channels)
        self._var_sum = np.zeros(channels)

    @property
    def calibrated(self) -> bool:
        return self.moving_mean is not None

    def parameters(self) -> list[Tensor]:
        return [self.scale, self.shift]

    def reset_statistics(self) -> None:
        self.moving_mean = None
        self.moving_var = None
        self._count = 0
        self._mean_sum = np.zeros(self.channels)
        self._var_sum = np.zeros(self.channels)

    def _accumulate(self, mu: np.ndarray, var: np.ndarray, n: int) -> None:
        self._count += n
        self._mean_sum = self._mean_sum + n * mu.astype(np.float64)
        self._var_sum = self._var_sum + n * var.astype(np.float64)
        self.moving_mean = self._mean_sum / self._count
        self.moving_var = self._var_sum / self._count


BN_MODES = ("train", "recalibrate", "eval")


def batchnorm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Normalize an N x C x H x W tensor per channel.

    ``train`` uses batch statistics, ``recalibrate`` does the same and also
    folds the batch statistics into the state's moving averages, ``eval``
    uses the moving averages.
    """
    if mode not in BN_MODES:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ValueError(f"batchnorm: input {x.shape} does not match state width {state.channels}")
    axes = (0, 2, 3)
    gamma = state.scale.data.reshape(1, -1, 1, 1)
    beta = state.shift.data.reshape(1, -1, 1, 1)
    if mode == "eval":
        if not state.calibrated:
            raise RuntimeError("uncalibrated state: run recalibration before eval-mode batchnorm")
        mu = state.moving_mean.astype(x.data.dtype)
        var = state.moving_var.astype(x.data.dtype)
    else:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if mode == "recalibrate":
            state._accumulate(mu, var, x.shape[0])
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.data.dtype).reshape(1, -1, 1, 1)
    xhat = (x.data - mu.reshape(1, -1, 1, 1)) * inv_std
    out = xhat * gamma + beta
    batch_stats = mode != "eval"

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dx = None
        if x.requires_grad:
            if batch_stats:
                gm = g.mean(axis=axes, keepdims=True)
                gxm = (g * xhat).mean(axis=axes, keepdims=True)
                dx = gamma * inv_std * (g - gm - xhat * gxm)
            else:
                dx = g * gamma * inv_std
        return dx, dgamma, dbeta

    return _result(out, (x, state.scale, state.shift), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.data.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _result(loss, (logits,), backward)


# ----------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.data.dtype)
        if not retain_graph:
            node._parents = ()
            node._backward = None
            node.requires_grad = False


# ----------------------------------------------------------------------------
# parameter helpers and optimizers


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int, dtype=None) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0,
             buffers: list | None = None) -> None:
    """In-place SGD with heavy-ball momentum and decoupled weight decay.

    ``buffers`` (one slot per parameter, ``None`` when empty) carries the
    momentum state between calls.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    for i, (p, g) in enumerate(zip(params, grads)):
        step = g
        if momentum:
            if buffers is None:
                raise ValueError("momentum needs a buffers list")
            buf = buffers[i]
            buf = g.copy() if buf is None else momentum * buf + g
            buffers[i] = buf
            step = buf
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data
        p.data -= lr * step


class SGD:
    """Momentum SGD whose :meth:`step` may touch only a subset of parameters.

    Width-bucketed batch-norm parameters are only updated while their bucket
    is active, so momentum buffers are kept per parameter.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list = [None] * len(self.params)
        self._index = {id(p): i for i, p in enumerate(self.params)}

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self, active: Sequence[Tensor] | None = None) -> None:
        idx = range(len(self.params)) if active is None else [self._index[id(p)] for p in active]
        for i in idx:
            p = self.params[i]
            slot = [self.buffers[i]]
            sgd_step([p], [p.grad], self.lr, self.momentum, self.weight_decay, slot)
            self.buffers[i] = slot[0]


class Adam:
    """Adam, used for the actor/critic networks of the ratio search."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
