"""Reverse-mode automatic differentiation on numpy arrays, plus Adam.

Tensors record their parents and a backward closure on a tape implied by
the graph; `backward()` walks it once in reverse topological order.
Gradients accumulate additively until `zero_grad`.  Training math is
float64; `precision("float32")` switches new tensors to float32 for
inference.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special as sp_special


class AutodiffError(Exception):
    pass


_DTYPE = np.float64
_NAN_CHECK = True


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for new tensors ("float64"/"float32")."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = {"float64": np.float64, "float32": np.float32}[name]
    try:
        yield
    finally:
        _DTYPE = old


def set_nan_check(enabled: bool) -> None:
    global _NAN_CHECK
    _NAN_CHECK = enabled


def _checked(values: np.ndarray, op: str) -> np.ndarray:
    if _NAN_CHECK and not np.all(np.isfinite(values)):
        raise AutodiffError(f"non-finite values produced by {op}")
    return values


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward_fn=None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward_fn = _backward_fn

    # -- bookkeeping ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data, dtype=np.float64)
        self.grad += grad

    def backward(self) -> None:
        if self.data.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data, dtype=np.float64))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # method aliases used heavily by the models
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_checked(a.data + b.data, "add"), _parents=(a, b))

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out._backward_fn = backward_fn
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, _parents=(a,))
    out._backward_fn = lambda g: a._accumulate(-g) if a.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_checked(a.data * b.data, "mul"), _parents=(a, b))

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward_fn = backward_fn
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(_checked(a.data / b.data, "div"), _parents=(a, b))

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / b.data ** 2, b.shape))

    out._backward_fn = backward_fn
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    out = Tensor(_checked(a.data ** exponent, "pow"), _parents=(a,))

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1))

    out._backward_fn = backward_fn
    return out


def exp(a: Tensor) -> Tensor:
    values = _checked(np.exp(a.data), "exp")
    out = Tensor(values, _parents=(a,))
    out._backward_fn = lambda g: a._accumulate(g * values) if a.requires_grad else None
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(_checked(np.log(a.data), "log"), _parents=(a,))
    out._backward_fn = lambda g: a._accumulate(g / a.data) if a.requires_grad else None
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == 3 and b.ndim == 2:
        # one flattened GEMM instead of a stacked loop over the leading axis
        t_len, rows, inner = a.shape
        values = (a.data.reshape(-1, inner) @ b.data).reshape(t_len, rows, -1)
        out = Tensor(_checked(values, "matmul"), _parents=(a, b))

        def flat_backward_fn(g):
            flat_g = np.asarray(g).reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((flat_g @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a.data.reshape(-1, inner).T @ flat_g)

        out._backward_fn = flat_backward_fn
        return out
    out = Tensor(_checked(a.data @ b.data, "matmul"), _parents=(a, b))

    def backward_fn(g):
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data) if a.ndim > 1 else g * b.data
            else:
                ga = g @ b.data.swapaxes(-1, -2) if a.ndim > 1 else b.data @ g
            a._accumulate(_unbroadcast(np.asarray(ga), a.shape))
        if b.requires_grad:
            if b.ndim == 1:
                if a.ndim == 1:
                    gb = a.data * g
                else:
                    gb = (a.data.swapaxes(-1, -2) @ g[..., None])[..., 0]
            elif a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = a.data.swapaxes(-1, -2) @ g
            b._accumulate(_unbroadcast(np.asarray(gb), b.shape))

    out._backward_fn = backward_fn
    return out


def tanh(a: Tensor) -> Tensor:
    values = np.tanh(a.data)
    out = Tensor(values, _parents=(a,))
    out._backward_fn = (lambda g: a._accumulate(g * (1 - values ** 2))
                        if a.requires_grad else None)
    return out


def sigmoid(a: Tensor) -> Tensor:
    values = sp_special.expit(a.data)
    out = Tensor(values, _parents=(a,))
    out._backward_fn = (lambda g: a._accumulate(g * values * (1 - values))
                        if a.requires_grad else None)
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1 + sp_special.erf(x / math.sqrt(2)))
    values = x * phi
    out = Tensor(values, _parents=(a,))
    pdf = np.exp(-0.5 * x ** 2) / math.sqrt(2 * math.pi)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * (phi + x * pdf))

    out._backward_fn = backward_fn
    return out


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    values = np.where(a.data >= 0, a.data, slope * a.data)
    out = Tensor(values, _parents=(a,))

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * np.where(a.data >= 0, 1.0, slope))

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), _parents=(a,))
    out._backward_fn = (lambda g: a._accumulate(g.reshape(a.shape))
                        if a.requires_grad else None)
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    out = Tensor(a.data.transpose(axes), _parents=(a,))
    inverse = np.argsort(axes) if axes is not None else None

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse) if inverse is not None else g.transpose())

    out._backward_fn = backward_fn
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    out._backward_fn = backward_fn
    return out


def take(a: Tensor, key) -> Tensor:
    out = Tensor(a.data[key], _parents=(a,))

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data, dtype=np.float64)
            np.add.at(full, key, g)
            a._accumulate(full)

    out._backward_fn = backward_fn
    return out


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    indices = np.asarray(indices)
    out = Tensor(np.take(a.data, indices, axis=axis), _parents=(a,))

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data, dtype=np.float64)
            sl = [slice(None)] * a.ndim
            for pos, idx in enumerate(indices.ravel()):
                sl[axis] = idx
                g_slice = np.take(g, pos, axis=axis)
                full[tuple(sl)] += g_slice
            a._accumulate(full)

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# Reductions and normalizations
# ---------------------------------------------------------------------------

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,))

    def backward_fn(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    out._backward_fn = backward_fn
    return out


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(values, _parents=(a,))

    def backward_fn(g):
        if a.requires_grad:
            dot = (g * values).sum(axis=axis, keepdims=True)
            a._accumulate(values * (g - dot))

    out._backward_fn = backward_fn
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    values = shifted - lse
    out = Tensor(values, _parents=(a,))
    probs = np.exp(values)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    out._backward_fn = backward_fn
    return out


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learnable scale/shift."""
    mean = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mean) * inv
    values = xhat * gamma.data + beta.data
    out = Tensor(values, _parents=(a, gamma, beta))
    d = a.shape[-1]

    def backward_fn(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if a.requires_grad:
            gx = g * gamma.data
            term = gx - gx.mean(axis=-1, keepdims=True) \
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(term * inv)

    out._backward_fn = backward_fn
    return out


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity in eval mode."""
    if not train or rate == 0.0:
        return a
    if not (0.0 <= rate < 1.0):
        raise AutodiffError(f"dropout rate {rate} outside [0, 1)")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    out = Tensor(a.data * mask, _parents=(a,))
    out._backward_fn = lambda g: a._accumulate(g * mask) if a.requires_grad else None
    return out


@dataclass
class BatchNormState:
    """Running statistics, mutated in train mode."""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, n_channels: int, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.zeros(n_channels), np.ones(n_channels), momentum)


def batch_norm(a: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               train: bool, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm on (N, C, ...) input, normalizing over all
    non-channel axes; eval mode uses the running statistics."""
    axes = (0,) + tuple(range(2, a.ndim))
    shape = (1, a.shape[1]) + (1,) * (a.ndim - 2)
    if train:
        mean = a.data.mean(axis=axes)
        var = a.data.var(axis=axes)
        m = state.momentum
        state.running_mean += m * (mean - state.running_mean)
        state.running_var += m * (var - state.running_var)
    else:
        mean, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var.reshape(shape) + eps)
    xhat = (a.data - mean.reshape(shape)) * inv
    values = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    out = Tensor(values, _parents=(a, gamma, beta))
    count = a.data.size // a.shape[1]

    def backward_fn(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if a.requires_grad:
            gx = g * gamma.data.reshape(shape)
            if train:
                mean_g = gx.mean(axis=axes).reshape(shape)
                mean_gx = (gx * xhat).mean(axis=axes).reshape(shape)
                a._accumulate((gx - mean_g - xhat * mean_gx) * inv)
            else:
                a._accumulate(gx * inv)

    out._backward_fn = backward_fn
    return out


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over valid frames only.

    pred: (..., T, C); mask: (..., T) boolean; target is a constant.
    """
    mask = np.asarray(mask, dtype=bool)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise AutodiffError("masked_mse: empty mask")
    diff = (pred.data - target) * mask[..., None]
    denom = n_valid * pred.shape[-1]
    out = Tensor(_checked(np.array((diff ** 2).sum() / denom), "masked_mse"),
                 _parents=(pred,))

    def backward_fn(g):
        if pred.requires_grad:
            pred._accumulate(g * 2.0 * diff / denom)

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# Fused structured ops: conv2d and LSTM
# ---------------------------------------------------------------------------

def _same_pad(size: int) -> tuple[int, int]:
    # stride-1 "same" padding; even kernels pad one extra on the trailing side
    total = size - 1
    return total // 2, total - total // 2

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*kh*kw, H*W) with same zero padding."""
    n, c, h, w = x.shape
    pt, pb = _same_pad(kh)
    pl, pr = _same_pad(kw)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = np.empty((n, c, kh * kw, h * w), dtype=x.dtype)
    k = 0
    for i in range(kh):
        for j in range(kw):
            cols[:, :, k, :] = xp[:, :, i:i + h, j:j + w].reshape(n, c, h * w)
            k += 1
    return cols.reshape(n, c * kh * kw, h * w)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = shape
    pt, pb = _same_pad(kh)
    pl, pr = _same_pad(kw)
    xp = np.zeros((n, c, h + pt + pb, w + pl + pr))
    cols = cols.reshape(n, c, kh * kw, h, w)
    k = 0
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + h, j:j + w] += cols[:, :, k]
            k += 1
    return xp[:, :, pt:pt + h, pl:pl + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """2-D convolution, stride 1, same zero padding.

    x: (N, C_in, H, W); weight: (C_out, C_in, kh, kw); bias: (C_out,).
    """
    n, c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w:
        raise AutodiffError(f"conv2d channel mismatch: {c_in} vs {c_in_w}")
    cols = _im2col(x.data, kh, kw)  # (N, C_in*kh*kw, H*W)
    w_mat = weight.data.reshape(c_out, -1)
    values = np.einsum("ok,nkp->nop", w_mat, cols, optimize=True)
    values += bias.data[None, :, None]
    out = Tensor(_checked(values.reshape(n, c_out, h, w), "conv2d"),
                 _parents=(x, weight, bias))

    def backward_fn(g):
        g2 = g.reshape(n, c_out, h * w)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=(0, 2)))
        if weight.requires_grad:
            gw = np.einsum("nop,nkp->ok", g2, cols, optimize=True)
            weight._accumulate(gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = np.einsum("ok,nop->nkp", w_mat, g2, optimize=True)
            x._accumulate(_col2im(gcols, x.shape, kh, kw))

    out._backward_fn = backward_fn
    return out


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor,
              w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step from primitive ops; gate order (i, f, g, o).

    x: (B, D); h_prev, c_prev: (B, H); w_ih: (D, 4H); w_hh: (H, 4H).
    """
    hidden = h_prev.shape[-1]
    gates = x @ w_ih + h_prev @ w_hh + bias
    i = sigmoid(gates[:, :hidden])
    f = sigmoid(gates[:, hidden:2 * hidden])
    g = tanh(gates[:, 2 * hidden:3 * hidden])
    o = sigmoid(gates[:, 3 * hidden:])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def lstm_sequence(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor,
                  reverse: bool = False) -> Tensor:
    """Full unidirectional LSTM pass as one fused tape node.

    x: (T, B, D) -> (T, B, H).  Same cell math as `lstm_cell` with
    hand-written backpropagation through time; zero initial state.
    """
    t_len, batch, _ = x.shape
    hidden = w_hh.shape[0]
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)

    # input contribution for every step in one flattened matmul
    x_proj = (x.data.reshape(-1, x.shape[-1]) @ w_ih.data
              + bias.data).reshape(t_len, batch, -1)

    # the time loop only carries the recurrence; activations are written
    # in place into preallocated buffers to keep the per-step cost down
    dtype = x_proj.dtype
    hs = np.zeros((t_len, batch, hidden), dtype=dtype)
    cs = np.zeros((t_len, batch, hidden), dtype=dtype)
    gates_all = np.empty((t_len, batch, 4 * hidden), dtype=dtype)
    hm = np.empty((batch, 4 * hidden), dtype=dtype)
    ig = np.empty((batch, hidden), dtype=dtype)
    h = np.zeros((batch, hidden), dtype=dtype)
    c = np.zeros((batch, hidden), dtype=dtype)
    w_hh_d = w_hh.data
    for t in order:
        gates = gates_all[t]
        np.matmul(h, w_hh_d, out=hm)
        np.add(x_proj[t], hm, out=gates)
        i = gates[:, :hidden]
        f = gates[:, hidden:2 * hidden]
        g = gates[:, 2 * hidden:3 * hidden]
        o = gates[:, 3 * hidden:]
        sp_special.expit(gates[:, :2 * hidden], out=gates[:, :2 * hidden])
        np.tanh(g, out=g)
        sp_special.expit(o, out=o)
        prev_c = c
        c = cs[t]
        np.multiply(f, prev_c, out=c)
        np.multiply(i, g, out=ig)
        c += ig
        h = hs[t]
        np.tanh(c, out=h)
        np.multiply(o, h, out=h)
    out = Tensor(_checked(hs, "lstm_sequence"), _parents=(x, w_ih, w_hh, bias))

    def backward_fn(grad_out):
        steps = list(order)
        first = steps[0]
        i = gates_all[:, :, :hidden]
        f = gates_all[:, :, hidden:2 * hidden]
        g = gates_all[:, :, 2 * hidden:3 * hidden]
        o = gates_all[:, :, 3 * hidden:]
        # states one step back along the processing order (zeros at start)
        h_prev = np.zeros_like(hs)
        c_prev = np.zeros_like(cs)
        if reverse:
            h_prev[:-1] = hs[1:]
            c_prev[:-1] = cs[1:]
        else:
            h_prev[1:] = hs[:-1]
            c_prev[1:] = cs[:-1]
        # vectorized activation derivatives for every step at once
        tc_all = np.tanh(cs)
        dtc_all = 1.0 - tc_all ** 2
        sig_deriv = gates_all * (1.0 - gates_all)      # valid for i, f, o cols
        dtanh_g = 1.0 - g ** 2
        dgates_all = np.empty_like(gates_all)
        di = dgates_all[:, :, :hidden]
        df = dgates_all[:, :, hidden:2 * hidden]
        dg = dgates_all[:, :, 2 * hidden:3 * hidden]
        do = dgates_all[:, :, 3 * hidden:]
        w_hh_t = np.ascontiguousarray(w_hh.data.T)
        dh = np.empty((batch, hidden), dtype=dtype)
        dc = np.empty((batch, hidden), dtype=dtype)
        dc_next = np.zeros((batch, hidden), dtype=dtype)
        dh_next = np.zeros((batch, hidden), dtype=dtype)
        tmp = np.empty((batch, hidden), dtype=dtype)
        for pos in range(len(steps) - 1, -1, -1):
            t = steps[pos]
            np.add(grad_out[t], dh_next, out=dh)
            np.multiply(dh, tc_all[t], out=do[t])
            np.multiply(dh, o[t], out=dc)
            dc *= dtc_all[t]
            dc += dc_next
            np.multiply(dc, g[t], out=di[t])
            np.multiply(dc, c_prev[t], out=df[t])
            np.multiply(dc, i[t], out=dg[t])
            np.multiply(dc, f[t], out=dc_next)
            dgates_all[t] *= sig_deriv[t]
            # the g column used the tanh derivative, not the sigmoid one
            np.multiply(dc, i[t], out=tmp)
            np.multiply(tmp, dtanh_g[t], out=dg[t])
            np.matmul(dgates_all[t], w_hh_t, out=dh_next)
        flat_g = dgates_all.reshape(-1, 4 * hidden)
        if x.requires_grad:
            x._accumulate((flat_g @ w_ih.data.T).reshape(x.shape))
        if w_ih.requires_grad:
            flat_x = x.data.reshape(-1, x.shape[-1])
            w_ih._accumulate(flat_x.T @ flat_g)
        if w_hh.requires_grad:
            flat_h = h_prev.reshape(-1, hidden)
            flat_g = dgates_all.reshape(-1, 4 * hidden)
            w_hh._accumulate(flat_h.T @ flat_g)
        if bias.requires_grad:
            bias._accumulate(dgates_all.sum(axis=(0, 1)))

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# Gradient checking and Adam
# ---------------------------------------------------------------------------

def grad_check(f, tensors: list[Tensor], h: float = 1e-5,
               max_elements: int | None = None, seed: int = 0,
               floor: float = 1e-8) -> float:
    """Max relative error between backward gradients and central differences.

    `f` maps the tensors to a scalar Tensor.  With `max_elements`, a random
    subset of coordinates per tensor is probed.  `floor` bounds the scale
    used for relative errors from below, so directions where the true
    gradient vanishes (and finite differences see only roundoff) do not
    dominate.
    """
    for t in tensors:
        t.zero_grad()
    loss = f()
    loss.backward()
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
             for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, grad in zip(tensors, grads):
        flat = t.data.ravel()
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            indices = rng.choice(flat.size, size=max_elements, replace=False)
        for k in indices:
            orig = flat[k]
            flat[k] = orig + h
            up = f().item()
            flat[k] = orig - h
            down = f().item()
            flat[k] = orig
            numeric = (up - down) / (2 * h)
            analytic = grad.ravel()[k]
            scale = max(abs(numeric), abs(analytic), floor)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adam with bias correction; weight decay defaults to 0."""

    def __init__(self, params: list[Tensor], lr: float = 4e-4,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.state.step += 1
        t = self.state.step
        bc1 = 1 - self.beta1 ** t
        bc2 = 1 - self.beta2 ** t
        for k, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise AutodiffError(f"gradient shape {g.shape} != param {p.data.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.state.m[k]
            v = self.state.v[k]
            m += (1 - self.beta1) * (g - m)
            v += (1 - self.beta2) * (g * g - v)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
