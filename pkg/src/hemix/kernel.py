"""Dense numeric substrate with a recorded reverse-mode tape.

Every differentiable op returns a :class:`Tensor` that remembers its parents
and a closure that pushes the upstream gradient back to them.  ``backward``
walks the recorded graph in reverse topological order.  Arrays may carry
leading batch dimensions; a ``Matrix`` in the narrow sense is the 2-D case.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64
_CHECK_FINITE = True
_BATCH_INVARIANT = False
_FLOP_COUNTERS: list[list[int]] = []


class KernelError(Exception):
    pass


class DimensionError(KernelError, ValueError):
    pass


class GraphError(KernelError, RuntimeError):
    pass


class NumericError(KernelError, FloatingPointError):
    pass


def set_default_dtype(dtype) -> None:
    """Switch the float width used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _CHECK_FINITE
    prev, _CHECK_FINITE = _CHECK_FINITE, enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


@contextlib.contextmanager
def batch_invariant(enabled: bool = True):
    """Fixed-order accumulation in matmul and softmax.

    BLAS picks kernels by matrix size, so a row's product can change in the
    last bit with the number of rows computed alongside it.  Inside this block
    every output is summed strictly left to right, making results independent
    of batch size and of trailing masked (zero-weight) entries.  Much slower;
    meant for verification.
    """
    global _BATCH_INVARIANT
    prev, _BATCH_INVARIANT = _BATCH_INVARIANT, enabled
    try:
        yield
    finally:
        _BATCH_INVARIANT = prev


@contextlib.contextmanager
def count_flops():
    """Count 2*m*n*k for every matmul executed inside the block.

    Yields a one-element list holding the running total.
    """
    counter = [0]
    _FLOP_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _FLOP_COUNTERS.remove(counter)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: tuple = (), _backward: Callable | None = None, op: str = ""):
        if isinstance(data, np.ndarray) and data.dtype == _DTYPE:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}{', ' + self.name if self.name else ''})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Trainable leaf; ``grad`` always exists and has the value's shape."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check(out: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check(data, op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if isinstance(t, Parameter):
        t.grad += g
    elif t.grad is None:
        # incoming arrays may be views; never written to in place
        t.grad = g
    else:
        t.grad = t.grad + g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / b.data ** 2, b.shape))

    return _make(out, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0).astype(x.data.dtype, copy=False)

    def backward(g):
        _accumulate(x, g * mask)

    return _make(out, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # exp of a non-positive argument only, so no overflow for large |z|
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _make(out, (x,), backward, "sigmoid")


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(out, (x,), backward, "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)

    def backward(g):
        _accumulate(x, g * inside)

    return _make(out, (x,), backward, "clip")


# -- reductions / shape ----------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g / n, x.shape))

    return _make(np.asarray(out), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _make(out, (x,), backward, "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(x, g[tuple(sl)])

    return _make(out, xs, backward, "concat")


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape)

    def backward(g):
        _accumulate(x, _unbroadcast(g, x.shape))

    return _make(np.ascontiguousarray(out), (x,), backward, "broadcast")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _make(np.asarray(out), (x,), backward, "getitem")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        flat = g.reshape(-1, table.shape[1])
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), flat)
        _accumulate(table, full)

    return _make(out, (table,), backward, "embedding")


# -- linear algebra ------------------------------------------------------------

def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # stacked matmul on strided views skips BLAS; 2-D transposes are fine
    if x.ndim > 2 and not x.flags.c_contiguous:
        x = np.ascontiguousarray(x)
    if y.ndim > 2 and not y.flags.c_contiguous:
        y = np.ascontiguousarray(y)
    if _BATCH_INVARIANT:
        return _mm_fixed_order(x, y)
    return np.matmul(x, y)


def _mm_fixed_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # out[..., i, j] accumulates x[..., i, k] * y[..., k, j] for k = 0, 1, ... in turn
    acc = x[..., :, :1] * y[..., :1, :]
    for k in range(1, x.shape[-1]):
        acc = acc + x[..., :, k:k + 1] * y[..., k:k + 1, :]
    return acc


def _row_sum(x: np.ndarray) -> np.ndarray:
    """Sum over the last axis, keepdims; left-to-right in batch-invariant mode."""
    if not _BATCH_INVARIANT:
        return x.sum(axis=-1, keepdims=True)
    acc = x[..., :1].copy()
    for j in range(1, x.shape[-1]):
        acc = acc + x[..., j:j + 1]
    return acc


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = _mm(a.data, b.data)
    if _FLOP_COUNTERS:
        flops = 2 * int(np.prod(out.shape)) * a.shape[-1]
        for c in _FLOP_COUNTERS:
            c[0] += flops

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(_mm(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(_mm(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), backward, "matmul")


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` is an optional additive array (0 for live entries, a large
    negative number for masked ones) broadcast against ``x``.
    """
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / _row_sum(e)

    def backward(g):
        dot = _row_sum(g * out)
        _accumulate(x, out * (g - dot))

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row of the last axis with population variance, then affine."""
    gain, bias = _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape[-1] != d or bias.shape[-1] != d:
        raise DimensionError(f"layer_norm affine shape {gain.shape}/{bias.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            gx_mean = gx.mean(axis=-1, keepdims=True)
            gxx_mean = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (gx - gx_mean - xhat * gxx_mean))

    return _make(out, (x, gain, bias), backward, "layer_norm")


# -- tape ----------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable Parameter's ``grad``."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise GraphError("backward needs a scalar Tensor")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any recorded computation")
    order = _topo(loss)
    # intermediate grads are scratch space for this pass only
    for node in order:
        if not isinstance(node, Parameter):
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if not isinstance(node, Parameter):
            node.grad = None


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# -- rng / init ----------------------------------------------------------------

class Rng:
    """Seeded stream; the same seed always yields the same draws."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def counter(self) -> int:
        return self._gen.bit_generator.state["state"]["state"]

    def uniform(self, low, high, size):
        return self._gen.uniform(low, high, size)

    def normal(self, loc, scale, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def child(self, key: int) -> "Rng":
        return Rng(np.random.SeedSequence([self.seed, int(key)]).generate_state(1, np.uint64)[0])

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def glorot(rng: Rng, shape: tuple[int, ...], name: str, fan_in: int | None = None,
           fan_out: int | None = None) -> Parameter:
    """Scaled-uniform init, limit sqrt(6 / (fan_in + fan_out)).

    Fans default to the last two axes, so a stack of matrices (h, in, out)
    gets the per-matrix limit.
    """
    fan_in = shape[-2] if fan_in is None else fan_in
    fan_out = shape[-1] if fan_out is None else fan_out
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-limit, limit, shape), name=name)


def zeros(shape, name: str) -> Parameter:
    return Parameter(np.zeros(shape), name=name)


def ones(shape, name: str) -> Parameter:
    return Parameter(np.ones(shape), name=name)


# -- gradient checking ---------------------------------------------------------

def numeric_grad(f: Callable[[], float], p: Parameter, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``p``."""
    g = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Max entrywise |a - n| / max(|a|, |n|, floor).

    The floor keeps entries whose true gradient is zero from dividing
    finite-difference round-off by round-off.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5,
               floor: float = 1e-7) -> dict[str, float]:
    """Compare tape gradients to central differences; returns max rel. error per param."""
    zero_grad(params)
    backward(loss_fn())
    analytic = {p.name or str(i): p.grad.copy() for i, p in enumerate(params)}
    errs = {}
    for i, p in enumerate(params):
        key = p.name or str(i)
        num = numeric_grad(lambda: loss_fn().item(), p, h)
        errs[key] = relative_error(analytic[key], num, floor)
    return errs


class Module:
    """Attribute-walking parameter container.

    Parameters and sub-modules assigned as attributes (or held in lists) are
    discovered by :meth:`named_parameters` in attribute order, which gives a
    stable naming used by checkpoints and the optimizer.
    """

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for key, val in vars(self).items():
            out.extend(_walk(val, f"{prefix}{key}"))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        zero_grad(self.parameters())

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))


def _walk(val, name: str):
    if isinstance(val, Parameter):
        return [(name, val)]
    if isinstance(val, Module):
        return val.named_parameters(prefix=name + ".")
    if isinstance(val, (list, tuple)):
        out = []
        for i, v in enumerate(val):
            out.extend(_walk(v, f"{name}.{i}"))
        return out
    if isinstance(val, dict):
        out = []
        for k, v in val.items():
            out.extend(_walk(v, f"{name}.{k}"))
        return out
    return []
