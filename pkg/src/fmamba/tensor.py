"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation wraps a numpy kernel and, when any operand
requires a gradient, records a :class:`Node` holding the closure that maps the
output cotangent to input cotangents.  :func:`backward` linearises the recorded
graph into a :class:`GradTape` (a topologically ordered node list) and sweeps it
once in reverse.

The default precision is float64 so that finite-difference checks can run at
tight tolerances; float32 can be selected with :func:`set_default_dtype`.
"""
from __future__ import annotations

import contextlib
import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

_state = {"dtype": np.dtype(np.float64), "grad_enabled": True, "checked": False}


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def default_dtype(dtype):
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


@contextlib.contextmanager
def checked_mode(enabled: bool = True):
    """Raise :class:`NonFiniteError` as soon as any op produces NaN/Inf."""
    old = _state["checked"]
    _state["checked"] = enabled
    try:
        yield
    finally:
        _state["checked"] = old


class Node:
    """One recorded primitive: its output, inputs and vector-Jacobian closure."""

    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.grad: Tensor | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.node = None
        t.grad = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm or None)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def backward(self) -> dict:
        """Populate ``.grad`` on every leaf that requires a gradient."""
        if self.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return {}
        tape = GradTape.record(self)
        grads = tape.backward(self)
        for leaf in tape.leaves():
            g = grads.get(id(leaf))
            if g is not None:
                leaf.grad = g if leaf.grad is None else Tensor._wrap(leaf.grad.data + g.data)
        return grads


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return Tensor._wrap(x, False)
    return Tensor(x, dtype=dtype)


def _operand(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _state["dtype"]))


def _make(arr: np.ndarray, inputs: tuple, vjp: Callable, op: str) -> Tensor:
    if _state["checked"] and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    rg = _state["grad_enabled"] and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, rg)
    if rg:
        out.node = Node(op, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# creation


def create(shape: Sequence[int], init: str = "zeros", *, seed: int | None = None,
           mean: float = 0.0, std: float = 1.0, low: float = 0.0, high: float = 1.0,
           requires_grad: bool = False, dtype=None) -> Tensor:
    """Build a tensor of ``shape`` filled according to ``init``.

    ``uniform`` draws from [low, high) with a PCG64 generator seeded by
    ``seed``.  ``normal`` uses the Box-Muller transform on pairs of those
    uniforms, so seeded draws are reproducible independently of numpy's own
    normal sampler.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: need at least one dimension, all >= 1")
    n = int(np.prod(shape))
    if init == "zeros":
        arr = np.zeros(n)
    elif init == "ones":
        arr = np.ones(n)
    elif init == "uniform":
        rng = np.random.Generator(np.random.PCG64(seed))
        arr = low + (high - low) * rng.random(n)
    elif init == "normal":
        arr = mean + std * box_muller(n, seed)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(arr.reshape(shape), requires_grad=requires_grad, dtype=dtype)


def box_muller(n: int, seed: int | None) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    m = (n + 1) // 2
    u1 = rng.random(m)
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log1p(-u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
    return z[:n]


def zeros_like(t: Tensor) -> Tensor:
    return Tensor._wrap(np.zeros_like(t.data))


def ones_like(t: Tensor) -> Tensor:
    return Tensor._wrap(np.ones_like(t.data))


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp, "div")


def maximum(a, b) -> Tensor:
    """Elementwise max; the gradient goes to ``a`` on ties."""
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    _check_broadcast(a, b, "max")
    ad, bd = a.data, b.data
    pick_a = ad >= bd

    def vjp(g):
        return (_unbroadcast(np.where(pick_a, g, 0.0), ad.shape),
                _unbroadcast(np.where(pick_a, 0.0, g), bd.shape))

    return _make(np.maximum(ad, bd), (a, b), vjp, "max")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for any input and one transcendental per element
    return 0.5 * np.tanh(0.5 * x) + 0.5


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid(ad)
    return _make(ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),), "silu")


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    return _make(out, (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    ad = a.data
    slope = np.where(ad > 0, 1.0, alpha).astype(ad.dtype)
    return _make(ad * slope, (a,), lambda g: (g * slope,), "leaky_relu")


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


_UNARY = {
    "sigmoid": sigmoid, "silu": silu, "exp": exp, "abs": abs, "neg": neg,
    "log": log, "sqrt": sqrt, "softplus": softplus, "relu": relu,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "max": maximum}


def elementwise(op: str, a, b=None, *, alpha: float = 0.2) -> Tensor:
    """Dispatch an elementwise op by name (``leaky_relu`` takes ``alpha``)."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    a = as_tensor(a)
    if op == "leaky_relu":
        return leaky_relu(a, alpha)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _expand(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce(op: str, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Reduce over ``axis`` (all axes by default) with sum/mean/max/l1_norm/l2_norm."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    ad, shape = a.data, a.shape
    if op == "sum":
        out = ad.sum(axis=axes, keepdims=keepdims)
        return _make(out, (a,), lambda g: (_expand(g, shape, axes, keepdims).copy(),), "sum")
    if op == "mean":
        count = int(np.prod([shape[i] for i in axes])) if axes else 1
        out = ad.mean(axis=axes, keepdims=keepdims)
        return _make(out, (a,),
                     lambda g: (_expand(g / count, shape, axes, keepdims).copy(),), "mean")
    if op == "max":
        out = ad.max(axis=axes, keepdims=True)
        mask = ad == out
        # ties share the gradient equally so the sum of routes stays exact
        mask = mask / mask.sum(axis=axes, keepdims=True)
        res = out if keepdims else np.squeeze(out, axis=axes)
        return _make(res, (a,), lambda g: (_expand(g, shape, axes, keepdims) * mask,), "max")
    if op == "l1_norm":
        return reduce("sum", abs(a), axis, keepdims)
    if op == "l2_norm":
        return sqrt(reduce("sum", a * a, axis, keepdims))
    raise ValueError(f"unknown reduction {op!r}")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", a, axis, keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", a, axis, keepdims)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` (leading axes of ``a`` are treated as batch)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), vjp, "matmul")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, perm: Sequence[int] | None = None) -> Tensor:
    perm = tuple(reversed(range(a.ndim))) if perm is None else tuple(perm)
    inv = tuple(np.argsort(perm))
    return _make(a.data.transpose(perm), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    perm = list(range(a.ndim))
    perm[i], perm[j] = perm[j], perm[i]
    return transpose(a, perm)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), vjp, "getitem")


def take(a: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather ``index`` along ``axis``; permutations get an exact inverse gather."""
    index = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim
    n = a.shape[axis]
    is_perm = index.ndim == 1 and index.size == n and np.array_equal(np.sort(index), np.arange(n))
    shape = a.shape

    def vjp(g):
        if is_perm:
            return (np.take(g, np.argsort(index), axis=axis),)
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (slice(None),) * axis + (index,), g)
        return (full,)

    return _make(np.take(a.data, index, axis=axis), (a,), vjp, "take")


def flip(a: Tensor, axis: int) -> Tensor:
    return _make(np.flip(a.data, axis), (a,), lambda g: (np.flip(g, axis),), "flip")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def pad(a: Tensor, widths: Sequence[tuple], mode: str = "constant") -> Tensor:
    """Pad with zeros (``constant``) or by replicating borders (``edge``)."""
    widths = [tuple(w) for w in widths]
    widths += [(0, 0)] * (a.ndim - len(widths))
    out = np.pad(a.data, widths, mode=mode)
    shape = a.shape
    inner = tuple(slice(lo, lo + s) for (lo, _), s in zip(widths, shape))

    def vjp(g):
        if mode == "constant":
            return (g[inner].copy(),)
        g = g.copy()
        for ax, (lo, hi) in enumerate(widths):
            if lo == 0 and hi == 0:
                continue
            n = g.shape[ax]
            head = [slice(None)] * g.ndim
            if lo:
                head[ax] = slice(0, lo)
                first = [slice(None)] * g.ndim
                first[ax] = slice(lo, lo + 1)
                g[tuple(first)] += g[tuple(head)].sum(axis=ax, keepdims=True)
            if hi:
                head[ax] = slice(n - hi, n)
                last = [slice(None)] * g.ndim
                last[ax] = slice(n - hi - 1, n - hi)
                g[tuple(last)] += g[tuple(head)].sum(axis=ax, keepdims=True)
            keep = [slice(None)] * g.ndim
            keep[ax] = slice(lo, n - hi)
            g = g[tuple(keep)]
        return (np.ascontiguousarray(g),)

    return _make(out, (a,), vjp, "pad")


# ---------------------------------------------------------------------------
# differentiation


class GradTape:
    """Topologically ordered record of the primitives behind one output.

    Inputs of each node precede it, so a single reverse sweep visits every
    node exactly once.
    """

    def __init__(self, order: list):
        self.order = order

    @classmethod
    def record(cls, output: Tensor) -> "GradTape":
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for inp in t.node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.order)

    def ops(self) -> list:
        """``(op, input ids, output id)`` triples in execution order."""
        return [(t.node.op, tuple(id(i) for i in t.node.inputs), id(t))
                for t in self.order if t.node is not None]

    def leaves(self) -> list:
        return [t for t in self.order if t.node is None]

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> dict:
        if seed is None:
            if output.size != 1:
                raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
            seed = np.ones_like(output.data)
        grads = {id(output): seed}
        for t in reversed(self.order):
            g = grads.get(id(t))
            if g is None or t.node is None:
                continue
            del grads[id(t)]
            in_grads = t.node.vjp(g)
            for inp, gi in zip(t.node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return {k: Tensor._wrap(np.asarray(v)) for k, v in grads.items()}


def backward(output: Tensor) -> dict:
    """Gradients of scalar ``output`` keyed by ``id`` of each leaf tensor."""
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return {}
    return GradTape.record(output).backward(output)


def gradients(output: Tensor, wrt: Iterable[Tensor]) -> list:
    """Gradients of ``output`` for each tensor in ``wrt``; zeros where untouched."""
    wrt = list(wrt)
    grads = backward(output)
    return [grads[id(t)] if id(t) in grads else zeros_like(t) for t in wrt]


# ---------------------------------------------------------------------------
# FMT1 binary format

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def write_fmt1(fh: BinaryIO, t) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in _CODE_OF:
        arr = arr.astype(np.float64)
    code = _CODE_OF[arr.dtype]
    fh.write(b"FMT1")
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def read_fmt1(fh: BinaryIO) -> Tensor:
    magic = fh.read(4)
    if magic != b"FMT1":
        raise ValueError(f"bad FMT1 magic {magic!r}")
    code, rank = struct.unpack("<BB", fh.read(2))
    if code not in _DTYPE_CODES:
        raise ValueError(f"unknown FMT1 dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    dt = _DTYPE_CODES[code]
    n = int(np.prod(dims)) if rank else 1
    buf = fh.read(n * dt.itemsize)
    if len(buf) != n * dt.itemsize:
        raise ValueError("truncated FMT1 payload")
    arr = np.frombuffer(buf, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return Tensor._wrap(arr)


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        write_fmt1(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_fmt1(fh)
