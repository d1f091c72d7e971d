"""Dense float64 tensors with a reverse-mode tape.

Every op in this module computes its forward value eagerly with numpy. When a
:class:`Tape` is active and at least one input is attached to it (or is a
``requires_grad`` leaf), the op appends a record holding the vector-Jacobian
product needed by :func:`backward`.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> backward(tape, y)[x.node_id]
    array([6.])
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "SeededRng", "DimensionError", "DomainError", "ContractError",
    "EvaluationError", "backward", "grad_check", "forward_op",
    "add", "sub", "mul", "div", "neg", "matmul", "outer", "transpose", "permute",
    "reshape", "flatten", "concat", "stack", "getitem", "sigmoid", "tanh", "relu",
    "log", "exp", "power", "sum", "mean", "l2norm", "clip", "xcorr2d", "apply_mask",
    "dropout", "identity", "as_tensor",
]


class DimensionError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


class DomainError(ValueError):
    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class ContractError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


class SeededRng:
    """Seeded PCG64 stream with deterministic child streams.

    ``split()`` derives an independent child from (seed, counter), so the same
    seed and call sequence give identical draws on every platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def split(self) -> "SeededRng":
        child = SeededRng.__new__(SeededRng)
        child.seed = self.seed
        child.counter = 0
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.counter,))
        self.counter += 1
        child.gen = np.random.Generator(np.random.PCG64(ss))
        return child

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def get_state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter,
                "bit_generator": self.gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        rng = cls(state["seed"])
        rng.counter = state["counter"]
        rng.gen.bit_generator.state = state["bit_generator"]
        return rng


class Tensor:
    """Row-major float64 array, optionally attached to a tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", node={self.node_id}" if self._tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t):
    raise ContractError(f"item() requires a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    kind: str
    inputs: tuple
    output: int
    vjp: Callable


@dataclass
class Tape:
    """Ordered op records; node ids are assigned in creation order."""

    records: list = field(default_factory=list)
    shapes: dict = field(default_factory=dict)
    leaves: dict = field(default_factory=dict)
    _next: int = 0

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def _new_id(self, t: Tensor) -> int:
        nid = self._next
        self._next += 1
        t.node_id = nid
        t._tape = self
        self.shapes[nid] = t.shape
        return nid

    def watch(self, t: Tensor) -> Tensor:
        if t._tape is not self:
            self._new_id(t)
            self.leaves[t.node_id] = t
        return t

    def attached(self, t: Tensor) -> bool:
        if t._tape is self:
            return True
        if t.requires_grad:
            self.watch(t)
            return True
        return False

    def grad(self, grads: dict, t: Tensor) -> np.ndarray:
        """Gradient of ``t`` from a map returned by :func:`backward`."""
        if t._tape is not self:
            return np.zeros(t.shape)
        return grads[t.node_id]


_TAPES: list[Tape] = []


def _active() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _record(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
    """Wrap ``out``; record ``vjp`` when any input lives on the active tape.

    ``vjp(g)`` returns one gradient (or None) per input.
    """
    res = Tensor(out)
    tape = _active()
    if tape is None:
        return res
    flags = [tape.attached(t) for t in inputs]
    if not any(flags):
        return res
    in_ids = tuple(t.node_id if f else None for t, f in zip(inputs, flags))
    tape._new_id(res)
    tape.records.append(Record(kind, in_ids, res.node_id, vjp))
    return res


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse sweep. Returns ``{node_id: dloss/dnode}`` for every node on ``tape``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape:
        raise ContractError("loss is not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output)
        if g is None:
            continue
        parts = rec.vjp(g)
        for nid, part in zip(rec.inputs, parts):
            if nid is None or part is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + part
            else:
                grads[nid] = part
    for nid, shape in tape.shapes.items():
        if nid not in grads:
            grads[nid] = np.zeros(shape)
    return grads


# ---------------------------------------------------------------- elementwise

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, [a.shape, b.shape]) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def apply_mask(a, mask) -> Tensor:
    """Multiply by a constant array; no gradient reaches ``mask``."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=np.float64)
    try:
        out = a.data * m
    except ValueError:
        raise DimensionError("apply_mask", [a.shape, m.shape]) from None
    return _record("apply_mask", (a,), out, lambda g: (_unbroadcast(g * m, a.shape),))


def dropout(a, p: float, rng: SeededRng | None, training: bool = True) -> Tensor:
    """Inverted dropout. Identity when not training or ``p == 0``."""
    if not training or p == 0.0:
        return as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    a = as_tensor(a)
    keep = (rng.random(a.shape) >= p).astype(np.float64) / (1.0 - p)
    return apply_mask(a, keep)


def identity(a) -> Tensor:
    """Copy onto a fresh tape node so its gradient can be read separately."""
    a = as_tensor(a)
    return _record("identity", (a,), a.data, lambda g: (g,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = (a.data > 0).astype(np.float64)
    return _record("relu", (a,), a.data * m, lambda g: (g * m,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log", "argument must be strictly positive")
    return _record("log", (a,), np.log(x), lambda g: (g / x,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data > 700):
        raise DomainError("exp", "argument above 700 overflows float64")
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if float(p) != int(p) and np.any(x < 0):
        raise DomainError("power", "non-integer exponent of a negative base")
    out = x ** p
    if p == 0:
        return _record("power", (a,), out, lambda g: (np.zeros_like(x),))
    return _record("power", (a,), out, lambda g: (g * p * x ** (p - 1),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    x = a.data
    inside = ((x >= lo) & (x <= hi)).astype(np.float64)
    return _record("clip", (a,), np.clip(x, lo, hi), lambda g: (g * inside,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", [a.shape, b.shape])
    ad, bd = a.data, b.data
    flat_b = bd.ndim == 2 and ad.ndim > 2
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise DimensionError("matmul", [a.shape, b.shape]) from None

    tape = _active()
    need_a = tape is not None and tape.attached(a)
    need_b = tape is not None and tape.attached(b)

    def vjp(g):
        ga = gb = None
        if need_a:
            if ad.ndim == 2 and bd.ndim > 2:
                # shared left operand: fold the batch axes into one GEMM
                ga = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1) @ \
                    np.swapaxes(bd, -1, -2).reshape(-1, bd.shape[-2])
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if need_b:
            if flat_b:
                # shared weight matrix: one (K, rows) @ (rows, N) product
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _record("matmul", (a, b), out, vjp)


def outer(a, b) -> Tensor:
    """Outer product over the last axis: (..., n) x (..., m) -> (..., n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError("outer", [a.shape, b.shape])
    ad, bd = a.data, b.data
    out = ad[..., :, None] * bd[..., None, :]
    return _record("outer", (a, b), out,
                   lambda g: ((g * bd[..., None, :]).sum(-1), (g * ad[..., :, None]).sum(-2)))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError("permute", [a.shape], f"bad axes {axes}")
    inv = tuple(np.argsort(axes))
    return _record("permute", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError("transpose", [a.shape])
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError("reshape", [a.shape, tuple(shape)]) from None
    src = a.shape
    return _record("reshape", (a,), out, lambda g: (g.reshape(src),))


def flatten(a, start_axis: int = 0) -> Tensor:
    a = as_tensor(a)
    start = start_axis % max(a.ndim, 1)
    return reshape(a, a.shape[:start] + (-1,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError("concat", [t.shape for t in ts]) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", ts, out, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError("stack", [t.shape for t in ts]) from None
    n = len(ts)
    return _record("stack", ts, out,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    src = a.shape
    basic = _is_basic(index)

    def vjp(g):
        full = np.zeros(src)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("getitem", (a,), np.array(out, dtype=np.float64), vjp)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(Ellipsis), type(None))) or
               isinstance(i, np.integer) for i in items)


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum", (a,), out, vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = math.prod(a.shape[ax] for ax in axes)
    return div(sum(a, axis, keepdims), float(n))


def l2norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the subgradient at zero is taken as zero."""
    a = as_tensor(a)
    x = a.data
    out = np.sqrt((x * x).sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        o, gg = out, g
        if axis is not None and not keepdims:
            o, gg = np.expand_dims(o, axis), np.expand_dims(g, axis)
        safe = np.where(o > 0, o, 1.0)
        return (np.where(o > 0, gg * x / safe, 0.0),)

    return _record("l2norm", (a,), out, vjp)


# ---------------------------------------------------------------- convolution

def xcorr2d(x, w, b=None) -> Tensor:
    """Valid-mode multi-channel 2-D cross-correlation.

    x: (B, C_in, H, T); w: (C_out, C_in, kh, kw); b: (C_out,).
    out[n, o, i, j] = sum_c sum_p sum_q w[o, c, p, q] * x[n, c, i + p, j + q] + b[o]
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise DimensionError("xcorr2d", [x.shape, w.shape])
    _, _, kh, kw = w.shape
    if x.shape[2] < kh or x.shape[3] < kw:
        raise DimensionError("xcorr2d", [x.shape, w.shape], "input smaller than kernel")
    xd, wd = x.data, w.data
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    out = np.einsum("ncijpq,ocpq->noij", win, wd, optimize=True)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError("xcorr2d", [w.shape, b.shape], "bias length")
        out = out + b.data[None, :, None, None]
        inputs.append(b)
    ho, wo = out.shape[2], out.shape[3]

    def vjp(g):
        gw = np.einsum("ncijpq,noij->ocpq", win, g, optimize=True)
        gx = np.zeros_like(xd)
        for p in range(kh):
            for q in range(kw):
                gx[:, :, p:p + ho, q:q + wo] += np.einsum("noij,oc->ncij", g, wd[:, :, p, q])
        parts = [gx, gw]
        if b is not None:
            parts.append(g.sum(axis=(0, 2, 3)))
        return tuple(parts)

    return _record("xcorr2d", inputs, out, vjp)


# ---------------------------------------------------------------- dispatch + checks

_CATALOG = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "matmul": matmul,
    "outer": outer, "transpose": transpose, "permute": permute, "reshape": reshape,
    "flatten": flatten, "concat": lambda *ts, axis=-1: concat(ts, axis),
    "stack": lambda *ts, axis=0: stack(ts, axis), "getitem": getitem,
    "sigmoid": sigmoid, "tanh": tanh, "relu": relu, "log": log, "exp": exp,
    "power": power, "sum": sum, "mean": mean, "l2norm": l2norm, "clip": clip,
    "xcorr2d": xcorr2d, "apply_mask": apply_mask, "dropout": dropout, "identity": identity,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Run a catalog op by name."""
    try:
        fn = _CATALOG[kind]
    except KeyError:
        raise ContractError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)


def glorot_uniform(rng: "SeededRng", fan_in: int, fan_out: int, shape) -> np.ndarray:
    """U(-r, r) with r = sqrt(6 / (fan_in + fan_out)); keeps tanh activations near unit scale."""
    r = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, shape)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per coordinate is ``|g_ad - g_fd| / max(1, |g_fd|)``.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    with Tape() as tape:
        xt = tape.watch(Tensor(x0))
        out = f(xt)
    val = out.data
    if not np.all(np.isfinite(val)):
        raise EvaluationError("f(x) is not finite")
    g_ad = backward(tape, out)[xt.node_id] if out._tape is tape else np.zeros_like(x0)

    flat = x0.reshape(-1)
    g_fd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x0)).data.item()
        flat[i] = orig - eps
        fm = f(Tensor(x0)).data.item()
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise EvaluationError(f"f is not finite near coordinate {i}")
        g_fd[i] = (fp - fm) / (2 * eps)
    err = np.abs(g_ad.reshape(-1) - g_fd) / np.maximum(1.0, np.abs(g_fd))
    return float(err.max()) if err.size else 0.0
