"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` appends a node to the
thread-local tape. Creation order is already a topological order, so
``backward`` simply replays the tape in reverse and then frees it.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_from_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(n <= 0 for n in arr.shape):
            raise DimensionError(f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node = None
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        current_graph().backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph


@dataclass(eq=False)
class Node:
    op: str
    out: Tensor
    parents: tuple
    backward: Callable[[np.ndarray], Sequence]


@dataclass
class Graph:
    """Ordered record of ops since the last reset (one per thread)."""

    nodes: list = field(default_factory=list)
    enabled: bool = True

    def record(self, op: str, out: Tensor, parents: tuple, backward) -> None:
        node = Node(op, out, parents, backward)
        out._node = node
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        if root._node is None:
            if root._from_op:
                raise GraphError("graph for this tensor was already consumed by backward(); rebuild it")
            raise GraphError("backward() called on a tensor that is not the output of a recorded op")
        if seed is None:
            if root.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar root, got {root.shape}")
            seed = np.ones_like(root.data)
        grads = {id(root): seed}
        try:
            for node in reversed(self.nodes):
                g = grads.pop(id(node.out), None)
                if g is None:
                    continue
                for parent, pg in zip(node.parents, node.backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if parent._node is not None:
                        key = id(parent)
                        if key in grads:
                            grads[key] = grads[key] + pg
                        else:
                            grads[key] = pg
                    else:
                        parent.grad += pg
        finally:
            self.reset()


_local = threading.local()


def current_graph() -> Graph:
    g = getattr(_local, "graph", None)
    if g is None:
        g = _local.graph = Graph()
    return g


@contextlib.contextmanager
def no_grad():
    g = current_graph()
    prev = g.enabled
    g.enabled = False
    try:
        yield
    finally:
        g.enabled = prev


def _make(op: str, data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out._node = None
    g = current_graph()
    needs = g.enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.grad = None
    out._from_op = needs
    if needs:
        g.record(op, out, parents, backward)
    return out


# ---------------------------------------------------------------------------
# broadcasting: identical shapes, scalar with tensor, or row-vector bias


def _bcast_kind(a: np.ndarray, b: np.ndarray, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.ndim <= a.ndim:
        return "b_scalar"
    if a.size == 1 and a.ndim <= b.ndim:
        return "a_scalar"
    if a.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        return "b_row"
    if b.ndim == 2 and a.shape in ((b.shape[1],), (1, b.shape[1])):
        return "a_row"
    raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    return g.sum(axis=0).reshape(shape)


def _binary(op, a, b, fwd, da, db):
    a, b = as_tensor(a), as_tensor(b)
    _bcast_kind(a.data, b.data, op)
    out = fwd(a.data, b.data)

    def backward(g):
        ga = _reduce_to(da(g, a.data, b.data, out), a.shape) if a.requires_grad else None
        gb = _reduce_to(db(g, a.data, b.data, out), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(op, out, (a, b), backward)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    b_t = as_tensor(b)
    if np.any(b_t.data == 0):
        raise DomainError("div: division by zero")
    return _binary("div", a, b_t, np.divide, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y)


# ---------------------------------------------------------------------------
# unary elementwise


def _unary(op, t, fwd, dfn):
    t = as_tensor(t)
    out = fwd(t.data)
    return _make(op, out, (t,), lambda g: (dfn(g, t.data, out),))


def neg(t) -> Tensor:
    return _unary("negate", t, np.negative, lambda g, x, o: -g)


def scale(t, c: float) -> Tensor:
    c = float(c)
    return _unary("scale", t, lambda x: x * c, lambda g, x, o: g * c)


def tanh(t) -> Tensor:
    return _unary("tanh", t, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(t) -> Tensor:
    return _unary("sigmoid", t, _sigmoid, lambda g, x, o: g * o * (1.0 - o))


def exp(t) -> Tensor:
    return _unary("exp", t, np.exp, lambda g, x, o: g * o)


def log(t) -> Tensor:
    t = as_tensor(t)
    if np.any(t.data <= 0):
        raise DomainError("log: input must be strictly positive")
    return _unary("log", t, np.log, lambda g, x, o: g / x)


def softplus(t) -> Tensor:
    return _unary("softplus", t, lambda x: np.logaddexp(0.0, x), lambda g, x, o: g * _sigmoid(x))


def sqrt(t) -> Tensor:
    t = as_tensor(t)
    if np.any(t.data < 0):
        raise DomainError("sqrt: input must be non-negative")
    return _unary("sqrt", t, np.sqrt, lambda g, x, o: g * 0.5 / o)


def square(t) -> Tensor:
    return _unary("square", t, np.square, lambda g, x, o: g * 2.0 * x)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make("matmul", out, (a, b), backward)


def transpose(t) -> Tensor:
    t = as_tensor(t)
    if t.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {t.shape}")
    return _make("transpose", t.data.T.copy(), (t,), lambda g: (g.T,))


def _check_axis(t: Tensor, axis, op: str):
    if axis is None:
        return
    if not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for shape {t.shape}")


def sum(t, axis: int | None = None) -> Tensor:  # noqa: A001
    t = as_tensor(t)
    _check_axis(t, axis, "sum")
    out = np.asarray(t.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, t.shape).copy(),)

    return _make("sum", out, (t,), backward)


def mean(t, axis: int | None = None) -> Tensor:
    t = as_tensor(t)
    _check_axis(t, axis, "mean")
    n = t.data.size if axis is None else t.shape[axis]
    return scale(sum(t, axis), 1.0 / n)


def logsumexp(t, axis: int | None = None) -> Tensor:
    t = as_tensor(t)
    _check_axis(t, axis, "logsumexp")
    m = np.max(t.data, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        m = np.where(np.isfinite(m), m, 0.0)
    shifted = np.exp(t.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out_keep = m + np.log(s)
    out = np.asarray(out_keep.reshape(()) if axis is None else np.squeeze(out_keep, axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * (shifted / s),)

    return _make("logsumexp", out, (t,), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(t, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    out = t.data.reshape(shape)
    return _make("reshape", out, (t,), lambda g: (g.reshape(t.shape),))


def concat(ts: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    if not ts:
        raise DimensionError("concat: empty tensor list")
    ref = ts[0]
    ax = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make("concat", out, tuple(ts), backward)


def slice(t, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    t = as_tensor(t)
    _check_axis(t, axis, "slice")
    ax = axis % t.ndim
    n = t.shape[ax]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"slice: range [{start}, {stop}) out of bounds for extent {n}")
    idx = [np.s_[:]] * t.ndim
    idx[ax] = np.s_[start:stop]
    idx = tuple(idx)
    out = t.data[idx].copy()

    def backward(g):
        full = np.zeros_like(t.data)
        full[idx] = g
        return (full,)

    return _make("slice", out, (t,), backward)


def select(t, axis: int, index: int) -> Tensor:
    """Slice of width one with that axis dropped."""
    t = as_tensor(t)
    _check_axis(t, axis, "select")
    ax = axis % t.ndim
    s = slice(t, ax, index, index + 1)
    return reshape(s, t.shape[:ax] + t.shape[ax + 1:])


def repeat(t, n: int, axis: int = 1) -> Tensor:
    """Insert a new axis of extent ``n`` by copying ``t`` along it."""
    t = as_tensor(t)
    out = np.repeat(np.expand_dims(t.data, axis), n, axis=axis)
    return _make("repeat", out, (t,), lambda g: (g.sum(axis=axis),))


def take_rows(t, idx) -> Tensor:
    t = as_tensor(t)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        raise DimensionError(f"take_rows: index out of range for {t.shape[0]} rows")
    out = t.data[idx]

    def backward(g):
        full = np.zeros_like(t.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("take_rows", out, (t,), backward)


def pick(t, cols) -> Tensor:
    """Row-wise gather: out[b] = t[b, cols[b]]."""
    t = as_tensor(t)
    cols = np.asarray(cols, dtype=np.intp)
    if t.ndim != 2 or cols.shape != (t.shape[0],):
        raise DimensionError(f"pick: need a matrix and one column per row, got {t.shape} and {cols.shape}")
    if cols.min() < 0 or cols.max() >= t.shape[1]:
        raise DimensionError(f"pick: column index out of range for {t.shape[1]} columns")
    rows = np.arange(t.shape[0])
    out = t.data[rows, cols]

    def backward(g):
        full = np.zeros_like(t.data)
        full[rows, cols] = g
        return (full,)

    return _make("pick", out, (t,), backward)


# ---------------------------------------------------------------------------
# fused LSTM layer


def lstm(x, W, U, b) -> Tensor:
    """Run one LSTM layer over a batch of sequences from a zero state.

    x: (B, T, n_in); W: (n_in, 4H); U: (H, 4H); b: (4H,). Gate order is
    input, forget, cell, output. Returns hidden states for every step,
    shape (B, T, H). The adjoint is hand-written BPTT.
    """
    x, W, U, b = (as_tensor(v) for v in (x, W, U, b))
    if x.ndim != 3 or W.ndim != 2 or x.shape[2] != W.shape[0]:
        raise DimensionError(f"lstm: input {x.shape} does not match W {W.shape}")
    H = U.shape[0]
    if W.shape[1] != 4 * H or U.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise DimensionError(f"lstm: bad gate shapes W {W.shape}, U {U.shape}, b {b.shape}")
    B, T, n_in = x.shape
    # sigmoid(z) = 0.5 + 0.5 * tanh(z / 2): one tanh serves all four gates
    pre = np.full(4 * H, 0.5)
    pre[2 * H:3 * H] = 1.0
    post_a = pre
    post_c = np.full(4 * H, 0.5)
    post_c[2 * H:3 * H] = 0.0
    d_k = np.full(4 * H, 0.25)
    d_k[2 * H:3 * H] = 1.0

    xp = (x.data.reshape(B * T, n_in) @ W.data + b.data).reshape(B, T, 4 * H)
    hs = np.zeros((B, T + 1, H))
    cs = np.zeros((B, T + 1, H))
    gates = np.empty((B, T, 4 * H))
    deriv = np.empty((B, T, 4 * H))
    tanh_c = np.empty((B, T, H))
    Ud = U.data
    for t in range(T):
        th = np.tanh((xp[:, t] + hs[:, t] @ Ud) * pre)
        gt = th * post_a + post_c
        gates[:, t] = gt
        deriv[:, t] = d_k * (1.0 - th * th)
        c = gt[:, H:2 * H] * cs[:, t] + gt[:, :H] * gt[:, 2 * H:3 * H]
        cs[:, t + 1] = c
        tc = np.tanh(c)
        tanh_c[:, t] = tc
        hs[:, t + 1] = gt[:, 3 * H:] * tc
    out = hs[:, 1:].copy()

    def backward(g):
        dgate = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        UdT = Ud.T
        for t in reversed(range(T)):
            gt = gates[:, t]
            tc = tanh_c[:, t]
            dh = g[:, t] + dh_next
            dc = dc_next + dh * gt[:, 3 * H:] * (1.0 - tc * tc)
            dg = dgate[:, t]
            dg[:, :H] = dc * gt[:, 2 * H:3 * H]
            dg[:, H:2 * H] = dc * cs[:, t]
            dg[:, 2 * H:3 * H] = dc * gt[:, :H]
            dg[:, 3 * H:] = dh * tc
            dg *= deriv[:, t]
            dc_next = dc * gt[:, H:2 * H]
            dh_next = dg @ UdT
        dz_flat = dgate.reshape(B * T, 4 * H)
        dx = (dz_flat @ W.data.T).reshape(B, T, n_in) if x.requires_grad else None
        dW = x.data.reshape(B * T, n_in).T @ dz_flat if W.requires_grad else None
        dU = hs[:, :T].reshape(B * T, H).T @ dz_flat if U.requires_grad else None
        db = dz_flat.sum(axis=0) if b.requires_grad else None
        return dx, dW, dU, db

    return _make("lstm", out, (x, W, U, b), backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list
    worst: tuple | None
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def first_nonfinite_op(graph: Graph | None = None) -> str | None:
    graph = graph or current_graph()
    for node in graph.nodes:
        if not np.all(np.isfinite(node.out.data)):
            return node.op
    return None


def gradient_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-4,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` against central differences.

    Relative error per element is |a - n| / max(|a|, |n|, floor); the floor
    keeps elements whose true gradient is ~0 from dominating the report.
    """
    inputs = list(inputs)
    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    graph = current_graph()
    graph.reset()
    try:
        out = f(*inputs)
        if out.data.size != 1:
            raise DimensionError(f"gradient_check: f must return a scalar, got shape {out.shape}")
        if not np.all(np.isfinite(out.data)):
            op = first_nonfinite_op(graph)
            graph.reset()
            raise NonFiniteError(f"non-finite value produced by op '{op}'")
        out.backward()
        analytic = [t.grad.copy() for t in inputs]

        per_input = []
        worst = None
        max_err = 0.0
        with no_grad():
            for k, t in enumerate(inputs):
                flat = t.data.reshape(-1)
                a_flat = analytic[k].reshape(-1)
                errs = np.empty(flat.size)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = float(f(*inputs).data)
                    flat[i] = orig - step
                    fm = float(f(*inputs).data)
                    flat[i] = orig
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        raise NonFiniteError(f"non-finite value perturbing input {k} element {i}")
                    num = (fp - fm) / (2.0 * step)
                    errs[i] = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), floor)
                e = float(errs.max())
                per_input.append(e)
                if e > max_err or worst is None:
                    max_err = max(max_err, e)
                    worst = (k, int(errs.argmax()))
        return GradCheckReport(max_err, per_input, worst, tolerance)
    finally:
        for t, (rg, g) in zip(inputs, saved):
            t.requires_grad = rg
            t.grad = g


# ---------------------------------------------------------------------------
# TNSR serialization

MAGIC = b"TNSR"
VERSION = 1


def to_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if arr.ndim > 255:
        raise DimensionError("rank exceeds 255")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor starting at ``offset``; returns it and the end offset."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError("not a TNSR record (bad magic)")
    version, rank = struct.unpack_from("<BB", buf, offset + 4)
    if version != VERSION:
        raise ValueError(f"unsupported TNSR version {version}")
    pos = offset + 6
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    n = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
    return Tensor(data), pos + 8 * n


def save(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(t))


def load(path) -> Tensor:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())[0]

