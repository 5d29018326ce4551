"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable op records its parents and a backward rule on the
output tensor. ``backward`` linearizes the recorded graph into a
:class:`Tape`, walks it in reverse once, writes gradients into the leaves,
and then releases the graph. A consumed graph cannot be differentiated a
second time.

Broadcasting is deliberately narrow: operands must share a shape, or one of
them must hold a single element. Layers that need a row-vector bias use the
fused :func:`linear` and :func:`batch_norm` ops instead.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "no_grad",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "exp",
    "log",
    "clip",
    "sigmoid",
    "minimum",
    "elementwise",
    "reshape",
    "sum",
    "mean",
    "linear",
    "take_rows",
    "pick",
    "concat_cols",
    "spmm",
    "segment_reduce",
    "softmax_rows",
    "log_softmax_rows",
    "batch_norm",
    "backward",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; ops return constants."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return mul(self, 1.0 / float(other))

    def sum(self) -> Tensor:
        return sum(self)

    def mean(self) -> Tensor:
        return mean(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum())


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    return _result(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    return _result(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    return _result(
        out,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
        "mul",
    )


def neg(a) -> Tensor:
    a = _wrap(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    # np.maximum propagates NaN so that divergence stays visible downstream
    return _result(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero wherever the clamp is active."""
    a = _wrap(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def minimum(a, b) -> Tensor:
    """Elementwise min of equal-shape tensors; ties route the gradient to ``a``."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"minimum: incompatible shapes {a.shape} and {b.shape}")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return _result(out, (a, b), lambda g: (g * take_a, g * ~take_a), "minimum")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "relu": relu,
    "exp": exp,
    "log": log,
    "clip": clip,
    "sigmoid": sigmoid,
    "minimum": minimum,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# --- reductions and linear algebra ------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def sum(a) -> Tensor:  # noqa: A001
    a = _wrap(a)
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a) -> Tensor:
    a = _wrap(a)
    n = a.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return _result(np.array(a.data.sum() / n), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data
    return _result(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``bias`` shared by every row."""
    x, weight = _wrap(x), _wrap(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    out = x.data @ weight.data
    if bias is None:
        return _result(out, (x, weight), lambda g: (g @ weight.data.T, x.data.T @ g), "linear")
    bias = _wrap(bias)
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape}")
    out = out + bias.data
    return _result(
        out,
        (x, weight, bias),
        lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)),
        "linear",
    )


def _gather_matrix(index: np.ndarray, num_rows: int) -> sp.csr_matrix:
    cols = np.arange(len(index))
    return sp.csr_matrix((np.ones(len(index)), (index, cols)), shape=(num_rows, len(index)))


def take_rows(x, index) -> Tensor:
    """Rows ``x[index]``; repeated indices accumulate gradient."""
    x = _wrap(x)
    index = np.asarray(index, dtype=np.int64)
    out = x.data[index]

    def backward_fn(g):
        return (_gather_matrix(index, x.shape[0]) @ g,)

    return _result(out, (x,), backward_fn, "take_rows")


def pick(x, index) -> Tensor:
    """Per-row element ``x[i, index[i]]`` as a vector."""
    x = _wrap(x)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        grad[rows, index] = g
        return (grad,)

    return _result(out, (x,), backward_fn, "pick")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols: shapes {[p.shape for p in parts]}")
    widths = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def backward_fn(g):
        return tuple(g[:, widths[i] : widths[i + 1]] for i in range(len(parts)))

    return _result(out, parts, backward_fn, "concat_cols")


def spmm(matrix: sp.spmatrix, x) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor."""
    x = _wrap(x)
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: cannot multiply {matrix.shape} by {x.shape}")
    out = np.asarray(matrix @ x.data)
    return _result(out, (x,), lambda g: (np.asarray(matrix.T @ g),), "spmm")


def _canonical_segment_sum(values: np.ndarray, segments: np.ndarray, num_segments: int) -> np.ndarray:
    # Summation order fixed by (segment, value) so that any row permutation
    # gives a bitwise-identical result.
    n, d = values.shape
    out = np.zeros((num_segments, d))
    if n == 0:
        return out
    for j in range(d):
        order = np.lexsort((values[:, j], segments))
        seg_sorted = segments[order]
        starts = np.flatnonzero(np.r_[True, seg_sorted[1:] != seg_sorted[:-1]])
        out[seg_sorted[starts], j] = np.add.reduceat(values[order, j], starts)
    return out


def segment_reduce(values, segments, mode: str, num_segments: int) -> Tensor:
    """Reduce rows of ``values`` that share a segment id.

    Empty segments produce zero rows. ``max`` routes gradient to the first
    row attaining the maximum.
    """
    values = _wrap(values)
    segments = np.asarray(segments, dtype=np.int64)
    if values.data.ndim != 2 or len(segments) != values.shape[0]:
        raise ShapeError(f"segment_reduce: {len(segments)} segment ids for values of shape {values.shape}")
    if len(segments) and (segments.min() < 0 or segments.max() >= num_segments):
        raise IndexError(f"segment id out of range [0, {num_segments})")
    n, d = values.shape

    if mode in ("sum", "mean"):
        out = _canonical_segment_sum(values.data, segments, num_segments)
        if mode == "sum":
            return _result(out, (values,), lambda g: (g[segments],), "segment_sum")
        counts = np.bincount(segments, minlength=num_segments).astype(np.float64)
        safe = np.maximum(counts, 1.0)[:, None]
        out = out / safe
        return _result(out, (values,), lambda g: ((g / safe)[segments],), "segment_mean")

    if mode == "max":
        out = np.zeros((num_segments, d))
        argmax = np.full((num_segments, d), -1, dtype=np.int64)
        rows = np.arange(n)
        for j in range(d):
            order = np.lexsort((rows, -values.data[:, j], segments))
            seg_sorted = segments[order]
            first = np.flatnonzero(np.r_[True, seg_sorted[1:] != seg_sorted[:-1]]) if n else []
            winners = order[first]
            out[segments[winners], j] = values.data[winners, j]
            argmax[segments[winners], j] = winners

        def backward_fn(g):
            grad = np.zeros_like(values.data)
            seg_idx, col = np.nonzero(argmax >= 0)
            grad[argmax[seg_idx, col], col] += g[seg_idx, col]
            return (grad,)

        return _result(out, (values,), backward_fn, "segment_max")

    raise ValueError(f"unknown segment reduction {mode!r}")


def softmax_rows(x) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result(out, (x,), backward_fn, "softmax_rows")


def log_softmax_rows(x) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward_fn(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _result(out, (x,), backward_fn, "log_softmax_rows")


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-column normalization.

    In training mode the batch statistics are used and the running buffers
    are updated in place as ``momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    n = x.shape[0]
    if training and n > 1:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * n / (n - 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = xhat * gamma.data + beta.data

        def backward_fn(g):
            gx = g * gamma.data
            dx = inv / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

        return _result(out, (x, gamma, beta), backward_fn, "batch_norm")

    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * inv
    out = xhat * gamma.data + beta.data

    def eval_backward(g):
        return g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(out, (x, gamma, beta), eval_backward, "batch_norm_eval")


# --- backward ---------------------------------------------------------------


@dataclass
class Tape:
    """Recorded ops of one forward pass in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor, inputs: Iterable[Tensor] = ()) -> Tape:
    """Populate ``.grad`` of every leaf reachable from ``loss``.

    Leaves listed in ``inputs`` that the loss does not depend on receive a
    zero gradient. The recorded graph is released afterwards; calling
    ``backward`` on it again raises ``RuntimeError``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward called twice on the same recorded graph")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if g is not None else np.zeros_like(node.data)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg.reshape(parent.shape) if prev is None else prev + pg.reshape(parent.shape)
    for node in tape.nodes:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._consumed = True
    loss._consumed = True
    reached = {id(n) for n in tape.nodes}
    for leaf in inputs:
        if id(leaf) not in reached:
            leaf.grad = np.zeros_like(leaf.data)
    return tape


# --- optimizer --------------------------------------------------------------


class Adam:
    """Adaptive-moment gradient descent over groups of leaf tensors.

    Each group carries a learning-rate multiplier applied on top of ``lr``.
    Parameters whose ``grad`` is None are skipped for that step.
    """

    def __init__(
        self,
        groups: Sequence[tuple[Sequence[Tensor], float]] | Sequence[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if groups and isinstance(groups[0], Tensor):
            groups = [(list(groups), 1.0)]
        self.groups = [(list(params), float(scale)) for params, scale in groups]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def parameters(self) -> list[Tensor]:
        return [p for params, _ in self.groups for p in params]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for params, scale in self.groups:
            lr = self.lr * scale
            for p in params:
                if p.grad is None:
                    continue
                m = self._m.setdefault(id(p), np.zeros_like(p.data))
                v = self._v.setdefault(id(p), np.zeros_like(p.data))
                m *= b1
                m += (1 - b1) * p.grad
                v *= b2
                v += (1 - b2) * p.grad**2
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- checkpoint -------------------------------------------------------------

MAGIC = b"CORESCKPT"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], header: dict[str, str] | None = None) -> None:
    """Write named arrays as a portable little-endian binary file.

    Layout: magic, u32 version, u32 header length, header text
    (``key=value`` lines, sorted), u32 record count, then per record
    u32 name length, name bytes, u32 rank, u32 dims, f64 payload.
    """
    header_text = "".join(f"{k}={v}\n" for k, v in sorted((header or {}).items()))
    hb = header_text.encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(hb)), hb, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<II", raw, pos)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    header = {}
    for line in raw[pos : pos + hlen].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    return header, arrays
