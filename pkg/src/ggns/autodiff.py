"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Everything is float64 and backed by numpy. Operations executed while a
:class:`Tape` is active (and touching at least one tensor that requires a
gradient) are appended to that tape; :meth:`Tape.gradient` then walks the tape
backwards. Tapes are thread-local, so independent evaluations may run on
separate threads.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = mse_loss(matmul(x, w), y)
    (gw,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64
DEFAULT_SLOPE = 0.01

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        if other.data.ndim == 1 and self.data.ndim == 2:
            return add_bias(self, other)
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended in execution order, which is a topological order of the
    computation, so a single reverse sweep suffices.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        assert stack and stack[-1] is self, "tapes must be exited in LIFO order"
        stack.pop()

    def record(self, op, inputs, output, backward) -> None:
        self.nodes.append(TapeNode(op, tuple(inputs), output, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradient of a scalar ``target`` with respect to each of ``sources``.

        Sources that do not influence the target get a zero gradient.
        """
        if target.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]

    def backward(self, target: Tensor, params: Sequence[Tensor]) -> None:
        """Like :meth:`gradient` but stores the results in ``param.grad``."""
        for p, g in zip(params, self.gradient(target, params)):
            p.grad = g


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    stack = _stack()
    if needs and stack:
        stack[-1].record(op, inputs, out, backward)
    return out


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.data.ndim == 2 and b.data.ndim == 2, "matmul expects 2-d operands")
    _check(a.shape[1] == b.shape[0], f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", (a, b), A @ B, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"mul shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias addition, the only broadcast supported."""
    _check(x.data.ndim == 2 and b.data.ndim == 1, "add_bias expects (n, d) + (d,)")
    _check(x.shape[1] == b.shape[0], f"bias width {b.shape[0]} != {x.shape[1]}")
    return _emit("add_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=0)))


def leaky_relu(x: Tensor, negative_slope: float = DEFAULT_SLOPE) -> Tensor:
    X = x.data
    pos = X > 0
    out = np.where(pos, X, negative_slope * X)

    def backward(g):
        return (np.where(pos, g, negative_slope * g),)

    return _emit("leaky_relu", (x,), out, backward)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    _check(len(tensors) > 0, "concat_cols needs at least one tensor")
    rows = tensors[0].shape[0]
    for t in tensors:
        _check(t.data.ndim == 2 and t.shape[0] == rows, "concat_cols row counts differ")
    widths = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(widths))]

    return _emit("concat_cols", tuple(tensors), np.concatenate([t.data for t in tensors], axis=1), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.shape[0]

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    _check(0 <= start <= stop <= n, f"row slice [{start}:{stop}] outside {n} rows")
    return _emit("slice_rows", (x,), x.data[start:stop].copy(), backward)


class RowIndex:
    """Integer row index with its summing matrix and group counts cached.

    Passing the same ``RowIndex`` to several gathers and scatters avoids
    rebuilding the sparse summing matrix for each of them.
    """

    def __init__(self, index, size: int):
        self.idx = _index_array(index, size)
        self.size = int(size)
        self._summing = None
        self._counts = None

    def __len__(self) -> int:
        return self.idx.size

    @property
    def summing(self) -> sp.csr_matrix:
        if self._summing is None:
            self._summing = _summing_matrix(self.idx, self.size)
        return self._summing

    @property
    def counts(self) -> np.ndarray:
        if self._counts is None:
            self._counts = np.bincount(self.idx, minlength=self.size).astype(DTYPE)
        return self._counts


def _index_array(index, bound: int) -> np.ndarray:
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise IndexError(f"index out of range for size {bound}")
    return idx


def _as_row_index(index, size: int) -> RowIndex:
    if isinstance(index, RowIndex):
        if index.size != size:
            raise ShapeError(f"row index built for size {index.size}, used with {size}")
        return index
    return RowIndex(index, size)


def _summing_matrix(index: np.ndarray, out_size: int) -> sp.csr_matrix:
    # CSR rows hold their column ids in ascending order, so each row sum visits
    # contributors in edge order; that keeps the reduction bitwise reproducible.
    n = index.size
    return sp.csr_matrix(
        (np.ones(n, dtype=DTYPE), (index, np.arange(n))), shape=(out_size, n)
    )


def gather_rows(src: Tensor, index) -> Tensor:
    """``src[index]``; ``index`` may be a :class:`RowIndex` sized to ``src``."""
    _check(src.data.ndim == 2, "gather_rows expects a 2-d source")
    ri = _as_row_index(index, src.shape[0])

    def backward(g):
        return (ri.summing @ g,)

    return _emit("gather_rows", (src,), src.data[ri.idx], backward)


def scatter_mean(src: Tensor, index, out_size: int) -> Tensor:
    """Mean of ``src`` rows grouped by ``index``; rows without contributors are zero."""
    _check(src.data.ndim == 2, "scatter_mean expects a 2-d source")
    ri = _as_row_index(index, out_size)
    idx = ri.idx
    _check(idx.size == src.shape[0], "scatter_mean index length must equal row count")
    counts = ri.counts
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    sums = ri.summing @ src.data
    out = sums / np.maximum(counts, 1.0)[:, None]

    def backward(g):
        return ((g * inv[:, None])[idx],)

    return _emit("scatter_mean", (src,), out, backward)


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full_like(x.data, g),))


def mse_loss(pred: Tensor, target: Tensor | np.ndarray, rows=None) -> Tensor:
    """Mean of squared componentwise differences, optionally over selected rows."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    _check(pred.shape == tgt.shape, f"mse_loss shape mismatch: {pred.shape} vs {tgt.shape}")
    P = pred.data
    if rows is None:
        mask = np.ones(P.shape[0], dtype=bool)
    else:
        mask = np.zeros(P.shape[0], dtype=bool)
        mask[_index_array(rows, P.shape[0])] = True
    diff = np.where(mask.reshape((-1,) + (1,) * (P.ndim - 1)), P - tgt, 0.0)
    count = int(mask.sum()) * int(np.prod(P.shape[1:], dtype=np.int64))
    if count == 0:
        raise ShapeError("mse_loss over zero elements")
    value = np.asarray((diff * diff).sum() / count)

    def backward(g):
        gp = g * 2.0 * diff / count
        return (gp, -gp)

    inputs = (pred, target) if isinstance(target, Tensor) else (pred,)
    return _emit("mse_loss", inputs, value, backward)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kwargs,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state must align")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        _check(p.shape == g.shape == m.shape, f"adam shape mismatch for {p.name or p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# checkpoint format:
#   magic(8) | u32 version | u64 manifest_len | manifest JSON (utf-8) | buffers
# Buffers are little-endian f64, concatenated in manifest order.

CHECKPOINT_MAGIC = b"GGNSCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    manifest = {
        "tensors": [{"name": k, "shape": list(np.shape(a))} for k, a in arrays.items()],
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 8 + struct.calcsize("<IQ")
    manifest = json.loads(raw[offset : offset + mlen])
    offset += mlen
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(DTYPE)
        offset += 8 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after last buffer")
    return arrays, manifest["meta"]
