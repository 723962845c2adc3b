"""Dense tensors with reverse-mode automatic differentiation.

Every trainable piece of the pipeline (encoders, relation heads, GAT,
classifier) runs on these tensors, so one backward() call from the scalar
loss reaches all parameters. Single tape per training run; tensors are
immutable once recorded.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32
LAYERNORM_EPS = 1e-5
LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Row-major float array plus optional gradient buffer.

    Leaves created with requires_grad=True get a zero grad buffer up front,
    so parameters untouched by a given loss still report zero gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_op")

    def __init__(self, data, requires_grad=False, dtype=None, name=None,
                 _parents=(), _op="leaf"):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if (requires_grad and not _parents) else None
        self.name = name
        self._parents = _parents
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data, _op="detach")

    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad of every reachable tensor.

        Gradients add onto existing buffers: two backward passes without
        re-running the forward yield exactly twice the single-pass gradient.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar loss, got shape {self.shape}")
        topo = _toposort(self)
        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.array(g, copy=True)
                else:
                    node.grad = node.grad + g
            for parent, vjp in node._parents:
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                pid = id(parent)
                if pid in flowing:
                    flowing[pid] = flowing[pid] + pg
                else:
                    flowing[pid] = pg

    # --- operator sugar -------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        tag = self.name or self._op
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if isinstance(like, Tensor) else None
    return Tensor(np.asarray(x), dtype=dtype, _op="const")


def _result(data, parents, op):
    """Wrap an op output, keeping tape edges only when recording."""
    if _grad_enabled and any(p.requires_grad for p, _ in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- primitives ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    out = a.data + b.data
    return _result(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ], "add")


def sub(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    out = a.data - b.data
    return _result(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ], "sub")


def mul(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    out = a.data * b.data
    return _result(out, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ], "mul")


def div(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    out = a.data / b.data
    return _result(out, [
        (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
    ], "div")


def matmul(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _result(out, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ], "matmul")


def transpose(a):
    a = as_tensor(a)
    return _result(a.data.T, [(a, lambda g: g.T)], "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.data.shape
    return _result(a.data.reshape(shape), [(a, lambda g: g.reshape(orig))], "reshape")


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def _slice_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]
        return vjp

    return _result(out, [(t, _slice_vjp(i)) for i, t in enumerate(tensors)],
                   "concatenate")


def row_softmax(a):
    """Softmax along the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result(y, [
        (a, lambda g: y * (g - (g * y).sum(axis=-1, keepdims=True))),
    ], "row-softmax")


def layer_norm(a, eps=LAYERNORM_EPS):
    """Normalize the last axis to zero mean, unit variance. No affine."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv
    n = a.data.shape[-1]

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return inv * (g - gm - y * gym)

    del n
    return _result(y, [(a, vjp)], "layer-normalize")


def leaky_relu(a, slope=LEAKY_SLOPE):
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _result(out, [(a, lambda g: np.where(pos, g, slope * g))], "leaky-relu")


def elu(a):
    a = as_tensor(a)
    pos = a.data > 0
    neg = np.exp(np.minimum(a.data, 0.0)) - 1.0
    out = np.where(pos, a.data, neg)
    return _result(out, [(a, lambda g: np.where(pos, g, g * (neg + 1.0)))], "elu")


def sigmoid(a):
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _result(y, [(a, lambda g: g * y * (1.0 - y))], "sigmoid")


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, [(a, lambda g: g * (1.0 - y * y))], "tanh")


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), [(a, lambda g: g / a.data)], "log")


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _result(y, [(a, lambda g: g * y)], "exponential")


def clip_min(a, low):
    """Elementwise max(a, low); gradient is blocked on the clamped region."""
    a = as_tensor(a)
    keep = a.data > low
    out = np.where(keep, a.data, low)
    return _result(out, [(a, lambda g: np.where(keep, g, 0.0))], "clip-min")


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _result(out, [(a, vjp)], "sum-reduce")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy() / count

    return _result(out, [(a, vjp)], "mean-reduce")


def masked_select(a, mask):
    """Flatten the entries of `a` where the boolean mask is true."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.data.shape:
        raise ShapeError(
            f"masked_select mask shape {mask.shape} != tensor shape {a.data.shape}")
    out = a.data[mask]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[mask] = g
        return full

    return _result(out, [(a, vjp)], "masked-select")


def take_rows(a, idx):
    """Gather rows along axis 0 (embedding lookup, row slicing)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return full

    return _result(out, [(a, vjp)], "take-rows")


# --- verification harness ------------------------------------------------

@dataclass
class GradcheckEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    passed: bool
    entries: list = field(default_factory=list)
    failure: str | None = None

    def __str__(self):
        lines = []
        for e in self.entries:
            lines.append(f"{'PASS' if e.passed else 'FAIL'} {e.name}: "
                         f"max rel err {e.max_rel_err:.3e}")
        if self.failure:
            lines.append(f"FAIL {self.failure}")
        lines.append("gradcheck " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def _find_nonfinite(root):
    for node in _toposort(root):
        if not np.isfinite(node.data).all():
            return node._op
    return None


def gradcheck(f, inputs, step=1e-5, tol=1e-4, names=None):
    """Compare tape gradients of scalar-valued f against central differences.

    Inputs are copied to 64-bit leaves. The relative error is
    |a - n| / max(1, |a|, |n|) per element; a parameter passes when its max
    is <= tol.
    """
    leaves = []
    for i, t in enumerate(inputs):
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        name = names[i] if names else (
            getattr(t, "name", None) or f"input{i}")
        leaves.append(Tensor(data.astype(np.float64), requires_grad=True,
                             name=name))
    out = f(*leaves)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ShapeError("gradcheck function must return a scalar Tensor")
    bad = _find_nonfinite(out)
    if bad is not None:
        return GradcheckReport(passed=False,
                               failure=f"non-finite intermediate in op '{bad}'")
    for leaf in leaves:
        leaf.zero_grad()
    out.backward()

    report = GradcheckReport(passed=True)
    for leaf in leaves:
        analytic = leaf.grad
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                hi = float(f(*leaves).data)
                flat[j] = orig - step
                lo = float(f(*leaves).data)
                flat[j] = orig
                nflat[j] = (hi - lo) / (2.0 * step)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
        ok = rel <= tol
        report.entries.append(GradcheckEntry(leaf.name, rel, ok))
        if not ok:
            report.passed = False
    return report


# --- checkpoint archive ---------------------------------------------------

CHECKPOINT_MAGIC = b"RPCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint archive."""


def save_checkpoint(path, tensors):
    """Write named float32 tensors to an RPCK v1 archive.

    `tensors` maps name -> Tensor or ndarray; entries are written in
    insertion order.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, value in tensors.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read an RPCK v1 archive back into {name: float32 ndarray}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(
            f"bad checkpoint magic {blob[:4]!r} at offset 0 in {path}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise CheckpointError(f"truncated name at offset {pos}")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos) if rank else ()
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            payload = blob[pos:pos + 4 * count]
            if len(payload) != 4 * count:
                raise CheckpointError(
                    f"truncated payload for '{name}' at offset {pos}")
            pos += 4 * count
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint {path}: {exc}") from exc
    return out
