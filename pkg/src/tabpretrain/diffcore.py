"""Dense reverse-mode autodiff on numpy float64 arrays, AdamW, checkpoints.

The graph is built on the fly (define-by-run): every op returns a `Tensor`
holding its value, its parents and a closure that pushes the output gradient
back to the parents.  `backward` walks the graph in reverse topological order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class GradientError(FloatingPointError):
    """Non-finite gradient reached the optimizer."""


def _node_label(t: "Tensor") -> str:
    return t.name or f"<{t.op or 'leaf'} {t.shape}>"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, parents=(), op=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value: np.ndarray, name: str) -> Tensor:
    """Trainable leaf sharing memory with `value`."""
    return Tensor(value, requires_grad=True, name=name)


def _make(data, parents, op, backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, parents=tuple(parents) if needs else (), op=op)
    if needs:
        out.backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: cannot broadcast {_node_label(a)} {a.shape} with {_node_label(b)} {b.shape}"
        ) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), "div", backward)


def _unary(name, fn, dfn):
    def op(x) -> Tensor:
        x = as_tensor(x)
        out = fn(x.data)

        def backward(g):
            _accumulate(x, g * dfn(x.data, out))

        return _make(out, (x,), name, backward)

    op.__name__ = name
    return op


relu = _unary("relu", lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(DTYPE))
exp = _unary("exp", np.exp, lambda x, y: y)
log = _unary("log", np.log, lambda x, y: 1.0 / x)
sin = _unary("sin", np.sin, lambda x, y: np.cos(x))
cos = _unary("cos", np.cos, lambda x, y: -np.sin(x))
sqrt = _unary("sqrt", np.sqrt, lambda x, y: 0.5 / y)
square = _unary("square", np.square, lambda x, y: 2.0 * x)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _make(out, (x,), "sigmoid", backward)


def _stable_sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def clip(x, lo, hi) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, g * ((x.data >= lo) & (x.data <= hi)))

    return _make(np.clip(x.data, lo, hi), (x,), "clip", backward)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g):
        _accumulate(x, g * keep)

    return _make(x.data * keep, (x,), "dropout", backward)


# ----------------------------------------------------------------- reductions


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), "sum", backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def logsumexp(x, axis=-1, keepdims=False) -> Tensor:
    x = as_tensor(x)
    peak = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out = np.log(total) + peak
    soft = shifted / total

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        _accumulate(x, gk * soft)

    return _make(out if keepdims else np.squeeze(out, axis), (x,), "logsumexp", backward)


def softmax(x, axis=-1) -> Tensor:
    return exp(sub(x, logsumexp(x, axis=axis, keepdims=True)))


def log_softmax(x, axis=-1) -> Tensor:
    return sub(x, logsumexp(x, axis=axis, keepdims=True))


# ------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; operands with ndim > 2 follow numpy's batched broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {_node_label(a)} {a.shape} @ {_node_label(b)} {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: {_node_label(a)} {a.shape} @ {_node_label(b)} {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out, (a, b), "matmul", backward)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum.  Every input index must appear in the other operand or the output."""
    a, b = as_tensor(a), as_tensor(b)
    inputs, out_idx = subscripts.replace(" ", "").split("->")
    ia, ib = inputs.split(",")
    try:
        out = np.einsum(subscripts, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise ShapeError(f"einsum {subscripts}: {a.shape}, {b.shape}: {exc}") from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.einsum(f"{out_idx},{ib}->{ia}", g, b.data, optimize=True))
        if b.requires_grad:
            _accumulate(b, np.einsum(f"{ia},{out_idx}->{ib}", a.data, g, optimize=True))

    return _make(out, (a, b), "einsum", backward)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# --------------------------------------------------------------- shape plumbing


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {_node_label(x)} {x.shape} -> {shape}") from None

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(out, (x,), "reshape", backward)


def concat(tensors: Sequence, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(f"{_node_label(t)} {t.shape}" for t in tensors)
        raise ShapeError(f"concat(axis={axis}): {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _make(out, tensors, "concat", backward)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if not x.requires_grad:
            return
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accumulate(x, full)

    return _make(x.data[index], (x,), "getitem", backward)


def embedding(table, codes: np.ndarray) -> Tensor:
    """Row lookup `table[codes]`; repeated codes accumulate gradient."""
    table = as_tensor(table)
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= table.shape[0]):
        raise ShapeError(f"embedding: code out of range for {_node_label(table)} {table.shape}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, codes, g)
        _accumulate(table, full)

    return _make(table.data[codes], (table,), "embedding", backward)


# ---------------------------------------------------------------------- losses


def mse(pred, target) -> Tensor:
    diff = sub(pred, as_tensor(target))
    return mean(mul(diff, diff))


def cross_entropy(logits, labels: np.ndarray, reduction="mean") -> Tensor:
    """Softmax cross-entropy against integer labels, rows of `logits`."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    peak = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - peak
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    per_row = -logp[np.arange(n), labels]
    scale = 1.0 / n if reduction == "mean" else 1.0

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        _accumulate(logits, grad * (g * scale))

    total = per_row.sum() * scale
    return _make(np.asarray(total), (logits,), "cross_entropy", backward)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy over all cells."""
    logits = as_tensor(logits)
    t = np.broadcast_to(np.asarray(targets, dtype=DTYPE), logits.shape)
    x = logits.data
    per_cell = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        _accumulate(logits, (_stable_sigmoid(x) - t) * (g / x.size))

    return _make(np.asarray(per_cell.mean()), (logits,), "bce", backward)


# -------------------------------------------------------------------- backward


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar `loss`.

    Returns gradients keyed by leaf name (or by `params` keys when given).
    Leaves that did not influence the loss get a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
            if node.parents:
                node.grad = None if node is not loss else node.grad

    if params is None:
        leaves = {n.name: n for n in order if not n.parents and n.name}
    else:
        leaves = dict(params)
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in leaves.items()
    }


# ---------------------------------------------------------------------- AdamW


class AdamW:
    """AdamW with decoupled weight decay over a dict of numpy parameters.

    Parameters are updated in place, so tensors built from them see new values.
    """

    def __init__(self, params: Mapping[str, np.ndarray], lr=1e-3, weight_decay=0.0,
                 betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {weight_decay}")
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for parameter '{name}'")
            if g.shape != self.params[name].shape:
                raise ShapeError(f"gradient for '{name}' has shape {g.shape}, "
                                 f"parameter has {self.params[name].shape}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p, m, v = self.params[name], self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adamw.m/{k}": v for k, v in self.m.items()}
        out.update({f"adamw.v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], step: int) -> None:
        for k in self.m:
            self.m[k][...] = arrays[f"adamw.m/{k}"]
            self.v[k][...] = arrays[f"adamw.v/{k}"]
        self.step_count = step


# ----------------------------------------------------------------- checkpoints

_MAGIC = b"TPCKPT1\n"


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], step: int = 0, meta: dict | None = None):
    """Write a JSON manifest header followed by raw little-endian float64 arrays.

    Layout: magic line, 8-byte little-endian header length, UTF-8 JSON manifest,
    then every array's bytes in manifest order.
    """
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps({"arrays": entries, "optimizer_step": step, "meta": meta or {}},
                        sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (size,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(size))
        arrays = {}
        for entry in manifest["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated at array '{entry['name']}'")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(DTYPE)
    return arrays, manifest["optimizer_step"], manifest["meta"]


def numerical_gradient(fn: Callable[[], float], value: np.ndarray, h=1e-5) -> np.ndarray:
    """Central finite differences of scalar `fn()` w.r.t. `value` (perturbed in place)."""
    grad = np.zeros_like(value)
    it = np.nditer(value, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = value[idx]
        value[idx] = orig + h
        up = fn()
        value[idx] = orig - h
        down = fn()
        value[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad

