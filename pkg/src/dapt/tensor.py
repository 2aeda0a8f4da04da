"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
result keeps references to its parents and a closure that pushes the incoming
gradient back to them; :meth:`Tensor.backward` walks that graph in reverse
topological order.

Broadcasting is deliberately narrow: ``add`` accepts equal shapes or a 1-D
bias matching the trailing dimension. Anything else needs an explicit
``reshape`` or ``broadcast_to``.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

# Large finite stand-in for -inf; exp() of it underflows to exactly zero.
NEG_INF = -1e9

_GELU_C = math.sqrt(2.0 / math.pi)


class TensorError(ValueError):
    """Shape mismatch, non-finite value, or misuse of the autodiff graph."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._op = ""
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self) -> None:
        """Populate ``grad`` on every leaf that requires it.

        The loss must be a scalar. The graph is released afterwards, so a
        second call on the same loss raises.
        """
        if self.data.size != 1:
            raise TensorError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise TensorError("backward already ran on this graph; rebuild the forward pass")
        if not self.requires_grad:
            raise TensorError("loss does not depend on any tensor that requires grad")
        order = _topological(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()
        for node in order:
            if node._parents:
                node._parents = ()
                node._backward = None
                node.grad = None
                node._released = True
        self._released = True


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._released:
            raise TensorError("graph references a tensor whose tape was already released")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _make(out: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise TensorError(f"{op}: produced non-finite values")
    t = Tensor(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._op = op
    return t


def _shape_error(op: str, *shapes) -> TensorError:
    return TensorError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        if np.ndim(b) == 0:
            out = _make(a.data + b, [a], "add")
            if out.requires_grad:
                out._backward = lambda: _accum(a, out.grad)
            return out
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape == b.shape:
        bias = False
    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        bias = True
    else:
        raise _shape_error("add", a.shape, b.shape)
    out = _make(a.data + b.data, [a, b], "add")
    if out.requires_grad:
        def _backward():
            _accum(a, out.grad)
            if b.requires_grad:
                g = out.grad.reshape(-1, b.shape[0]).sum(axis=0) if bias else out.grad
                _accum(b, g)
        out._backward = _backward
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, [a], "neg")
    if out.requires_grad:
        out._backward = lambda: _accum(a, -out.grad)
    return out


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -np.asarray(b))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        if np.ndim(b) == 0:
            out = _make(a.data * b, [a], "mul")
            if out.requires_grad:
                out._backward = lambda: _accum(a, out.grad * b)
            return out
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    out = _make(a.data * b.data, [a, b], "mul")
    if out.requires_grad:
        def _backward():
            _accum(a, out.grad * b.data)
            _accum(b, out.grad * a.data)
        out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``b`` is either a 2-D weight applied to the last axis of ``a`` (any batch
    rank), or has the same batch dimensions as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = _make(a.data @ b.data, [a, b], "matmul")
    if out.requires_grad:
        def _backward():
            g = out.grad
            if a.requires_grad:
                _accum(a, g @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                if shared:
                    k = a.shape[-1]
                    _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
                else:
                    _accum(b, np.swapaxes(a.data, -1, -2) @ g)
        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, tuple(shape)) from None
    out = _make(data, [a], "reshape")
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad.reshape(a.shape))
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = _make(np.transpose(a.data, axes), [a], "transpose")
    if out.requires_grad:
        out._backward = lambda: _accum(a, np.transpose(out.grad, inverse))
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise _shape_error("broadcast_to", a.shape, shape) from None
    out = _make(np.array(data), [a], "broadcast_to")
    if out.requires_grad:
        lead = len(shape) - a.ndim
        summed = tuple(range(lead)) + tuple(
            lead + i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1
        )

        def _backward():
            g = out.grad.sum(axis=summed, keepdims=True) if summed else out.grad
            _accum(a, g.reshape(a.shape))
        out._backward = _backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_error("concat", *[t.shape for t in tensors]) from None
    out = _make(data, tensors, "concat")
    if out.requires_grad:
        bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

        def _backward():
            for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(lo, hi)
                    _accum(t, out.grad[tuple(idx)])
        out._backward = _backward
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    """Slicing and integer-array gathering; gradients scatter back with add."""
    if isinstance(index, Tensor):
        raise TensorError("index with integer arrays, not Tensors")
    try:
        data = a.data[index]
    except IndexError as exc:
        raise TensorError(f"slice: {exc} for shape {a.shape}") from None
    out = _make(np.array(data, copy=True), [a], "slice")
    if out.requires_grad:
        basic = _is_basic(index)

        def _backward():
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            if basic:
                a.grad[index] += out.grad
            else:
                np.add.at(a.grad, index, out.grad)
        out._backward = _backward
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TensorError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TensorError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    return getitem(table, ids)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None) -> Tensor:
    out = _make(np.asarray(a.data.sum(axis=axis)), [a], "sum")
    if out.requires_grad:
        def _backward():
            g = out.grad if axis is None else np.expand_dims(out.grad, axis)
            _accum(a, np.broadcast_to(g, a.shape))
        out._backward = _backward
    return out


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = _make(np.squeeze(m + np.log(total), axis=axis), [a], "logsumexp")
    if out.requires_grad:
        def _backward():
            _accum(a, np.expand_dims(out.grad, axis) * shifted / total)
        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _make(y, [a], "tanh")
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad * (1.0 - y * y))
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = _make(y, [a], "sigmoid")
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad * y * (1.0 - y))
    return out


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    out = _make(a.data * pos, [a], "relu")
    if out.requires_grad:
        out._backward = lambda: _accum(a, out.grad * pos)
    return out


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = _make(0.5 * x * (1.0 + t), [a], "gelu")
    if out.requires_grad:
        def _backward():
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            _accum(a, out.grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))
        out._backward = _backward
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, [a], "softmax")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))
        out._backward = _backward
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = _make(y, [a], "log_softmax")
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accum(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))
        out._backward = _backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise _shape_error("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _make(xhat * gain.data + bias.data, [x, gain, bias], "layer_norm")
    if out.requires_grad:
        def _backward():
            g = out.grad
            if gain.requires_grad:
                _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            if bias.requires_grad:
                _accum(bias, g.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                gx = g * gain.data
                _accum(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
        out._backward = _backward
    return out


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout. Identity when ``train`` is false or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise TensorError(f"dropout: rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise TensorError("dropout: training mode needs an explicit rng")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return mul(a, Tensor(keep))


def cross_entropy(logits: Tensor, targets, ignore_id: int = -100) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ``ignore_id``.

    ``logits`` is ``(N, C)``; returns a zero scalar when every row is ignored.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise _shape_error("cross_entropy", logits.shape, targets.shape)
    valid = targets != ignore_id
    count = int(valid.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    safe = np.where(valid, targets, 0)
    if safe.min() < 0 or safe.max() >= logits.shape[1]:
        raise TensorError("cross_entropy: target id out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, safe[rows]].sum() / count
    out = _make(np.asarray(loss, dtype=logits.dtype), [logits], "cross_entropy")
    if out.requires_grad:
        def _backward():
            g = np.exp(logp)
            g[rows, safe[rows]] -= 1.0
            g *= valid[:, None] * (out.grad / count)
            _accum(logits, g)
        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[..., Tensor], x, eps: float = 1e-5, sample: int | None = None, seed: int = 0) -> float:
    """Largest relative error between autodiff and central differences.

    ``x`` is a tensor (``f(x)``) or a sequence of tensors (``f(*x)``). Tensors
    are perturbed in place, so ``f`` may also close over them. With ``sample``
    only that many randomly chosen entries per tensor are perturbed.
    """
    pick = np.random.default_rng(seed)
    xs = [x] if isinstance(x, Tensor) else list(x)
    call = (lambda: f(xs[0])) if isinstance(x, Tensor) else (lambda: f(*xs))
    for t in xs:
        t.requires_grad = True
        t.grad = None
    y = call()
    if y.data.size != 1:
        raise TensorError(f"grad_check: function must return a scalar, got shape {y.shape}")
    y.backward()
    worst = 0.0
    for t in xs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        if not flat.flags.owndata and not np.shares_memory(flat, t.data):
            raise TensorError("grad_check: tensor data must be contiguous")
        entries = range(flat.size)
        if sample is not None and flat.size > sample:
            entries = pick.choice(flat.size, size=sample, replace=False)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(call().data)
            flat[i] = orig - eps
            minus = float(call().data)
            flat[i] = orig
            numeric = (plus - minus) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# parameter archives

_ARCHIVE = "params.bin"
_MANIFEST = "manifest.json"


def save_params(params: Mapping[str, Tensor], directory, dtype: str = "<f4") -> None:
    """Write ``params.bin`` (concatenated little-endian arrays) and ``manifest.json``.

    Records are written in sorted name order so output bytes depend only on
    the values.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    offset = 0
    with open(directory / _ARCHIVE, "wb") as fh:
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name].data, dtype=np.dtype(dtype))
            raw = arr.tobytes()
            fh.write(raw)
            records.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"dtype": dtype, "records": records}
    (directory / _MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")


def load_params(directory, dtype=None) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / _MANIFEST).read_text(encoding="utf-8"))
    stored = np.dtype(manifest["dtype"])
    raw = (directory / _ARCHIVE).read_bytes()
    out = {}
    for rec in manifest["records"]:
        chunk = raw[rec["offset"]: rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(chunk, dtype=stored).reshape(rec["shape"])
        out[rec["name"]] = arr.astype(dtype or stored.newbyteorder("="))
    return out


def checksum(params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]]) -> str:
    """SHA-256 over names, shapes and raw bytes, in sorted name order."""
    items = dict(params.items() if isinstance(params, Mapping) else params)
    h = hashlib.sha256()
    for name in sorted(items):
        arr = np.ascontiguousarray(items[name].data)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
