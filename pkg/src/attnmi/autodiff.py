"""A small reverse-mode autodiff engine on top of numpy.

Every operation takes and returns :class:`Tensor` objects. When any input
requires a gradient the output remembers its parents and a closure mapping
the output gradient to per-parent gradients. ``Tensor.backward`` walks the
graph once in reverse topological order.

Broadcasting is deliberately narrow: binary elementwise operations accept
equal shapes or a 0-d operand. Anything else (bias rows, attention weights
over hidden units) goes through explicit operations such as :func:`linear`,
:func:`expand` or :func:`einsum`.
"""

from __future__ import annotations

import json
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InvalidInputError, ShapeError, TrainingError

DTYPE = np.float64
CHECKPOINT_FORMAT_VERSION = 1

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        return self.data.ravel().tolist()

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

        Intermediate gradients live only for the duration of the call, so
        repeated calls accumulate exactly once per call into the leaves.
        """
        if grad is None:
            if self.data.size != 1:
                raise ConfigurationError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each listed after all of its inputs."""
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
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=DTYPE).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: one ufunc call and no overflow
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise InvalidInputError("log: non-positive input")
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "abs": absolute,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``scale-by-constant`` takes the constant as ``b``."""
    if kind in ("scale", "scale-by-constant"):
        return scale(a, b)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ConfigurationError(f"unknown elementwise op {kind!r}") from None
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ConfigurationError(f"{kind} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[k, n]``; ``a`` may carry leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x[..., k] @ w[k, n] + b[n]`` as one node."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "linear")


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum. Every index of an operand must appear in the other or the output."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_s = subscripts.replace(" ", "").split("->")
    a_s, b_s = lhs.split(",")
    for own, other in ((a_s, b_s), (b_s, a_s)):
        if any(c not in other and c not in out_s for c in own):
            raise ConfigurationError(f"einsum {subscripts!r}: unsupported private summation index")
    try:
        out = np.einsum(subscripts, a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"einsum {subscripts!r}: shapes {a.shape} and {b.shape}: {exc}") from None

    def backward(g):
        ga = np.einsum(f"{out_s},{b_s}->{a_s}", g, b.data)
        gb = np.einsum(f"{out_s},{a_s}->{b_s}", g, a.data)
        return ga, gb

    return _result(np.asarray(out, dtype=DTYPE), (a, b), backward, "einsum")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx], dtype=DTYPE), (a,), backward, "getitem")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in items)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {[t.shape for t in tensors]}: {exc}") from None

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(out, tensors, backward, "stack")


def expand(a, axis: int, size: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``size`` times along it."""
    a = as_tensor(a)
    out = np.repeat(np.expand_dims(a.data, axis), size, axis=axis)
    return _result(out, (a,), lambda g: (g.sum(axis=axis),), "expand")


def pad_axis(a, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    a = as_tensor(a)
    axis = axis % a.data.ndim
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    n = a.shape[axis]
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(before, before + n)
    sl = tuple(sl)
    return _result(np.pad(a.data, widths), (a,), lambda g: (g[sl],), "pad")


def embedding(table, ids) -> Tensor:
    """Rows of ``table`` selected by integer array ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InvalidInputError(f"token id out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), backward, "embedding")


def lstm_cell(z, c_prev) -> Tensor:
    """Fused LSTM cell.

    ``z`` holds the gate pre-activations ``[i, f, g, o]`` along its last axis
    (width ``4H``); returns ``stack([h, c])`` with shape ``(2, ..., H)``.
    """
    z, c_prev = as_tensor(z), as_tensor(c_prev)
    H = c_prev.shape[-1]
    if z.shape[:-1] != c_prev.shape[:-1] or z.shape[-1] != 4 * H:
        raise ShapeError(f"lstm_cell: gates {z.shape} incompatible with cell state {c_prev.shape}")
    zd = z.data
    i = _sigmoid(zd[..., :H])
    f = _sigmoid(zd[..., H:2 * H])
    g = np.tanh(zd[..., 2 * H:3 * H])
    o = _sigmoid(zd[..., 3 * H:])
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc

    def backward(grad):
        gh, gc = grad[0], grad[1]
        gc = gc + gh * o * (1.0 - tc * tc)
        gz = np.concatenate([
            gc * g * i * (1.0 - i),
            gc * c_prev.data * f * (1.0 - f),
            gc * i * (1.0 - g * g),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        return gz, gc * f

    return _result(np.stack([h, c]), (z, c_prev), backward, "lstm_cell")


# ---------------------------------------------------------------------------
# normalisation and losses


def _check_mask(logits: np.ndarray, mask) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    if not mask.any(axis=-1).all():
        raise InvalidInputError("softmax: every position is masked")
    return mask


def _softmax_np(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits, mask=None) -> Tensor:
    """Softmax over the last axis. Masked positions come out exactly 0."""
    logits = as_tensor(logits)
    if logits.data.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    mask = _check_mask(logits.data, mask)
    if not np.all(np.isfinite(logits.data)):
        raise InvalidInputError("softmax: non-finite logits")
    s = _softmax_np(logits.data, mask)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (logits,), backward, "softmax")


def log_softmax(logits, mask=None) -> Tensor:
    """Log-softmax over the last axis; masked positions are returned as 0."""
    logits = as_tensor(logits)
    mask = _check_mask(logits.data, mask)
    x = logits.data if mask is None else np.where(mask, logits.data, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out = logits.data - lse
    s = np.exp(x - lse)
    if mask is not None:
        out = np.where(mask, out, 0.0)

    def backward(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _result(out, (logits,), backward, "log_softmax")


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy; ``logits`` and ``targets`` have the same shape."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs targets {y.shape}")
    x = logits.data
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def backward(g):
        return (g * (_sigmoid(x) - y) / n,)

    return _result(np.asarray(loss.mean()), (logits,), backward, "bce")


def cross_entropy(logits, targets) -> Tensor:
    """Mean categorical cross-entropy for ``logits[B, C]`` and integer ``targets[B]``."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=int)
    if logits.data.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    s = _softmax_np(logits.data, None)
    rows = np.arange(len(t))
    loss = -np.log(np.maximum(s[rows, t], 1e-300)).mean()

    def backward(g):
        d = s.copy()
        d[rows, t] -= 1.0
        return (g * d / len(t),)

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# optimisation


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[Mapping[str, np.ndarray], AdamState]:
    """One Adam update, in place on ``params``.

    Weight decay is classic L2: ``weight_decay * p`` is added to the gradient
    before the moment updates. Parameters without a gradient entry are left
    untouched.
    """
    if state.step < 0:
        raise ConfigurationError("AdamState.step must be non-negative")
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


class Adam:
    """Adam over a name -> Tensor map; only tensors with ``requires_grad`` are updated."""

    def __init__(self, params: Mapping[str, Tensor], **hyper):
        self.params = dict(params)
        self.state = AdamState(**hyper)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        arrays = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad for n, p in self.params.items() if p.requires_grad and p.grad is not None}
        adam_step(arrays, grads, self.state)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(np.sum([np.sum(p.grad**2) for p in params]))) if params else 0.0
    if np.isfinite(total) and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * factor
    return total


# ---------------------------------------------------------------------------
# checking and persistence


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    out = np.zeros_like(x, dtype=DTYPE)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def save_parameters(path, params: Mapping[str, Tensor | np.ndarray], header: dict | None = None) -> None:
    payload = {"format_version": CHECKPOINT_FORMAT_VERSION}
    if header:
        payload.update(header)
    payload["parameters"] = {
        name: {"shape": list(np.shape(_array(p))), "values": _array(p).ravel().tolist()}
        for name, p in params.items()
    }
    Path(path).write_text(json.dumps(payload))


def load_parameters(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(parameters, header)`` from a checkpoint written by :func:`save_parameters`."""
    payload = json.loads(Path(path).read_text())
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format_version {version!r}")
    params = {}
    for name, entry in payload.pop("parameters").items():
        arr = np.array(entry["values"], dtype=DTYPE)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise ConfigurationError(f"parameter {name!r}: {arr.size} values for shape {shape}")
        params[name] = arr.reshape(shape)
    return params, payload


def _array(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else np.asarray(p, dtype=DTYPE)
