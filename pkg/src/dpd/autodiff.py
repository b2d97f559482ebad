"""Small reverse-mode autodiff over float64 numpy arrays.

Tensors are immutable values. Operations executed inside an active
:class:`GradTape` are recorded with a vector-Jacobian product, and
:func:`backward` replays the tape in reverse to produce gradients for the
parameters the tape was told to watch.

    >>> params = ParamTree({"w": [[1.0, 2.0]]})
    >>> with GradTape() as tape:
    ...     tape.watch(params)
    ...     loss = sum_of_squares(params["w"])
    >>> backward(tape, loss)["w"].data
    array([[2., 4.]])
"""
from __future__ import annotations

import hashlib
import threading
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "ParamTree",
    "GradTape",
    "no_grad",
    "AdamState",
    "forward_op",
    "matmul",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "tanh",
    "silu",
    "concat",
    "reshape",
    "mean",
    "sum_of_squares",
    "softmax_cross_entropy",
    "clip_straight_through",
    "backward",
    "adam_init",
    "adam_step",
    "check_gradients",
]


class NonFiniteError(ValueError):
    """Raised when a tensor would hold NaN or Inf."""


_local = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense float64 array."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, *, _trusted: bool = False):
        if _trusted:
            arr = data
        else:
            arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _out(arr: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(arr, dtype=np.float64), _trusted=True)


class ParamTree(Mapping):
    """Named tensors iterated in lexicographic name order."""

    def __init__(self, entries: Mapping | None = None):
        entries = dict(entries or {})
        self._entries = {k: _as_tensor(entries[k]) for k in sorted(entries)}

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._entries.items())
        return f"ParamTree({{{inner}}})"

    def shapes(self) -> dict:
        return {k: v.shape for k, v in self._entries.items()}

    def same_structure(self, other: "ParamTree") -> bool:
        return self.shapes() == other.shapes()

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamTree":
        return ParamTree({k: fn(v.data) for k, v in self._entries.items()})

    def arrays(self) -> dict:
        return {k: v.data for k, v in self._entries.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self._entries.items():
            h.update(name.encode())
            h.update(np.asarray(t.shape, dtype="<u4").tobytes())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    @classmethod
    def zeros_like(cls, other: "ParamTree") -> "ParamTree":
        return other.map(np.zeros_like)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: Callable
    name: str


class GradTape:
    """Records operations executed while it is the active tape."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.watched: dict[str, Tensor] = {}
        self._tracked: set[int] = set()

    def watch(self, params: ParamTree | Mapping, prefix: str = "") -> None:
        for name, t in params.items():
            self.watched[prefix + name] = t
            self._tracked.add(id(t))

    def __enter__(self) -> "GradTape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _record(self, name: str, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        needs = tuple(id(t) in self._tracked for t in inputs)
        if not any(needs):
            return
        self._tracked.add(id(out))
        self.nodes.append(_Node(out, inputs, lambda g: vjp(g, needs), name))


class no_grad:
    """Suspend recording on the active tape."""

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(None)

    def __exit__(self, *exc):
        _local.stack.pop()


def _record(name: str, out: Tensor, inputs: tuple, vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None:
        tape._record(name, out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- primitives ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = _out(a.data @ b.data)

    def vjp(g, needs):
        return (
            g @ b.data.T if needs[0] else None,
            a.data.T @ g if needs[1] else None,
        )

    return _record("matmul", out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = _out(a.data + b.data)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _record("add", out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scalar_mul(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("elementwise-mul", a, b)
    out = _out(a.data * b.data)

    def vjp(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _record("elementwise-mul", out, (a, b), vjp)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _out(a.data * c)
    return _record("scalar-mul", out, (a,), lambda g, needs: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _out(y)
    return _record("tanh", out, (a,), lambda g, needs: (g * (1.0 - y * y),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic
    out = _out(x * s)
    return _record("silu", out, (a,), lambda g, needs: (g * (s * (1.0 + x * (1.0 - s))),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat: no inputs")
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors:
        if t.data.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ValueError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    out = _out(np.concatenate([t.data for t in tensors], axis=ax))
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g, needs):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if needs[i] else None
            for i in range(len(tensors))
        )

    return _record("concat", out, tensors, vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        arr = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    out = _out(arr)
    return _record("reshape", out, (a,), lambda g, needs: (g.reshape(a.shape),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = _out(np.asarray(a.data.mean()))
    return _record("mean", out, (a,), lambda g, needs: (np.full(a.shape, float(np.reshape(g, ())) / n),))


def sum_of_squares(a: Tensor) -> Tensor:
    out = _out(np.asarray(np.sum(a.data * a.data)))
    return _record("sum-of-squares", out, (a,), lambda g, needs: (2.0 * float(np.reshape(g, ())) * a.data,))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(
            f"softmax-cross-entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("softmax-cross-entropy: label out of range")
    n = labels.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), labels]
    out = _out(np.asarray(nll.mean()))

    def vjp(g, needs):
        p = _softmax(logits.data)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(np.reshape(g, ())) / n),)

    return _record("softmax-cross-entropy", out, (logits,), vjp)


def clip_straight_through(a: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clamp values forward; pass the incoming gradient through unchanged."""
    out = _out(np.clip(a.data, lo, hi))
    return _record("clip-st", out, (a,), lambda g, needs: (g,))


_OPS = {
    "matmul": matmul,
    "add": add,
    "elementwise-mul": mul,
    "scalar-mul": scalar_mul,
    "tanh": tanh,
    "silu": silu,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "reshape": reshape,
    "mean": mean,
    "sum-of-squares": sum_of_squares,
    "softmax-cross-entropy": softmax_cross_entropy,
}


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_op("matmul", a, b)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; expected one of {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


# -- reverse pass -------------------------------------------------------------


def backward(tape: GradTape, loss: Tensor) -> ParamTree:
    """Gradients of scalar ``loss`` for every parameter watched by ``tape``.

    Watched parameters that the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for name, t in tape.watched.items():
        g = grads.get(id(t))
        out[name] = np.zeros(t.shape) if g is None else np.reshape(g, t.shape)
    return ParamTree(out)


# -- optimizer ----------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: ParamTree
    v: ParamTree
    step: int = 0


def adam_init(params: ParamTree) -> AdamState:
    z = ParamTree.zeros_like(params)
    return AdamState(m=z, v=z, step=0)


def adam_step(
    params: ParamTree,
    grads: ParamTree,
    state: AdamState,
    lr: float,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[ParamTree, AdamState]:
    """One bias-corrected Adam update; ``weight_decay`` > 0 gives AdamW."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not (params.same_structure(grads) and params.same_structure(state.m)):
        raise ValueError(
            "adam_step: parameter, gradient and state trees differ: "
            f"{params.shapes()} vs {grads.shapes()}"
        )
    b1, b2 = betas
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_p, new_m, new_v = {}, {}, {}
    for name in params:
        p = params[name].data
        g = grads[name].data
        m = b1 * state.m[name].data + (1.0 - b1) * g
        v = b2 * state.v[name].data + (1.0 - b2) * g * g
        if weight_decay:
            p = p - lr * weight_decay * p
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name] = m
        new_v[name] = v
    return ParamTree(new_p), AdamState(ParamTree(new_m), ParamTree(new_v), step)


# -- gradient checking ----------------------------------------------------------


def check_gradients(
    model_fn: Callable[[ParamTree], Tensor],
    params: ParamTree,
    probe_count: int,
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``probe_count`` coordinates are drawn uniformly over all parameter
    entries. The relative error of a probe is
    ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    with GradTape() as tape:
        tape.watch(params)
        loss = model_fn(params)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("check_gradients: non-finite loss")
    grads = backward(tape, loss)

    names = list(params)
    sizes = np.array([params[n].size for n in names])
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(sizes.sum(), size=min(probe_count, int(sizes.sum())), replace=False)
    offsets = np.cumsum(np.r_[0, sizes])

    def value_at(name, idx, delta):
        arr = params[name].data.copy().reshape(-1)
        arr[idx] += delta
        tree = ParamTree({**params.arrays(), name: arr.reshape(params[name].shape)})
        return model_fn(tree).data.item()

    worst = 0.0
    for fi in flat_idx:
        which = int(np.searchsorted(offsets, fi, side="right") - 1)
        name, idx = names[which], int(fi - offsets[which])
        numeric = (value_at(name, idx, eps) - value_at(name, idx, -eps)) / (2 * eps)
        analytic = float(grads[name].data.reshape(-1)[idx])
        worst = max(worst, abs(analytic - numeric) / max(1e-8, abs(numeric)))
    return worst
