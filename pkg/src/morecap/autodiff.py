"""Small tape-based reverse-mode autodiff over float64 numpy arrays.

Only the operations the captioning model needs are provided. Ops record
themselves on the active :class:`Tape` (entered with ``with Tape() as tape``);
outside a tape they just compute values, which is how inference runs.

Backward rules live in :data:`BACKWARD`, keyed by op kind, so a rule can be
swapped out (the gradcheck fault-injection test relies on this).
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Input shapes do not conform to an op's rule."""


class ContractError(RuntimeError):
    """A precondition of an autodiff routine was violated."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Entry:
    kind: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    ctx: dict


class Tape:
    """Ordered record of executed ops. Use as a context manager."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.entries)


def active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def _record(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor], **ctx) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.entries.append(_Entry(kind, out, tuple(inputs), ctx))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- forward ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data.ndim, b.data.ndim
    ok = da >= 1 and db >= 1 and not (da == 1 and db != 2) and not (db == 1 and da != 2)
    if ok:
        ok = a.shape[-1] == (b.shape[-2] if db > 1 else b.shape[0])
    if ok and da > 2 and db > 2:
        ok = a.shape[:-2] == b.shape[:-2]
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _record("matmul", np.matmul(a.data, b.data), (a, b))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    return _record("concat", out, tensors, axis=axis, sizes=sizes)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _record("mul", a.data * b.data, (a, b))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    return _record("tanh", np.tanh(x.data), (x,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split form avoids overflow in exp for large |x|
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _record("sigmoid", out, (x,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _record("relu", np.maximum(x.data, 0.0), (x,))


def _softmax(d: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        z = d - d.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    masked = np.where(mask, d, -np.inf)
    top = masked.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(np.where(mask, d - top, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    # fully masked rows come out as all zeros
    return e / np.where(s > 0, s, 1.0)


def softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, same shape) drops entries."""
    x = as_tensor(x)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return _record("softmax", _softmax(x.data, mask), (x,))


def embedding(table, indices) -> Tensor:
    """Row lookup ``table[indices]``; output shape is indices.shape + table.shape[1:]."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table of shape {table.shape}")
    return _record("embedding", table.data[idx], (table,), idx=idx)


def dot(a, b) -> Tensor:
    """Inner product over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError(f"dot: last dimensions differ for shapes {a.shape} and {b.shape}")
    _broadcast_shape("dot", a, b)
    return _record("dot", np.sum(a.data * b.data, axis=-1), (a, b))


def cross_entropy(logits, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    d = logits.data.reshape(-1, logits.shape[-1])
    if d.shape[0] != t.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {np.shape(targets)}")
    valid = np.ones_like(t, dtype=bool) if ignore_index is None else t != ignore_index
    if np.any((t[valid] < 0) | (t[valid] >= d.shape[1])):
        raise ShapeError(f"cross_entropy: target index outside [0, {d.shape[1]})")
    n = max(int(valid.sum()), 1)
    z = d - d.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe_t = np.where(valid, t, 0)
    picked = logp[np.arange(len(t)), safe_t]
    loss = -np.sum(picked[valid]) / n
    return _record("cross_entropy", np.asarray(loss), (logits,),
                   probs=np.exp(logp), targets=safe_t, valid=valid, n=n)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return _record("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,),
                   axis=axis, keepdims=keepdims)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _record("reshape", out, (x,))


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return _record("transpose", np.swapaxes(x.data, -1, -2), (x,))


def take(x, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop]``."""
    x = as_tensor(x)
    return _record("take", x.data[..., start:stop], (x,), start=start, stop=stop)


def mean(x) -> Tensor:
    x = as_tensor(x)
    return mul(sum_(x), 1.0 / x.size)


# --------------------------------------------------------------- backward rules


class _Outer:
    """Deferred weight gradient ``a.T @ g``, stacked across uses at the end of backward."""

    __slots__ = ("a", "g")

    def __init__(self, a: np.ndarray, g: np.ndarray):
        self.a, self.g = a, g


def _bw_matmul(ctx, g, a, b):
    A, B = a.data, b.data
    if A.ndim == 1:
        return B @ g, np.outer(A, g)
    if B.ndim == 1:
        return np.outer(g, B), A.T @ g
    ga = _unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape) if a.requires_grad else None
    if B.ndim == 2:
        a2, g2 = A.reshape(-1, A.shape[-1]), g.reshape(-1, g.shape[-1])
        gb = _Outer(a2, g2) if ctx.get("defer") else a2.T @ g2
    else:
        gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape)
    return ga, gb


def _bw_concat(ctx, g, *inputs):
    cuts = np.cumsum(ctx["sizes"])[:-1]
    return tuple(np.split(g, cuts, axis=ctx["axis"]))


def _bw_add(ctx, g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_sub(ctx, g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _bw_mul(ctx, g, a, b):
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _bw_tanh(ctx, g, x):
    y = ctx["out"]
    return (g * (1.0 - y * y),)


def _bw_sigmoid(ctx, g, x):
    y = ctx["out"]
    return (g * y * (1.0 - y),)


def _bw_relu(ctx, g, x):
    return (g * (x.data > 0),)


def _bw_softmax(ctx, g, x):
    y = ctx["out"]
    return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


def _bw_embedding(ctx, g, table):
    idx = ctx["idx"]
    flat_idx = idx.reshape(-1)
    gg = g.reshape((flat_idx.size,) + table.shape[1:])
    out = np.zeros_like(table.data)
    if table.data.ndim == 2 and flat_idx.size:
        # bincount per column is much faster than np.add.at on wide tables
        rows, cols = table.shape
        flat = np.bincount(
            (flat_idx[:, None] * cols + np.arange(cols)).reshape(-1),
            weights=gg.reshape(-1),
            minlength=rows * cols,
        )
        out = flat.reshape(rows, cols)
    else:
        np.add.at(out, flat_idx, gg)
    return (out,)


def _bw_dot(ctx, g, a, b):
    ge = g[..., None]
    return _unbroadcast(ge * b.data, a.shape), _unbroadcast(ge * a.data, b.shape)


def _bw_cross_entropy(ctx, g, logits):
    probs = ctx["probs"].copy()
    t, valid, n = ctx["targets"], ctx["valid"], ctx["n"]
    probs[np.arange(len(t)), t] -= 1.0
    probs[~valid] = 0.0
    return ((float(g) / n) * probs.reshape(logits.shape),)


def _bw_sum(ctx, g, x):
    axis, keepdims = ctx["axis"], ctx["keepdims"]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _bw_reshape(ctx, g, x):
    return (g.reshape(x.shape),)


def _bw_transpose(ctx, g, x):
    return (np.swapaxes(g, -1, -2),)


def _bw_take(ctx, g, x):
    out = np.zeros_like(x.data)
    out[..., ctx["start"]:ctx["stop"]] = g
    return (out,)


BACKWARD: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "concat": _bw_concat,
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "tanh": _bw_tanh,
    "sigmoid": _bw_sigmoid,
    "relu": _bw_relu,
    "softmax": _bw_softmax,
    "embedding": _bw_embedding,
    "dot": _bw_dot,
    "cross_entropy": _bw_cross_entropy,
    "sum": _bw_sum,
    "reshape": _bw_reshape,
    "transpose": _bw_transpose,
    "take": _bw_take,
}

_FORWARD: dict[str, Callable] = {
    "matmul": matmul,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax": softmax,
    "embedding": embedding,
    "dot": dot,
    "cross_entropy": cross_entropy,
    "sum": sum_,
    "reshape": reshape,
    "transpose": transpose,
    "take": take,
}

OP_KINDS = tuple(_FORWARD)


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Run op ``kind`` on ``inputs`` (extra arguments such as indices via ``attrs``)."""
    try:
        fn = _FORWARD[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {OP_KINDS}") from None
    return fn(*inputs, **attrs)


# ------------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every requires_grad tensor recorded on ``tape``.

    Leaf gradients accumulate into any existing ``.grad``; call
    :func:`zero_grad` first for a fresh pass.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = set()
    for e in tape.entries:
        e.out.grad = None
        produced.add(id(e.out))
    loss.grad = np.ones_like(loss.data)
    # gradients of leaf weights used by many matmuls (one per decoding step)
    # are gathered and formed with a single product at the end
    deferred: dict[int, tuple[Tensor, list[_Outer]]] = {}
    for e in reversed(tape.entries):
        g = e.out.grad
        if g is None:
            continue
        ctx = e.ctx
        if e.kind in ("tanh", "sigmoid", "softmax"):
            ctx = dict(ctx, out=e.out.data)
        elif e.kind == "matmul" and id(e.inputs[1]) not in produced:
            ctx = dict(ctx, defer=True)
        grads = BACKWARD[e.kind](ctx, g, *e.inputs)
        for t, gt in zip(e.inputs, grads):
            if not t.requires_grad or gt is None:
                continue
            if isinstance(gt, _Outer):
                deferred.setdefault(id(t), (t, []))[1].append(gt)
            elif t.grad is None:
                t.grad = np.array(gt, dtype=np.float64, copy=True)
            else:
                t.grad += gt
    for t, outers in deferred.values():
        a = np.vstack([o.a for o in outers])
        gt = a.T @ np.vstack([o.g for o in outers])
        if t.grad is None:
            t.grad = gt
        else:
            t.grad += gt
    # reachable-or-not, everything on the tape ends with a defined gradient
    for e in tape.entries:
        for t in e.inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


def zero_grad(params: Mapping[str, Tensor] | Sequence[Tensor]) -> None:
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.zero_grad()


# ----------------------------------------------------------------- grad check


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    coords: Sequence[int] | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` builds its own graph from ``x`` (it may also close over other
    tensors); ``x.data`` is perturbed in place and restored. ``coords``
    restricts the check to a subset of flat indices.

    The error is ``|a - n| / max(floor, |a| + |n|)``. Central differences
    carry roundoff near ``1e-16 * |f| / step``, so without the floor a
    coordinate whose true gradient is ~1e-10 reads as a large relative error.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {y.shape}")
    y0 = y.item()
    if f(x).item() != y0:
        raise ContractError("grad_check: f is not deterministic (re-evaluation differs)")
    backward(y, tape)
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1).copy()
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x).item()
        flat[i] = orig - step
        fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * step)
        a = analytic[i]
        err = abs(a - numeric) / max(floor, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst


# ----------------------------------------------------------------------- adam


@dataclass
class AdamState:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _named(params) -> dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {str(i): p for i, p in enumerate(params)}


def adam_step(params: Mapping[str, Tensor] | Sequence[Tensor], state: AdamState) -> None:
    """Adam with decoupled weight decay; zeroes grads afterwards."""
    named = _named(params)
    for name, p in named.items():
        if p.grad is None:
            label = p.name or name
            raise ContractError(f"adam_step: parameter {label!r} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in named.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad.fill(0.0)


# ------------------------------------------------------------- checkpointing


def _encode(arr: np.ndarray) -> dict:
    flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
    return {"shape": list(arr.shape), "data_b64": base64.b64encode(flat.tobytes()).decode("ascii")}


def _decode(rec: dict) -> np.ndarray:
    shape = tuple(rec["shape"])
    if "data_b64" in rec:
        flat = np.frombuffer(base64.b64decode(rec["data_b64"]), dtype="<f8")
    else:
        flat = np.asarray(rec["data"], dtype=np.float64)
    if flat.size != math.prod(shape):
        raise ValueError(f"checkpoint entry has {flat.size} values for shape {shape}")
    return flat.astype(np.float64).reshape(shape)


def save_checkpoint(
    path: str | Path,
    params: Mapping[str, Tensor],
    meta: dict | None = None,
    adam: AdamState | None = None,
) -> None:
    """Write parameters (and optionally optimizer state) as one JSON document.

    Float arrays are stored little-endian float64, base64 encoded, so values
    round-trip bit-exactly. Readers also accept a plain ``"data"`` list.
    """
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "meta": meta or {},
        "params": {k: _encode(p.data) for k, p in params.items()},
    }
    if adam is not None:
        doc["adam"] = {
            "lr": adam.lr, "weight_decay": adam.weight_decay, "beta1": adam.beta1,
            "beta2": adam.beta2, "eps": adam.eps, "step": adam.step,
            "m": {k: _encode(v) for k, v in adam.m.items()},
            "v": {k: _encode(v) for k, v in adam.v.items()},
        }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict, AdamState | None]:
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    params = {k: Tensor(_decode(v), requires_grad=True, name=k) for k, v in doc["params"].items()}
    adam = None
    if "adam" in doc:
        a = doc["adam"]
        adam = AdamState(lr=a["lr"], weight_decay=a["weight_decay"], beta1=a["beta1"],
                         beta2=a["beta2"], eps=a["eps"], step=a["step"],
                         m={k: _decode(v) for k, v in a["m"].items()},
                         v={k: _decode(v) for k, v in a["v"].items()})
    return params, doc.get("meta", {}), adam


def init_linear(rng: np.random.Generator, n_in: int, n_out: int, name: str | None = None) -> Tensor:
    """Uniform(-1/sqrt(in), 1/sqrt(in)) weights stored input-major (in, out)."""
    bound = 1.0 / math.sqrt(n_in)
    return Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True, name=name)
