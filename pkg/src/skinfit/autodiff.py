"""Tape-based reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every differentiable operation in creation order, so
node parents always precede their children and the backward sweep is a plain
reverse walk.  Tensors that do not depend on a registered parameter are
treated as constants and never touch the tape.

    tape = Tape()
    w = tape.param("w", np.ones((3, 1)))
    loss = mean(square(matmul(tape.const(x), w) - y))
    grads = tape.backward(loss)          # {"w": ndarray(3, 1)}
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_FORMAT = "skinfit-params"
CHECKPOINT_VERSION = 1


class NonFiniteError(ArithmeticError):
    """Raised when a forward value contains NaN or Inf."""


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tensor:
    __array_priority__ = 100

    def __init__(self, value, tape: Tape | None = None, idx: int | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.idx = idx

    @property
    def requires_grad(self) -> bool:
        return self.idx is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Tape:
    """Ordered record of differentiable operations plus a parameter registry."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}
        # optional (op, input values, output value) log for inspection
        self.watch: list | None = None

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = self._leaf(value, "param")
        self.params[name] = t
        return t

    def variable(self, value) -> Tensor:
        """Unnamed differentiable leaf (used by grad_check)."""
        return self._leaf(value, "leaf")

    def const(self, value) -> Tensor:
        return Tensor(value, self, None)

    def _leaf(self, value, op) -> Tensor:
        value = np.array(value, dtype=np.float64)
        _check_finite(value, op)
        self.nodes.append(_Node(op, (), None))
        return Tensor(value, self, len(self.nodes) - 1)

    def record(self, op: str, value: np.ndarray, parents: Sequence[Tensor], vjp,
               selective: bool = False) -> Tensor:
        """``selective`` ops only select or rearrange entries, so their output is
        finite whenever every parent is; the check is skipped in that case."""
        ids = tuple(p.idx for p in parents)
        if self.watch is not None:
            self.watch.append((op, [p.value for p in parents], value))
        if not (selective and all(i is not None for i in ids)):
            _check_finite(value, op)
        if all(i is None for i in ids):
            return Tensor(value, self, None)
        self.nodes.append(_Node(op, ids, vjp))
        return Tensor(value, self, len(self.nodes) - 1)

    def backward(self, out: Tensor, leaves: Sequence[Tensor] = ()) -> dict:
        """Gradients of scalar ``out`` for every registered parameter.

        Parameters the output does not depend on get exact zeros.  Extra
        unnamed ``leaves`` are returned under their position index.
        """
        if out.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {out.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        if out.idx is not None:
            grads[out.idx] = np.ones_like(out.value)
            for i in range(out.idx, -1, -1):
                g = grads[i]
                node = self.nodes[i]
                if g is None or node.vjp is None:
                    continue
                for pid, pg in zip(node.parents, node.vjp(g)):
                    if pid is None or pg is None:
                        continue
                    grads[pid] = pg if grads[pid] is None else grads[pid] + pg

        def _grad(t: Tensor):
            g = grads[t.idx] if t.idx is not None else None
            return np.zeros_like(t.value) if g is None else np.asarray(g).reshape(t.shape)

        result = {name: _grad(t) for name, t in self.params.items()}
        for k, t in enumerate(leaves):
            result[k] = _grad(t)
        return result


def _check_finite(value: np.ndarray, op: str):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {op!r}")


def _lift(x, tape: Tape | None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, tape, None)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return Tape()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(op, a, b, fwd, vjp_a, vjp_b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    out = fwd(a.value, b.value)

    def vjp(g):
        ga = _unbroadcast(vjp_a(g, a.value, b.value), a.shape) if a.requires_grad else None
        gb = _unbroadcast(vjp_b(g, a.value, b.value), b.shape) if b.requires_grad else None
        return ga, gb

    return tape.record(op, out, (a, b), vjp)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(
        "div", a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting; both operands >= 2-D."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.value, b.value)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return tape.record("matmul", out, (a, b), vjp)


def _unary(op, x, out, vjp_fn, selective: bool = False) -> Tensor:
    tape = _tape_of(x)
    x = _lift(x, tape)
    return tape.record(op, out, (x,), lambda g: (vjp_fn(g),), selective)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _lift(x, None)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape)

    return _unary("sum", x, out, vjp)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _lift(x, None)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def relu(x) -> Tensor:
    x = _lift(x, None)
    out = np.maximum(x.value, 0.0)
    return _unary("relu", x, out, lambda g: g * (out > 0), True)


def square(x) -> Tensor:
    x = _lift(x, None)
    return _unary("square", x, x.value * x.value, lambda g: 2.0 * g * x.value)


def sqrt(x) -> Tensor:
    x = _lift(x, None)
    if np.any(x.value < 0):
        raise NonFiniteError("sqrt of negative value")
    out = np.sqrt(x.value)
    return _unary("sqrt", x, out, lambda g: g * 0.5 / out)


def clip(x, lo, hi) -> Tensor:
    """Elementwise clamp; gradient passes only strictly inside the bounds."""
    x = _lift(x, None)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    out = np.clip(x.value, lo, hi)
    inside = (x.value > lo) & (x.value < hi)
    return _unary("clip", x, out, lambda g: g * inside, True)


def max_pool(x, axis: int) -> Tensor:
    """Max over ``axis`` (the set axis); ties route the gradient to the first maximum."""
    x = _lift(x, None)
    arg = np.argmax(x.value, axis=axis)
    out = np.take_along_axis(x.value, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return full

    return _unary("max_pool", x, out, vjp, True)


def reshape(x, shape) -> Tensor:
    x = _lift(x, None)
    return _unary("reshape", x, x.value.reshape(shape), lambda g: g.reshape(x.shape), True)


def transpose(x, axes) -> Tensor:
    x = _lift(x, None)
    inv = np.argsort(axes)
    return _unary("transpose", x, np.transpose(x.value, axes), lambda g: np.transpose(g, inv), True)


def getitem(x, key) -> Tensor:
    x = _lift(x, None)

    def vjp(g):
        full = np.zeros(x.shape)
        np.add.at(full, key, g)
        return full

    return _unary("getitem", x, x.value[key], vjp, True)


def gather(x, index, axis: int = 0) -> Tensor:
    """Index-select along ``axis``; backward scatter-adds into the source rows."""
    x = _lift(x, None)
    index = np.asarray(index, dtype=np.intp)
    out = np.take(x.value, index, axis=axis)

    def vjp(g):
        full = np.zeros(x.shape)
        gm = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        fm = np.moveaxis(full, axis, 0)
        np.add.at(fm, index, gm)
        return full

    return _unary("gather", x, out, vjp, True)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    out = np.concatenate([x.value for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return np.split(g, bounds, axis=axis)

    return tape.record("concat", out, xs, vjp, True)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    out = np.stack([x.value for x in xs], axis=axis)

    def vjp(g):
        return [np.take(g, i, axis=axis) for i in range(len(xs))]

    return tape.record("stack", out, xs, vjp, True)


def sparse_matmul(mat, x) -> Tensor:
    """Constant scipy sparse matrix times a 2-D tensor."""
    x = _lift(x, None)
    out = np.asarray(mat @ x.value)
    mat_t = mat.T.tocsr()
    return _unary("sparse_matmul", x, out, lambda g: np.asarray(mat_t @ g))


def _rot_parts(angles: np.ndarray):
    a, b, c = angles[..., 0], angles[..., 1], angles[..., 2]
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    zero, one = np.zeros_like(a), np.ones_like(a)

    def m(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    rx = m([[one, zero, zero], [zero, ca, -sa], [zero, sa, ca]])
    ry = m([[cb, zero, sb], [zero, one, zero], [-sb, zero, cb]])
    rz = m([[cc, -sc, zero], [sc, cc, zero], [zero, zero, one]])
    drx = m([[zero, zero, zero], [zero, -sa, -ca], [zero, ca, -sa]])
    dry = m([[-sb, zero, cb], [zero, zero, zero], [-cb, zero, -sb]])
    drz = m([[-sc, -cc, zero], [cc, -sc, zero], [zero, zero, zero]])
    return rx, ry, rz, drx, dry, drz


def euler_matrix(angles) -> np.ndarray:
    """Rotation matrices Rz(c) @ Ry(b) @ Rx(a) for angles (..., 3) = (a, b, c)."""
    rx, ry, rz, *_ = _rot_parts(np.asarray(angles, dtype=np.float64))
    return rz @ ry @ rx


def euler_to_rotation(x) -> Tensor:
    x = _lift(x, None)
    if x.shape[-1] != 3:
        raise ValueError(f"euler angles need a trailing axis of 3, got {x.shape}")
    rx, ry, rz, drx, dry, drz = _rot_parts(x.value)
    rzy = rz @ ry
    out = rzy @ rx

    def vjp(g):
        da = (g * (rzy @ drx)).sum(axis=(-1, -2))
        db = (g * (rz @ dry @ rx)).sum(axis=(-1, -2))
        dc = (g * (drz @ ry @ rx)).sum(axis=(-1, -2))
        return np.stack([da, db, dc], axis=-1)

    return _unary("euler_to_rotation", x, out, vjp)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_with_logits(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    logits = _lift(logits, None)
    labels = np.asarray(labels, dtype=np.intp)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    logp = log_softmax(logits.value)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    count = labels.size
    # sorted summation: the loss value does not depend on point order
    out = np.asarray(-np.sort(picked, axis=None).sum() / count)

    def vjp(g):
        p = np.exp(logp)
        np.put_along_axis(p, labels[..., None], np.take_along_axis(p, labels[..., None], -1) - 1.0, -1)
        return g * p / count

    return _unary("cross_entropy", logits, out, vjp)


def grad_check(fn: Callable[[Tensor], Tensor], point, fd_step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``fn`` maps a tensor shaped like ``point`` to a scalar tensor; it is
    re-evaluated on fresh tapes for the finite differences.
    """
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.variable(point)
    analytic = tape.backward(fn(x), leaves=[x])[0]
    flat = point.reshape(-1)
    fd = np.empty(flat.size)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += fd_step
        dn[i] -= fd_step
        f_up = float(fn(Tape().const(up.reshape(point.shape))).value)
        f_dn = float(fn(Tape().const(dn.reshape(point.shape))).value)
        fd[i] = (f_up - f_dn) / (2.0 * fd_step)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - fd) / np.maximum(1.0, np.abs(a)), initial=0.0))


@dataclass
class Adam:
    """Momentum plus per-parameter adaptive scaling (first/second moment estimates)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in params:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def save_params(path, params: dict[str, np.ndarray], meta: dict | None = None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            k: {"shape": list(v.shape), "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in params.items()
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {}
    for k, entry in doc["params"].items():
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape)):
            raise ValueError(f"{path}: parameter {k!r} has {values.size} values for shape {shape}")
        params[k] = values.reshape(shape)
    return params, doc.get("meta", {})
