"""Reverse-mode differentiation over small dense float64 tensors.

Every operation works on :class:`Tensor` values. A tensor either belongs to a
:class:`Tape` (it is a leaf created with :meth:`Tape.leaf` or the result of an
operation on taped operands) or is a free constant. Operations whose operands
are all constants run eagerly without recording anything, so the same code
path serves plain evaluation and training.

Backward is a single reverse sweep over the tape::

    tape = Tape()
    w = tape.leaf(np.ones(3), "w")
    loss = dm.sum(w * w)
    grads = tape.backward(loss)      # {"w": array([2., 2., 2.])}
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes = []  # (output, parents, vjp)
        self.leaves = {}
        self._names = set()

    def leaf(self, value, name=None) -> Tensor:
        if name is None:
            name = f"leaf{len(self.leaves)}"
        if name in self._names:
            raise ValueError(f"duplicate leaf name {name!r}")
        self._names.add(name)
        t = Tensor(np.array(value, dtype=DTYPE), tape=self, name=name)
        self.leaves[name] = t
        return t

    def clear(self) -> None:
        """Drop recorded operations so their buffers can be freed right away."""
        self.nodes = []
        self.leaves = {}
        self._names = set()

    def record(self, out: Tensor, parents, vjp) -> None:
        out.tape = self
        out.index = len(self.nodes)
        self.nodes.append((out, parents, vjp))

    def backward(self, output: Tensor, seed=None) -> dict[str, np.ndarray]:
        """Gradients of scalar ``output`` w.r.t. every leaf, keyed by leaf name.

        ``seed`` overrides the upstream gradient (must match output shape);
        without it the output has to be a scalar.
        """
        if output.tape is not self:
            raise ValueError("output was not produced on this tape")
        if seed is None:
            if output.data.size != 1:
                raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
            seed = np.ones_like(output.data)
        grads = {id(output): np.asarray(seed, dtype=DTYPE).reshape(output.shape)}
        stop = output.index if output.index is not None else -1
        for out, parents, vjp in reversed(self.nodes[: stop + 1]):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or parent.tape is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        result = {}
        for name, leaf in self.leaves.items():
            g = grads.get(id(leaf))
            result[name] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
        return result


class Tensor:
    __slots__ = ("data", "tape", "index", "name")
    __array_priority__ = 100

    def __init__(self, data, tape=None, name=None):
        self.data = data
        self.tape = tape
        self.index = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        kind = "leaf " + self.name if self.name else ("taped" if self.tape else "const")
        return f"Tensor({kind}, shape={self.shape})"

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

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def constant(x) -> Tensor:
    """Detached copy of the value; no gradient flows through it."""
    return Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=DTYPE))


def _tape_of(*ts):
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _make(data, parents, vjp):
    out = Tensor(data)
    tape = _tape_of(*parents)
    if tape is not None:
        tape.record(out, parents, vjp)
    return out


def primitive(data, parents, vjp) -> Tensor:
    """Record a custom operation: ``vjp(g)`` returns one gradient (or None) per parent."""
    return _make(data, tuple(as_tensor(p) for p in parents), vjp)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.tape else None,
            _unbroadcast(g * ad, bd.shape) if b.tape else None,
        )

    return _make(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.tape else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.tape else None,
        )

    return _make(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def _unary(a, value, deriv):
    a = as_tensor(a)
    return _make(value, (a,), lambda g: (g * deriv(),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient 0 at the kink
    return _unary(a, np.maximum(a.data, 0.0), lambda: (a.data > 0).astype(DTYPE))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _unary(a, s, lambda: s * (1.0 - s))


def _sigmoid(x):
    # stable for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    val = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _unary(a, val, lambda: _sigmoid(x))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _unary(a, e, lambda: e)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.log(a.data), lambda: 1.0 / a.data)


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.sin(a.data), lambda: np.cos(a.data))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.cos(a.data), lambda: -np.sin(a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    r = np.sqrt(a.data)
    return _unary(a, r, lambda: 0.5 / r)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, a.data * a.data, lambda: 2.0 * a.data)


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _unary(a, np.abs(a.data), lambda: np.sign(a.data))


def atan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    _check_broadcast(y, x, "atan2")
    yd, xd = y.data, x.data
    r2 = xd * xd + yd * yd
    safe = np.where(r2 > 0, r2, 1.0)

    def vjp(g):
        return (
            _unbroadcast(np.where(r2 > 0, g * xd / safe, 0.0), yd.shape) if y.tape else None,
            _unbroadcast(np.where(r2 > 0, -g * yd / safe, 0.0), xd.shape) if x.tape else None,
        )

    return _make(np.arctan2(yd, xd), (y, x), vjp)


def elementwise(a, fn, dfn) -> Tensor:
    """Custom unary primitive given its value and derivative functions."""
    a = as_tensor(a)
    return _unary(a, fn(a.data), lambda: dfn(a.data))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def vjp(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.tape:
            ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(ad.shape)
        if b.tape:
            if b2.ndim == 2 and a2.ndim > 2:
                # fold batch axes into one GEMM instead of per-batch outer products
                gb = (a2.reshape(-1, a2.shape[-1]).T @ g2.reshape(-1, g2.shape[-1])).reshape(bd.shape)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(bd.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


# ---------------------------------------------------------------- structure


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis, keepdims) * (1.0 / n)


def cumsum(a, axis=-1) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), vjp)


def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in ts)
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(ts), vjp)


def stack(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([expand_dims(t, axis) for t in ts], axis=axis)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def expand_dims(a, axis) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, old),))


def getitem(a, key) -> Tensor:
    """Basic and advanced indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic(key)

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make(a.data[key], (a,), vjp)


def _is_basic(key):
    keys = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice)) for k in keys)


def _segment_sum(idx, rows, n):
    """acc[i] = sum of rows[j] with idx[j] == i, summed in a fixed (stable-sorted) order."""
    acc = np.zeros((n, rows.shape[1]), dtype=DTYPE)
    if idx.size == 0:
        return acc
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    acc[sidx[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return acc


def take(a, indices, axis=0) -> Tensor:
    """Gather along one axis with an integer index array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    axis = axis % a.ndim
    shape = a.shape

    def vjp(g):
        # move gathered block to front, scatter-add rows
        n = shape[axis]
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        gm = gm.reshape((idx.size,) + gm.shape[idx.ndim :])
        flat = gm.reshape(idx.size, -1)
        acc = _segment_sum(idx.ravel(), flat, n)
        rest = shape[:axis] + shape[axis + 1 :]
        acc = acc.reshape((n,) + rest)
        return (np.moveaxis(acc, 0, axis),)

    return _make(np.take(a.data, idx, axis=axis), (a,), vjp)


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    c = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (_unbroadcast(np.where(c, g, 0.0), sa), _unbroadcast(np.where(c, 0.0, g), sb))

    return _make(np.where(c, a.data, b.data), (a, b), vjp)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named parameters with Adam moment accumulators.

    Decay constants are the usual 0.9 / 0.999 with epsilon 1e-8.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.lr_mult: dict[str, float] = {}
        self.step_count = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._warned: set[str] = set()

    def add(self, name, value, lr_mult=1.0):
        value = np.array(value, dtype=DTYPE)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        self.lr_mult[name] = float(lr_mult)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def names(self):
        return list(self.params)

    def leaves(self, tape: Tape, names=None) -> dict[str, Tensor]:
        names = self.params if names is None else names
        return {n: tape.leaf(self.params[n], n) for n in names}

    def step(self, grads: dict[str, np.ndarray], lr: float, frozen=()) -> None:
        """One Adam update. Parameters without a gradient, or listed in ``frozen``, stay put."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            if name in frozen:
                continue
            g = grads.get(name)
            if g is None:
                if name not in self._warned:
                    logger.warning("no gradient for parameter %r; left frozen", name)
                    self._warned.add(name)
                continue
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            step = lr * self.lr_mult[name] / bc1
            p -= step * m / (np.sqrt(v / bc2) + self.eps)

    # -- checkpoints

    def state(self):
        return {
            "format": "paramstore-v1",
            "step": self.step_count,
            "params": [
                {
                    "name": n,
                    "shape": list(p.shape),
                    "values": p.ravel().tolist(),
                    "lr_mult": self.lr_mult[n],
                }
                for n, p in self.params.items()
            ],
        }

    def save(self, path, meta=None) -> None:
        """Write a checkpoint. ``.json`` is structured text (bit-exact), ``.npz`` binary."""
        path = Path(path)
        if path.suffix == ".npz":
            arrays = {f"param:{n}": p for n, p in self.params.items()}
            header = {"step": self.step_count, "lr_mult": self.lr_mult, "meta": meta or {}}
            np.savez(path, __header__=np.array(json.dumps(header)), **arrays)
            return
        state = self.state()
        state["meta"] = meta or {}
        path.write_text(json.dumps(state))

    @classmethod
    def load(cls, path) -> ParamStore:
        store, _ = cls.load_with_meta(path)
        return store

    @classmethod
    def load_with_meta(cls, path):
        path = Path(path)
        store = cls()
        if path.suffix == ".npz":
            with np.load(path) as z:
                header = json.loads(str(z["__header__"]))
                for key in z.files:
                    if key.startswith("param:"):
                        name = key[len("param:") :]
                        store.add(name, z[key], header["lr_mult"].get(name, 1.0))
            store.step_count = header["step"]
            return store, header.get("meta", {})
        state = json.loads(path.read_text())
        if state.get("format") != "paramstore-v1":
            raise ValueError(f"{path}: not a parameter checkpoint")
        for entry in state["params"]:
            arr = np.array(entry["values"], dtype=DTYPE).reshape(entry["shape"])
            store.add(entry["name"], arr, entry.get("lr_mult", 1.0))
        store.step_count = state["step"]
        return store, state.get("meta", {})


def numerical_grad(f, x: np.ndarray, h=1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=DTYPE)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g
