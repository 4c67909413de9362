"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

The op set is the minimum needed for MLPs, message passing, layer
normalization, softmax and token attention: 2-D matmul, broadcasted
elementwise arithmetic, row gather/scatter, segment sums, concatenation and
reductions.  Every primitive registers a backward closure on the active
:class:`Tape`; the tape replays them in reverse, visiting each record exactly
once.  Gradients are verified against central finite differences by
:func:`grad_check`.

All data is float64.  Tensors are treated as immutable after construction;
ops never write into their inputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, ValidationError

Array = np.ndarray


class Tensor:
    """A shaped block of float64 values, optionally marked trainable."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive ops; inputs always precede their consumers.

    Also doubles as the op-census instrument: every record carries an integer
    flop estimate and the scope label active when it was created, so the cost
    of a network stage can be compared across input sizes exactly.
    """

    _active: "Tape | None" = None

    def __init__(self):
        # entries: (out, inputs, backward, op name, scope label, flops)
        self.records: list[tuple] = []
        self._scope = "main"
        self.counts: dict[str, dict[str, list[int]]] = {}

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise ValidationError("a tape is already active; tapes do not nest")
        Tape._active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._active = None

    @contextlib.contextmanager
    def scope(self, label: str):
        prev = self._scope
        self._scope = label
        try:
            yield
        finally:
            self._scope = prev

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable,
               name: str, flops: int) -> None:
        self.records.append((out, inputs, backward, name, self._scope, flops))
        stage = self.counts.setdefault(self._scope, {})
        cell = stage.setdefault(name, [0, 0])
        cell[0] += 1
        cell[1] += flops

    def census(self) -> dict[str, dict[str, tuple[int, int]]]:
        """Per-scope {op name: (call count, flop count)} snapshot."""
        return {s: {k: (v[0], v[1]) for k, v in ops.items()} for s, ops in self.counts.items()}

    def gradients(self, root: Tensor, wrt: Sequence[Tensor]) -> list[Array]:
        """Reverse pass from a scalar root; returns one gradient per entry of wrt."""
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
        grads: dict[int, Array] = {id(root): np.ones_like(root.data)}
        for out, inputs, backward, _, _, _ in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, contrib in backward(g):
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = np.array(contrib, dtype=np.float64, copy=True)
                else:
                    acc += contrib
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def _tape() -> Tape | None:
    return Tape._active


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcasted gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _emit(out_data: Array, inputs: tuple[Tensor, ...], backward: Callable,
          name: str, flops: int) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _tape()
    if tape is not None:
        tape.record(out, inputs, backward, name, flops)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules, gradients unbroadcast)

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def backward(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape))]

    return _emit(out, (a, b), backward, "add", out.size)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def backward(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape))]

    return _emit(out, (a, b), backward, "sub", out.size)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def backward(g):
        return [(a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape))]

    return _emit(out, (a, b), backward, "mul", out.size)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def backward(g):
        return [(a, _unbroadcast(g / b.data, a.data.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))]

    return _emit(out, (a, b), backward, "div", out.size)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _emit(-a.data, (a,), lambda g: [(a, -g)], "neg", a.size)


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: [(a, g * c)], "scale", a.size)


def maximum_scalar(a, c: float) -> Tensor:
    """Elementwise max(a, c); gradient passes only where a > c."""
    a = _wrap(a)
    c = float(c)
    mask = a.data > c

    def backward(g):
        return [(a, g * mask)]

    return _emit(np.maximum(a.data, c), (a,), backward, "maximum_scalar", a.size)


# ---------------------------------------------------------------------------
# linear algebra and nonlinearities

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def backward(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    m, k = a.data.shape
    n = b.data.shape[1]
    return _emit(out, (a, b), backward, "matmul", 2 * m * k * n)


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")
    return _emit(a.data.T.copy(), (a,), lambda g: [(a, g.T)], "transpose", a.size)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    """max(x, slope*x); the subgradient at 0 is the negative-side slope."""
    if not 0.0 < slope < 1.0:
        raise ValidationError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = _wrap(x)
    pos = x.data > 0.0
    out = np.where(pos, x.data, slope * x.data)

    def backward(g):
        return [(x, g * np.where(pos, 1.0, slope))]

    return _emit(out, (x,), backward, "leaky_relu", x.size)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Standardize each row over the last axis, then apply gain and bias."""
    if eps <= 0.0:
        raise ValidationError(f"layer_norm eps must be positive, got {eps}")
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    out = gain.data * y + bias.data

    def backward(g):
        dy = g * gain.data
        dmean = dy.mean(axis=-1, keepdims=True)
        dyy = (dy * y).mean(axis=-1, keepdims=True)
        dx = (dy - dmean - y * dyy) * inv
        axes = tuple(range(g.ndim - 1))
        dgain = (g * y).sum(axis=axes)
        dbias = g.sum(axis=axes)
        return [(x, dx), (gain, dgain), (bias, dbias)]

    return _emit(out, (x, gain, bias), backward, "layer_norm", 8 * x.size)


def softmax(x, axis: int = -1) -> Tensor:
    """Stable softmax along one axis; outputs are positive and sum to 1."""
    x = _wrap(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return [(x, y * (g - dot))]

    return _emit(y, (x,), backward, "softmax", 5 * x.size)


# ---------------------------------------------------------------------------
# gather / scatter / layout

def segment_sum(values, segment_ids: Array, n_segments: int) -> Tensor:
    """Sum value rows into ``n_segments`` buckets; empty buckets stay zero.

    Contributions are accumulated in ascending input-row order, which makes
    results reproducible bit for bit across runs.
    """
    values = _wrap(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if values.data.ndim != 2 or ids.shape != (values.data.shape[0],):
        raise ShapeError(
            f"segment_sum expects [E x d] values and E ids, got {values.data.shape} / {ids.shape}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
        raise ValidationError(
            f"segment id out of range: ids span [{ids.min()}, {ids.max()}], n_segments={n_segments}"
        )
    out = np.zeros((n_segments, values.data.shape[1]))
    np.add.at(out, ids, values.data)

    def backward(g):
        return [(values, g[ids])]

    return _emit(out, (values,), backward, "segment_sum", values.size)


def gather_rows(x, index: Array) -> Tensor:
    """Row lookup x[index]; the backward pass scatter-adds into the source."""
    x = _wrap(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got shape {x.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ValidationError(f"gather index out of range for {x.data.shape[0]} rows")
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return [(x, gx)]

    return _emit(out, (x,), backward, "gather_rows", out.size)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _wrap(x)
    out = x.data[start:stop].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return [(x, gx)]

    return _emit(out, (x,), backward, "slice_rows", out.size)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return list(zip(parts, np.split(g, splits, axis=axis)))

    return _emit(out, tuple(parts), backward, "concat", out.size)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _wrap(x)
    out = x.data.reshape(shape).copy()

    def backward(g):
        return [(x, g.reshape(x.data.shape))]

    return _emit(out, (x,), backward, "reshape", x.size)


# ---------------------------------------------------------------------------
# reductions

def sum_all(x) -> Tensor:
    x = _wrap(x)

    def backward(g):
        return [(x, np.broadcast_to(g, x.data.shape).copy())]

    return _emit(np.array(x.data.sum()), (x,), backward, "sum_all", x.size)


def sum_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(x, np.broadcast_to(gg, x.data.shape).copy())]

    return _emit(out, (x,), backward, "sum_axis", x.size)


def mean_all(x) -> Tensor:
    x = _wrap(x)
    return scale(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# verification

def grad_check(f: Callable, inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference grads.

    ``f`` must be a pure scalar-valued function of its tensor arguments.  The
    relative error for a coordinate is |ad - fd| / max(1, |ad|, |fd|), so
    near-zero gradients are compared absolutely.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValidationError(f"finite-difference step {step} outside [1e-7, 1e-3]")
    inputs = [ _wrap(t) for t in inputs ]
    probes = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    with Tape() as tape:
        out = f(*probes)
        if out.data.size != 1:
            raise ShapeError("grad_check target must be scalar-valued")
        if not np.isfinite(out.data).all():
            raise NumericError("grad_check: non-finite function value")
        analytic = tape.gradients(out, probes)

    def evaluate(args: list[Array]) -> float:
        val = f(*[Tensor(a) for a in args]).data
        if not np.isfinite(val).all():
            raise NumericError("grad_check: non-finite function value during probing")
        return float(val)

    worst = 0.0
    base = [t.data.copy() for t in inputs]
    for k, grad in enumerate(analytic):
        flat = base[k].reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = evaluate(base)
            flat[j] = orig - step
            f_minus = evaluate(base)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(gflat[j] - numeric) / max(1.0, abs(gflat[j]), abs(numeric))
            if err > worst:
                worst = err
    return worst
