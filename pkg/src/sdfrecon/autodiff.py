"""Reverse-mode automatic differentiation over dense numpy buffers.

Everything trainable (grid factors, MLP weights, light networks) lives in a
:class:`Parameter` inside a :class:`ParamStore`. A :class:`Tape` records ops
in execution order; ``Tape.backward`` replays them in exact reverse order and
accumulates gradients into ``Parameter.grad``.

Ops are vectorized over whole batches, so a typical training step records a
few hundred nodes regardless of batch size. Training runs in float32; the
finite-difference test-suite builds float64 graphs to separate discretization
error from autodiff bugs.
"""

from __future__ import annotations

import io
import json
import zipfile
from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for tape/parameter errors."""


class ShapeError(AutodiffError):
    """Operand shapes incompatible for an op."""


class StateError(AutodiffError):
    """Operation invoked in an invalid tape state (e.g. backward w/o forward)."""


class Parameter:
    """A trainable dense buffer with a persistent gradient accumulator."""

    __slots__ = ("id", "values", "grad")

    def __init__(self, pid: str, values: np.ndarray):
        self.id = pid
        self.values = np.ascontiguousarray(values)
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.id!r}, shape={self.values.shape})"


class ParamStore:
    """Registry of named parameters; the unit of checkpointing/optimization."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, pid: str, values: np.ndarray) -> Parameter:
        if pid in self._params:
            raise AutodiffError(f"duplicate parameter id {pid!r}")
        p = Parameter(pid, values)
        self._params[pid] = p
        return p

    def get(self, pid: str) -> Parameter:
        return self._params[pid]

    def __contains__(self, pid: str) -> bool:
        return pid in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def ids(self) -> list[str]:
        return list(self._params.keys())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def replace(self, pid: str, values: np.ndarray) -> Parameter:
        """Swap a parameter's buffer (used by grid upsampling); grad is re-zeroed."""
        if pid not in self._params:
            raise AutodiffError(f"unknown parameter id {pid!r}")
        p = Parameter(pid, values)
        self._params[pid] = p
        return p

    def select(self, prefix: str) -> list[Parameter]:
        return [p for pid, p in self._params.items() if pid.startswith(prefix)]


class Var:
    """A value on the tape. Leaves wrap a Parameter or a constant array."""

    __slots__ = ("data", "tape", "param", "_grad", "_idx", "_needs")

    def __init__(self, data: np.ndarray, tape: "Tape", param: Parameter | None = None):
        self.data = data
        self.tape = tape
        self.param = param
        self._grad = None
        self._idx = -1
        # True when a Parameter is reachable below; constant-only subgraphs
        # keep False and their backward work is skipped entirely
        self._needs = param is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(self.tape.const_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return pow_const(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self) -> str:
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Ordered op record. Append order is topological order by construction."""

    def __init__(self, recording: bool = True):
        self.recording = recording
        self._nodes: list[tuple[Var, tuple[Var, ...], Callable]] = []
        self._ran_forward = False
        # set during backward: ops may skip gradients of constant operands
        self._prune = False

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, param: Parameter) -> Var:
        self._ran_forward = True
        return Var(param.values, self, param=param)

    def const(self, data, dtype=None) -> Var:
        self._ran_forward = True
        arr = np.asarray(data, dtype=dtype)
        return Var(arr, self)

    def const_like(self, data, like: Var) -> Var:
        return self.const(data, dtype=like.data.dtype)

    def record(self, out: Var, parents: tuple[Var, ...], backward: Callable) -> Var:
        if self.recording:
            out._idx = len(self._nodes)
            out._needs = any(p._needs for p in parents)
            self._nodes.append((out, parents, backward))
        return out

    def backward(self, out: Var, seed=None, wrt: Sequence[Var] | None = None):
        """Accumulate d(out)/d(param), weighted by seed, into Parameter.grad.

        When ``wrt`` lists non-parameter vars, their gradients are returned
        (zeros where no path exists); used for input-space gradients such as
        SDF normals.
        """
        if not self._ran_forward:
            raise StateError("backward called before any forward computation")
        if out.tape is not self:
            raise StateError("output var does not belong to this tape")
        if seed is None:
            seed = np.ones_like(out.data)
        else:
            seed = np.asarray(seed, dtype=out.data.dtype)
            if seed.shape != out.data.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} does not match output shape {out.data.shape}"
                )

        touched: list[Var] = []

        def _acc(v: Var, g: np.ndarray):
            if v._grad is None:
                v._grad = g.copy() if g.base is not None or g is seed else g
                touched.append(v)
            else:
                v._grad = v._grad + g

        if out.param is not None:
            out.param.grad += seed
        _acc(out, seed)

        # with wrt set, constant inputs may need gradients too, so the
        # parameter-reachability shortcut below must be disabled
        prune = wrt is None
        self._prune = prune
        limit = out._idx
        try:
            for i in range(len(self._nodes) - 1, -1, -1):
                if limit >= 0 and i > limit:
                    continue
                node_out, parents, bwd = self._nodes[i]
                g = node_out._grad
                if g is None or (prune and not node_out._needs):
                    continue
                parent_grads = bwd(g)
                for v, pg in zip(parents, parent_grads):
                    if pg is None:
                        continue
                    if v.param is not None:
                        v.param.grad += pg
                    _acc(v, pg)
        finally:
            self._prune = False

        result = None
        if wrt is not None:
            result = [
                v._grad if v._grad is not None else np.zeros_like(v.data) for v in wrt
            ]
        for v in touched:
            v._grad = None
        return result


# ---------------------------------------------------------------------------
# op helpers


def _lift(x, like: Var) -> Var:
    if isinstance(x, Var):
        return x
    return like.tape.const(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_shapes_ok(a: np.ndarray, b: np.ndarray, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Var, b) -> Var:
    b = _lift(b, a)
    _binary_shapes_ok(a.data, b.data, "add")
    out = Var(a.data + b.data, a.tape)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return a.tape.record(out, (a, b), bwd)


def sub(a: Var, b) -> Var:
    b = _lift(b, a)
    _binary_shapes_ok(a.data, b.data, "sub")
    out = Var(a.data - b.data, a.tape)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return a.tape.record(out, (a, b), bwd)


def mul(a: Var, b) -> Var:
    b = _lift(b, a)
    _binary_shapes_ok(a.data, b.data, "mul")
    out = Var(a.data * b.data, a.tape)
    ad, bd = a.data, b.data
    tape = a.tape

    def bwd(g):
        skip = tape._prune
        ga = None if skip and not a._needs else _unbroadcast(g * bd, ad.shape)
        gb = None if skip and not b._needs else _unbroadcast(g * ad, bd.shape)
        return ga, gb

    return tape.record(out, (a, b), bwd)


def div(a: Var, b) -> Var:
    b = _lift(b, a)
    _binary_shapes_ok(a.data, b.data, "div")
    out = Var(a.data / b.data, a.tape)
    ad, bd = a.data, b.data
    tape = a.tape

    def bwd(g):
        skip = tape._prune
        ga = None if skip and not a._needs else _unbroadcast(g / bd, ad.shape)
        gb = None if skip and not b._needs else _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return tape.record(out, (a, b), bwd)


def neg(a: Var) -> Var:
    out = Var(-a.data, a.tape)
    return a.tape.record(out, (a,), lambda g: (-g,))


def pow_const(a: Var, k: float) -> Var:
    out = Var(a.data**k, a.tape)
    ad = a.data

    def bwd(g):
        return (g * k * ad ** (k - 1),)

    return a.tape.record(out, (a,), bwd)


def exp(a: Var) -> Var:
    od = np.exp(a.data)
    out = Var(od, a.tape)
    return a.tape.record(out, (a,), lambda g: (g * od,))


def log(a: Var) -> Var:
    out = Var(np.log(a.data), a.tape)
    ad = a.data
    return a.tape.record(out, (a,), lambda g: (g / ad,))


def sqrt(a: Var) -> Var:
    od = np.sqrt(a.data)
    out = Var(od, a.tape)
    return a.tape.record(out, (a,), lambda g: (g * (0.5 / od),))


def sin(a: Var) -> Var:
    out = Var(np.sin(a.data), a.tape)
    ad = a.data
    return a.tape.record(out, (a,), lambda g: (g * np.cos(ad),))


def cos(a: Var) -> Var:
    out = Var(np.cos(a.data), a.tape)
    ad = a.data
    return a.tape.record(out, (a,), lambda g: (-g * np.sin(ad),))


def tanh(a: Var) -> Var:
    od = np.tanh(a.data)
    out = Var(od, a.tape)
    return a.tape.record(out, (a,), lambda g: (g * (1.0 - od * od),))


def sigmoid(a: Var) -> Var:
    od = 1.0 / (1.0 + np.exp(-a.data))
    out = Var(od, a.tape)
    return a.tape.record(out, (a,), lambda g: (g * od * (1.0 - od),))


def softplus(a: Var, beta: float = 1.0) -> Var:
    # numerically stable: softplus(x) = max(x,0) + log1p(exp(-|x|)) / beta scaling
    x = a.data * beta
    od = (np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))) / beta
    out = Var(od.astype(a.data.dtype, copy=False), a.tape)
    sig = 1.0 / (1.0 + np.exp(-x))

    def bwd(g):
        return (g * sig,)

    return a.tape.record(out, (a,), bwd)


def relu(a: Var) -> Var:
    out = Var(np.maximum(a.data, 0.0), a.tape)
    mask = a.data > 0
    return a.tape.record(out, (a,), lambda g: (g * mask,))


def absval(a: Var) -> Var:
    out = Var(np.abs(a.data), a.tape)
    sgn = np.sign(a.data)
    return a.tape.record(out, (a,), lambda g: (g * sgn,))


def clip(a: Var, lo: float | None, hi: float | None) -> Var:
    """Clamp with zero gradient outside the active range."""
    od = np.clip(a.data, lo, hi)
    out = Var(od, a.tape)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi

    def bwd(g):
        return (np.where(inside, g, 0.0),)

    return a.tape.record(out, (a,), bwd)


def maximum(a: Var, b) -> Var:
    """Elementwise max; on ties the gradient goes to the first operand."""
    b = _lift(b, a)
    _binary_shapes_ok(a.data, b.data, "maximum")
    take_a = a.data >= b.data
    out = Var(np.where(take_a, a.data, b.data), a.tape)

    def bwd(g):
        return (
            _unbroadcast(np.where(take_a, g, 0.0), a.data.shape),
            _unbroadcast(np.where(take_a, 0.0, g), b.data.shape),
        )

    return a.tape.record(out, (a, b), bwd)


def where(cond: np.ndarray, a: Var, b) -> Var:
    """Select on a constant boolean mask."""
    b = _lift(b, a)
    cond = np.asarray(cond, dtype=bool)
    out = Var(np.where(cond, a.data, b.data), a.tape)

    def bwd(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.data.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.data.shape),
        )

    return a.tape.record(out, (a, b), bwd)


def detach(a: Var) -> Var:
    """First-class stop-gradient: value flows on, no backward edge."""
    return Var(a.data, a.tape)


# ---------------------------------------------------------------------------
# linear algebra / structure


def matmul(a: Var, b: Var) -> Var:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = Var(a.data @ b.data, a.tape)
    ad, bd = a.data, b.data
    tape = a.tape

    def bwd(g):
        skip = tape._prune
        ga = None if skip and not a._needs else g @ bd.T
        gb = None if skip and not b._needs else ad.T @ g
        return ga, gb

    return tape.record(out, (a, b), bwd)


def affine(x: Var, w: Var, b: Var, act: str = "none") -> Var:
    """Fused x @ w + b with an optional relu, one tape node instead of three.

    The elementwise chain (bias add, activation, their backward buffers) is
    the hot path of every MLP query; fusing it roughly halves tape overhead
    for hidden layers.
    """
    if act not in ("none", "relu"):
        raise ValueError(f"affine: unsupported activation {act!r}")
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"affine: bad shapes {x.data.shape} @ {w.data.shape}")
    pre = x.data @ w.data + b.data
    out_data = np.maximum(pre, 0.0) if act == "relu" else pre
    out = Var(out_data, x.tape)
    xd, wd = x.data, w.data
    tape = x.tape

    def bwd(g):
        gp = g * (pre > 0) if act == "relu" else g
        skip = tape._prune
        gx = None if skip and not x._needs else gp @ wd.T
        gw = None if skip and not w._needs else xd.T @ gp
        gb = None if skip and not b._needs else gp.sum(axis=0)
        return gx, gw, gb

    return tape.record(out, (x, w, b), bwd)


def fourier_encode(x: Var, n_freqs: int, band_weights=None) -> Var:
    """Fused [x, w_0 sin(x), w_0 cos(x), w_1 sin(2x), ...] feature block.

    One tape node for the whole encoding; x is [N, C], output
    [N, C(2 n_freqs + 1)] with frequency 2^k on band k.
    """
    n, c = x.data.shape
    wband = np.ones(n_freqs) if band_weights is None else np.asarray(band_weights, np.float64)
    freqs = (2.0 ** np.arange(n_freqs)).astype(x.data.dtype)
    ang = x.data[:, None, :] * freqs[None, :, None]  # [N, F, C]
    sin = np.sin(ang)
    cos = np.cos(ang)
    blocks = [x.data]
    for k in range(n_freqs):
        wk = float(wband[k])
        blocks.append(sin[:, k] * wk if wk != 1.0 else sin[:, k])
        blocks.append(cos[:, k] * wk if wk != 1.0 else cos[:, k])
    out = Var(np.concatenate(blocks, axis=1), x.tape)
    tape = x.tape

    def bwd(g):
        if tape._prune and not x._needs:
            return (None,)
        gx = g[:, :c].copy()
        for k in range(n_freqs):
            lo = c * (1 + 2 * k)
            gs = g[:, lo:lo + c]
            gc = g[:, lo + c:lo + 2 * c]
            scale = float(wband[k]) * freqs[k]
            if scale != 0.0:
                gx += scale * (gs * cos[:, k] - gc * sin[:, k])
        return (gx.astype(x.data.dtype, copy=False),)

    return tape.record(out, (x,), bwd)


def concat(vars_: Sequence[Var], axis: int = -1) -> Var:
    tape = vars_[0].tape
    out = Var(np.concatenate([v.data for v in vars_], axis=axis), tape)
    sizes = [v.data.shape[axis] for v in vars_]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape.record(out, tuple(vars_), bwd)


def reshape(a: Var, shape) -> Var:
    out = Var(a.data.reshape(shape), a.tape)
    orig = a.data.shape
    return a.tape.record(out, (a,), lambda g: (g.reshape(orig),))


def _indexes_may_repeat(key) -> bool:
    if isinstance(key, tuple):
        return any(_indexes_may_repeat(k) for k in key)
    return isinstance(key, (list, np.ndarray)) and np.asarray(key).dtype != bool


def getitem(a: Var, key) -> Var:
    """Basic slicing/indexing; backward scatters into a zero array."""
    out = Var(a.data[key], a.tape)
    shape = a.data.shape
    dtype = a.data.dtype
    # integer-array keys can hit an entry twice and need ufunc.at; plain
    # slices/masks cannot, and direct assignment is far cheaper
    scatter = _indexes_may_repeat(key)

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        if scatter:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return a.tape.record(out, (a,), bwd)


def gather_rows(a: Var, idx: np.ndarray) -> Var:
    """Row lookup a[idx] along axis 0 with repeat-safe scatter-add backward."""
    idx = np.asarray(idx)
    out = Var(a.data[idx], a.tape)
    n = a.data.shape[0]
    tail = a.data.shape[1:]
    dtype = a.data.dtype

    def bwd(g):
        full = np.zeros((n,) + tail, dtype=dtype)
        if g.ndim == 1:
            full[:] = np.bincount(idx, weights=g, minlength=n)
        else:
            gf = g.reshape(idx.size, -1)
            cols = gf.shape[1]
            acc = np.empty((n, cols), dtype=dtype)
            for c in range(cols):
                acc[:, c] = np.bincount(idx, weights=gf[:, c], minlength=n)
            full[:] = acc.reshape((n,) + tail)
        return (full,)

    return a.tape.record(out, (a,), bwd)


def put_rows(n: int, idx: np.ndarray, x: Var) -> Var:
    """Scatter rows of x into a zero array of n rows (inverse of gather_rows)."""
    idx = np.asarray(idx)
    data = np.zeros((n,) + x.data.shape[1:], dtype=x.data.dtype)
    data[idx] = x.data
    out = Var(data, x.tape)

    def bwd(g):
        return (g[idx],)

    return x.tape.record(out, (x,), bwd)


def transpose(a: Var, axes: tuple[int, ...]) -> Var:
    out = Var(np.transpose(a.data, axes), a.tape)
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return a.tape.record(out, (a,), bwd)


def take_last(a: Var, idx: np.ndarray) -> Var:
    """Gather along the last axis: out[..., j] = a[..., idx[j]] (repeats allowed)."""
    idx = np.asarray(idx)
    out = Var(a.data[..., idx], a.tape)
    shape = a.data.shape
    dtype = a.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (Ellipsis, idx), g)
        return (full,)

    return a.tape.record(out, (a,), bwd)


def reduce_sum(a: Var, axis: int | None = None, keepdims: bool = False) -> Var:
    out = Var(np.sum(a.data, axis=axis, keepdims=keepdims), a.tape)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(a.data.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).astype(a.data.dtype, copy=False),)

    return a.tape.record(out, (a,), bwd)


def reduce_mean(a: Var, axis: int | None = None, keepdims: bool = False) -> Var:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a: Var, axis: int = -1) -> Var:
    out = Var(np.cumsum(a.data, axis=axis), a.tape)

    def bwd(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return a.tape.record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# grid interpolation


def grid_sample1d(vec: Var, x: Var) -> Var:
    """Linear interpolation of vector factors.

    vec: [K, R] factor table; x: [N] continuous index in [0, R-1].
    Returns [N, K]. Differentiable wrt both table entries and coordinates.
    """
    K, R = vec.data.shape
    xc = np.clip(x.data, 0.0, R - 1)
    i0 = np.minimum(xc.astype(np.int64), R - 2)  # keep i0+1 in range at x == R-1
    f = (xc - i0).astype(vec.data.dtype)
    v0 = vec.data[:, i0]  # [K, N]
    v1 = vec.data[:, i0 + 1]
    out_data = (v0 * (1.0 - f) + v1 * f).T
    out = Var(np.ascontiguousarray(out_data), vec.tape)
    in_range = (x.data > 0.0) & (x.data < R - 1)

    tape = vec.tape

    def bwd(g):
        # g: [N, K]
        skip = tape._prune
        gv = gx = None
        if not (skip and not vec._needs):
            flat0 = (np.arange(K)[None, :] * R + i0[:, None]).ravel()
            flat1 = flat0 + 1
            w0 = (g * (1.0 - f)[:, None]).ravel()
            w1 = (g * f[:, None]).ravel()
            gv = (
                np.bincount(flat0, weights=w0, minlength=K * R)
                + np.bincount(flat1, weights=w1, minlength=K * R)
            ).reshape(K, R).astype(vec.data.dtype, copy=False)
        if not (skip and not x._needs):
            gx = np.einsum("nk,kn->n", g, v1 - v0)
            gx = np.where(in_range, gx, 0.0).astype(x.data.dtype, copy=False)
        return gv, gx

    return tape.record(out, (vec, x), bwd)


def grid_sample2d(mat: Var, y: Var, z: Var) -> Var:
    """Bilinear interpolation of matrix factors.

    mat: [K, R, R] table indexed [k, y, z]; y, z: [N] continuous indices in
    [0, R-1]. Returns [N, K]. Differentiable wrt table and coordinates.
    """
    K, Ry, Rz = mat.data.shape
    yc = np.clip(y.data, 0.0, Ry - 1)
    zc = np.clip(z.data, 0.0, Rz - 1)
    iy = np.minimum(yc.astype(np.int64), Ry - 2)
    iz = np.minimum(zc.astype(np.int64), Rz - 2)
    fy = (yc - iy).astype(mat.data.dtype)
    fz = (zc - iz).astype(mat.data.dtype)
    flat = mat.data.reshape(K, Ry * Rz)
    i00 = iy * Rz + iz
    i01 = i00 + 1
    i10 = i00 + Rz
    i11 = i10 + 1
    m00 = flat[:, i00]
    m01 = flat[:, i01]
    m10 = flat[:, i10]
    m11 = flat[:, i11]
    w00 = (1 - fy) * (1 - fz)
    w01 = (1 - fy) * fz
    w10 = fy * (1 - fz)
    w11 = fy * fz
    out_data = (m00 * w00 + m01 * w01 + m10 * w10 + m11 * w11).T
    out = Var(np.ascontiguousarray(out_data), mat.tape)
    y_in = (y.data > 0.0) & (y.data < Ry - 1)
    z_in = (z.data > 0.0) & (z.data < Rz - 1)

    tape = mat.tape

    def bwd(g):
        skip = tape._prune
        gm = gy = gz = None
        if not (skip and not mat._needs):
            koff = np.arange(K)[None, :] * (Ry * Rz)
            # one fused scatter over all four bilinear corners
            fl = np.concatenate([(koff + idx[:, None]).ravel()
                                 for idx in (i00, i01, i10, i11)])
            ws = np.concatenate([(g * w[:, None]).ravel()
                                 for w in (w00, w01, w10, w11)])
            gm = np.bincount(fl, weights=ws, minlength=K * Ry * Rz)
            gm = gm.reshape(K, Ry, Rz).astype(mat.data.dtype, copy=False)
        if not (skip and not y._needs):
            dy = (m10 - m00) * (1 - fz) + (m11 - m01) * fz  # [K, N]
            gy = np.where(y_in, np.einsum("nk,kn->n", g, dy), 0.0).astype(y.data.dtype, copy=False)
        if not (skip and not z._needs):
            dz = (m01 - m00) * (1 - fy) + (m11 - m10) * fy
            gz = np.where(z_in, np.einsum("nk,kn->n", g, dz), 0.0).astype(z.data.dtype, copy=False)
        return gm, gy, gz

    return tape.record(out, (mat, y, z), bwd)


# ---------------------------------------------------------------------------
# checkpointing

CHECKPOINT_FORMAT = 1


def save_checkpoint(path, store: ParamStore, manifest: dict | None = None) -> None:
    """Write a zip archive: manifest.json + one raw little-endian array per id."""
    meta = dict(manifest or {})
    meta["format"] = CHECKPOINT_FORMAT
    meta["params"] = {
        p.id: {"shape": list(p.shape), "dtype": np.dtype(p.dtype).str} for p in store
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(meta, indent=1, sort_keys=True))
        for p in store:
            raw = np.ascontiguousarray(p.values, dtype=np.dtype(p.dtype).newbyteorder("<"))
            zf.writestr(f"params/{p.id}.bin", raw.tobytes())


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("manifest.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise AutodiffError(f"unsupported checkpoint format {meta.get('format')!r}")
        store = ParamStore()
        for pid, info in meta["params"].items():
            raw = zf.read(f"params/{pid}.bin")
            arr = np.frombuffer(raw, dtype=np.dtype(info["dtype"])).reshape(info["shape"])
            store.add(pid, arr.copy())
    return store, meta


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def finite_difference_check(
    build: Callable[[Tape], Var],
    params: Iterable[Parameter],
    h: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` must construct a scalar output on the given tape from the
    current parameter values. Parameters should be float64 for the
    comparison to be meaningful at h=1e-4.
    """
    rng = rng or np.random.default_rng(0)
    params = list(params)

    def run() -> float:
        t = Tape(recording=False)
        return float(build(t).data)

    for p in params:
        p.zero_grad()
    tape = Tape()
    out = build(tape)
    if out.data.size != 1:
        raise ShapeError("finite_difference_check expects a scalar output")
    tape.backward(out, np.ones_like(out.data))

    worst = 0.0
    for p in params:
        flat = p.values.reshape(-1)
        gflat = p.grad.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            entries = rng.choice(n, size=max_entries, replace=False)
        else:
            entries = range(n)
        for j in entries:
            orig = flat[j]
            flat[j] = orig + h
            fp = run()
            flat[j] = orig - h
            fm = run()
            flat[j] = orig
            fd = (fp - fm) / (2 * h)
            scale = max(abs(fd), abs(gflat[j]), 1e-6)
            worst = max(worst, abs(fd - gflat[j]) / scale)
    return worst
