"""Primitive differentiable operations.

Each primitive computes its forward value with numpy and records a
vector-Jacobian closure. Binary ops follow numpy broadcasting; gradients are
summed back to the operand shapes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeError, Tensor, make_result


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None and like.dtype.kind == "f" else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def scatter_rows(idx: np.ndarray, values: np.ndarray, num_rows: int) -> np.ndarray:
    """Sum ``values`` [M, ...] into ``num_rows`` rows selected by ``idx`` [M].

    Accumulation order is fixed by ``idx`` so results are reproducible.
    """
    idx = idx.reshape(-1)
    tail = values.shape[idx.ndim:] if values.ndim > 1 else ()
    flat = values.reshape(len(idx), -1)
    width = flat.shape[1]
    if width <= 4:
        cols = [np.bincount(idx, weights=flat[:, j], minlength=num_rows) for j in range(width)]
        out = np.stack(cols, axis=1)
    else:
        op = sp.csr_matrix((np.ones(len(idx), dtype=values.dtype), (idx, np.arange(len(idx)))),
                           shape=(num_rows, len(idx)))
        out = op @ flat
    return out.astype(values.dtype, copy=False).reshape((num_rows,) + tuple(tail))


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if need_a else None,
                _unbroadcast(g * ad, bd.shape) if need_b else None)

    return make_result("mul", ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_result("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _lift(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    ad = a.data
    return make_result("power", ad ** exponent, (a,),
                       lambda g: (g * exponent * ad ** (exponent - 1),))


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("maximum", a, b)
    ad, bd = a.data, b.data
    pick_a = ad >= bd
    return make_result("maximum", np.where(pick_a, ad, bd), (a, b),
                       lambda g: (_unbroadcast(g * pick_a, ad.shape),
                                  _unbroadcast(g * ~pick_a, bd.shape)))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` (a constant mask) holds, else ``b``."""
    a, b = _pair(a, b)
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return make_result("where", np.where(cond, a.data, b.data), (a, b),
                       lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                                  _unbroadcast(np.where(cond, 0.0, g), sb)))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return make_result("matmul", ad @ bd, (a, b), vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result("transpose", np.transpose(a.data, axes), (a,),
                       lambda g: (np.transpose(g, inv),))


# -- reductions ----------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    shape = a.shape
    return make_result("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,),
                       lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size / max(out.size, 1)
    return make_result("mean", out, (a,),
                       lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)) / count,))


def cumsum(a, axis: int = -1) -> Tensor:
    a = _lift(a)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return make_result("cumsum", np.cumsum(a.data, axis=axis), (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return make_result("log_softmax", out, (a,),
                       lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


# -- shape manipulation ----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return make_result("reshape", out, (a,), lambda g: (g.reshape(old),))


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from None
    return make_result("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result("concat", np.concatenate([t.data for t in ts], axis=ax), ts, vjp)


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in the gradient."""
    a = _lift(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_result("slice", a.data[index], (a,), vjp)


def take(a, indices) -> Tensor:
    """Gather rows of ``a``; ``indices`` may have any shape."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"take: index out of range for axis of length {n}")
    shape = a.shape

    def vjp(g):
        flat_g = g.reshape((idx.size,) + shape[1:])
        return (scatter_rows(idx.reshape(-1), flat_g, shape[0]),)

    return make_result("take", a.data[idx], (a,), vjp)


def gather_interp(table, indices, weights) -> Tensor:
    """Weighted sum of table rows: out[p] = sum_k weights[p, k] * table[indices[p, k]]."""
    table = _lift(table)
    idx = np.asarray(indices, dtype=np.int64)
    w = np.asarray(weights, dtype=table.dtype)
    if idx.shape != w.shape or idx.ndim != 2 or table.ndim != 2:
        raise ShapeError(f"gather_interp: table {table.shape}, indices {idx.shape}, weights {w.shape}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_interp: index out of range for table of {n} rows")
    out = np.einsum("pkf,pk->pf", table.data[idx], w)

    def vjp(g):
        contrib = w[:, :, None] * g[:, None, :]
        return (scatter_rows(idx.reshape(-1), contrib.reshape(-1, table.shape[1]), n),)

    return make_result("gather_interp", out, (table,), vjp)


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets (scatter-add along axis 0)."""
    a = _lift(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != a.shape[:1]:
        raise ShapeError(f"segment_sum: {seg.shape[0] if seg.ndim else 0} ids for {a.shape[0]} rows")
    out = scatter_rows(seg, a.data, num_segments)
    return make_result("segment_sum", out, (a,), lambda g: (g[seg],))


def gather_sum_relu(base, gathered: Sequence[tuple]) -> Tensor:
    """relu(base + sum_i t_i[idx_i]) for row tables t_i; keeps only the output alive."""
    base = _lift(base)
    tabs = [(_lift(t, base), np.asarray(i, dtype=np.int64)) for t, i in gathered]
    z = base.data.copy()
    for t, i in tabs:
        if t.shape[1:] != base.shape[1:] or i.shape != base.shape[:1]:
            raise ShapeError(f"gather_sum_relu: table {t.shape}, index {i.shape}, base {base.shape}")
        z += t.data[i]
    np.maximum(z, 0.0, out=z)

    def vjp(g):
        gz = g * (z > 0)
        return (gz,) + tuple(scatter_rows(i, gz, t.shape[0]) if t.requires_grad else None
                             for t, i in tabs)

    return make_result("gather_sum_relu", z, (base,) + tuple(t for t, _ in tabs), vjp)


# -- elementwise unary -------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return make_result("relu", np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,),
                       lambda g: (g * mask,))


def sine(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return make_result("sine", np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cosine(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return make_result("cosine", np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    s = _sigmoid(a.data)
    return make_result("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a) -> Tensor:
    a = _lift(a)
    e = np.exp(a.data)
    return make_result("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return make_result("log", np.log(ad), (a,), lambda g: (g / ad,))


def softplus(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return make_result("softplus", np.logaddexp(0.0, ad).astype(ad.dtype, copy=False), (a,),
                       lambda g: (g * _sigmoid(ad),))


def log_sigmoid(a) -> Tensor:
    """ln(1 / (1 + e^-x)), evaluated without overflow."""
    a = _lift(a)
    ad = a.data
    return make_result("log_sigmoid", -np.logaddexp(0.0, -ad), (a,),
                       lambda g: (g * _sigmoid(-ad),))


def absolute(a) -> Tensor:
    a = _lift(a)
    sgn = np.sign(a.data)
    return make_result("abs", np.abs(a.data), (a,), lambda g: (g * sgn,))


def sqrt(a) -> Tensor:
    a = _lift(a)
    r = np.sqrt(a.data)
    return make_result("sqrt", r, (a,), lambda g: (g * 0.5 / r,))


# -- normalization and regularization -------------------------------------------------

def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over axis 0.

    In training mode batch statistics normalize the input and the running
    buffers are updated in place. In eval mode the op is the fixed affine map
    given by the running buffers.
    """
    x, gamma, beta = _lift(x), _lift(gamma, x), _lift(beta, x)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    gd = gamma.data
    if not training:
        scale = gd / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) / np.sqrt(running_var + eps)
        out = xhat * gd + beta.data

        def vjp_eval(g):
            return g * scale, (g * xhat).sum(axis=0), g.sum(axis=0)

        return make_result("batch_norm_eval", out, (x, gamma, beta), vjp_eval)

    n = x.shape[0]
    if n < 2:
        raise ShapeError(f"batch_norm: training mode needs at least 2 rows, got {n}")
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * invstd
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * n / (n - 1)

    def vjp_train(g):
        dxhat = g * gd
        dx = invstd / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_result("batch_norm_train", xhat * gd + beta.data, (x, gamma, beta), vjp_train)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    x = _lift(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode requires an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.dtype)
    return make_result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# -- composites -------------------------------------------------------------------------

def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(sum(a * a, axis=axis, keepdims=True) + eps)
    return div(a, norm)


def smooth_l1(a, b) -> Tensor:
    """Elementwise smooth L1: 0.5 d^2 where |d| < 1, |d| - 0.5 elsewhere."""
    d = sub(a, b)
    small = np.abs(d.data) < 1.0
    return where(small, 0.5 * d * d, absolute(d) - 0.5)


OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "power": power,
    "maximum": maximum,
    "matmul": matmul,
    "transpose": transpose,
    "sum": sum,
    "mean": mean,
    "cumsum": cumsum,
    "log_softmax": log_softmax,
    "reshape": reshape,
    "broadcast_to": broadcast_to,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": getitem,
    "take": take,
    "segment_sum": segment_sum,
    "gather_interp": gather_interp,
    "gather_sum_relu": gather_sum_relu,
    "relu": relu,
    "sine": sine,
    "cosine": cosine,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "log_sigmoid": log_sigmoid,
    "abs": absolute,
    "sqrt": sqrt,
    "batch_norm": batch_norm,
    "dropout": dropout,
}


def forward_op(op: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply primitive ``op`` by name."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(*inputs, **kwargs)
