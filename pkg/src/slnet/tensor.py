"""Dense-array numerics with reverse-mode autodiff on an explicit tape.

Everything the backbone needs is built from a small set of primitives
(linear, relu, batch_norm, max_reduce, elementwise arithmetic, gather,
reductions). Arrays are float32 by default; building a model in float64
is supported so gradient checks are not polluted by roundoff.

A ``Tape`` records operations while it is the active context; ``backward``
replays it in reverse and accumulates into ``Param.grad``. Tensors created
outside any tape are plain values and safe to share across threads.
"""

from __future__ import annotations

import weakref

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


# When enabled, every op output is checked for NaN/Inf. Cheap insurance in
# tests, off by default in the hot path.
_CHECK_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class AllocStats:
    """High-water-mark tracker over live Tensor buffers.

    current_bytes falls when tensors are garbage collected; peak_bytes is
    monotone within a measurement window and resets to current on demand.
    """

    def __init__(self):
        self.current_bytes = 0
        self.peak_bytes = 0

    def _add(self, n: int) -> None:
        self.current_bytes += n
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes

    def _remove(self, n: int) -> None:
        self.current_bytes -= n

    def reset_peak(self) -> None:
        self.peak_bytes = self.current_bytes


alloc_stats = AllocStats()


class Tensor:
    """Dense array with an optional handle onto the active tape."""

    __slots__ = ("data", "node_id", "__weakref__")

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.node_id: int | None = None
        alloc_stats._add(self.data.nbytes)
        weakref.finalize(self, alloc_stats._remove, self.data.nbytes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, traced={self.node_id is not None})"


class Param:
    """Learnable value plus its gradient accumulator."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str = "", dtype=None):
        self.value = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
        self.grad = Tensor(np.zeros_like(self.value.data))
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.data[...] = 0.0

    def __repr__(self):
        return f"Param({self.name or '?'}, shape={self.shape})"


class Tape:
    """Ordered record of differentiable ops; usable as a context manager."""

    def __init__(self):
        self._ops: list[tuple[int, tuple[int | None, ...], object]] = []
        self._n_nodes = 0
        self._leaves: dict[int, tuple[int, Param]] = {}  # id(param) -> (node, param)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def _new_node(self) -> int:
        nid = self._n_nodes
        self._n_nodes += 1
        return nid

    def _node_of(self, x) -> int | None:
        if isinstance(x, Param):
            key = id(x)
            entry = self._leaves.get(key)
            if entry is None:
                entry = (self._new_node(), x)
                self._leaves[key] = entry
            return entry[0]
        return x.node_id

    def __len__(self) -> int:
        return len(self._ops)


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _data(x) -> np.ndarray:
    return x.value.data if isinstance(x, Param) else x.data


def apply_op(out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap an op result, recording it when a tape is active.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, aligned with ``inputs``, and must not mutate ``grad_out``.
    """
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values produced by forward op")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None:
        return out
    in_ids = tuple(tape._node_of(x) for x in inputs)
    if all(i is None for i in in_ids):
        return out  # constant subgraph, nothing to trace
    out.node_id = tape._new_node()
    tape._ops.append((out.node_id, in_ids, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable Param.grad."""
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar-shaped, got shape {loss.shape}")
    if loss.node_id is None:
        return  # loss does not depend on any traced value
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for out_id, in_ids, fn in reversed(tape._ops):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for iid, gi in zip(in_ids, fn(g)):
            if iid is None or gi is None:
                continue
            acc = grads.get(iid)
            grads[iid] = gi if acc is None else acc + gi
    for nid, param in tape._leaves.values():
        g = grads.get(nid)
        if g is not None:
            param.grad.data += g.reshape(param.shape).astype(param.grad.dtype, copy=False)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast axes so grad matches the original operand shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules)

def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    return apply_op(ad + bd, (a, b), lambda g: (
        _unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)))


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    return apply_op(ad - bd, (a, b), lambda g: (
        _unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)))


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    return apply_op(ad * bd, (a, b), lambda g: (
        _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x, c: float) -> Tensor:
    xd = _data(x)
    return apply_op(xd * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    xd = _data(x)
    out = np.maximum(xd, 0.0)
    # subgradient at 0 is 0; mask derived lazily from the output
    return apply_op(out, (x,), lambda g: (g * (out > 0),))


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(x, shape) -> Tensor:
    xd = _data(x)
    shape = tuple(shape)
    return apply_op(xd.reshape(shape), (x,), lambda g: (g.reshape(xd.shape),))


def concat(parts, axis: int = -1) -> Tensor:
    datas = [_data(p) for p in parts]
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op(np.concatenate(datas, axis=axis), tuple(parts), bwd)


def expand_mid(x, n: int) -> Tensor:
    """Tile a (B, C) tensor to (B, n, C); backward sums over the new axis."""
    xd = _data(x)
    out = np.broadcast_to(xd[:, None, :], (xd.shape[0], n, xd.shape[1])).copy()
    return apply_op(out, (x,), lambda g: (g.sum(axis=1),))


def gather_points(x, idx: np.ndarray) -> Tensor:
    """Batch row gather: x is (B, N, C), idx is integer (B, ...).

    Output has shape (B, *idx.shape[1:], C). Backward scatter-adds.
    """
    xd = _data(x)
    if idx.ndim < 1 or idx.shape[0] != xd.shape[0]:
        raise ShapeError(f"index batch {idx.shape} does not match data batch {xd.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= xd.shape[1]):
        raise IndexError("gather index out of range")
    b, n, c = xd.shape
    b_ix = np.arange(b).reshape((-1,) + (1,) * (idx.ndim - 1))
    out = xd[b_ix, idx]
    flat_idx = (idx + b_ix * n).reshape(-1)

    def bwd(g):
        # sort + reduceat is much faster than np.add.at for large scatters
        g2 = g.reshape(-1, c)
        order = np.argsort(flat_idx, kind="stable")
        sorted_idx = flat_idx[order]
        starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_idx)) + 1])
        sums = np.add.reduceat(g2[order], starts, axis=0)
        gx = np.zeros((b * n, c), dtype=g.dtype)
        gx[sorted_idx[starts]] = sums
        return (gx.reshape(b, n, c),)

    return apply_op(out, (x,), bwd)


def gather_relative(x, nbr_idx: np.ndarray, sel_idx: np.ndarray, bias) -> Tensor:
    """Fused neighborhood difference: x[b, nbr] - x[b, sel] + bias.

    x is (B, N, C), nbr_idx (B, m, K), sel_idx (B, m); output (B, m, K, C).
    One scatter pass handles both index sets in backward.
    """
    xd = _data(x)
    b, n, c = xd.shape
    b_ix3 = np.arange(b)[:, None, None]
    out = xd[b_ix3, nbr_idx]
    out -= xd[np.arange(b)[:, None], sel_idx][:, :, None, :]
    bd = _data(bias) if bias is not None else None
    if bd is not None:
        out += bd
    flat_nbr = (nbr_idx + b_ix3 * n).reshape(-1)
    flat_sel = (sel_idx + np.arange(b)[:, None] * n).reshape(-1)
    flat_all = np.concatenate([flat_nbr, flat_sel])
    order = np.argsort(flat_all, kind="stable")
    sorted_idx = flat_all[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_idx)) + 1])
    rows = sorted_idx[starts]

    def bwd(g):
        gb = g.sum(axis=(0, 1, 2)) if bd is not None else None
        neg_center = -g.sum(axis=2)
        vals = np.concatenate([g.reshape(-1, c), neg_center.reshape(-1, c)])
        sums = np.add.reduceat(vals[order], starts, axis=0)
        gx = np.zeros((b * n, c), dtype=g.dtype)
        gx[rows] = sums
        return (gx.reshape(b, n, c), gb)

    inputs = (x, bias) if bias is not None else (x,)
    return apply_op(out, inputs, bwd)


# ---------------------------------------------------------------------------
# reductions

def sum_reduce(x, axis=None) -> Tensor:
    xd = _data(x)

    def bwd(g):
        if axis is None:
            return (np.full_like(xd, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), xd.shape).copy(),)

    return apply_op(xd.sum(axis=axis), (x,), bwd)


def mean_reduce(x, axis=None) -> Tensor:
    xd = _data(x)
    count = xd.size if axis is None else xd.shape[axis]
    return scale(sum_reduce(x, axis=axis), 1.0 / count)


def max_reduce(x, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max over one axis; returns (values, argmax). Gradient is routed to the
    first-occurrence argmax only."""
    xd = _data(x)
    axis = axis % xd.ndim
    if xd.shape[axis] == 0:
        raise ShapeError("max over an empty axis")
    last = xd.ndim - 1
    # reductions over the trailing axis are much faster; axis order within
    # the reduced dimension is preserved, so first-occurrence ties are kept
    xt = xd if axis == last else np.ascontiguousarray(np.moveaxis(xd, axis, last))
    arg = xt.argmax(axis=last)
    values = np.take_along_axis(xt, arg[..., None], axis=last)[..., 0]

    def bwd(g):
        gxt = np.zeros_like(xt)
        np.put_along_axis(gxt, arg[..., None], g[..., None], axis=last)
        return (gxt if axis == last else np.moveaxis(gxt, last, axis),)

    out = apply_op(values, (x,), bwd)
    return out, arg


# ---------------------------------------------------------------------------
# neural-net primitives

def linear(x, w: Param, b: Param | None) -> Tensor:
    """y = x @ w + b for 2-D x (n, in), w (in, out), row-broadcast bias."""
    xd, wd = _data(x), _data(w)
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ShapeError(f"linear: x{xd.shape} incompatible with w{wd.shape}")
    out = xd @ wd
    if b is not None:
        bd = _data(b)
        if bd.shape != (wd.shape[1],):
            raise ShapeError(f"linear: bias{bd.shape} incompatible with w{wd.shape}")
        out = out + bd

    def bwd(g):
        gb = g.sum(axis=0) if b is not None else None
        return (g @ wd.T, xd.T @ g, gb)

    return apply_op(out, (x, w, b) if b is not None else (x, w), bwd)


class BatchNormState:
    """Running statistics for one BatchNorm site (buffers, not Params)."""

    __slots__ = ("running_mean", "running_var")

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batch_norm(x, gamma: Param, beta: Param, state: BatchNormState,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-column normalization of a 2-D (n, c) input.

    Train mode uses batch statistics (population variance, so n=1 degrades to
    the eps floor instead of erroring) and updates running stats in place;
    eval mode uses the running stats.
    """
    xd = _data(x)
    gd, bd = _data(gamma), _data(beta)
    if xd.ndim != 2 or xd.shape[1] != gd.shape[0]:
        raise ShapeError(f"batch_norm: x{xd.shape} incompatible with gamma{gd.shape}")
    if training:
        mean = xd.mean(axis=0)
        xhat = xd - mean
        var = np.einsum("nc,nc->c", xhat, xhat) / xd.shape[0]
        state.running_mean += momentum * (mean.astype(state.running_mean.dtype) - state.running_mean)
        state.running_var += momentum * (var.astype(state.running_var.dtype) - state.running_var)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat *= inv_std
    else:
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mean) * inv_std
    out = gd * xhat
    out += bd

    def bwd(g):
        g_beta = g.sum(axis=0)
        g_gamma = np.einsum("nc,nc->c", g, xhat)
        if training:
            n = xd.shape[0]
            gx = g - (g_beta + xhat * g_gamma) / n
            gx *= gd * inv_std
        else:
            gx = g * (gd * inv_std)
        return (gx, g_gamma, g_beta)

    return apply_op(out, (x, gamma, beta), bwd)


def dropout(x, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p <= 0.0:
        if isinstance(x, Tensor):
            return x
        return apply_op(_data(x).copy(), (x,), lambda g: (g,))
    xd = _data(x)
    keep = (rng.random(xd.shape) >= p).astype(xd.dtype) / (1.0 - p)
    return apply_op(xd * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_grad(f, param: Param, h: float = 1e-4) -> Tensor:
    """Central-difference gradient of scalar f(param) w.r.t. every entry."""
    if h <= 0:
        raise ValueError("h must be positive")
    flat = param.value.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(param))
        flat[i] = orig - h
        f_minus = float(f(param))
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(out.reshape(param.shape))


def finite_diff_entries(f, param: Param, entries, h: float = 1e-4) -> np.ndarray:
    """Central differences at selected flat indices only (for big params)."""
    flat = param.value.data.reshape(-1)
    out = np.zeros(len(entries), dtype=flat.dtype)
    for j, i in enumerate(entries):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(param))
        flat[i] = orig - h
        f_minus = float(f(param))
        flat[i] = orig
        out[j] = (f_plus - f_minus) / (2.0 * h)
    return out
