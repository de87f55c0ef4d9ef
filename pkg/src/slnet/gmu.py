"""Geometric modulation unit: per-channel learnable affine recalibration.

Exactly 2*D scalars (scale alpha, shift beta), initialized to the identity
so a fresh model behaves as if the unit were absent. Two orderings exist:
"ab" applies scale then shift (alpha*x + beta), "ba" shift then scale
(alpha*(x + beta)).
"""

from __future__ import annotations

import numpy as np

from .tensor import Param, ShapeError, Tensor, apply_op, _data


class Gmu:
    def __init__(self, channels: int, order: str = "ab", name: str = "gmu",
                 dtype=np.float32):
        if order not in ("ab", "ba"):
            raise ValueError(f"unknown GMU order {order!r}")
        self.channels = channels
        self.order = order
        self.alpha = Param(np.ones(channels, dtype=dtype), name=f"{name}.alpha")
        self.beta = Param(np.zeros(channels, dtype=dtype), name=f"{name}.beta")

    def __call__(self, x, channel_axis: int = -1) -> Tensor:
        return gmu_forward(x, self, channel_axis=channel_axis)


def gmu_forward(x, p: Gmu, channel_axis: int = -1) -> Tensor:
    """Modulate x along its channel axis; differentiable in alpha and beta."""
    xd = _data(x)
    axis = channel_axis % xd.ndim
    if xd.shape[axis] != p.channels:
        raise ShapeError(
            f"channel axis has size {xd.shape[axis]}, GMU expects {p.channels}")
    bshape = [1] * xd.ndim
    bshape[axis] = p.channels
    a = p.alpha.value.data.reshape(bshape)
    b = p.beta.value.data.reshape(bshape)
    reduce_axes = tuple(i for i in range(xd.ndim) if i != axis)

    if p.order == "ab":
        out = a * xd + b

        def bwd(g):
            return (g * a,
                    (g * xd).sum(axis=reduce_axes),
                    g.sum(axis=reduce_axes))
    else:
        shifted = xd + b
        out = a * shifted

        def bwd(g):
            return (g * a,
                    (g * shifted).sum(axis=reduce_axes),
                    (g * a).sum(axis=reduce_axes))

    return apply_op(out, (x, p.alpha, p.beta), bwd)
