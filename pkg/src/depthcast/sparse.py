"""Sparsity-invariant convolution with validity-mask propagation.

The first encoder stage of both networks. Features at invalid pixels are
multiplied away before the window sum, and the sum is renormalized by the
number of valid pixels in the window, so outputs never depend on garbage
values at holes. Validity propagates by max-pooling: a pixel becomes valid as
soon as any pixel in its window was.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class MaskedFeature:
    """Feature tensor plus a single-channel {0,1} validity map."""

    features: Tensor
    validity: Tensor  # (B, 1, H, W), not part of the gradient graph

    def __post_init__(self):
        f, v = self.features, self.validity
        if v.shape[1] != 1:
            raise ShapeError(f"validity must have one channel, got {v.shape}")
        if (f.shape[0], f.shape[2], f.shape[3]) != (v.shape[0], v.shape[2], v.shape[3]):
            raise ShapeError(
                f"features {f.shape} and validity {v.shape} disagree on batch/spatial dims")
        vals = v.data
        if not np.all((vals == 0.0) | (vals == 1.0)):
            raise ShapeError("validity entries must be exactly 0 or 1")


def max_pool_validity(validity: Tensor, k: int) -> Tensor:
    """k x k max-pool at stride 1 with zero padding (k odd)."""
    pad = (k - 1) // 2
    v = np.pad(validity.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(v, (k, k), axis=(2, 3))
    return Tensor(win.max(axis=(4, 5)))


def sparse_conv2d(inp: MaskedFeature, kernel: Tensor, bias: Tensor,
                  eps: float = 1e-8) -> MaskedFeature:
    """Masked convolution normalized by the valid-pixel count per window.

    f = sum(y * o * w) / (eps + sum(o)) + b, with stride 1 and same-size
    padding (k odd). The validity map is data, not a differentiable path.
    """
    if eps <= 0:
        raise ShapeError("sparse_conv2d: eps must be positive")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"sparse_conv2d: kernel size must be odd, got {k}")
    pad = (k - 1) // 2

    masked = T.mul(inp.features, inp.validity)  # broadcast over channels
    numer = T.conv2d(masked, kernel, bias=None, stride=1, pad=pad)

    # valid-count per window; a constant w.r.t. the graph
    count = np.lib.stride_tricks.sliding_window_view(
        np.pad(inp.validity.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))),
        (k, k), axis=(2, 3)).sum(axis=(4, 5))
    inv_count = Tensor(1.0 / (eps + count))

    out = T.add(T.mul(numer, inv_count), bias)
    return MaskedFeature(out, max_pool_validity(inp.validity, k))
