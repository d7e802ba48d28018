"""Convolutional LSTM cell used by the prior, posterior and predictor heads.

Gate transforms are 3x3 convolutions over the latent grid; all four gates are
computed by one convolution of the concatenated (input, hidden) tensor and
split along channels in i, f, o, g order. The forget-gate bias starts at +1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class ConvLstmState:
    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ShapeError(f"h {self.h.shape} and c {self.c.shape} must match")

    def detach(self) -> "ConvLstmState":
        return ConvLstmState(self.h.detach(), self.c.detach())


@dataclass
class ConvLstmWeights:
    """Fused gate kernel (4*hidden out-channels) and bias."""

    kernel: Tensor  # (4*hidden, in+hidden, k, k)
    bias: Tensor    # (1, 4*hidden, 1, 1)

    @property
    def hidden_channels(self) -> int:
        return self.kernel.shape[0] // 4

    @property
    def input_channels(self) -> int:
        return self.kernel.shape[1] - self.hidden_channels

    def parameters(self):
        return [self.kernel, self.bias]


def init_convlstm(in_channels: int, hidden_channels: int, rng: np.random.Generator,
                  kernel_size: int = 3) -> ConvLstmWeights:
    fan_in = (in_channels + hidden_channels) * kernel_size ** 2
    kernel = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in),
                               size=(4 * hidden_channels, in_channels + hidden_channels,
                                     kernel_size, kernel_size)),
                    requires_grad=True)
    bias = np.zeros((1, 4 * hidden_channels, 1, 1))
    bias[0, hidden_channels:2 * hidden_channels] = 1.0  # forget gate
    return ConvLstmWeights(kernel, Tensor(bias, requires_grad=True))


def init_state(weights: ConvLstmWeights, batch: int, height: int, width: int) -> ConvLstmState:
    shape = (batch, weights.hidden_channels, height, width)
    return ConvLstmState(T.zeros(shape), T.zeros(shape))


def convlstm_step(x: Tensor, state: ConvLstmState,
                  w: ConvLstmWeights) -> tuple[Tensor, ConvLstmState]:
    """One gated update; returns (h', new state)."""
    if x.shape[2:] != state.h.shape[2:] or x.shape[0] != state.h.shape[0]:
        raise ShapeError(
            f"input {x.shape} does not sit on the state grid {state.h.shape}")
    k = w.kernel.shape[2]
    gates = T.conv2d(T.concat_channels([x, state.h]), w.kernel, w.bias,
                     stride=1, pad=(k - 1) // 2)
    n = w.hidden_channels
    i = T.sigmoid(T.slice_channels(gates, 0, n))
    f = T.sigmoid(T.slice_channels(gates, n, 2 * n))
    o = T.sigmoid(T.slice_channels(gates, 2 * n, 3 * n))
    g = T.tanh(T.slice_channels(gates, 3 * n, 4 * n))
    c_new = T.add(T.mul(f, state.c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, ConvLstmState(h_new, c_new)
