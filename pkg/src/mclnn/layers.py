"""Forward and backward passes for the building blocks of a conditional network.

Frame blocks are arrays of shape ``(..., features, frames)``; a single segment
is 2-D and a mini-batch adds a leading axis.  Conditional weights are stored
as one array of shape ``(2n + 1, l, e)`` where index ``u + n`` holds the matrix
applied to the frame ``u`` steps away from the window centre.

Backward functions take the cache returned by the matching forward call and
the upstream gradient, and return gradients in a plain dict keyed like the
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .masking import BinaryMask
from .numkernel import Rng, ShapeError

PRELU_INIT_SLOPE = 0.25
POOL_MODES = ("mean", "max", "flatten")


class GeometryError(ValueError):
    """A frame block is too short or has the wrong width for a layer."""


def window_width(order: int) -> int:
    if order < 1:
        raise GeometryError(f"order must be >= 1, got {order}")
    return 2 * order + 1


def glorot_uniform(rng: Rng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ConditionalParams:
    """Weights of one CLNN layer, optionally masked (MCLNN).

    ``slope`` is the per-node PReLU slope; ``None`` means identity transfer.
    """

    weights: np.ndarray
    bias: np.ndarray
    slope: np.ndarray | None = None
    mask: BinaryMask | None = None

    def __post_init__(self):
        if self.weights.ndim != 3 or self.weights.shape[0] % 2 != 1:
            raise ShapeError(f"conditional weights must be (2n+1, l, e), got {self.weights.shape}")
        if self.bias.shape != (self.nodes,):
            raise ShapeError(f"bias must have shape ({self.nodes},), got {self.bias.shape}")
        if self.slope is not None and self.slope.shape != (self.nodes,):
            raise ShapeError(f"slope must have shape ({self.nodes},), got {self.slope.shape}")
        if self.mask is not None and self.mask.shape != self.weights.shape[1:]:
            raise ShapeError(f"mask {self.mask.shape} does not match weights {self.weights.shape[1:]}")

    @property
    def order(self) -> int:
        return self.weights.shape[0] // 2

    @property
    def features(self) -> int:
        return self.weights.shape[1]

    @property
    def nodes(self) -> int:
        return self.weights.shape[2]

    def effective_weights(self) -> np.ndarray:
        if self.mask is None:
            return self.weights
        return self.weights * self.mask.matrix

    @classmethod
    def init(cls, rng: Rng, features: int, nodes: int, order: int,
             mask: BinaryMask | None = None, prelu: bool = True) -> "ConditionalParams":
        d = window_width(order)
        w = glorot_uniform(rng, (d, features, nodes), features * d, nodes)
        if mask is not None:
            w = w * mask.matrix
        slope = np.full(nodes, PRELU_INIT_SLOPE) if prelu else None
        return cls(w, np.zeros(nodes), slope, mask)


# -- transfer -----------------------------------------------------------------

def prelu_forward(x: np.ndarray, slope) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def prelu_backward(x: np.ndarray, slope, grad_out: np.ndarray, node_axis: int = -1):
    """Return ``(grad_x, grad_slope)``; the slope gradient is reduced to the slope's shape."""
    pos = x > 0
    grad_x = np.where(pos, grad_out, slope * grad_out)
    contrib = np.where(pos, 0.0, x * grad_out)
    slope = np.asarray(slope)
    if slope.ndim == 0:
        return grad_x, contrib.sum()
    axis = node_axis % x.ndim
    other = tuple(a for a in range(x.ndim) if a != axis)
    return grad_x, contrib.sum(axis=other)


# -- conditional layer --------------------------------------------------------

def _windows(x: np.ndarray, order: int) -> np.ndarray:
    """Stack every (2n+1)-frame window: (..., l, w) -> (..., T, d*l)."""
    d = 2 * order + 1
    l, w = x.shape[-2:]
    if w < d:
        raise GeometryError(f"segment too short for order n={order}: {w} frames, need >= {d}")
    win = sliding_window_view(x, d, axis=-1)  # (..., l, T, d)
    win = np.moveaxis(win, -3, -1)  # (..., T, d, l)
    return win.reshape(win.shape[:-2] + (d * l,))


def clnn_window_forward(window: np.ndarray, params: ConditionalParams) -> np.ndarray:
    """Hidden vector for one window of exactly 2n+1 frames, shape (l, 2n+1) -> (e,)."""
    window = np.asarray(window, dtype=np.float64)
    d = 2 * params.order + 1
    if window.ndim != 2 or window.shape != (params.features, d):
        raise GeometryError(f"window must be ({params.features}, {d}), got {window.shape}")
    out, _ = conditional_forward(window, params)
    return out[:, 0]


def conditional_forward(x: np.ndarray, params: ConditionalParams):
    """Apply a CLNN/MCLNN layer to every window of a frame block.

    Returns ``(y, cache)`` with ``y`` of shape (..., e, w - 2n).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] != params.features:
        raise ShapeError(f"layer expects {params.features} features per frame, got {x.shape[-2]}")
    win = _windows(x, params.order)
    w_eff = params.effective_weights()
    flat_w = w_eff.reshape(-1, params.nodes)
    z = win @ flat_w + params.bias  # (..., T, e)
    y = z if params.slope is None else prelu_forward(z, params.slope)
    cache = (win, z, x.shape)
    return np.swapaxes(y, -1, -2), cache


def conditional_backward(params: ConditionalParams, cache, grad_out: np.ndarray) -> dict:
    """Gradients of a conditional layer.

    ``grad_out`` has the layer output's shape (..., e, T).  Weight gradients
    are summed over any leading batch axes and multiplied by the mask.
    """
    win, z, in_shape = cache
    g = np.swapaxes(np.asarray(grad_out, dtype=np.float64), -1, -2)  # (..., T, e)
    if g.shape != z.shape:
        raise ShapeError(f"grad_out shape {np.swapaxes(g, -1, -2).shape} does not match layer output")
    grads = {}
    if params.slope is not None:
        g, grads["slope"] = prelu_backward(z, params.slope, g)
    d, l, e = params.weights.shape
    win2 = win.reshape(-1, d * l)
    g2 = g.reshape(-1, e)
    gw = (win2.T @ g2).reshape(d, l, e)
    if params.mask is not None:
        gw = gw * params.mask.matrix
    grads["weights"] = gw
    grads["bias"] = g2.sum(axis=0)

    gwin = g @ params.effective_weights().reshape(d * l, e).T  # (..., T, d*l)
    gwin = gwin.reshape(gwin.shape[:-1] + (d, l))
    T = gwin.shape[-3]
    gx = np.zeros(in_shape[:-2] + (in_shape[-1], l))  # (..., w, l)
    for u in range(d):
        gx[..., u:u + T, :] += gwin[..., :, u, :]
    grads["input"] = np.swapaxes(gx, -1, -2)
    return grads


def clnn_layer_forward(segment, params: ConditionalParams) -> np.ndarray:
    return conditional_forward(segment, params)[0]


def mclnn_layer_forward(segment, params: ConditionalParams) -> np.ndarray:
    if params.mask is None:
        raise ValueError("mclnn_layer_forward needs a masked layer")
    return conditional_forward(segment, params)[0]


def clnn_layer_backward(segment, params: ConditionalParams, grad_out) -> dict:
    _, cache = conditional_forward(segment, params)
    return conditional_backward(params, cache, grad_out)


# -- pooling ------------------------------------------------------------------

def temporal_pool(block: np.ndarray, mode: str = "mean"):
    """Reduce (..., e, k) across frames; returns ``(pooled, cache)``."""
    block = np.asarray(block, dtype=np.float64)
    k = block.shape[-1]
    if k < 1:
        raise GeometryError("pooling needs at least one frame")
    if mode == "mean":
        out = block.mean(axis=-1)
        return out, (mode, block.shape, None)
    if mode == "max":
        arg = block.argmax(axis=-1)
        out = np.take_along_axis(block, arg[..., None], axis=-1)[..., 0]
        return out, (mode, block.shape, arg)
    if mode == "flatten":
        out = np.swapaxes(block, -1, -2).reshape(block.shape[:-2] + (-1,))
        return out, (mode, block.shape, None)
    raise ValueError(f"unknown pool mode {mode!r}; expected one of {POOL_MODES}")


def temporal_pool_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    mode, shape, arg = cache
    k = shape[-1]
    if mode == "mean":
        return np.repeat(grad_out[..., None] / k, k, axis=-1)
    if mode == "max":
        g = np.zeros(shape)
        np.put_along_axis(g, arg[..., None], grad_out[..., None], axis=-1)
        return g
    e = shape[-2]
    return np.swapaxes(grad_out.reshape(shape[:-2] + (k, e)), -1, -2)


# -- dense, dropout, softmax ---------------------------------------------------

@dataclass
class DenseParams:
    weights: np.ndarray
    bias: np.ndarray
    slope: np.ndarray | None = None

    @classmethod
    def init(cls, rng: Rng, fan_in: int, fan_out: int, prelu: bool = True) -> "DenseParams":
        w = glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out)
        slope = np.full(fan_out, PRELU_INIT_SLOPE) if prelu else None
        return cls(w, np.zeros(fan_out), slope)


def dense_forward(x: np.ndarray, params: DenseParams):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.weights.shape[0]:
        raise ShapeError(f"dense layer expects {params.weights.shape[0]} inputs, got {x.shape[-1]}")
    z = x @ params.weights + params.bias
    y = z if params.slope is None else prelu_forward(z, params.slope)
    return y, (x, z)


def dense_backward(params: DenseParams, cache, grad_out: np.ndarray) -> dict:
    x, z = cache
    g = np.asarray(grad_out, dtype=np.float64)
    grads = {}
    if params.slope is not None:
        g, grads["slope"] = prelu_backward(z, params.slope, g)
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    grads["weights"] = x2.T @ g2
    grads["bias"] = g2.sum(axis=0)
    grads["input"] = g @ params.weights.T
    return grads


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def dropout(x: np.ndarray, rate: float, rng: Rng | None, training: bool):
    """Inverted dropout.  Returns ``(y, keep_scale)``; ``keep_scale`` is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(keep_scale, grad_out: np.ndarray) -> np.ndarray:
    return grad_out if keep_scale is None else grad_out * keep_scale

