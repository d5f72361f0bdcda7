"""Float32 forward/backward kernels for the layers the mitigation network needs.

Everything operates on batched arrays of shape (B, L, C) for temporal data and
(B, D) for flat vectors. Kernels are pure functions; backward passes consume
the cache returned by the matching forward pass. Backprop is hand-specialized,
there is no general autodiff here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Input does not match the layer's declared shape."""


@dataclass
class ConvKernel:
    """1D convolution with 'same' zero padding and optional fused ReLU."""

    kernel_size: int
    in_channels: int
    out_channels: int
    weights: np.ndarray  # (k, in, out)
    bias: np.ndarray | None  # (out,) or None
    stride: int = 1
    activation: str = "none"  # "none" | "relu"

    def __post_init__(self):
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if self.activation not in ("none", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.shape != (self.kernel_size, self.in_channels, self.out_channels):
            raise ShapeError(
                f"conv weights shape {self.weights.shape} != "
                f"{(self.kernel_size, self.in_channels, self.out_channels)}"
            )
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(f"conv bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def n_params(self) -> int:
        n = self.weights.size
        if self.bias is not None:
            n += self.bias.size
        return n


@dataclass
class DenseLayer:
    in_dim: int
    out_dim: int
    weights: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weights.shape != (self.in_dim, self.out_dim):
            raise ShapeError(f"dense weights shape {self.weights.shape} != {(self.in_dim, self.out_dim)}")
        if self.bias.shape != (self.out_dim,):
            raise ShapeError(f"dense bias shape {self.bias.shape} != ({self.out_dim},)")

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


def same_padding(length: int, kernel_size: int, stride: int) -> tuple[int, int]:
    """Left/right zero padding for 'same' semantics: out length = ceil(L/s).

    For even kernels / odd lengths the extra pad element goes on the right;
    this convention is fixed so the integer engine reproduces it bit-exactly.
    """
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + kernel_size - length, 0)
    left = total // 2
    return left, total - left


def conv_out_length(length: int, stride: int) -> int:
    return -(-length // stride)


def conv1d_same(x: np.ndarray, kernel: ConvKernel, return_cache: bool = False):
    """Batched 1D convolution, x of shape (B, L, Cin) -> (B, ceil(L/s), Cout)."""
    if x.ndim != 3:
        raise ShapeError(f"conv input must be (B, L, C), got shape {x.shape}")
    B, L, Cin = x.shape
    if Cin != kernel.in_channels:
        raise ShapeError(f"conv input has {Cin} channels, kernel expects {kernel.in_channels}")
    k, s = kernel.kernel_size, kernel.stride
    left, right = same_padding(L, k, s)
    out_len = conv_out_length(L, s)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (B, Lp-k+1, Cin, k)
    cols = windows[:, ::s][:, :out_len].transpose(0, 1, 3, 2)  # (B, out_len, k, Cin)
    # materialize the strided view: a single flat GEMM is much faster
    cols2 = np.ascontiguousarray(cols).reshape(B * out_len, k * Cin)
    y = (cols2 @ kernel.weights.reshape(k * Cin, kernel.out_channels)).reshape(
        B, out_len, kernel.out_channels
    )
    if kernel.bias is not None:
        y = y + kernel.bias
    pre = y
    if kernel.activation == "relu":
        y = np.maximum(y, 0.0)
    if return_cache:
        return y, (cols2, pre, (B, L, Cin, left))
    return y


def conv1d_same_backward(dy: np.ndarray, kernel: ConvKernel, cache):
    """Gradients for conv1d_same. Returns (dx, dW, db); db is None if no bias."""
    cols2, pre, (B, L, Cin, left) = cache
    k, s = kernel.kernel_size, kernel.stride
    out_len = pre.shape[1]
    if kernel.activation == "relu":
        dy = dy * (pre > 0.0)
    Wmat = kernel.weights.reshape(k * Cin, kernel.out_channels)
    dy2 = dy.reshape(B * out_len, kernel.out_channels)
    dW = (cols2.T @ dy2).reshape(kernel.weights.shape)
    db = dy.sum(axis=(0, 1)) if kernel.bias is not None else None
    dcols = (dy2 @ Wmat.T).reshape(B, out_len, k, Cin)
    lp = L + sum(same_padding(L, k, s))
    dxp = np.zeros((B, lp, Cin), dtype=dy.dtype)
    positions = s * np.arange(out_len)
    for j in range(k):
        dxp[:, positions + j, :] += dcols[:, :, j, :]
    dx = dxp[:, left:left + L, :]
    return dx, dW, db


def dense_forward(x: np.ndarray, layer: DenseLayer, return_cache: bool = False):
    """x of shape (B, in_dim) -> (B, out_dim); y = xW + b."""
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"dense input shape {x.shape} incompatible with in_dim {layer.in_dim}")
    y = x @ layer.weights + layer.bias
    if return_cache:
        return y, x
    return y


def dense_backward(dy: np.ndarray, layer: DenseLayer, cache):
    x = cache
    dW = x.T @ dy
    db = dy.sum(axis=0)
    dx = dy @ layer.weights.T
    return dx, dW, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability `rate`, kept units scaled."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def mae_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its gradient wrt pred (sign(0) taken as 0)."""
    resid = pred - target
    loss = float(np.mean(np.abs(resid)))
    grad = np.sign(resid) / resid.size
    return loss, grad


@dataclass
class AdamState:
    """Adam moments per named parameter tensor."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One in-place Adam update with bias-corrected moments."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
