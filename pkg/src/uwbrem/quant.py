"""Post-training 8-bit affine quantization and integer-only inference.

Real values map to int8 by r = S(q - Z). Weights are quantized per-tensor
symmetric (Z = 0), activations per-tensor asymmetric. Accumulation is int32
with int32 biases at scale S_in*S_w; requantization to the next activation
domain uses a fixed-point multiplier (int32 mantissa in [0.5, 1) plus a right
shift). Rounding is half-away-from-zero everywhere so inference is
bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import INPUT, Graph
from .model import ModelConfig
from .nn import same_padding

QMIN, QMAX = -128, 127
INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1


class QuantError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if self.scale <= 0.0:
            raise QuantError("scale must be positive")
        if not QMIN <= self.zero_point <= QMAX:
            raise QuantError("zero point out of int8 range")


@dataclass(frozen=True)
class FixedPointMultiplier:
    m0: int  # mantissa, round(m * 2^31) with m in [0.5, 1)
    shift: int  # right shift, >= 0

    @property
    def real_value(self) -> float:
        return self.m0 * 2.0 ** (-31 - self.shift)


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def choose_qparams(vmin: float, vmax: float, symmetric: bool,
                   min_scale: float = 0.0) -> QuantParams:
    """Affine parameters for an observed range, widened to include zero.

    Symmetric: Z = 0, S = max(|min|, |max|)/127 (weights). Asymmetric: the
    255-step grid spans [min, max] and real zero maps to an exact integer.
    `min_scale` forces S above a floor (used to keep requantization
    multipliers below one).
    """
    if vmin > vmax:
        raise QuantError(f"min {vmin} > max {vmax}")
    vmin, vmax = min(vmin, 0.0), max(vmax, 0.0)
    if symmetric:
        amax = max(abs(vmin), abs(vmax), 1e-8)
        return QuantParams(max(amax / 127.0, min_scale), 0)
    span = vmax - vmin
    if span == 0.0:
        span = 1e-6  # degenerate all-zero range: minimal nonzero span
        vmax = vmin + span
    scale = max(span / 255.0, min_scale)
    zp = int(np.clip(round_half_away(QMIN - vmin / scale), QMIN, QMAX))
    return QuantParams(scale, zp)


def quantize_value(r, qp: QuantParams):
    """q = clamp(round(r/S) + Z); saturation at the int8 limits is the
    defined behavior for out-of-range reals."""
    q = round_half_away(np.asarray(r, dtype=np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequantize(q, qp: QuantParams):
    return qp.scale * (np.asarray(q, dtype=np.float64) - qp.zero_point)


def compute_fixed_multiplier(m: float) -> FixedPointMultiplier:
    """Normalize a real multiplier in (0, 1) to mantissa-and-shift form."""
    if not 0.0 < m < 1.0:
        raise QuantError(f"multiplier must be in (0, 1), got {m}")
    shift = 0
    while m < 0.5:
        m *= 2.0
        shift += 1
    m0 = int(round_half_away(m * (1 << 31)))
    if m0 == 1 << 31:
        if shift > 0:
            m0 >>= 1
            shift -= 1
        else:
            m0 = (1 << 31) - 1  # multiplier within 2^-31 of 1.0
    return FixedPointMultiplier(m0, shift)


def apply_multiplier(x, mult: FixedPointMultiplier):
    """Integer path: rounding-doubling high multiply by the mantissa, then a
    rounding (half away from zero) right shift. x is int32-ranged."""
    x = np.asarray(x, dtype=np.int64)
    ab = x * mult.m0
    # round half away from zero: an arithmetic shift alone would floor, which
    # is off by one for negative products
    t = np.sign(ab) * ((np.abs(ab) + (1 << 30)) >> 31)
    n = mult.shift
    if n == 0:
        return t
    half = 1 << (n - 1)
    return np.sign(t) * ((np.abs(t) + half) >> n)


# --- quantized model ----------------------------------------------------------


@dataclass
class QLayer:
    op: str  # conv | dense | add | flatten
    name: str
    inputs: list
    in_len: int
    in_ch: int
    out_len: int
    out_ch: int
    out_qp: QuantParams
    in_qp: QuantParams
    in_qp_b: QuantParams | None = None  # add: second input
    relu: bool = False
    stride: int = 1
    kernel_size: int = 0
    pad_left: int = 0
    weights_q: np.ndarray | None = None  # int8
    bias_q: np.ndarray | None = None  # int32
    weight_qp: QuantParams | None = None
    mult: FixedPointMultiplier | None = None
    mult_b: FixedPointMultiplier | None = None


@dataclass
class QuantizedModel:
    arch: str
    input_len: int
    input_qp: QuantParams
    layers: list
    config: ModelConfig | None = None

    @property
    def output_qp(self) -> QuantParams:
        return self.layers[-1].out_qp


def calibrate(graph: Graph, x_cal: np.ndarray) -> dict:
    """Observed (min, max) per tensor, including the graph input, from a
    float pass over the calibration set."""
    if x_cal is None or len(x_cal) == 0:
        raise QuantError("calibration set must be nonempty")
    from .graph import run_graph

    record = {}
    run_graph(graph, x_cal, record=record)
    return {name: (float(t.min()), float(t.max())) for name, t in record.items()}


def _quantize_weights(w: np.ndarray) -> tuple[np.ndarray, QuantParams]:
    qp = choose_qparams(float(w.min()), float(w.max()), symmetric=True)
    return quantize_value(w, qp), qp


def _quantize_bias(bias, s_in: float, s_w: float, n: int) -> np.ndarray:
    if bias is None:
        return np.zeros(n, dtype=np.int32)
    bq = round_half_away(np.asarray(bias) / (s_in * s_w))
    if np.any(np.abs(bq) > INT32_MAX):
        raise QuantError("bias exceeds int32 after scaling")
    return bq.astype(np.int32)


def _out_qparams(rng: tuple, s_floor: float) -> QuantParams:
    """Asymmetric activation params whose scale strictly exceeds s_floor, so
    the layer's requantization multiplier stays below one."""
    return choose_qparams(rng[0], rng[1], symmetric=False,
                          min_scale=s_floor * (1.0 + 1e-9) if s_floor else 0.0)


def _assert_no_overflow(layer: QLayer) -> None:
    """Worst-case |accumulator| bound must fit int32 (asserted at build)."""
    terms = layer.kernel_size * layer.in_ch if layer.op == "conv" else layer.in_ch
    worst = terms * 127 * 255
    if layer.bias_q is not None and layer.bias_q.size:
        worst += int(np.max(np.abs(layer.bias_q)))
    if worst > INT32_MAX:
        raise QuantError(f"layer {layer.name}: worst-case accumulator {worst} overflows int32")


def quantize_model(graph: Graph, ranges: dict) -> QuantizedModel:
    """Quantize a fused float graph using calibrated activation ranges."""
    if INPUT not in ranges:
        raise QuantError("calibration ranges missing the graph input")
    input_qp = choose_qparams(*ranges[INPUT], symmetric=False)
    shapes = {INPUT: (graph.input_len, 1)}
    qps = {INPUT: input_qp}
    layers = []
    for node in graph.nodes:
        in0 = node.inputs[0] if node.inputs else None
        if node.op == "conv":
            k = node.kernel
            in_len, in_ch = shapes[in0]
            out_len = -(-in_len // k.stride)
            wq, wqp = _quantize_weights(k.weights)
            in_qp = qps[in0]
            bq = _quantize_bias(k.bias, in_qp.scale, wqp.scale, k.out_channels)
            out_qp = _out_qparams(ranges[node.name], in_qp.scale * wqp.scale)
            mult = compute_fixed_multiplier(in_qp.scale * wqp.scale / out_qp.scale)
            layer = QLayer(
                "conv", node.name, [in0], in_len, in_ch, out_len, k.out_channels,
                out_qp, in_qp, relu=(k.activation == "relu"), stride=k.stride,
                kernel_size=k.kernel_size,
                pad_left=same_padding(in_len, k.kernel_size, k.stride)[0],
                weights_q=wq, bias_q=bq, weight_qp=wqp, mult=mult,
            )
        elif node.op == "dense":
            d = node.layer
            in_len, in_ch = shapes[in0]
            if in_len * in_ch != d.in_dim:
                raise QuantError(f"dense {node.name}: input {in_len}x{in_ch} != in_dim {d.in_dim}")
            wq, wqp = _quantize_weights(d.weights)
            in_qp = qps[in0]
            bq = _quantize_bias(d.bias, in_qp.scale, wqp.scale, d.out_dim)
            out_qp = _out_qparams(ranges[node.name], in_qp.scale * wqp.scale)
            mult = compute_fixed_multiplier(in_qp.scale * wqp.scale / out_qp.scale)
            layer = QLayer(
                "dense", node.name, [in0], 1, d.in_dim, 1, d.out_dim,
                out_qp, in_qp, relu=node.relu_fused,
                weights_q=wq, bias_q=bq, weight_qp=wqp, mult=mult,
            )
        elif node.op == "add":
            a, b = node.inputs
            in_len, in_ch = shapes[a]
            qa, qb = qps[a], qps[b]
            out_qp = _out_qparams(ranges[node.name], max(qa.scale, qb.scale))
            layer = QLayer(
                "add", node.name, [a, b], in_len, in_ch, in_len, in_ch,
                out_qp, qa, in_qp_b=qb,
                mult=compute_fixed_multiplier(qa.scale / out_qp.scale),
                mult_b=compute_fixed_multiplier(qb.scale / out_qp.scale),
            )
        elif node.op == "flatten":
            in_len, in_ch = shapes[in0]
            layer = QLayer("flatten", node.name, [in0], in_len, in_ch,
                           1, in_len * in_ch, qps[in0], qps[in0])
        else:
            raise QuantError(f"cannot quantize op {node.op!r}; optimize the graph first")
        if layer.op in ("conv", "dense"):
            _assert_no_overflow(layer)
        shapes[node.name] = (layer.out_len, layer.out_ch)
        qps[node.name] = layer.out_qp
        layers.append(layer)
    return QuantizedModel(graph.arch, graph.input_len, input_qp, layers, graph.config)


# --- integer executor ---------------------------------------------------------


def _int_conv(xq: np.ndarray, layer: QLayer) -> np.ndarray:
    B = xq.shape[0]
    k, s = layer.kernel_size, layer.stride
    left, right = same_padding(layer.in_len, k, s)
    z_in = layer.in_qp.zero_point
    xp = np.pad(xq.astype(np.int64), ((0, 0), (left, right), (0, 0)),
                constant_values=z_in)
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)
    cols = windows[:, ::s][:, :layer.out_len].transpose(0, 1, 3, 2)
    cols = cols.reshape(B, layer.out_len, k * layer.in_ch) - z_in
    acc = cols @ layer.weights_q.astype(np.int64).reshape(k * layer.in_ch, layer.out_ch)
    acc += layer.bias_q.astype(np.int64)
    if acc.size and (acc.max() > INT32_MAX or acc.min() < INT32_MIN):
        raise QuantError(f"int32 accumulator overflow in {layer.name}")
    q = apply_multiplier(acc, layer.mult) + layer.out_qp.zero_point
    q = np.clip(q, QMIN, QMAX)
    if layer.relu:
        q = np.maximum(q, layer.out_qp.zero_point)
    return q.astype(np.int8)


def _int_dense(xq: np.ndarray, layer: QLayer) -> np.ndarray:
    B = xq.shape[0]
    x = xq.reshape(B, layer.in_ch).astype(np.int64) - layer.in_qp.zero_point
    acc = x @ layer.weights_q.astype(np.int64) + layer.bias_q.astype(np.int64)
    if acc.size and (acc.max() > INT32_MAX or acc.min() < INT32_MIN):
        raise QuantError(f"int32 accumulator overflow in {layer.name}")
    q = apply_multiplier(acc, layer.mult) + layer.out_qp.zero_point
    q = np.clip(q, QMIN, QMAX)
    if layer.relu:
        q = np.maximum(q, layer.out_qp.zero_point)
    return q.astype(np.int8).reshape(B, 1, layer.out_ch)


def _int_add(aq: np.ndarray, bq: np.ndarray, layer: QLayer) -> np.ndarray:
    ra = apply_multiplier(aq.astype(np.int64) - layer.in_qp.zero_point, layer.mult)
    rb = apply_multiplier(bq.astype(np.int64) - layer.in_qp_b.zero_point, layer.mult_b)
    q = np.clip(ra + rb + layer.out_qp.zero_point, QMIN, QMAX)
    return q.astype(np.int8)


def int_forward(qmodel: QuantizedModel, q_input: np.ndarray):
    """Run the integer graph. q_input is int8 of shape (B, K) or (B, K, 1),
    already quantized with the model's input params. Returns (q_output (B,)
    int8, dequantized predictions (B,) in meters) - the single float step is
    the final dequantization."""
    if q_input.dtype != np.int8:
        raise QuantError("int_forward expects int8 input; use quantize_input")
    xq = q_input
    if xq.ndim == 2:
        xq = xq[:, :, None]
    if xq.shape[1] != qmodel.input_len:
        raise QuantError(f"expected input length {qmodel.input_len}, got {xq.shape[1]}")
    buffers = {INPUT: xq}
    for layer in qmodel.layers:
        if layer.op == "conv":
            out = _int_conv(buffers[layer.inputs[0]], layer)
        elif layer.op == "dense":
            out = _int_dense(buffers[layer.inputs[0]], layer)
        elif layer.op == "add":
            out = _int_add(buffers[layer.inputs[0]], buffers[layer.inputs[1]], layer)
        elif layer.op == "flatten":
            b = buffers[layer.inputs[0]]
            out = b.reshape(b.shape[0], 1, -1)
        else:
            raise QuantError(f"unknown quantized op {layer.op!r}")
        buffers[layer.name] = out
    q_out = buffers[qmodel.layers[-1].name].reshape(len(xq), -1)[:, 0]
    y = dequantize(q_out, qmodel.output_qp)
    return q_out, y


def quantize_input(x: np.ndarray, qmodel: QuantizedModel) -> np.ndarray:
    return quantize_value(x, qmodel.input_qp)


def int_predict(qmodel: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Float-in/float-out convenience wrapper around the integer path."""
    _, y = int_forward(qmodel, quantize_input(x, qmodel))
    return y
