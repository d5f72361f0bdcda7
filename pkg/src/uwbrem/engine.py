"""Deployment surface: binary model images, embedded C source emission,
static memory planning, host latency measurement and the energy calculator.

Model image layout (little-endian, no implicit padding):

    header   magic "URM1" (4s) | version u16 | kind u8 | arch u8 |
             flags u16 | n_layers u16 | K,F,N,k0,kn u32 | dropout f64 |
             input_scale f64 | input_zp i32 | n_blobs u32
    layers   n_layers fixed-size records (see _LAYER_FMT)
    blobs    n_blobs x (offset u32, length u32), then 4-byte aligned payloads
    crc      crc32 (u32) over all preceding bytes

kind: 0 = float training checkpoint (optimizer moments included),
1 = optimized float graph, 2 = int8 integer-only model. Weight payloads are
float32 for kinds 0/1 and int8 (weights) / int32 (biases) for kind 2.
"""

from __future__ import annotations

import re
import struct
import time
import zlib
from dataclasses import dataclass

import numpy as np

from .graph import INPUT, Graph, GraphNode
from .model import ModelConfig
from .nn import AdamState, ConvKernel, DenseLayer, same_padding
from .quant import (
    FixedPointMultiplier,
    QLayer,
    QuantizedModel,
    QuantParams,
    int_forward,
)

MAGIC = b"URM1"
VERSION = 1
KIND_CHECKPOINT, KIND_FLOAT_OPT, KIND_INT8 = 0, 1, 2
_ARCHS = ("remnet", "mlp")
_OPS = ("conv", "dense", "add", "flatten", "relu", "dropout")

_HEADER_FMT = "<4sHBBHH5IddiI"
_LAYER_FMT = "<BBBBhh3H2Id9id"
_C_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class EngineError(ValueError):
    pass


@dataclass
class MemoryPlan:
    arena_size: int
    offsets: dict  # tensor name -> (offset, size_bytes)


def _align4(buf: bytearray) -> None:
    buf.extend(b"\x00" * (-len(buf) % 4))


class _BlobWriter:
    def __init__(self):
        self.blobs = []

    def add(self, arr: np.ndarray | None) -> int:
        if arr is None:
            return -1
        self.blobs.append(np.ascontiguousarray(arr).tobytes())
        return len(self.blobs) - 1


def _node_shapes(graph: Graph) -> dict:
    """(length, channels) per tensor for a float graph."""
    shapes = {INPUT: (graph.input_len, 1)}
    for n in graph.nodes:
        if n.op == "conv":
            in_len, _ = shapes[n.inputs[0]]
            shapes[n.name] = (-(-in_len // n.kernel.stride), n.kernel.out_channels)
        elif n.op == "dense":
            shapes[n.name] = (1, n.layer.out_dim)
        elif n.op == "flatten":
            l, c = shapes[n.inputs[0]]
            shapes[n.name] = (1, l * c)
        else:
            shapes[n.name] = shapes[n.inputs[0]]
    return shapes


def _pack(kind: int, arch: str, config: ModelConfig | None, input_len: int,
          input_qp: QuantParams | None, layer_records: list, blobs: list,
          dropout: float = 0.0, flags: int = 0) -> bytes:
    cfg = (config.K, config.F, config.N, config.k0, config.kn) if config else (input_len, 0, 0, 0, 0)
    if config is not None:
        dropout = config.dropout_rate
        flags |= int(config.paper_count_compatible)
    s = input_qp.scale if input_qp else 0.0
    z = input_qp.zero_point if input_qp else 0
    buf = bytearray()
    buf += struct.pack(_HEADER_FMT, MAGIC, VERSION, kind, _ARCHS.index(arch),
                       flags, len(layer_records), *cfg, dropout, s, z, len(blobs))
    for rec in layer_records:
        buf += struct.pack(_LAYER_FMT, *rec)
    table_pos = len(buf)
    buf += b"\x00" * (8 * len(blobs))
    entries = []
    for blob in blobs:
        _align4(buf)
        entries.append((len(buf), len(blob)))
        buf += blob
    for i, (off, ln) in enumerate(entries):
        struct.pack_into("<II", buf, table_pos + 8 * i, off, ln)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


def _layer_record(op, relu, stride, pad_left, in0, in1, k, in_ch, out_ch,
                  in_len, out_len, out_scale, out_zp, m0, shift, m0b, shiftb,
                  wblob, bblob, mblob, vblob, extra=0.0):
    return (op, relu, stride, pad_left, in0, in1, k, in_ch, out_ch,
            in_len, out_len, out_scale, out_zp, m0, shift, m0b, shiftb,
            wblob, bblob, mblob, vblob, extra)


def serialize(qmodel: QuantizedModel) -> bytes:
    """Int8 model -> binary image; deserialize yields bit-identical inference."""
    writer = _BlobWriter()
    index = {INPUT: -1}
    records = []
    for i, layer in enumerate(qmodel.layers):
        index[layer.name] = i
        in0 = index[layer.inputs[0]]
        in1 = index[layer.inputs[1]] if len(layer.inputs) > 1 else -2
        m0, sh = (layer.mult.m0, layer.mult.shift) if layer.mult else (0, 0)
        m0b, shb = (layer.mult_b.m0, layer.mult_b.shift) if layer.mult_b else (0, 0)
        wb = writer.add(layer.weights_q)
        bb = writer.add(layer.bias_q)
        records.append(_layer_record(
            _OPS.index(layer.op), int(layer.relu), layer.stride, layer.pad_left,
            in0, in1, layer.kernel_size, layer.in_ch, layer.out_ch,
            layer.in_len, layer.out_len, layer.out_qp.scale, layer.out_qp.zero_point,
            m0, sh, m0b, shb, wb, bb, -1, -1,
        ))
    return _pack(KIND_INT8, qmodel.arch, qmodel.config, qmodel.input_len,
                 qmodel.input_qp, records, writer.blobs)


def serialize_float(graph: Graph, kind: int = KIND_FLOAT_OPT,
                    adam: AdamState | None = None) -> bytes:
    """Float graph -> binary image. kind 0 also embeds Adam moments (the
    training checkpoint is the 'unoptimized' image: graph plus training
    state)."""
    if kind not in (KIND_CHECKPOINT, KIND_FLOAT_OPT):
        raise EngineError("float serialization kinds are 0 and 1")
    shapes = _node_shapes(graph)
    writer = _BlobWriter()
    index = {INPUT: -1}
    records = []
    for i, node in enumerate(graph.nodes):
        index[node.name] = i
        in0 = index[node.inputs[0]]
        in1 = index[node.inputs[1]] if len(node.inputs) > 1 else -2
        in_len, in_ch = shapes[node.inputs[0]]
        out_len, out_ch = shapes[node.name]
        relu = stride = k = pad_left = 0
        wb = bb = mb = vb = -1
        extra = 0.0
        w = b = None
        if node.op == "conv":
            kern = node.kernel
            relu, stride, k = int(kern.activation == "relu"), kern.stride, kern.kernel_size
            pad_left = same_padding(in_len, k, stride)[0]
            w, b = kern.weights, kern.bias
        elif node.op == "dense":
            relu = int(node.relu_fused)
            k, in_ch, in_len = 0, node.layer.in_dim, 1
            w, b = node.layer.weights, node.layer.bias
        elif node.op == "dropout":
            extra = node.rate
        if w is not None:
            wb = writer.add(w.astype(np.float32))
            bb = writer.add(None if b is None else b.astype(np.float32))
            if kind == KIND_CHECKPOINT and adam is not None:
                mb = writer.add(_moment_blob(adam.m, node, w, b))
                vb = writer.add(_moment_blob(adam.v, node, w, b))
        records.append(_layer_record(
            _OPS.index(node.op), relu, stride, pad_left, in0, in1, k,
            in_ch, out_ch, in_len, out_len, 0.0, 0, 0, 0, 0, 0,
            wb, bb, mb, vb, extra,
        ))
    return _pack(kind, graph.arch, graph.config, graph.input_len, None, records,
                 writer.blobs)


def _moment_blob(moments: dict, node: GraphNode, w, b) -> np.ndarray:
    """Adam moments for a node's weight (and bias) tensors, concatenated.
    Missing entries (untrained model) serialize as zeros."""
    keys = _param_keys(node.name)
    parts = []
    for key, ref in zip(keys, (w, b)):
        if ref is None:
            continue
        found = next((moments[k] for k in (key,) if k in moments), None)
        parts.append((found if found is not None else np.zeros_like(ref)).ravel())
    return np.concatenate(parts).astype(np.float32)


_NODE_TO_PARAM = {"_conv": ".block", "_red": ".reduce", "_sc": ".shortcut"}


def _param_keys(node_name: str) -> tuple:
    """Optimizer-state keys for a graph node's weight/bias tensors."""
    base = node_name
    if base.startswith("b") and "_" in base:
        idx, _, suffix = base.partition("_")
        base = f"rrm{idx[1:]}{_NODE_TO_PARAM.get('_' + suffix, '.' + suffix)}"
    elif base.startswith("fc"):
        base = f"fc{base[2:]}"
    return (f"{base}.w", f"{base}.b")


def deserialize(data: bytes):
    """Parse a model image; returns a QuantizedModel (kind 2) or a float
    Graph (kinds 0/1). Rejects bad magic, version or checksum with a reason."""
    if len(data) < struct.calcsize(_HEADER_FMT) + 4:
        raise EngineError("image truncated")
    payload, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(payload) != crc:
        raise EngineError("checksum mismatch: image corrupted")
    (magic, version, kind, arch_i, flags, n_layers, K, F, N, k0, kn,
     dropout, in_scale, in_zp, n_blobs) = struct.unpack_from(_HEADER_FMT, data, 0)
    if magic != MAGIC:
        raise EngineError(f"bad magic {magic!r}")
    if version != VERSION:
        raise EngineError(f"unsupported format version {version}")
    arch = _ARCHS[arch_i]
    pos = struct.calcsize(_HEADER_FMT)
    lsize = struct.calcsize(_LAYER_FMT)
    records = [struct.unpack_from(_LAYER_FMT, data, pos + i * lsize) for i in range(n_layers)]
    pos += n_layers * lsize
    table = [struct.unpack_from("<II", data, pos + 8 * i) for i in range(n_blobs)]

    def blob(idx, dtype):
        if idx < 0:
            return None
        off, ln = table[idx]
        return np.frombuffer(data, dtype=dtype, count=ln // np.dtype(dtype).itemsize,
                             offset=off).copy()

    config = None
    if arch == "remnet":
        config = ModelConfig(K, F, N, k0, kn, dropout, bool(flags & 1))
        input_len = K
    else:
        input_len = K
    if kind == KIND_INT8:
        return _decode_int8(records, blob, arch, config, input_len,
                            QuantParams(in_scale, in_zp))
    return _decode_float(records, blob, arch, config, input_len, kind)


def _tensor_name(i: int) -> str:
    return INPUT if i == -1 else f"L{i}"


def _decode_int8(records, blob, arch, config, input_len, input_qp) -> QuantizedModel:
    layers = []
    qps = {INPUT: input_qp}
    for i, rec in enumerate(records):
        (op_i, relu, stride, pad_left, in0, in1, k, in_ch, out_ch, in_len,
         out_len, out_scale, out_zp, m0, sh, m0b, shb, wb, bb, _, _, _) = rec
        op = _OPS[op_i]
        name = _tensor_name(i)
        inputs = [_tensor_name(in0)] + ([_tensor_name(in1)] if in1 != -2 else [])
        if op == "flatten":
            out_qp = qps[inputs[0]]
        else:
            out_qp = QuantParams(out_scale, out_zp)
        wq = blob(wb, np.int8)
        if wq is not None:
            wq = wq.reshape((k, in_ch, out_ch) if op == "conv" else (in_ch, out_ch))
        layer = QLayer(
            op, name, inputs, in_len, in_ch, out_len, out_ch, out_qp,
            qps[inputs[0]], in_qp_b=qps[inputs[1]] if len(inputs) > 1 else None,
            relu=bool(relu), stride=max(stride, 1), kernel_size=k, pad_left=pad_left,
            weights_q=wq, bias_q=blob(bb, np.int32),
            mult=FixedPointMultiplier(m0, sh) if m0 else None,
            mult_b=FixedPointMultiplier(m0b, shb) if m0b else None,
        )
        qps[name] = out_qp
        layers.append(layer)
    return QuantizedModel(arch, input_len, input_qp, layers, config)


def _decode_float(records, blob, arch, config, input_len, kind) -> Graph:
    nodes = []
    for i, rec in enumerate(records):
        (op_i, relu, stride, pad_left, in0, in1, k, in_ch, out_ch, in_len,
         out_len, _, _, _, _, _, _, wb, bb, _, _, extra) = rec
        op = _OPS[op_i]
        name = _tensor_name(i)
        inputs = [_tensor_name(in0)] + ([_tensor_name(in1)] if in1 != -2 else [])
        node = GraphNode(name, op, inputs)
        if op == "conv":
            w = blob(wb, np.float32).reshape(k, in_ch, out_ch)
            b = blob(bb, np.float32)
            node.kernel = ConvKernel(k, in_ch, out_ch, w, b, stride=max(stride, 1),
                                     activation="relu" if relu else "none")
        elif op == "dense":
            node.layer = DenseLayer(in_ch, out_ch, blob(wb, np.float32).reshape(in_ch, out_ch),
                                    blob(bb, np.float32))
            node.relu_fused = bool(relu)
        elif op == "dropout":
            node.rate = extra
        nodes.append(node)
    return Graph(config, nodes, input_len, arch)


# --- embedded source ----------------------------------------------------------


def emit_embedded_source(qmodel: QuantizedModel, symbol_prefix: str = "uwbrem") -> str:
    """C translation unit embedding the serialized image as a byte array."""
    if not _C_IDENT.match(symbol_prefix):
        raise EngineError(f"invalid C identifier prefix {symbol_prefix!r}")
    image = serialize(qmodel)
    lines = [
        "/* generated model image; do not edit */",
        "#include <stddef.h>",
        "",
        f"const unsigned char {symbol_prefix}_model[] = {{",
    ]
    for i in range(0, len(image), 12):
        chunk = ", ".join(f"0x{b:02x}" for b in image[i:i + 12])
        lines.append(f"    {chunk},")
    lines.append("};")
    lines.append(f"const size_t {symbol_prefix}_model_len = {len(image)}u;")
    lines.append("")
    return "\n".join(lines)


def parse_embedded_source(text: str) -> bytes:
    """Inverse of emit_embedded_source (test/validation helper)."""
    body = re.search(r"\{(.*?)\}", text, re.S)
    if not body:
        raise EngineError("no byte array found")
    return bytes(int(tok, 16) for tok in re.findall(r"0x[0-9a-fA-F]{2}", body.group(1)))


# --- memory planning ----------------------------------------------------------


def plan_memory(qmodel: QuantizedModel) -> MemoryPlan:
    """Greedy liveness-based arena offsets for the int8 activation tensors.

    A tensor is live from the step producing it through its last consuming
    step; the requantization scratch is per output element on target, so it
    does not enter the plan.
    """
    sizes = {INPUT: qmodel.input_len}
    last_use = {INPUT: -1}
    for i, layer in enumerate(qmodel.layers):
        sizes[layer.name] = layer.out_len * layer.out_ch
        last_use[layer.name] = i
        for src in layer.inputs:
            last_use[src] = i

    live = {}  # name -> (offset, size)
    offsets = {}

    def allocate(name):
        size = sizes[name]
        taken = sorted(live.values())
        offset = 0
        for off, sz in taken:
            if offset + size <= off:
                break
            offset = max(offset, off + sz)
        live[name] = (offset, size)
        offsets[name] = (offset, size)

    allocate(INPUT)
    for i, layer in enumerate(qmodel.layers):
        for name in list(live):
            if last_use[name] < i:
                del live[name]
        allocate(layer.name)
    arena = max(off + sz for off, sz in offsets.values())
    return MemoryPlan(arena, offsets)


class ArenaExecutor:
    """Inference bound to a single preallocated arena.

    Activation tensors live at their planned offsets; buffers are created
    once at construction and reused across calls, mirroring the
    zero-allocation execution model of the firmware engine.
    """

    def __init__(self, qmodel: QuantizedModel):
        self.qmodel = qmodel
        self.plan = plan_memory(qmodel)
        self.arena = np.zeros(self.plan.arena_size, dtype=np.int8)
        self._views = {}
        shapes = {INPUT: (qmodel.input_len, 1)}
        for layer in qmodel.layers:
            shapes[layer.name] = (layer.out_len, layer.out_ch)
        for name, (off, size) in self.plan.offsets.items():
            self._views[name] = self.arena[off:off + size].reshape(shapes[name])

    def run(self, q_input: np.ndarray) -> tuple[np.int8, float]:
        """Single-sample inference fully inside the arena."""
        from . import quant

        if q_input.dtype != np.int8:
            raise EngineError("arena executor expects an int8 input vector")
        view = self._views[INPUT]
        np.copyto(view, q_input.reshape(view.shape))
        for layer in self.qmodel.layers:
            src = self._views[layer.inputs[0]][None, ...]
            if layer.op == "conv":
                out = quant._int_conv(src, layer)
            elif layer.op == "dense":
                out = quant._int_dense(src, layer)
            elif layer.op == "add":
                out = quant._int_add(src, self._views[layer.inputs[1]][None, ...], layer)
            else:  # flatten
                out = src.reshape(1, 1, -1)
            np.copyto(self._views[layer.name], out.reshape(self._views[layer.name].shape))
        q = self._views[self.qmodel.layers[-1].name].ravel()[0]
        qp = self.qmodel.output_qp
        return q, float(qp.scale * (int(q) - qp.zero_point))


def validate_plan(qmodel: QuantizedModel, plan: MemoryPlan) -> None:
    """Interference check: tensors with overlapping arena ranges must never
    be live at the same execution step."""
    last_use = {INPUT: -1}
    produced = {INPUT: -1}
    for i, layer in enumerate(qmodel.layers):
        produced[layer.name] = i
        last_use.setdefault(layer.name, i)
        last_use[layer.name] = i
        for src in layer.inputs:
            last_use[src] = i
    names = list(plan.offsets)
    for a in names:
        for b in names:
            if a >= b:
                continue
            oa, sa = plan.offsets[a]
            ob, sb = plan.offsets[b]
            overlap = not (oa + sa <= ob or ob + sb <= oa)
            live_together = produced[a] <= last_use[b] and produced[b] <= last_use[a]
            if overlap and live_together:
                raise EngineError(f"arena overlap between live tensors {a} and {b}")


# --- latency and energy -------------------------------------------------------


def measure_latency(qmodel: QuantizedModel, runs: int = 100,
                    seed: int = 0) -> dict:
    """Host wall-clock per-inference statistics. The reported frequency is
    the reciprocal of the *maximum* inference time. Host numbers are not
    comparable to microcontroller figures; only trends are meaningful."""
    if runs < 30:
        raise EngineError("need at least 30 runs for a stable maximum")
    rng = np.random.default_rng(seed)
    q = rng.integers(-128, 128, size=(1, qmodel.input_len), dtype=np.int8)
    int_forward(qmodel, q)  # warm up
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        int_forward(qmodel, q)
        times.append(time.perf_counter() - t0)
    max_s = max(times)
    return {
        "max_ms": max_s * 1e3,
        "mean_ms": float(np.mean(times)) * 1e3,
        "f_m_hz": 1.0 / max_s,
        "runs": runs,
    }


def energy_per_inference(p_mw: float, f_hz: float) -> float:
    """Energy per inference in mJ: consumed power divided by inference
    frequency."""
    if p_mw <= 0 or f_hz <= 0:
        raise EngineError("power and frequency must be positive")
    return p_mw / f_hz
