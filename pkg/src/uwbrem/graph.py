"""Small inference-graph IR for the float models, plus semantics-preserving
graph optimization: activation fusion into conv/dense, dropout elision and
constant folding. Quantization and the embedded engine consume the optimized
graph."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import MlpWeights, ModelConfig, RemnetWeights
from .nn import ConvKernel, DenseLayer, conv1d_same, dense_forward, dropout_mask

INPUT = "cir"


@dataclass
class GraphNode:
    name: str
    op: str  # conv | dense | relu | add | flatten | dropout | const
    inputs: list
    kernel: ConvKernel | None = None
    layer: DenseLayer | None = None
    rate: float = 0.0
    relu_fused: bool = False  # dense nodes only; conv carries it on the kernel
    value: np.ndarray | None = None  # const nodes


@dataclass
class Graph:
    config: ModelConfig | None
    nodes: list
    input_len: int
    arch: str = "remnet"  # remnet | mlp

    @property
    def output(self) -> str:
        return self.nodes[-1].name

    def node(self, name: str) -> GraphNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)


def _bare(kernel: ConvKernel) -> ConvKernel:
    return replace(kernel, activation="none")


def remnet_to_graph(weights: RemnetWeights) -> Graph:
    """Lower trained weights to the IR with explicit relu/dropout nodes."""
    cfg = weights.config
    nodes = [
        GraphNode("stem", "conv", [INPUT], kernel=_bare(weights.stem)),
        GraphNode("stem_relu", "relu", ["stem"]),
    ]
    prev = "stem_relu"
    for i, rrm in enumerate(weights.blocks):
        nodes += [
            GraphNode(f"b{i}_conv", "conv", [prev], kernel=_bare(rrm.block)),
            GraphNode(f"b{i}_relu", "relu", [f"b{i}_conv"]),
            GraphNode(f"b{i}_res", "add", [f"b{i}_relu", prev]),
            GraphNode(f"b{i}_red", "conv", [f"b{i}_res"], kernel=_bare(rrm.reduce)),
            GraphNode(f"b{i}_red_relu", "relu", [f"b{i}_red"]),
            GraphNode(f"b{i}_sc", "conv", [f"b{i}_res"], kernel=_bare(rrm.shortcut)),
            GraphNode(f"b{i}_sc_relu", "relu", [f"b{i}_sc"]),
            GraphNode(f"b{i}_out", "add", [f"b{i}_red_relu", f"b{i}_sc_relu"]),
        ]
        prev = f"b{i}_out"
    nodes += [
        GraphNode("flat", "flatten", [prev]),
        GraphNode("drop", "dropout", ["flat"], rate=cfg.dropout_rate),
        GraphNode("head", "dense", ["drop"], layer=weights.head),
    ]
    return Graph(cfg, nodes, cfg.K, arch="remnet")


def mlp_to_graph(weights: MlpWeights) -> Graph:
    nodes = [GraphNode("flat", "flatten", [INPUT])]
    prev = "flat"
    n = len(weights.layers)
    for i, layer in enumerate(weights.layers):
        if i == n - 1:
            nodes.append(GraphNode("drop", "dropout", [prev], rate=weights.dropout_rate))
            prev = "drop"
        nodes.append(GraphNode(f"fc{i}", "dense", [prev], layer=layer))
        prev = f"fc{i}"
        if i < n - 1:
            nodes.append(GraphNode(f"fc{i}_relu", "relu", [prev]))
            prev = f"fc{i}_relu"
    return Graph(None, nodes, weights.input_dim, arch="mlp")


def run_graph(graph: Graph, x: np.ndarray, train_mode: bool = False,
              rng: np.random.Generator | None = None,
              record: dict | None = None) -> np.ndarray:
    """Execute the graph on a batch. x is (B, K) or (B, K, 1); returns (B,).
    If `record` is given every intermediate tensor is stored into it."""
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim == 2:
        x = x[:, :, None]
    tensors = {INPUT: x}
    if record is not None:
        record[INPUT] = x
    for node in graph.nodes:
        ins = [tensors[name] for name in node.inputs]
        if node.op == "conv":
            out = conv1d_same(ins[0], node.kernel)
        elif node.op == "dense":
            out = dense_forward(ins[0], node.layer)
            if node.relu_fused:
                out = np.maximum(out, 0.0)
        elif node.op == "relu":
            out = np.maximum(ins[0], 0.0)
        elif node.op == "add":
            out = ins[0] + ins[1]
        elif node.op == "flatten":
            out = ins[0].reshape(ins[0].shape[0], -1)
        elif node.op == "dropout":
            if train_mode and node.rate > 0.0:
                if rng is None:
                    raise ValueError("train-mode graph run needs an RNG")
                out = ins[0] * dropout_mask(ins[0].shape, node.rate, rng)
            else:
                out = ins[0]
        elif node.op == "const":
            out = node.value
        else:
            raise ValueError(f"unknown op {node.op!r}")
        tensors[node.name] = out
        if record is not None:
            record[node.name] = out
    y = tensors[graph.output]
    return y[:, 0] if y.ndim == 2 else y


def _consumers(nodes: list) -> dict:
    counts = {}
    for n in nodes:
        for src in n.inputs:
            counts[src] = counts.get(src, 0) + 1
    return counts


def optimize(graph: Graph) -> Graph:
    """Fuse relu into its producing conv/dense, drop dropout nodes, and fold
    subgraphs with no dependence on the input into constants. Output values
    are preserved (inference mode is exactly unchanged)."""
    nodes = [replace(n) for n in graph.nodes]

    # dropout is identity at inference: rewire consumers past it
    alias = {}
    kept = []
    for n in nodes:
        n.inputs = [alias.get(i, i) for i in n.inputs]
        if n.op == "dropout":
            alias[n.name] = n.inputs[0]
        else:
            kept.append(n)
    nodes = kept

    # fuse relu into a conv/dense producer consumed only by that relu
    consumers = _consumers(nodes)
    by_name = {n.name: n for n in nodes}
    alias = {}
    kept = []
    for n in nodes:
        n.inputs = [alias.get(i, i) for i in n.inputs]
        if n.op == "relu":
            src = by_name.get(n.inputs[0])
            if src is not None and consumers.get(src.name, 0) == 1:
                if src.op == "conv":
                    src.kernel = replace(src.kernel, activation="relu")
                    alias[n.name] = src.name
                    continue
                if src.op == "dense":
                    src.relu_fused = True
                    alias[n.name] = src.name
                    continue
        kept.append(n)
    nodes = kept

    # constant folding: nodes whose transitive inputs never reach the graph input
    depends = {INPUT: True}
    foldable = []
    for n in nodes:
        dep = any(depends.get(i, False) for i in n.inputs)
        depends[n.name] = dep
        if not dep and n.op != "const":
            foldable.append(n)
    for n in foldable:
        # evaluate once on an empty batch surrogate: all inputs are consts
        vals = {c.name: c.value for c in nodes if c.op == "const"}
        ins = [vals[i] for i in n.inputs]
        if n.op == "add":
            n.value = ins[0] + ins[1]
        elif n.op == "relu":
            n.value = np.maximum(ins[0], 0.0)
        else:
            continue
        n.op, n.inputs = "const", []

    return Graph(graph.config, nodes, graph.input_len, graph.arch)
