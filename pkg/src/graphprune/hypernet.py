"""PruningNet: per-layer fully connected generators of convolution weights.

Each convolution node owns a generator mapping its 64-wide node embedding to
the full unpruned weight block.  The block is reshaped to the base kernel
shape and cropped to the leading ``(out, in)`` channels of the pruned layer.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .graph import DEPTHWISE_CONV, ModelGraph, NodeSpec, RatioAssignment, channel_count, node_channels


def full_weight_size(node: NodeSpec) -> int:
    return int(np.prod(node.weight_shape()))


class WeightGenerator:
    """Affine map (optionally with one ReLU hidden layer) from embedding to weights."""

    def __init__(self, rng: np.random.Generator, out_size: int, embed_dim: int = 64,
                 hidden: int | None = None, dtype=None):
        self.layers: list[tuple[Tensor, Tensor]] = []
        dims = [embed_dim] + ([hidden] if hidden else []) + [out_size]
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = Tensor(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in), requires_grad=True, dtype=dtype)
            b = Tensor(np.zeros(fan_out), requires_grad=True, dtype=dtype)
            self.layers.append((w, b))

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def __call__(self, embedding: Tensor) -> Tensor:
        x = embedding if embedding.ndim == 2 else embedding.reshape(1, -1)
        for k, (w, b) in enumerate(self.layers):
            if k:
                x = ag.relu(x)
            x = ag.linear(x, w, b)
        return x


class PruningNet:
    """One generator per convolution node of ``graph`` (depthwise included)."""

    def __init__(self, graph: ModelGraph, rng: np.random.Generator, embed_dim: int = 64,
                 hidden: int | None = None, dtype=None):
        self.graph = graph
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.generators = {
            i: WeightGenerator(rng, full_weight_size(graph.nodes[i]), embed_dim, hidden, dtype)
            for i in graph.conv_nodes
        }

    def parameters(self) -> list[Tensor]:
        return [p for i in sorted(self.generators) for p in self.generators[i].parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for i in sorted(self.generators):
            for k, (w, b) in enumerate(self.generators[i].layers):
                named += [(f"node{i}.fc{k}.w", w), (f"node{i}.fc{k}.b", b)]
        return named


def generate_layer_weights(embedding: Tensor, node: NodeSpec, own_ratio: float,
                           producer_ratio: float, generator: WeightGenerator) -> Tensor:
    """Generate the full block, reshape it to the base kernel shape, crop the leading channels."""
    for r in (own_ratio, producer_ratio):
        if not 0.0 < r <= 1.0:
            raise ValueError(f"ratios must lie in (0, 1], got {r}")
    full = generator(embedding).reshape(node.weight_shape())
    c_out = channel_count(node.base_out_channels, own_ratio)
    if node.op_type == DEPTHWISE_CONV:
        return full[:c_out] if c_out < node.base_out_channels else full
    c_in = channel_count(node.base_in_channels, producer_ratio)
    if c_out == node.base_out_channels and c_in == node.base_in_channels:
        return full
    return full[:c_out, :c_in]


def generate_all(g: ModelGraph, embeddings: Tensor, ratios: RatioAssignment,
                 net: PruningNet) -> dict[int, Tensor]:
    """Generate the weights of every convolution for one pruned configuration."""
    if embeddings.shape[0] != g.num_nodes:
        raise ValueError(f"embeddings have {embeddings.shape[0]} rows for {g.num_nodes} nodes")
    channels = node_channels(g, ratios)
    weights: dict[int, Tensor] = {}
    for i in g.conv_nodes:
        node = g.nodes[i]
        p = g.producer(i)
        w = generate_layer_weights(embeddings[i], node, ratios[i],
                                   1.0 if p is None else ratios[p], net.generators[i])
        incoming = node.base_in_channels if p is None else channels[p][1]
        got = w.shape[0] if node.op_type == DEPTHWISE_CONV else w.shape[1]
        if got != incoming:
            raise ValueError(f"node {i}: generated weights expect {got} input channels "
                             f"but the producer supplies {incoming}")
        weights[i] = w
    return weights
