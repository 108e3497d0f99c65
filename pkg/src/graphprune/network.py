"""Forward pass of a (pruned) CNN described by a :class:`ModelGraph`.

Every convolution is followed by batch norm and ReLU; add nodes sum their
inputs; the output node feeds global average pooling and a linear classifier.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Tensor
from .graph import ADD, CONCAT, DEPTHWISE_CONV, NORMAL_CONV, ModelGraph


def network_forward(g: ModelGraph, x: Tensor, weights: Mapping[int, Tensor],
                    bn_states: Mapping[int, BatchNormState], classifier: tuple[Tensor, Tensor],
                    mode: str = "train", capture: dict | None = None) -> Tensor:
    """Return logits.  ``capture`` (node -> None) is filled with raw conv outputs."""
    outputs: list[Tensor | None] = [None] * g.num_nodes
    for i, node in enumerate(g.nodes):
        inputs = [outputs[p] for p in g.preds[i]] or [x]
        if node.op_type == NORMAL_CONV:
            h = ag.conv2d(inputs[0], weights[i], node.stride, node.kernel // 2)
        elif node.op_type == DEPTHWISE_CONV:
            h = ag.depthwise_conv2d(inputs[0], weights[i], node.stride, node.kernel // 2)
        elif node.op_type == ADD:
            h = inputs[0]
            for other in inputs[1:]:
                h = h + other
        else:
            raise NotImplementedError("concat nodes are not supported by the forward pass")
        if capture is not None and i in capture:
            capture[i] = h.data.copy()
        if node.is_conv:
            h = ag.relu(ag.batchnorm(h, bn_states[i], mode))
        outputs[i] = h
        for p in g.preds[i]:
            if all(s <= i for s in g.succs[p]):
                outputs[p] = None  # last consumer done
    pooled = ag.global_avg_pool(outputs[g.output_node])
    w, b = classifier
    if pooled.shape[1] < w.shape[0]:
        w = w[: pooled.shape[1]]
    return ag.linear(pooled, w, b)


def check_supported(g: ModelGraph) -> None:
    if any(node.op_type == CONCAT for node in g.nodes):
        raise NotImplementedError("concat nodes are parsed and featurized but cannot be executed")


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=None) -> Tensor:
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), requires_grad=True, dtype=dtype)
