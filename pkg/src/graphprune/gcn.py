"""Residual graph-convolution aggregator mapping node features to node embeddings."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor

HIDDEN = 64
N_BLOCKS = 2


def embed_features(feats, weight: Tensor, bias: Tensor) -> Tensor:
    """Project the l x 7 feature matrix to the hidden width."""
    feats = feats if isinstance(feats, Tensor) else Tensor(feats, dtype=weight.data.dtype)
    return ag.linear(feats, weight, bias)


def gcn_block(a_hat, x: Tensor, w0: Tensor, w1: Tensor) -> Tensor:
    """``Z = X + relu(A relu(A X W0) W1)``."""
    a_hat = a_hat if isinstance(a_hat, Tensor) else Tensor(a_hat, dtype=x.data.dtype)
    n = x.shape[0]
    if a_hat.shape != (n, n):
        raise ValueError(f"adjacency {a_hat.shape} does not match {n} node rows")
    if w0.shape[0] != x.shape[1] or w1.shape[0] != w0.shape[1] or w1.shape[1] != x.shape[1]:
        raise ValueError(f"block weights {w0.shape}, {w1.shape} incompatible with input {x.shape}")
    h = ag.relu(a_hat @ (x @ w0))
    return x + ag.relu(a_hat @ (h @ w1))


class GraphAggregator:
    """Input projection followed by residual GCN blocks.

    With ``mix_neighbors=False`` the renormalized adjacency is replaced by
    the identity, so every node only sees its own features; the parameter
    count is unchanged.  This is the no-aggregation ablation.
    """

    def __init__(self, rng: np.random.Generator, in_features: int = 7, hidden: int = HIDDEN,
                 n_blocks: int = N_BLOCKS, mix_neighbors: bool = True, dtype=None):
        self.hidden = hidden
        self.mix_neighbors = mix_neighbors
        self.proj_w = ag.glorot_uniform(rng, (in_features, hidden), in_features, hidden, dtype)
        self.proj_b = Tensor(np.zeros(hidden), requires_grad=True, dtype=dtype)
        self.blocks = [
            (ag.glorot_uniform(rng, (hidden, hidden), hidden, hidden, dtype),
             ag.glorot_uniform(rng, (hidden, hidden), hidden, hidden, dtype))
            for _ in range(n_blocks)
        ]

    def parameters(self) -> list[Tensor]:
        params = [self.proj_w, self.proj_b]
        for w0, w1 in self.blocks:
            params += [w0, w1]
        return params

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [("proj_w", self.proj_w), ("proj_b", self.proj_b)]
        for k, (w0, w1) in enumerate(self.blocks):
            named += [(f"block{k}.w0", w0), (f"block{k}.w1", w1)]
        return named

    def __call__(self, a_hat: np.ndarray, feats: np.ndarray) -> Tensor:
        return aggregate(a_hat, feats, self)


def aggregate(a_hat: np.ndarray, feats: np.ndarray, params: GraphAggregator) -> Tensor:
    """Embed the features, then run every residual block; row i is node i's embedding."""
    x = embed_features(feats, params.proj_w, params.proj_b)
    if not params.mix_neighbors:
        a_hat = np.eye(len(a_hat))
    a = Tensor(a_hat, dtype=x.data.dtype)
    for w0, w1 in params.blocks:
        x = gcn_block(a, x, w0, w1)
    return x


def neighbor_distance_report(embeddings) -> np.ndarray:
    """Pairwise mean-squared distance between node embedding rows."""
    n = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    diff = n[:, None, :] - n[None, :, :]
    return (diff * diff).mean(axis=2)
