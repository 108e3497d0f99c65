"""Joint stochastic training of the graph aggregator and PruningNet.

Every step samples a ratio per free layer, refreshes the node features,
aggregates them, generates the pruned network's convolution weights and
trains everything end to end on one batch.  Batch-norm layers are privatized
per (layer, ratio-grid bucket) and evaluated only after recalibration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Tensor
from .data import Dataset, DataError, augment, iterate_batches, to_float
from .gcn import GraphAggregator
from .graph import (ModelGraph, RatioAssignment, apply_ratio_sharing, build_adjacency, channel_count,
                    feature_scales, node_features, pruned_graph, renormalize_adjacency)
from .hypernet import PruningNet, generate_all
from .network import check_supported, he_normal, network_forward

logger = logging.getLogger(__name__)

DEFAULT_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))


class NumericError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    """Training schedule; field names follow the usual experiment tables."""

    epochs: int = 8
    batch_size: int = 32
    init_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 4e-5
    lr_schedule: str = "cosine"
    seed: int = 0
    ratio_grid: tuple = DEFAULT_GRID
    crop: bool = True
    flip: bool = True
    mix_neighbors: bool = True
    hypernet_hidden: int | None = None

    def __post_init__(self):
        self.ratio_grid = tuple(float(r) for r in self.ratio_grid)
        self.validate()

    def validate(self) -> None:
        grid = self.ratio_grid
        if not grid or any(not 0.0 < r <= 1.0 for r in grid):
            raise ValueError(f"ratio_grid values must lie in (0, 1], got {grid}")
        if list(grid) != sorted(set(grid)) or grid[-1] != 1.0:
            raise ValueError("ratio_grid must be strictly increasing and end with 1.0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch statistics")
        if self.epochs < 0 or self.init_lr < 0 or self.weight_decay < 0:
            raise ValueError("epochs, init_lr and weight_decay must be non-negative")
        if self.lr_schedule not in ("cosine", "step"):
            raise ValueError(f"lr_schedule must be 'cosine' or 'step', got {self.lr_schedule!r}")


@dataclass
class PrunedConfigEval:
    ratios: RatioAssignment
    flops: int
    accuracy: float | None = None
    recalibrated: bool = False


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return config.init_lr
    if config.lr_schedule == "cosine":
        return 0.5 * config.init_lr * (1.0 + math.cos(math.pi * step / total_steps))
    # step schedule: divide by 10 at 50% and 75% of the run
    frac = step / total_steps
    return config.init_lr * (0.1 ** ((frac >= 0.5) + (frac >= 0.75)))


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


class GraphPruningModel:
    """Aggregator, PruningNet, classifier head and privatized batch norms."""

    def __init__(self, graph: ModelGraph, num_classes: int, config: TrainConfig, dtype=None):
        check_supported(graph)
        self.graph = graph
        self.num_classes = int(num_classes)
        self.config = config
        self.ratio_grid = np.asarray(config.ratio_grid)
        self.dtype = dtype or ag.get_default_dtype()
        self.a_hat = renormalize_adjacency(build_adjacency(graph))
        self.scales = feature_scales(graph)
        seed = config.seed
        self.aggregator = GraphAggregator(_stream(seed, 1), mix_neighbors=config.mix_neighbors, dtype=self.dtype)
        self.hypernet = PruningNet(graph, _stream(seed, 2), hidden=config.hypernet_hidden, dtype=self.dtype)
        width = graph.nodes[graph.output_node].base_out_channels
        self.classifier = (ag.glorot_uniform(_stream(seed, 3), (width, num_classes), width, num_classes, self.dtype),
                           Tensor(np.zeros(num_classes), requires_grad=True, dtype=self.dtype))
        self.bn: dict[tuple[int, int], BatchNormState] = {}
        for i in graph.conv_nodes:
            base = graph.nodes[i].base_out_channels
            for k, r in enumerate(self.ratio_grid):
                self.bn[(i, k)] = BatchNormState(channel_count(base, r), width_key=k, dtype=self.dtype)
        self.epochs_completed = 0
        self.loss_history: list[float] = []
        self.calibrated_for: tuple | None = None

    # -- parameters -----------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [(f"aggregator.{k}", t) for k, t in self.aggregator.named_parameters()]
        named += [(f"hypernet.{k}", t) for k, t in self.hypernet.named_parameters()]
        named += [("classifier.w", self.classifier[0]), ("classifier.b", self.classifier[1])]
        for (i, k), state in sorted(self.bn.items()):
            named += [(f"bn.{i}.{k}.scale", state.scale), (f"bn.{i}.{k}.shift", state.shift)]
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def bucket(self, ratio: float) -> int:
        k = int(np.argmin(np.abs(self.ratio_grid - ratio)))
        if abs(self.ratio_grid[k] - ratio) > 1e-9:
            raise ValueError(f"ratio {ratio} is not on the ratio grid {self.ratio_grid.tolist()}")
        return k

    def bn_states(self, ratios: RatioAssignment) -> dict[int, BatchNormState]:
        return {i: self.bn[(i, self.bucket(ratios[i]))] for i in self.graph.conv_nodes}

    def active_parameters(self, ratios: RatioAssignment) -> list[Tensor]:
        params = self.aggregator.parameters() + self.hypernet.parameters() + list(self.classifier)
        for state in self.bn_states(ratios).values():
            params += state.parameters()
        return params

    # -- forward ----------------------------------------------------------
    def features(self, ratios: RatioAssignment) -> np.ndarray:
        return node_features(self.graph, ratios) / self.scales

    def embeddings(self, ratios: RatioAssignment) -> Tensor:
        return self.aggregator(self.a_hat, self.features(ratios))

    def generate(self, ratios: RatioAssignment) -> dict[int, Tensor]:
        return generate_all(self.graph, self.embeddings(ratios), ratios, self.hypernet)

    def forward(self, x, ratios: RatioAssignment, mode: str = "train",
                weights: dict[int, Tensor] | None = None, capture: dict | None = None) -> Tensor:
        if weights is None:
            weights = self.generate(ratios)
        if not isinstance(x, Tensor):
            x = Tensor(to_float(x, self.dtype) if x.dtype == np.uint8 else x, dtype=self.dtype)
        return network_forward(self.graph, x, weights, self.bn_states(ratios), self.classifier, mode, capture)

    def sample_ratios(self, rng: np.random.Generator) -> RatioAssignment:
        return sample_ratios(rng, self.graph, self.ratio_grid)


class PlainNetwork:
    """Directly parameterized CNN (no hypernetwork) for training from scratch."""

    def __init__(self, graph: ModelGraph, num_classes: int, config: TrainConfig, dtype=None):
        check_supported(graph)
        self.graph = graph
        self.num_classes = int(num_classes)
        self.config = config
        self.dtype = dtype or ag.get_default_dtype()
        rng = _stream(config.seed, 4)
        self.weights: dict[int, Tensor] = {}
        for i in graph.conv_nodes:
            shape = graph.nodes[i].weight_shape()
            self.weights[i] = he_normal(rng, shape, int(np.prod(shape[1:])), self.dtype)
        self.bn = {i: BatchNormState(graph.nodes[i].base_out_channels, dtype=self.dtype) for i in graph.conv_nodes}
        width = graph.nodes[graph.output_node].base_out_channels
        self.classifier = (ag.glorot_uniform(_stream(config.seed, 3), (width, num_classes), width, num_classes, self.dtype),
                           Tensor(np.zeros(num_classes), requires_grad=True, dtype=self.dtype))
        self.epochs_completed = 0
        self.loss_history: list[float] = []
        self.calibrated_for: tuple | None = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [(f"conv.{i}", w) for i, w in sorted(self.weights.items())]
        named += [("classifier.w", self.classifier[0]), ("classifier.b", self.classifier[1])]
        for i, state in sorted(self.bn.items()):
            named += [(f"bn.{i}.scale", state.scale), (f"bn.{i}.shift", state.shift)]
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def active_parameters(self, ratios=None) -> list[Tensor]:
        return self.parameters()

    def bn_states(self, ratios=None) -> dict[int, BatchNormState]:
        return self.bn

    def sample_ratios(self, rng) -> None:
        return None

    def forward(self, x, ratios=None, mode: str = "train", weights=None, capture: dict | None = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(to_float(x, self.dtype) if x.dtype == np.uint8 else x, dtype=self.dtype)
        return network_forward(self.graph, x, self.weights, self.bn, self.classifier, mode, capture)


# ----------------------------------------------------------------------------
# ratio sampling


def sample_ratios(rng: np.random.Generator, g: ModelGraph, ratio_grid) -> RatioAssignment:
    """Draw every free ratio uniformly from the grid, then apply the sharing rules."""
    grid = np.asarray(ratio_grid, dtype=np.float64)
    draws = grid[rng.integers(0, len(grid), size=len(g.prunable))]
    return apply_ratio_sharing(g, draws)


# ----------------------------------------------------------------------------
# training


def train_step(model, images: np.ndarray, labels: np.ndarray, ratios, optimizer: ag.SGD) -> float:
    """One forward/backward/update on a batch; returns the loss."""
    optimizer.zero_grad()
    logits = model.forward(images, ratios, mode="train")
    loss = ag.softmax_cross_entropy(logits, labels)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} at ratios {ratios}")
    ag.backward(loss)
    optimizer.step(model.active_parameters(ratios))
    return value


def make_optimizer(model, config: TrainConfig) -> ag.SGD:
    return ag.SGD(model.parameters(), config.init_lr, config.momentum, config.weight_decay)


def train(model, train_set: Dataset, config: TrainConfig, epochs: int | None = None,
          optimizer: ag.SGD | None = None) -> list[float]:
    """Run ``epochs`` more epochs (default ``config.epochs``); returns per-epoch mean losses.

    Epoch numbering continues from ``model.epochs_completed``; every epoch's
    shuffling, augmentation and ratio draws come from a stream keyed by
    (seed, epoch), so a resumed run draws the same samples.
    """
    if train_set is None or len(train_set) == 0:
        raise DataError("training split is empty")
    if len(train_set) < config.batch_size:
        raise DataError(f"training split ({len(train_set)}) smaller than one batch ({config.batch_size})")
    epochs = config.epochs if epochs is None else epochs
    optimizer = optimizer or make_optimizer(model, config)
    steps_per_epoch = len(train_set) // config.batch_size
    total_epochs = model.epochs_completed + epochs
    total_steps = total_epochs * steps_per_epoch
    history = []
    for epoch in range(model.epochs_completed, total_epochs):
        rng = _stream(config.seed, 100, epoch)
        losses = []
        for step, (images, labels) in enumerate(iterate_batches(train_set, config.batch_size, rng, drop_last=True)):
            optimizer.lr = learning_rate(config, epoch * steps_per_epoch + step, total_steps)
            images = augment(images, rng, config.crop, config.flip)
            ratios = model.sample_ratios(rng)
            losses.append(train_step(model, images, labels, ratios, optimizer))
        mean_loss = float(np.mean(losses))
        history.append(mean_loss)
        model.loss_history.append(mean_loss)
        model.epochs_completed = epoch + 1
        model.calibrated_for = None
        logger.info("epoch %d mean loss %.4f", epoch + 1, mean_loss)
    return history


# ----------------------------------------------------------------------------
# recalibration and evaluation


def _ratio_key(ratios) -> tuple | None:
    return ("plain",) if ratios is None else tuple(np.asarray(ratios.values).round(12).tolist())


def recalibrate_bn(model, ratios, recal_set: Dataset, batch_size: int = 128) -> dict[int, BatchNormState]:
    """Recompute the moving statistics of the batch norms active under ``ratios``."""
    if recal_set is None or len(recal_set) == 0:
        raise DataError("recalibration split is empty")
    states = model.bn_states(ratios)
    for state in states.values():
        state.reset_statistics()
    with ag.no_grad():
        weights = model.generate(ratios) if ratios is not None else None
        for images, _ in iterate_batches(recal_set, batch_size):
            model.forward(images, ratios, mode="recalibrate", weights=weights)
    model.calibrated_for = _ratio_key(ratios)
    return states


def predict_logits(model, ratios, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    if model.calibrated_for != _ratio_key(ratios):
        raise RuntimeError("configuration is not recalibrated; call recalibrate_bn first")
    out = []
    with ag.no_grad():
        weights = model.generate(ratios) if ratios is not None else None
        for start in range(0, len(images), batch_size):
            out.append(model.forward(images[start:start + batch_size], ratios, mode="eval", weights=weights).data)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def evaluate(model, ratios, eval_set: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy of the recalibrated configuration on ``eval_set``."""
    if eval_set is None or len(eval_set) == 0:
        raise DataError("evaluation split is empty")
    logits = predict_logits(model, ratios, eval_set.images, batch_size)
    return float(np.mean(logits.argmax(axis=1) == eval_set.labels))


def evaluate_config(model, ratios, recal_set: Dataset, eval_set: Dataset, flops: int = 0) -> PrunedConfigEval:
    recalibrate_bn(model, ratios, recal_set)
    return PrunedConfigEval(ratios, flops, evaluate(model, ratios, eval_set), recalibrated=True)


def retrain(graph: ModelGraph, ratios: RatioAssignment | None, train_set: Dataset, config: TrainConfig,
            dtype=None) -> PlainNetwork:
    """Build the pruned network for ``ratios`` and train it from scratch."""
    target = graph if ratios is None else pruned_graph(graph, ratios)
    net = PlainNetwork(target, train_set.num_classes, config, dtype)
    train(net, train_set, config)
    return net
