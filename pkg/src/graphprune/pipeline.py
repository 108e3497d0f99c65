"""Glue between a trained model and the ratio search."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .data import Dataset
from .ddpg import SearchConfig, SearchResult, search, snap_to_grid
from .graph import RatioAssignment, apply_ratio_sharing, count_flops
from .trainer import _ratio_key, evaluate_config


class ModelReward:
    """Recalibrated accuracy of a configuration, memoized per ratio assignment."""

    def __init__(self, model, recal_set: Dataset, eval_set: Dataset):
        self.model = model
        self.recal_set = recal_set
        self.eval_set = eval_set
        self.cache: dict[tuple, float] = {}

    def __call__(self, ratios: RatioAssignment) -> float:
        key = _ratio_key(ratios)
        if key not in self.cache:
            self.cache[key] = evaluate_config(self.model, ratios, self.recal_set, self.eval_set).accuracy
        return self.cache[key]


def model_state_fn(model):
    def state(ratios: RatioAssignment) -> np.ndarray:
        with ag.no_grad():
            return model.embeddings(ratios).data.astype(np.float64)
    return state


def budget_from_fraction(model, fraction: float) -> float:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"budget fraction must lie in (0, 1], got {fraction}")
    return fraction * count_flops(model.graph)


def search_model(model, recal_set: Dataset, eval_set: Dataset, config: SearchConfig) -> SearchResult:
    return search(model.graph, model_state_fn(model), ModelReward(model, recal_set, eval_set), config)


def random_feasible(g, ratio_grid, budget: float | None, n: int, seed: int) -> list[RatioAssignment]:
    """``n`` seeded configurations drawn layer by layer and clipped to the budget."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    grid = sorted(ratio_grid)
    out = []
    for _ in range(n):
        partial = [1.0] * len(g.prunable)
        for t in range(len(partial)):
            partial[t] = snap_to_grid(partial, t, float(grid[rng.integers(len(grid))]), budget, g, grid)
        out.append(apply_ratio_sharing(g, partial))
    return out
