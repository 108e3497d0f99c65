"""Pearson correlation between the filter activations of two layers.

Activation stacks are ``h x w x m`` arrays (probe images are stacked along the
first axis).  Two measures are offered:

``literal``
    sum over spatial positions of ``|F1[s,t,i] * F2[s,t,j] / (sd(F1_i) sd(F2_j))|``,
    evaluated literally: no mean-centering, values are unbounded.
``standard``
    textbook Pearson correlation of the flattened spatial vectors, in [-1, 1].

Channels with zero spatial variance have no defined correlation; their rows or
columns are NaN and they are listed in ``skipped``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag

MODES = ("literal", "standard")


@dataclass
class ActivationStack:
    layer: int
    maps: np.ndarray  # h x w x m
    source: str = ""

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 3 or self.maps.shape[2] < 1:
            raise ValueError(f"activation stack must be h x w x m with m >= 1, got {self.maps.shape}")
        if not np.all(np.isfinite(self.maps)):
            raise ValueError(f"layer {self.layer}: non-finite activations")

    @property
    def channels(self) -> int:
        return self.maps.shape[2]


@dataclass
class CorrelationReport:
    matrix: np.ndarray
    threshold: float
    pairs: list[tuple[int, int, float]]
    skipped: list[tuple[str, int]] = field(default_factory=list)  # ("row" | "col", channel)
    mode: str = "standard"
    layers: tuple[int, int] = (-1, -1)

    def summary(self) -> dict:
        return {
            "layers": list(self.layers),
            "mode": self.mode,
            "threshold": self.threshold,
            "shape": list(self.matrix.shape),
            "num_pairs": len(self.pairs),
            "skipped_rows": [c for side, c in self.skipped if side == "row"],
            "skipped_cols": [c for side, c in self.skipped if side == "col"],
        }


def _flat(F) -> np.ndarray:
    F = F.maps if isinstance(F, ActivationStack) else np.asarray(F, dtype=np.float64)
    if F.ndim != 3:
        raise ValueError(f"expected an h x w x m stack, got shape {F.shape}")
    return F.reshape(-1, F.shape[2])


def _centered_corr(za: np.ndarray, zb: np.ndarray) -> np.ndarray:
    # Cross sums and norms accumulate position by position in the same order,
    # so a channel against itself (or its negation) gives exactly +1 (or -1).
    cross = np.zeros((za.shape[1], zb.shape[1]))
    na, nb = np.zeros(za.shape[1]), np.zeros(zb.shape[1])
    for u, v in zip(za, zb):
        cross += np.outer(u, v)
        na += u * u
        nb += v * v
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.clip(cross / np.sqrt(np.outer(na, nb)), -1.0, 1.0)


def pearson_matrix(F1, F2, mode: str = "standard") -> tuple[np.ndarray, list[tuple[str, int]]]:
    """Return ``(P, skipped)`` with ``P`` of shape m x n."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    a, b = _flat(F1), _flat(F2)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"spatial sizes differ: {a.shape[0]} vs {b.shape[0]} positions")
    sd_a, sd_b = a.std(axis=0), b.std(axis=0)
    dead_a, dead_b = sd_a == 0, sd_b == 0
    sa = np.where(dead_a, 1.0, sd_a)
    sb = np.where(dead_b, 1.0, sd_b)
    if mode == "literal":
        P = np.abs(a / sa).T @ np.abs(b / sb)
    else:
        P = _centered_corr(a - a.mean(axis=0), b - b.mean(axis=0))
    P[dead_a, :] = np.nan
    P[:, dead_b] = np.nan
    skipped = [("row", int(i)) for i in np.flatnonzero(dead_a)] + [("col", int(j)) for j in np.flatnonzero(dead_b)]
    return P, skipped


def high_corr_pairs(P: np.ndarray, tau: float = 0.8) -> list[tuple[int, int, float]]:
    """Entries with ``|value| > tau`` (strict), largest magnitude first; NaN entries never qualify."""
    P = np.asarray(P, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        rows, cols = np.nonzero(np.abs(P) > tau)
    pairs = [(int(i), int(j), float(P[i, j])) for i, j in zip(rows, cols)]
    pairs.sort(key=lambda p: (-abs(p[2]), p[0], p[1]))
    return pairs


def correlation_report(F1: ActivationStack, F2: ActivationStack, mode: str = "standard",
                       tau: float = 0.8) -> CorrelationReport:
    P, skipped = pearson_matrix(F1, F2, mode)
    return CorrelationReport(P, tau, high_corr_pairs(P, tau), skipped, mode, (F1.layer, F2.layer))


def capture_activations(model, ratios, layers, images: np.ndarray, source: str = "") -> dict[int, ActivationStack]:
    """Raw conv outputs (before batch norm) of ``layers`` on a probe batch, in eval mode."""
    g = model.graph
    for i in layers:
        if not 0 <= i < g.num_nodes or not g.nodes[i].is_conv:
            raise ValueError(f"layer {i} is not a convolution node of the graph")
    capture = {int(i): None for i in layers}
    with ag.no_grad():
        model.forward(images, ratios, mode="eval", capture=capture)
    stacks = {}
    for i, out in capture.items():
        n, m, h, w = out.shape
        maps = np.asarray(out, dtype=np.float64).transpose(0, 2, 3, 1).reshape(n * h, w, m)
        stacks[i] = ActivationStack(i, maps, source)
    return stacks
