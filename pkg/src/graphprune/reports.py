"""Text file formats: ratio files and the CSV reports.

Every CSV has a header row and a fixed column order.  Floats are written with
``repr`` so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .graph import OP_NAMES, ModelGraph, RatioAssignment, RatioSharingError, apply_ratio_sharing, layer_costs, node_channels


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_matrix(path, matrix: np.ndarray, prefix: str = "c") -> None:
    """Dense matrix as CSV with a ``row`` column; NaN written as ``nan``."""
    matrix = np.asarray(matrix, dtype=np.float64)
    header = ["row"] + [f"{prefix}{j}" for j in range(matrix.shape[1])]
    write_csv(path, header, ([i] + list(r) for i, r in enumerate(matrix)))


# ----------------------------------------------------------------------------
# ratio files


def write_ratio_file(path, g: ModelGraph, ratios: RatioAssignment) -> None:
    Path(path).write_text("".join(f"{i} {ratios[i]!r}\n" for i in range(g.num_nodes)))


def read_ratio_file(path, g: ModelGraph) -> RatioAssignment:
    """Parse ``node_id ratio`` lines; every node must appear exactly once."""
    values: dict[int, float] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            node, value = int(parts[0]), float(parts[1])
            if len(parts) != 2:
                raise ValueError
        except (ValueError, IndexError):
            raise ValueError(f"{path} line {lineno}: expected 'node_id ratio', got {line!r}") from None
        if not 0 <= node < g.num_nodes:
            raise ValueError(f"{path} line {lineno}: node {node} not in the graph")
        if node in values:
            raise ValueError(f"{path} line {lineno}: node {node} listed twice")
        values[node] = value
    missing = [i for i in range(g.num_nodes) if i not in values]
    if missing:
        raise ValueError(f"{path}: no ratio for nodes {missing}")
    ratios = apply_ratio_sharing(g, values)
    bad = [i for i in range(g.num_nodes) if abs(ratios[i] - values[i]) > 1e-12]
    if bad:
        raise RatioSharingError(f"{path}: ratios of nodes {bad} disagree with their ratio group")
    return ratios


# ----------------------------------------------------------------------------
# reports


def cost_rows(g: ModelGraph, ratios: RatioAssignment) -> list[list]:
    rows = []
    for i, ((c_in, c_out), (macs, params)) in enumerate(zip(node_channels(g, ratios), layer_costs(g, ratios))):
        rows.append([i, OP_NAMES[g.nodes[i].op_type], ratios[i], c_in, c_out, macs, params])
    return rows


COST_HEADER = ["node", "op", "ratio", "in_channels", "out_channels", "macs", "params"]


def search_log_rows(g: ModelGraph, log: list[dict]) -> tuple[list[str], list[list]]:
    header = ["episode", "reward", "flops", "noise"] + [f"r_{i}" for i in g.prunable]
    rows = [[e["episode"], e["reward"], e["flops"], e["noise"], *e["ratios"]] for e in log]
    return header, rows


def channel_series(g: ModelGraph, named_ratios: list[tuple[str, RatioAssignment]]) -> tuple[list[str], list[list]]:
    """Output channels of every convolution under each configuration."""
    header = ["config", "node", "op", "base_out_channels", "out_channels"]
    rows = []
    for label, ratios in named_ratios:
        channels = node_channels(g, ratios)
        for i in g.conv_nodes:
            rows.append([label, i, OP_NAMES[g.nodes[i].op_type], g.nodes[i].base_out_channels, channels[i][1]])
    return header, rows
