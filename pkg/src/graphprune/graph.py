"""Topology graphs of CNNs: parsing, adjacency, ratio sharing, node features, FLOPs.

A model description is line oriented::

    # id type in_ch out_ch stride kernel spatial_in
    0 conv   3  8 1 3 8
    1 dwconv 8  8 1 3 8
    2 conv   8 16 1 1 8
    edges:
    0 1
    1 2

Edges are written ``producer consumer`` with ``producer < consumer``; the
graph built from them is undirected, but the written direction gives the
data flow used for channel wiring and for the forward pass.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

NORMAL_CONV, DEPTHWISE_CONV, ADD, CONCAT = 0, 1, 2, 3
OP_NAMES = {NORMAL_CONV: "conv", DEPTHWISE_CONV: "dwconv", ADD: "add", CONCAT: "concat"}
_OP_ALIASES = {
    "conv": NORMAL_CONV, "normal_conv": NORMAL_CONV, "0": NORMAL_CONV,
    "dwconv": DEPTHWISE_CONV, "depthwise_conv": DEPTHWISE_CONV, "1": DEPTHWISE_CONV,
    "add": ADD, "2": ADD,
    "concat": CONCAT, "3": CONCAT,
}
FEATURE_NAMES = ("type", "in_channels", "out_channels", "stride", "kernel", "weight_size", "ratio")


class ParseError(ValueError):
    """Malformed model description; ``line`` is 1-based (0 when not line-specific)."""

    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class RatioSharingError(ValueError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    op_type: int
    base_in_channels: int
    base_out_channels: int
    stride: int = 0
    kernel: int = 1
    spatial_in: int | None = None
    ratio_group: int = -1

    @property
    def is_conv(self) -> bool:
        return self.op_type in (NORMAL_CONV, DEPTHWISE_CONV)

    @property
    def spatial_out(self) -> int | None:
        if self.spatial_in is None:
            return None
        if not self.is_conv:
            return self.spatial_in
        pad = self.kernel // 2
        return (self.spatial_in + 2 * pad - self.kernel) // self.stride + 1

    def weight_shape(self, out_channels: int | None = None, in_channels: int | None = None) -> tuple:
        out_c = self.base_out_channels if out_channels is None else out_channels
        in_c = self.base_in_channels if in_channels is None else in_channels
        if self.op_type == NORMAL_CONV:
            return (out_c, in_c, self.kernel, self.kernel)
        if self.op_type == DEPTHWISE_CONV:
            return (out_c, 1, self.kernel, self.kernel)
        return ()


@dataclass
class ModelGraph:
    """Nodes (convolutions and merges) plus directed producer->consumer edges."""

    nodes: list[NodeSpec]
    edges: list[tuple[int, int]]
    name: str = field(default="", compare=False)
    preds: list[list[int]] = field(init=False, repr=False, compare=False)
    succs: list[list[int]] = field(init=False, repr=False, compare=False)
    prunable: list[int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.nodes)
        self.edges = sorted((int(a), int(b)) for a, b in self.edges)
        self.preds = [[] for _ in range(n)]
        self.succs = [[] for _ in range(n)]
        for a, b in self.edges:
            self.succs[a].append(b)
            self.preds[b].append(a)
        groups = _ratio_groups(self)
        self.nodes = [replace(node, ratio_group=groups[i]) for i, node in enumerate(self.nodes)]
        self.prunable = sorted({g for g in groups if g >= 0})

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def conv_nodes(self) -> list[int]:
        return [i for i, node in enumerate(self.nodes) if node.is_conv]

    @property
    def output_node(self) -> int:
        sinks = [i for i in range(self.num_nodes) if not self.succs[i]]
        return sinks[-1]

    def producer(self, i: int) -> int | None:
        """Node feeding a single-input operation, ``None`` for the network input."""
        return self.preds[i][0] if self.preds[i] else None

    def group_members(self, leader: int) -> list[int]:
        return [i for i, node in enumerate(self.nodes) if node.ratio_group == leader]


def _ratio_groups(g: ModelGraph) -> list[int]:
    """Leader index of each node's ratio group (-1 for nodes without one).

    Depthwise convolutions join their producer; every input of an add joins
    the add, which chains shortcut-connected layers (and projection
    convolutions) into one group.  The leader is the lowest-index normal
    convolution in the group.
    """
    n = len(g.nodes)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for i, node in enumerate(g.nodes):
        if node.op_type == DEPTHWISE_CONV and g.preds[i]:
            union(i, g.preds[i][0])
        elif node.op_type == ADD:
            for p in g.preds[i]:
                union(i, p)

    members: dict[int, list[int]] = {}
    for i in range(n):
        members.setdefault(find(i), []).append(i)
    groups = [-1] * n
    for root, idx in members.items():
        convs = [i for i in idx if g.nodes[i].op_type == NORMAL_CONV]
        if not convs:
            if any(g.nodes[i].op_type != CONCAT for i in idx):
                raise RatioSharingError(f"nodes {idx} share a ratio but contain no normal convolution")
            continue
        widths = {g.nodes[i].base_out_channels for i in idx}
        if len(widths) > 1:
            raise RatioSharingError(f"nodes {idx} share a ratio but have different widths {sorted(widths)}")
        for i in idx:
            groups[i] = min(convs)
    return groups


# ----------------------------------------------------------------------------
# parsing and emission


def parse_model_description(text: str, name: str = "") -> ModelGraph:
    nodes: list[NodeSpec] = []
    node_lines: list[int] = []
    edges: list[tuple[int, int]] = []
    edge_lines: dict[tuple[int, int], int] = {}
    in_edges = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.lower() == "edges:":
            if in_edges:
                raise ParseError("duplicate 'edges:' section", lineno)
            in_edges = True
            continue
        parts = line.split()
        if in_edges:
            if len(parts) != 2:
                raise ParseError(f"edge needs two node ids, got {line!r}", lineno)
            try:
                a, b = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"non-integer edge {line!r}", lineno) from None
            for end in (a, b):
                if not 0 <= end < len(nodes):
                    raise ParseError(f"dangling edge reference to node {end}", lineno)
            if a == b:
                raise ParseError(f"self-edge on node {a}", lineno)
            if a > b:
                raise ParseError(f"edge {a} {b} must point from producer to a later consumer", lineno)
            if (a, b) in edge_lines:
                raise ParseError(f"duplicate edge {a} {b}", lineno)
            edge_lines[(a, b)] = lineno
            edges.append((a, b))
            continue
        nodes.append(_parse_node(parts, len(nodes), lineno))
        node_lines.append(lineno)
    if not nodes:
        raise ParseError("description contains no nodes")
    _check_wiring(nodes, edges, node_lines)
    try:
        return ModelGraph(nodes, edges, name=name)
    except RatioSharingError as exc:
        raise ParseError(str(exc)) from None


def _parse_node(parts: list[str], expected_id: int, lineno: int) -> NodeSpec:
    if len(parts) not in (6, 7):
        raise ParseError("node line needs 'id type in_ch out_ch stride kernel [spatial_in]'", lineno)
    try:
        node_id = int(parts[0])
    except ValueError:
        raise ParseError(f"bad node id {parts[0]!r}", lineno) from None
    if node_id != expected_id:
        raise ParseError(f"node ids must be consecutive from 0; expected {expected_id}, got {node_id}", lineno)
    op = _OP_ALIASES.get(parts[1].lower())
    if op is None:
        raise ParseError(f"unknown op type {parts[1]!r}", lineno)
    try:
        in_c, out_c, stride, kernel = (int(p) for p in parts[2:6])
        spatial = None if len(parts) == 6 or parts[6] == "-" else int(parts[6])
    except ValueError:
        raise ParseError("channel, stride, kernel and spatial fields must be integers", lineno) from None
    if in_c < 1 or out_c < 1:
        raise ParseError("channel counts must be positive", lineno)
    if spatial is not None and spatial < 1:
        raise ParseError("spatial size must be positive", lineno)
    if op in (NORMAL_CONV, DEPTHWISE_CONV):
        if stride < 1 or kernel < 1:
            raise ParseError("convolutions need stride >= 1 and kernel >= 1", lineno)
        if kernel % 2 == 0:
            raise ParseError("kernel size must be odd", lineno)
        if op == DEPTHWISE_CONV and in_c != out_c:
            raise ParseError("depthwise convolution needs in_ch == out_ch", lineno)
    else:
        if stride != 0 or kernel != 1:
            raise ParseError(f"{OP_NAMES[op]} nodes must have stride 0 and kernel 1", lineno)
        if op == ADD and in_c != out_c:
            raise ParseError("add node needs in_ch == out_ch", lineno)
    return NodeSpec(op, in_c, out_c, stride, kernel, spatial)


def _check_wiring(nodes: list[NodeSpec], edges: list[tuple[int, int]], node_lines: list[int]) -> None:
    preds: list[list[int]] = [[] for _ in nodes]
    for a, b in edges:
        preds[b].append(a)
    for i, node in enumerate(nodes):
        lineno = node_lines[i]
        if not preds[i]:
            if i != 0:
                raise ParseError(f"node {i} has no producer; only node 0 may read the network input", lineno)
            continue
        if node.is_conv and len(preds[i]) != 1:
            raise ParseError(f"convolution {i} has {len(preds[i])} producers, expected 1", lineno)
        if not node.is_conv and len(preds[i]) < 2:
            raise ParseError(f"{OP_NAMES[node.op_type]} node {i} needs at least two inputs", lineno)
        incoming = [nodes[p].base_out_channels for p in preds[i]]
        if node.op_type == CONCAT:
            expected = sum(incoming)
            if node.base_in_channels != expected or node.base_out_channels != expected:
                raise ParseError(f"concat node {i} should carry {expected} channels", lineno)
        elif any(c != node.base_in_channels for c in incoming):
            raise ParseError(
                f"node {i} expects {node.base_in_channels} input channels but producers "
                f"{preds[i]} give {incoming}", lineno)
        for p in preds[i]:
            s_out, s_in = nodes[p].spatial_out, node.spatial_in
            if s_out is not None and s_in is not None and s_out != s_in:
                raise ParseError(f"node {i} expects spatial size {s_in} but node {p} produces {s_out}", lineno)
    sinks = [i for i in range(len(nodes)) if not any(a == i for a, _ in edges)]
    if len(sinks) != 1:
        raise ParseError(f"description must have exactly one output node, found {sinks}")


def emit_model_description(g: ModelGraph) -> str:
    lines = ["# id type in_ch out_ch stride kernel spatial_in"]
    for i, node in enumerate(g.nodes):
        spatial = "-" if node.spatial_in is None else str(node.spatial_in)
        lines.append(f"{i} {OP_NAMES[node.op_type]} {node.base_in_channels} {node.base_out_channels} "
                     f"{node.stride} {node.kernel} {spatial}")
    lines.append("edges:")
    lines.extend(f"{a} {b}" for a, b in g.edges)
    return "\n".join(lines) + "\n"


def load_model_description(path) -> ModelGraph:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_model_description(text, name=str(path))


BUNDLED = ("mobilenet_v1_like", "mobilenet_v2_like", "resnet50_like",
           "mobilenet_v1_reduced", "mobilenet_v2_reduced")


def bundled_path(name: str):
    return resources.files("graphprune.descriptions").joinpath(f"{name}.mg")


def load_bundled(name: str) -> ModelGraph:
    if name not in BUNDLED:
        raise KeyError(f"unknown bundled description {name!r}; choose from {BUNDLED}")
    return parse_model_description(bundled_path(name).read_text(encoding="utf-8"), name=name)


def description_hash(g: ModelGraph) -> str:
    return hashlib.sha256(emit_model_description(g).encode()).hexdigest()


# ----------------------------------------------------------------------------
# adjacency


def build_adjacency(g: ModelGraph) -> np.ndarray:
    a = np.zeros((g.num_nodes, g.num_nodes))
    for i, j in g.edges:
        a[i, j] = a[j, i] = 1.0
    return a


def renormalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Symmetric renormalization ``D^-1/2 (A + I) D^-1/2`` with D the degrees of A + I."""
    a_tilde = np.asarray(a, dtype=np.float64) + np.eye(len(a))
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return a_tilde * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


# ----------------------------------------------------------------------------
# ratios


class RatioAssignment:
    """Per-node compression ratios, already consistent with the sharing rules."""

    def __init__(self, values: Iterable[float]):
        self.values = np.asarray(list(values), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i: int) -> float:
        return float(self.values[i])

    def __iter__(self):
        return iter(self.values.tolist())

    def __eq__(self, other) -> bool:
        return isinstance(other, RatioAssignment) and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"RatioAssignment({np.round(self.values, 4).tolist()})"

    def free(self, g: ModelGraph) -> list[float]:
        return [float(self.values[i]) for i in g.prunable]


def apply_ratio_sharing(g: ModelGraph, raw) -> RatioAssignment:
    """Resolve raw ratios into a consistent per-node assignment.

    ``raw`` is either a sequence aligned with ``g.prunable`` or a mapping
    from node index to ratio (a :class:`RatioAssignment` counts as one).  Each
    ratio group takes the value of its leader; nodes outside every group keep
    ratio 1.0.
    """
    if isinstance(raw, RatioAssignment):
        raw = dict(enumerate(raw.values))
    if isinstance(raw, Mapping):
        try:
            leader_values = {leader: float(raw[leader]) for leader in g.prunable}
        except KeyError as exc:
            raise RatioSharingError(f"no ratio given for group leader node {exc.args[0]}") from None
    else:
        raw = list(raw)
        if len(raw) != len(g.prunable):
            raise RatioSharingError(f"expected {len(g.prunable)} free ratios, got {len(raw)}")
        leader_values = dict(zip(g.prunable, map(float, raw)))
    for leader, value in leader_values.items():
        if not 0.0 < value <= 1.0 or not np.isfinite(value):
            raise ValueError(f"ratio for node {leader} must lie in (0, 1], got {value}")
    values = np.ones(g.num_nodes)
    for i, node in enumerate(g.nodes):
        if node.ratio_group >= 0:
            if node.ratio_group not in leader_values:
                raise RatioSharingError(f"node {i} belongs to unknown group {node.ratio_group}")
            values[i] = leader_values[node.ratio_group]
    return RatioAssignment(values)


def uniform_ratios(g: ModelGraph, ratio: float) -> RatioAssignment:
    return apply_ratio_sharing(g, [ratio] * len(g.prunable))


def channel_count(base: int, ratio: float) -> int:
    """Channels kept when ``base`` channels are scaled by ``ratio`` (round half up, min 1)."""
    return max(1, int(np.floor(base * ratio + 0.5)))


def _producer_ratio(g: ModelGraph, ratios: RatioAssignment, i: int) -> float:
    p = g.producer(i)
    return 1.0 if p is None else ratios[p]


def node_channels(g: ModelGraph, ratios: RatioAssignment) -> list[tuple[int, int]]:
    """(in, out) channel counts of every node under ``ratios``."""
    out: list[tuple[int, int]] = []
    for i, node in enumerate(g.nodes):
        if node.op_type == CONCAT:
            width = sum(out[p][1] for p in g.preds[i])
            out.append((width, width))
            continue
        c_out = channel_count(node.base_out_channels, ratios[i])
        if node.is_conv:
            c_in = channel_count(node.base_in_channels, _producer_ratio(g, ratios, i))
        else:
            c_in = c_out
        out.append((c_in, c_out))
    return out


def node_features(g: ModelGraph, ratios: RatioAssignment, normalize: bool = False) -> np.ndarray:
    """The l x 7 feature matrix (type, in, out, stride, kernel, weight size, ratio)."""
    feats = np.zeros((g.num_nodes, 7))
    for i, (node, (c_in, c_out)) in enumerate(zip(g.nodes, node_channels(g, ratios))):
        k2 = node.kernel * node.kernel
        if node.op_type == NORMAL_CONV:
            wsize = c_out * c_in * k2
        elif node.op_type == DEPTHWISE_CONV:
            wsize = c_out * k2
        else:
            wsize = 0
        stride = node.stride if node.is_conv else 0
        kernel = node.kernel if node.is_conv else 1
        feats[i] = (node.op_type, c_in, c_out, stride, kernel, wsize, ratios[i])
    if normalize:
        feats = normalize_features(g, feats)
    return feats


def feature_scales(g: ModelGraph) -> np.ndarray:
    """Per-column divisors taken from the unpruned graph; type and ratio are unscaled."""
    base = node_features(g, RatioAssignment(np.ones(g.num_nodes)))
    channels = max(base[:, 1].max(), base[:, 2].max())
    scales = np.array([1.0, channels, channels, base[:, 3].max(), base[:, 4].max(), base[:, 5].max(), 1.0])
    scales[scales == 0] = 1.0
    return scales


def normalize_features(g: ModelGraph, feats: np.ndarray) -> np.ndarray:
    return feats / feature_scales(g)


# ----------------------------------------------------------------------------
# cost accounting


def _require_spatial(g: ModelGraph) -> None:
    missing = [i for i, node in enumerate(g.nodes) if node.spatial_in is None]
    if missing:
        raise ValueError(f"spatial input size missing for nodes {missing}; FLOPs need it")


def layer_costs(g: ModelGraph, ratios: RatioAssignment) -> list[tuple[int, int]]:
    """(multiply-accumulates, parameters) for every node."""
    _require_spatial(g)
    costs = []
    for node, (c_in, c_out) in zip(g.nodes, node_channels(g, ratios)):
        k2 = node.kernel * node.kernel
        area = node.spatial_out ** 2
        if node.op_type == NORMAL_CONV:
            params = c_out * c_in * k2
        elif node.op_type == DEPTHWISE_CONV:
            params = c_out * k2
        else:
            params = 0
        costs.append((params * area, params))
    return costs


def count_flops(g: ModelGraph, ratios: RatioAssignment | None = None) -> int:
    if ratios is None:
        ratios = RatioAssignment(np.ones(g.num_nodes))
    return int(sum(m for m, _ in layer_costs(g, ratios)))


def count_params(g: ModelGraph, ratios: RatioAssignment | None = None) -> int:
    if ratios is None:
        ratios = RatioAssignment(np.ones(g.num_nodes))
    _, params = zip(*layer_costs(g, ratios)) if g.nodes else ((), ())
    return int(sum(params))


def pruned_graph(g: ModelGraph, ratios: RatioAssignment) -> ModelGraph:
    """A new description whose base channels are the pruned channel counts."""
    nodes = [replace(node, base_in_channels=c_in, base_out_channels=c_out, ratio_group=-1)
             for node, (c_in, c_out) in zip(g.nodes, node_channels(g, ratios))]
    return ModelGraph(nodes, list(g.edges), name=g.name)
