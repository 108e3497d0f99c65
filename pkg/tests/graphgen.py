"""Random valid model descriptions: conv chains with depthwise layers and residual adds."""

import numpy as np

from graphprune.graph import parse_model_description


def random_description(rng, max_nodes=30, spatial=8):
    widths = [4, 8, 12, 16]
    lines, edges = [], []
    c = int(rng.choice(widths))
    lines.append(f"0 conv 3 {c} 1 3 {spatial}")
    last = 0
    while len(lines) < max_nodes:
        room = max_nodes - len(lines)
        kind = rng.integers(3)
        i = len(lines)
        if kind == 0 or room < 3:
            c2 = int(rng.choice(widths))
            k = int(rng.choice([1, 3]))
            lines.append(f"{i} conv {c} {c2} 1 {k} {spatial}")
            edges.append((last, i))
            last, c = i, c2
        elif kind == 1:
            lines.append(f"{i} dwconv {c} {c} 1 3 {spatial}")
            edges.append((last, i))
            last = i
        else:
            lines.append(f"{i} conv {c} {c} 1 3 {spatial}")
            lines.append(f"{i + 1} conv {c} {c} 1 1 {spatial}")
            lines.append(f"{i + 2} add {c} {c} 0 1 {spatial}")
            edges += [(last, i), (i, i + 1), (last, i + 2), (i + 1, i + 2)]
            last = i + 2
        if room <= 3 or rng.random() < 0.08:
            break
    text = "\n".join(lines) + "\nedges:\n" + "\n".join(f"{a} {b}" for a, b in edges) + "\n"
    return text


def random_graph(seed, max_nodes=30):
    return parse_model_description(random_description(np.random.default_rng(seed), max_nodes))
