"""Self-describing checkpoint container.

Layout (all integers little-endian)::

    4 bytes   magic b"GPCK"
    1 byte    format version
    4 bytes   header length H (uint32)
    H bytes   UTF-8 JSON header, sorted keys
    ...       raw array payloads, little-endian, in header order

The header binds the checkpoint to its model description by SHA-256 of the
canonical description text, carries the training metadata and lists every
array with its dtype, shape and byte offset into the payload.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .graph import ModelGraph, description_hash, emit_model_description, parse_model_description
from .trainer import GraphPruningModel, PlainNetwork, TrainConfig

MAGIC = b"GPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(model) -> list[tuple[str, np.ndarray]]:
    out = [(name, t.data) for name, t in model.named_parameters()]
    if isinstance(model, GraphPruningModel):
        items = [(f"bn.{i}.{k}", s) for (i, k), s in sorted(model.bn.items())]
    else:
        items = [(f"bn.{i}", s) for i, s in sorted(model.bn.items())]
    for prefix, state in items:
        if state.calibrated:
            out += [(f"{prefix}.mean", state.moving_mean), (f"{prefix}.var", state.moving_var)]
    return out


def _config_dict(config: TrainConfig) -> dict:
    d = dataclasses.asdict(config)
    d["ratio_grid"] = list(d["ratio_grid"])
    return d


def checkpoint_bytes(model) -> bytes:
    kind = "pruning" if isinstance(model, GraphPruningModel) else "plain"
    entries, payload, offset = [], [], 0
    for name, arr in _arrays(model):
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {
        "kind": kind,
        "description": emit_model_description(model.graph),
        "description_hash": description_hash(model.graph),
        "num_classes": model.num_classes,
        "dtype": np.dtype(model.dtype).str.lstrip("<>|="),
        "config": _config_dict(model.config),
        "epochs_completed": model.epochs_completed,
        "loss_history": [float(v) for v in model.loss_history],
        "calibrated_for": None if model.calibrated_for is None else list(model.calibrated_for),
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<BI", VERSION, len(blob)) + blob + b"".join(payload)


def save_checkpoint(model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def read_header(data: bytes) -> tuple[dict, bytes]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(data) < 9:
        raise CheckpointError("truncated checkpoint")
    version, size = struct.unpack("<BI", data[4:9])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        header = json.loads(data[9:9 + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    return header, data[9 + size:]


def load_checkpoint(path, graph: ModelGraph | None = None):
    """Rebuild the model stored at ``path``.

    When ``graph`` is given its description hash must match the stored one.
    """
    header, payload = read_header(Path(path).read_bytes())
    stored = parse_model_description(header["description"])
    if description_hash(stored) != header["description_hash"]:
        raise CheckpointError("embedded description does not match its recorded hash")
    if graph is not None and description_hash(graph) != header["description_hash"]:
        raise CheckpointError("checkpoint was trained on a different model description")
    cfg = header["config"]
    cfg["ratio_grid"] = tuple(cfg["ratio_grid"])
    config = TrainConfig(**cfg)
    dtype = np.dtype(header["dtype"])
    cls = GraphPruningModel if header["kind"] == "pruning" else PlainNetwork
    model = cls(graph or stored, header["num_classes"], config, dtype=dtype)

    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"payload truncated at array {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
    for name, t in model.named_parameters():
        if name not in arrays or arrays[name].shape != t.data.shape:
            raise CheckpointError(f"array {name} missing or mis-shaped")
        t.data[...] = arrays[name]
    for key, state in model.bn.items():
        prefix = f"bn.{key}" if cls is PlainNetwork else f"bn.{key[0]}.{key[1]}"
        if f"{prefix}.mean" in arrays:
            state.moving_mean = arrays[f"{prefix}.mean"].astype(np.float64)
            state.moving_var = arrays[f"{prefix}.var"].astype(np.float64)
    model.epochs_completed = int(header["epochs_completed"])
    model.loss_history = list(header["loss_history"])
    cal = header["calibrated_for"]
    model.calibrated_for = None if cal is None else tuple(cal)
    return model
