"""Checkpoint serialization.

Each ``.tensors`` file is a single binary file of named tensors:

    magic "GRTENS1\\n" | u32 count | per tensor:
        u32 name length | name (utf-8) | u32 rows | u32 cols | rows*cols f64

All integers and floats little-endian. A checkpoint is a directory holding
``manifest.txt`` (config + expected shapes), ``model.tensors`` (backbone,
routing scores, task heads), and one ``adapter.<layer>.<id>.tensors`` file per
adapter, so single adapters can be added or removed as files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .adapters import AdapterBank, AdapterParams
from .backbone import Backbone, GcnLayer
from .errors import IntegrityError, ParseError
from .manifest import read_kv, require_keys, write_kv
from .model import ComposedGcn
from .routing import RelationMatrix, RoutingConfig
from .tensor import Tensor

MAGIC = b"GRTENS1\n"
MANIFEST_NAME = "manifest.txt"
MODEL_FILE = "model.tensors"


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        if data.ndim != 2:
            raise IntegrityError(f"tensor {name!r} is not 2-D")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", data.shape[0], data.shape[1]))
        parts.append(data.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ParseError(f"{path}: bad magic, not a tensors file")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ParseError(f"{path}: truncated tensors file")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        arr = np.frombuffer(take(rows * cols * 8), dtype="<f8").reshape(rows, cols).copy()
        if name in out:
            raise ParseError(f"{path}: duplicate tensor {name!r}")
        out[name] = arr
    if pos != len(blob):
        raise ParseError(f"{path}: trailing bytes after last tensor")
    return out


def _adapter_file(layer: int, adapter_id: int) -> str:
    return f"adapter.{layer}.{adapter_id}.tensors"


def save_checkpoint(model: ComposedGcn, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    core: dict[str, np.ndarray] = {}
    for name, t in model.backbone.parameters():
        core[name] = t.data
    core["routing.relation"] = model.relation.scores.data
    for t, (w, b) in enumerate(model.heads):
        core[f"head.{t}.w"] = w.data
        core[f"head.{t}.b"] = b.data
    write_tensors(directory / MODEL_FILE, core)

    entries = dict(model.config_dict())
    entries["format_version"] = "1"
    for name, arr in core.items():
        entries[f"shape.{name}"] = f"{arr.shape[0]},{arr.shape[1]}"
    for layer in model.bank.layers:
        for p in model.bank.adapters[layer]:
            fname = _adapter_file(layer, p.adapter_id)
            write_tensors(
                directory / fname,
                {
                    f"adapter.{layer}.{p.adapter_id}.u": p.u.data,
                    f"adapter.{layer}.{p.adapter_id}.v": p.v.data,
                },
            )
            entries[f"shape.adapter.{layer}.{p.adapter_id}.u"] = f"{p.u.rows},{p.u.cols}"
            entries[f"shape.adapter.{layer}.{p.adapter_id}.v"] = f"{p.v.rows},{p.v.cols}"
    write_kv(directory / MANIFEST_NAME, entries)
    return directory


def _expect_shape(name: str, arr: np.ndarray, entries: dict[str, str], where: str) -> None:
    want = entries.get(f"shape.{name}")
    if want is None:
        raise IntegrityError(f"{where}: tensor {name!r} not listed in manifest")
    got = f"{arr.shape[0]},{arr.shape[1]}"
    if got != want:
        raise IntegrityError(f"{where}: tensor {name!r} has shape {got}, manifest says {want}")


def load_checkpoint(directory) -> ComposedGcn:
    directory = Path(directory)
    if not directory.exists():
        raise FileNotFoundError(f"checkpoint directory {directory} does not exist")
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise IntegrityError(f"{directory}: no {MANIFEST_NAME}; not a checkpoint")
    entries = read_kv(manifest_path)
    require_keys(
        entries,
        [
            "d_in", "d_hidden", "depth", "num_tasks", "num_adapters", "rank",
            "insertion_layers", "inner_relu", "temperature", "threshold",
            "backbone_frozen", "format_version",
        ],
        str(manifest_path),
    )
    d_in = int(entries["d_in"])
    d_hidden = int(entries["d_hidden"])
    depth = int(entries["depth"])
    num_tasks = int(entries["num_tasks"])
    num_adapters = int(entries["num_adapters"])
    layers = tuple(int(s) for s in entries["insertion_layers"].split(",") if s != "")
    inner_relu = bool(int(entries["inner_relu"]))
    routing = RoutingConfig(float(entries["temperature"]), float(entries["threshold"]))

    model_path = directory / MODEL_FILE
    if not model_path.exists():
        raise IntegrityError(f"{MODEL_FILE} missing from checkpoint {directory}")
    core = read_tensors(model_path)

    gcn_layers = []
    for l in range(depth):
        name = f"backbone.{l}.w"
        if name not in core:
            raise IntegrityError(f"{directory}: {name} missing from {MODEL_FILE}")
        _expect_shape(name, core[name], entries, str(directory))
        act = "identity" if l == depth - 1 else "relu"
        gcn_layers.append(GcnLayer(Tensor(core[name], requires_grad=True), act))
    backbone = Backbone(gcn_layers, d_in, d_hidden)

    if "routing.relation" not in core:
        raise IntegrityError(f"{directory}: routing.relation missing from {MODEL_FILE}")
    _expect_shape("routing.relation", core["routing.relation"], entries, str(directory))
    relation = RelationMatrix(Tensor(core["routing.relation"], requires_grad=True))

    heads = []
    for t in range(num_tasks):
        wn, bn = f"head.{t}.w", f"head.{t}.b"
        if wn not in core or bn not in core:
            raise IntegrityError(f"{directory}: head tensors for task {t} missing")
        _expect_shape(wn, core[wn], entries, str(directory))
        _expect_shape(bn, core[bn], entries, str(directory))
        heads.append((Tensor(core[wn], requires_grad=True), Tensor(core[bn], requires_grad=True)))

    adapters: dict[int, list[AdapterParams]] = {}
    for layer in layers:
        row = []
        for i in range(num_adapters):
            fpath = directory / _adapter_file(layer, i)
            if not fpath.exists():
                raise IntegrityError(f"adapter.{layer}.{i} missing from checkpoint {directory}")
            blob = read_tensors(fpath)
            un, vn = f"adapter.{layer}.{i}.u", f"adapter.{layer}.{i}.v"
            if un not in blob or vn not in blob:
                raise IntegrityError(f"adapter.{layer}.{i}: file lacks tensors {un}/{vn}")
            _expect_shape(un, blob[un], entries, str(directory))
            _expect_shape(vn, blob[vn], entries, str(directory))
            row.append(AdapterParams(
                Tensor(blob[un], requires_grad=True),
                Tensor(blob[vn], requires_grad=True),
                i,
            ))
        adapters[layer] = row
    bank = AdapterBank(adapters, inner_relu=inner_relu)

    model = ComposedGcn(backbone, bank, relation, heads, routing)
    model.backbone.set_frozen(bool(int(entries["backbone_frozen"])))
    return model
