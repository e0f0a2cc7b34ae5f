"""Model checkpoints: a versioned header, a JSON description, then the arrays.

Layout::

    b"BNSCK"  magic
    <H        format version
    <I        length of the UTF-8 JSON block
    JSON      plan genotype, placed cells, towers, gate liveness, extra metadata
    .npz      parameters, momentum buffers and BN running statistics by name
"""
import io
import json
import struct

import numpy as np

from .network import Cell, Connection, Edge, Hypernetwork
from .ops import BatchNorm, Module
from .space import genotype_from_dict, genotype_to_dict

MAGIC = b"BNSCK"
VERSION = 1


def _batchnorms(obj, seen=None):
    seen = set() if seen is None else seen
    if id(obj) in seen:
        return
    seen.add(id(obj))
    if isinstance(obj, BatchNorm):
        yield obj
        return
    if isinstance(obj, (list, tuple)):
        children = obj
    elif isinstance(obj, dict):
        children = obj.values()
    elif isinstance(obj, (Module, Cell, Connection, Edge)):
        children = vars(obj).values()
    else:
        return
    for child in children:
        yield from _batchnorms(child, seen)


def model_arrays(model):
    """Every array needed to restore ``model``'s numerical state, by name."""
    arrays = {}
    for p in model.params() + [g.weight for c in model.cells for g in c.gates]:
        if p.name in arrays and arrays[p.name] is not p.data:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        arrays[p.name] = p.data
        if p.velocity is not None:
            arrays[p.name + "@velocity"] = p.velocity
    parts = [model.stem, model.cells, [t.head for t in model.towers]]
    for bn in _batchnorms(parts):
        arrays[bn.name + "@mean"] = bn.running_mean
        arrays[bn.name + "@var"] = bn.running_var
    return arrays


def save_checkpoint(model, path, meta=None):
    doc = {
        "plan": genotype_to_dict(model.plan),
        "batch_size": model.layout.batch_size,
        "M": model.M,
        "gate_init": model.gate_init,
        "trainable_gates": model.trainable_gates,
        "placed": len(model.cells),
        "towers": [{"position": t.position, "kind": t.kind, "weight": t.weight} for t in model.towers],
        "dead": [[c.index, i] for c in model.cells for i, g in enumerate(c.gates) if not g.alive],
        "meta": meta or {},
    }
    blob = io.BytesIO()
    np.savez(blob, **model_arrays(model))
    head = json.dumps(doc, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(head)) + head)
        fh.write(blob.getvalue())


def load_checkpoint(path):
    """Returns (model, meta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:5] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<HI", raw, 5)
    if version != VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {VERSION}")
    doc = json.loads(raw[11:11 + n].decode())
    arrays = np.load(io.BytesIO(raw[11 + n:]))
    model = Hypernetwork(genotype_from_dict(doc["plan"]), doc["batch_size"], np.random.default_rng(0),
                         doc["M"], doc["gate_init"], doc["trainable_gates"])
    model.place_cells(range(doc["placed"]))
    for t in doc["towers"]:
        model.add_tower(t["kind"], t["weight"], t["position"])
    for cell_index, i in doc["dead"]:
        cell = model.cells[cell_index]
        conn = cell.connections[i]
        conn.remove()
        cell.live_bytes -= conn.gate.size_bytes
    target = model_arrays(model)
    missing = sorted(set(target) - set(arrays.files) - {k for k in target if k.endswith("@velocity")})
    if missing:
        raise ValueError(f"{path}: checkpoint lacks arrays {missing[:3]}")
    for p in model.params() + [g.weight for c in model.cells for g in c.gates]:
        p.data[...] = arrays[p.name]
        if p.name + "@velocity" in arrays.files:
            p.velocity = arrays[p.name + "@velocity"].copy()
    for bn in _batchnorms([model.stem, model.cells, [t.head for t in model.towers]]):
        bn.running_mean[...] = arrays[bn.name + "@mean"]
        bn.running_var[...] = arrays[bn.name + "@var"]
    return model, doc["meta"]
