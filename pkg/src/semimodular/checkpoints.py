"""JSON checkpoints for fitted parameter stores.

Schema: {"blocks": [{"name", "shape", "values"}], "architecture": {...},
"seed": int, "meta": {...}}.  Values are written with full float repr so a
save/load round trip is bit-stable; files are written atomically (temp file
plus rename).
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .autodiff import ParameterStore


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, store: ParameterStore, architecture: dict,
                    seed: int, meta: dict | None = None):
    blocks = [
        {"name": name, "shape": [int(v.size)], "values": [float(x) for x in v]}
        for name, v in store.items()
    ]
    doc = {"blocks": blocks, "architecture": architecture, "seed": int(seed)}
    if meta is not None:
        doc["meta"] = meta
    _atomic_write(path, json.dumps(doc, sort_keys=True))


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    store = ParameterStore({
        b["name"]: np.array(b["values"], dtype=np.float64).reshape(b["shape"])
        for b in doc["blocks"]
    })
    return {
        "store": store,
        "architecture": doc["architecture"],
        "seed": doc.get("seed", 0),
        "meta": doc.get("meta", {}),
    }
