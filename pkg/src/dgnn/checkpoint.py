"""Bit-exact model serialization.

Checkpoints are a single JSON document: a version field, the model kind,
its config, and every parameter array encoded as base64 little-endian
float64 bytes.  Scalar label statistics use ``float.hex`` so reloading a
checkpoint reproduces predictions bit for bit.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from . import baseline as bl
from . import molgraph as mg
from . import mpnn

FORMAT = "dgnn-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoint files."""


def encode_array(arr):
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "shape": list(data.shape),
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def decode_array(obj):
    raw = base64.b64decode(obj["data"])
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return flat.reshape(obj["shape"])


def _params_to_json(named):
    return {name: encode_array(t.data) for name, t in named}


def _load_params_into(named, blob):
    names = [name for name, _ in named]
    if set(names) != set(blob):
        missing = set(names) ^ set(blob)
        raise CheckpointError(f"parameter names do not match: {sorted(missing)}")
    for name, t in named:
        arr = decode_array(blob[name])
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
        t.data = arr


def save_model(model, path):
    if isinstance(model, mpnn.Model):
        doc = {
            "format": FORMAT,
            "version": VERSION,
            "kind": "mpnn",
            "config": model.config.to_json(),
            "params": _params_to_json(model.params.named_tensors()),
            "normalizer": (model.normalizer.to_json()
                           if model.normalizer else None),
            "label_mean": float.hex(float(model.label_mean)),
            "label_std": float.hex(float(model.label_std)),
        }
    elif isinstance(model, bl.MlpModel):
        doc = {
            "format": FORMAT,
            "version": VERSION,
            "kind": "mlp",
            "config": model.config.to_json(),
            "params": _params_to_json(model.params.named_tensors()),
            "label_mean": float.hex(float(model.label_mean)),
            "label_std": float.hex(float(model.label_std)),
        }
    else:
        raise CheckpointError(f"cannot checkpoint {type(model).__name__}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version "
                              f"{doc.get('version')!r}")
    kind = doc.get("kind")
    if kind == "mpnn":
        config = mpnn.ModelConfig.from_json(doc["config"])
        model = mpnn.new_model(config)
        model.normalizer = mg.Normalizer.from_json(doc.get("normalizer"))
    elif kind == "mlp":
        config = bl.MlpConfig.from_json(doc["config"])
        model = bl.new_mlp_model(config)
    else:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    _load_params_into(model.params.named_tensors(), doc["params"])
    model.label_mean = float.fromhex(doc["label_mean"])
    model.label_std = float.fromhex(doc["label_std"])
    return model
