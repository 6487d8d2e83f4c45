"""Model checkpointing: named-tensor dump with a versioned JSON header.

Checkpoints are ``.npz`` archives holding one array per named tensor plus a
``__meta__`` byte array with the format version, model kind, hyperparameter
record and scaler statistics, so a model can be rebuilt exactly.
"""

import json
from dataclasses import asdict

import numpy as np

from .baselines import BaselineModel, BaselineSpec, build_baseline
from .dann import DannHyperParams, DannModel, build_model
from .data import Scaler

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _named_tensors(model) -> dict:
    out = {}
    if isinstance(model, DannModel):
        for k, p in enumerate(model.feature_lstm.layers):
            for name, arr in zip(("W_f", "W_i", "W_o", "W_C", "R_f", "R_i", "R_o", "R_C",
                                  "b_f", "b_i", "b_o", "b_C"), p.arrays()):
                out[f"f.lstm{k}.{name}"] = arr
        out["f.dense.W"] = model.feature_dense.W
        out["f.dense.b"] = model.feature_dense.b
        for prefix, stack in (("y", model.regressor), ("d", model.classifier)):
            for k, p in enumerate(stack.layers):
                out[f"{prefix}.{k}.W"] = p.W
                out[f"{prefix}.{k}.b"] = p.b
    elif isinstance(model, BaselineModel):
        for k, p in enumerate(model.lstm.layers):
            for name, arr in zip(("W_f", "W_i", "W_o", "W_C", "R_f", "R_i", "R_o", "R_C",
                                  "b_f", "b_i", "b_o", "b_C"), p.arrays()):
                out[f"lstm{k}.{name}"] = arr
        for k, p in enumerate(model.dense.layers):
            out[f"dense.{k}.W"] = p.W
            out[f"dense.{k}.b"] = p.b
    else:
        raise CheckpointError(f"cannot checkpoint {type(model).__name__}")
    return out


def _scaler_meta(scaler):
    if scaler is None:
        return None
    return {
        "kind": scaler.kind,
        "center": scaler.center.tolist(),
        "spread": scaler.spread.tolist(),
        "label_max": scaler.label_max,
    }


def _scaler_from_meta(meta):
    if meta is None:
        return None
    return Scaler(meta["kind"], np.array(meta["center"]), np.array(meta["spread"]),
                  meta["label_max"])


def save_checkpoint(path, model, seed: int | None = None):
    if isinstance(model, DannModel):
        kind, hp = "dann", asdict(model.hp)
    elif isinstance(model, BaselineModel):
        kind, hp = "baseline", asdict(model.spec)
    else:
        raise CheckpointError(f"cannot checkpoint {type(model).__name__}")
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "q": model.q,
        "seed": seed,
        "hyperparams": hp,
        "scaler": _scaler_meta(model.label_scaler),
    }
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, __meta__=blob, **_named_tensors(model))


def load_checkpoint(path):
    with np.load(path) as archive:
        if "__meta__" not in archive:
            raise CheckpointError("not a model checkpoint: missing header")
        meta = json.loads(bytes(archive["__meta__"]).decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
        if meta["kind"] == "dann":
            model = build_model(DannHyperParams(**meta["hyperparams"]), meta["q"])
        elif meta["kind"] == "baseline":
            model = build_baseline(BaselineSpec(**meta["hyperparams"]), meta["q"])
        else:
            raise CheckpointError(f"unknown model kind {meta['kind']!r}")
        model.label_scaler = _scaler_from_meta(meta["scaler"])
        tensors = _named_tensors(model)
        stored = set(archive.files) - {"__meta__"}
        if stored != set(tensors):
            raise CheckpointError("checkpoint/architecture mismatch: tensor names differ")
        for name, arr in tensors.items():
            value = archive[name]
            if value.shape != arr.shape:
                raise CheckpointError(f"checkpoint/architecture mismatch on {name}")
            arr[...] = value
    return model
