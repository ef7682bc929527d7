"""Checkpoint files for trained classifiers.

A checkpoint is a safetensors container: named row-major float32 arrays plus
string metadata holding the estimator class, its parameters, what is needed
to rebuild the network, the label schema and training metadata.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch
from safetensors.numpy import load_file, save_file
from safetensors import safe_open

from . import __version__
from .base import EpochRecord, TorchClassifier
from .fusion import FusionClassifier
from .heads import SpeechEmotionClassifier, TextEmotionClassifier
from .labels import LABEL_NAMES
from .mocap_net import MoCapClassifier

FORMAT = "mmser-checkpoint/1"
_META_KEY = "mmser"

ESTIMATORS = {
    cls.__name__: cls
    for cls in (MoCapClassifier, SpeechEmotionClassifier, TextEmotionClassifier, FusionClassifier)
}


class CheckpointError(RuntimeError):
    pass


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.generic):
        return value.item()
    return value


def save_checkpoint(model: TorchClassifier, path: str | os.PathLike, extra: dict | None = None) -> Path:
    model._check_fitted()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {name: t.detach().cpu().float().contiguous().numpy() for name, t in model.net_.state_dict().items()}
    history = [[h.epoch, h.loss, h.train_accuracy] for h in getattr(model, "history_", [])]
    meta = {
        "format": FORMAT,
        "toolkit_version": __version__,
        "estimator": type(model).__name__,
        "params": _jsonable(model.get_params()),
        "build": _jsonable(model._build_spec()),
        "label_schema": list(LABEL_NAMES),
        "train_meta": {
            "epochs": model.epochs,
            "seed": model.random_state,
            "trained": bool(model.is_trained_),
            "final_loss": history[-1][1] if history else None,
            "history": history,
        },
    }
    for key, value in (extra or {}).items():
        value = _jsonable(value)
        if key in meta and meta[key] != value:
            raise ValueError(f"extra metadata may not override {key!r}")
        meta[key] = value
    # one sorted JSON entry: safetensors does not keep the order of several metadata keys
    header = {_META_KEY: json.dumps(meta, sort_keys=True)}
    tmp = path.with_name(path.name + ".tmp")
    save_file(tensors, str(tmp), metadata=header)
    os.replace(tmp, path)
    return path


def read_metadata(path: str | os.PathLike) -> dict:
    with safe_open(str(path), framework="numpy") as fh:
        raw = (fh.metadata() or {}).get(_META_KEY)
    if raw is None:
        raise CheckpointError(f"{path}: not a toolkit checkpoint")
    return json.loads(raw)


def load_checkpoint(path: str | os.PathLike) -> TorchClassifier:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    meta = read_metadata(path)
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    if meta["label_schema"] != list(LABEL_NAMES):
        raise CheckpointError(f"{path}: label schema mismatch")
    cls = ESTIMATORS[meta["estimator"]]
    params = dict(meta["params"])
    # JSON has no tuples; restore them where the estimator default is one
    for key, default in cls().get_params().items():
        if isinstance(default, tuple) and isinstance(params.get(key), list):
            params[key] = tuple(params[key])
    model = cls(**params)
    tensors = load_file(str(path))
    with torch.random.fork_rng():
        net = model._rebuild(meta["build"])
    net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    net.eval()
    train_meta = meta["train_meta"]
    model.net_ = net
    model.classes_ = np.arange(len(LABEL_NAMES))
    model.is_trained_ = train_meta["trained"]
    model.history_ = [EpochRecord(int(e), float(l), float(a)) for e, l, a in train_meta["history"]]
    return model


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_training_log(model: TorchClassifier, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_accuracy"])
        for h in model.history_:
            w.writerow([h.epoch, f"{h.loss:.8f}", f"{h.train_accuracy:.6f}"])
    return path
