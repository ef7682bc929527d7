"""Per-utterance embedding vectors and their on-disk cache."""

from __future__ import annotations

import hashlib
import logging
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

EMBEDDING_MODALITIES = ("speech", "text", "mocap")


@dataclass(frozen=True)
class EmbeddingVector:
    utterance_id: str
    modality: str
    values: np.ndarray
    source_checkpoint: str = ""
    untrained: bool = False
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.modality not in EMBEDDING_MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        vals = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"{self.utterance_id}/{self.modality}: non-finite embedding")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


_MAGIC = b"MMSEREMB"
_SAFE = re.compile(r"[^A-Za-z0-9_.-]")


class EmbeddingCache:
    """Directory of ``magic | u32 dim | float32[dim]`` records.

    Keyed by ``(utterance_id, modality, checkpoint hash)``. Writes go
    through a temporary file and an atomic rename, so concurrent readers
    never see a partial record.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    def path_for(self, utterance_id: str, modality: str, checkpoint: str) -> Path:
        digest = hashlib.sha1(f"{utterance_id}\0{modality}\0{checkpoint}".encode()).hexdigest()[:16]
        return self.root / modality / checkpoint[:16] / f"{_SAFE.sub('_', utterance_id)}-{digest}.emb"

    def get(self, utterance_id: str, modality: str, checkpoint: str) -> EmbeddingVector | None:
        path = self.path_for(utterance_id, modality, checkpoint)
        try:
            raw = path.read_bytes()
        except (FileNotFoundError, NotADirectoryError):
            self.misses += 1
            return None
        if not raw.startswith(_MAGIC):
            raise ValueError(f"{path}: corrupt embedding record")
        (dim,) = struct.unpack_from("<I", raw, len(_MAGIC))
        values = np.frombuffer(raw, dtype="<f4", count=dim, offset=len(_MAGIC) + 4)
        self.hits += 1
        return EmbeddingVector(utterance_id, modality, values.astype(np.float32), checkpoint)

    def put(self, vector: EmbeddingVector) -> Path:
        path = self.path_for(vector.utterance_id, vector.modality, vector.source_checkpoint)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
        with open(tmp, "wb") as fh:
            fh.write(_MAGIC + struct.pack("<I", vector.dim) + vector.values.astype("<f4").tobytes())
        os.replace(tmp, path)
        return path


def extract_embeddings(
    model,
    inputs,
    utterance_ids: Sequence[str],
    modality: str,
    cache: EmbeddingCache | None = None,
) -> list[EmbeddingVector]:
    """Penultimate-layer embeddings for ``inputs`` with optional caching.

    ``inputs`` is indexable in step with ``utterance_ids``; only cache
    misses are passed through ``model.transform``. An untrained model still
    yields embeddings, flagged ``untrained``.
    """
    if len(inputs) != len(utterance_ids):
        raise ValueError("inputs and utterance_ids differ in length")
    checkpoint = model.state_hash()
    untrained = not getattr(model, "is_trained_", False)
    if untrained:
        log.warning("extracting %s embeddings from an untrained model", modality)
    out: list[EmbeddingVector | None] = [None] * len(utterance_ids)
    todo = []
    for i, uid in enumerate(utterance_ids):
        hit = cache.get(uid, modality, checkpoint) if cache is not None else None
        if hit is not None:
            out[i] = EmbeddingVector(uid, modality, hit.values, checkpoint, untrained)
        else:
            todo.append(i)
    if todo:
        batch = inputs[todo] if isinstance(inputs, np.ndarray) else [inputs[i] for i in todo]
        values = model.transform(batch).astype(np.float32)
        for i, row in zip(todo, values):
            vec = EmbeddingVector(utterance_ids[i], modality, row, checkpoint, untrained)
            out[i] = vec
            if cache is not None:
                try:
                    cache.put(vec)
                except OSError as exc:
                    log.warning("could not cache embedding for %s: %s", vec.utterance_id, exc)
    return out
