"""Feature-level fusion: concatenated embeddings and the fused classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .base import ClassifierNet, DenseHead, TorchClassifier
from .embeddings import EMBEDDING_MODALITIES, EmbeddingVector
from .mocap import ShapeError

SHORT_NAMES = {"speech": "Sp", "text": "Tx", "mocap": "MC"}
_FROM_SHORT = {v.lower(): k for k, v in SHORT_NAMES.items()}


class MissingModalityError(KeyError):
    def __init__(self, modality: str, utterance_id: str | None = None):
        self.modality = modality
        where = f" for {utterance_id}" if utterance_id else ""
        super().__init__(f"missing modality {modality!r}{where}")

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class ModalitySubset:
    """Modalities taking part in a fusion, stored in canonical order."""

    members: tuple[str, ...]

    def __post_init__(self):
        members = tuple(self.members)
        unknown = set(members) - set(EMBEDDING_MODALITIES)
        if unknown or not members or len(set(members)) != len(members):
            raise ValueError(f"invalid modality subset {members!r}")
        object.__setattr__(self, "members", tuple(m for m in EMBEDDING_MODALITIES if m in members))

    @classmethod
    def parse(cls, spec: "str | Iterable[str] | ModalitySubset") -> "ModalitySubset":
        """Accept ``"speech+text"``, ``"Sp+Tx"`` or an iterable of names."""
        if isinstance(spec, ModalitySubset):
            return spec
        if isinstance(spec, str):
            spec = [p for p in spec.replace(",", "+").split("+") if p.strip()]
        return cls(tuple(_FROM_SHORT.get(p.strip().lower(), p.strip().lower()) for p in spec))

    @property
    def is_fusion(self) -> bool:
        return len(self.members) >= 2

    @property
    def name(self) -> str:
        return "+".join(SHORT_NAMES[m] for m in self.members)

    def __iter__(self):
        return iter(self.members)

    def __len__(self):
        return len(self.members)


FUSION_SUBSETS = tuple(
    ModalitySubset(m)
    for m in (("speech", "text"), ("speech", "mocap"), ("text", "mocap"), ("speech", "text", "mocap"))
)


@dataclass(frozen=True)
class MEFVector:
    utterance_id: str
    subset: ModalitySubset
    values: np.ndarray
    layout: Mapping[str, tuple[int, int]]

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def concat_mef(embeddings: Mapping[str, EmbeddingVector], subset) -> MEFVector:
    """Concatenate member embeddings in canonical order (speech, text, mocap)."""
    subset = ModalitySubset.parse(subset)
    parts, layout, start, uid = [], {}, 0, None
    for m in subset:
        vec = embeddings.get(m)
        if vec is None:
            raise MissingModalityError(m, uid)
        if uid is None:
            uid = vec.utterance_id
        elif vec.utterance_id != uid:
            raise ValueError(f"embeddings of different utterances: {uid!r} vs {vec.utterance_id!r}")
        parts.append(vec.values)
        layout[m] = (start, start + vec.dim)
        start += vec.dim
    return MEFVector(uid, subset, np.concatenate(parts), layout)


def mef_matrix(per_modality: Mapping[str, np.ndarray], subset) -> tuple[np.ndarray, dict]:
    """Batched :func:`concat_mef` over ``(n_samples, dim)`` arrays."""
    subset = ModalitySubset.parse(subset)
    missing = [m for m in subset if m not in per_modality]
    if missing:
        raise MissingModalityError(missing[0])
    arrays = [np.asarray(per_modality[m]) for m in subset]
    layout, start = {}, 0
    for m, a in zip(subset, arrays):
        layout[m] = (start, start + a.shape[1])
        start += a.shape[1]
    return np.concatenate(arrays, axis=1), layout


class FusionClassifier(TorchClassifier):
    """Dense classification head over concatenated embeddings.

    Only the head is trained; the unimodal models that produced the
    embeddings are never touched. ``X`` is an ``(n_samples, dim)`` array or
    a list of :class:`MEFVector` sharing one subset.
    """

    def __init__(
        self,
        subset=("speech", "text", "mocap"),
        hidden_width=256,
        zscore=False,
        optimizer="adam",
        learning_rate=1e-5,
        epochs=200,
        batch_size=32,
        random_state=0,
    ):
        self.subset = subset
        self.hidden_width = hidden_width
        self.zscore = zscore
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def _as_array(self, X) -> np.ndarray:
        if isinstance(X, MEFVector):
            X = [X]
        if isinstance(X, Sequence) and X and isinstance(X[0], MEFVector):
            expected = ModalitySubset.parse(self.subset)
            subsets = {v.subset for v in X}
            if len(subsets) != 1:
                raise ValueError(f"mixed modality subsets in fusion data: {sorted(s.name for s in subsets)}")
            if subsets != {expected}:
                raise ValueError(f"data subset {subsets.pop().name} does not match {expected.name}")
            X = np.stack([v.values for v in X])
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 2:
            raise ShapeError(f"fusion input must be 2-D, got shape {X.shape}")
        return X

    def _prepare(self, X):
        X = self._as_array(X)
        dim = getattr(self, "input_dim_", None)
        if dim is not None and X.shape[1] != dim:
            raise ShapeError(f"fusion head expects {dim} features, got {X.shape[1]}")
        if getattr(self, "mean_", None) is not None:
            X = (X - self.mean_) / self.scale_
        return (torch.from_numpy(np.ascontiguousarray(X, dtype=np.float32)),)

    def fit(self, X, y):
        for attr in ("input_dim_", "mean_", "scale_"):
            self.__dict__.pop(attr, None)
        if self.zscore:
            arr = self._as_array(X)
            self.mean_ = arr.mean(axis=0)
            std = arr.std(axis=0)
            self.scale_ = np.where(std > 0, std, 1.0).astype(np.float32)
        return super().fit(X, y)

    def _build_net(self, data):
        self.input_dim_ = int(data[0].shape[1])
        return ClassifierNet(nn.Identity(), DenseHead(self.input_dim_, (self.hidden_width,)))

    def _build_spec(self) -> dict:
        spec = {"input_dim": self.input_dim_}
        if getattr(self, "mean_", None) is not None:
            spec["mean"] = self.mean_.tolist()
            spec["scale"] = self.scale_.tolist()
        return spec

    def _rebuild(self, spec: dict) -> ClassifierNet:
        self.input_dim_ = spec["input_dim"]
        if "mean" in spec:
            self.mean_ = np.asarray(spec["mean"], dtype=np.float32)
            self.scale_ = np.asarray(spec["scale"], dtype=np.float32)
        return ClassifierNet(nn.Identity(), DenseHead(self.input_dim_, (self.hidden_width,)))
