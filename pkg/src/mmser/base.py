"""Shared machinery for the PyTorch-backed classifiers.

Every classifier is a ``backbone`` (modality specific feature extractor)
followed by a :class:`DenseHead`. The first hidden activation of the head
is the embedding handed to fusion.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from torch import nn

from .labels import N_CLASSES, EmotionLabel

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when optimisation diverges."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float


class DenseHead(nn.Module):
    """``Linear -> ReLU`` per hidden width, then the class logits."""

    def __init__(self, in_dim: int, widths=(256, 64), n_classes: int = N_CLASSES):
        super().__init__()
        if not widths:
            raise ConfigError("head needs at least one hidden layer to export an embedding")
        layers, prev = [], in_dim
        for w in widths:
            layers.append(nn.Sequential(nn.Linear(prev, w), nn.ReLU()))
            prev = w
        self.hidden = nn.ModuleList(layers)
        self.out = nn.Linear(prev, n_classes)

    def forward(self, x):
        for layer in self.hidden:
            x = layer(x)
        return self.out(x)

    def embed(self, x):
        return self.hidden[0](x)


class ClassifierNet(nn.Module):
    def __init__(self, backbone: nn.Module, head: DenseHead):
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward(self, *inputs):
        return self.head(self.backbone(*inputs))

    def embed(self, *inputs):
        return self.head.embed(self.backbone(*inputs))


def encode_labels(y) -> np.ndarray:
    """Labels as int64 ids; accepts ids, names or :class:`EmotionLabel`."""
    out = np.array([int(EmotionLabel.parse(v.item() if isinstance(v, np.generic) else v)) for v in y], dtype=np.int64)
    return out


def state_hash(module: nn.Module) -> str:
    """SHA-256 over parameter names, shapes and float32 bytes."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        arr = tensor.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()


def _index(data: tuple[torch.Tensor, ...], idx) -> tuple[torch.Tensor, ...]:
    return tuple(t[idx] for t in data)


def _make_optimizer(name: str, params, lr: float, momentum: float = 0.0):
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum)
    raise ConfigError(f"unknown optimizer {name!r}")


def run_training(
    net: nn.Module,
    data: tuple[torch.Tensor, ...],
    y: torch.Tensor,
    *,
    optimizer: str,
    learning_rate: float,
    epochs: int,
    batch_size: int,
    seed: int,
    momentum: float = 0.0,
    parameters=None,
) -> list[EpochRecord]:
    """Mini-batch cross-entropy training with a seeded shuffle."""
    if epochs < 0 or batch_size < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")
    history: list[EpochRecord] = []
    if epochs == 0:
        return history
    params = [p for p in (parameters if parameters is not None else net.parameters()) if p.requires_grad]
    opt = _make_optimizer(optimizer, params, learning_rate, momentum)
    gen = torch.Generator().manual_seed(seed)
    n = y.shape[0]
    net.train()
    for epoch in range(1, epochs + 1):
        order = torch.randperm(n, generator=gen)
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            logits = net(*_index(data, idx))
            loss = nn.functional.cross_entropy(logits, y[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.argmax(dim=1) == y[idx]).sum())
        history.append(EpochRecord(epoch, total_loss / n, correct / n))
        log.debug("epoch %d loss %.6f acc %.4f", epoch, history[-1].loss, history[-1].train_accuracy)
    net.eval()
    return history


class TorchClassifier(ClassifierMixin, BaseEstimator):
    """Base estimator; subclasses implement ``_prepare`` and ``_build_net``.

    ``_prepare(X)`` returns a tuple of tensors indexed along the first axis.
    ``_build_net(data)`` returns an untrained :class:`ClassifierNet`.
    ``_backbone_frozen()`` tells the trainer to precompute backbone features
    once and optimise only the head.
    """

    _optimizer_param = "optimizer"
    inference_batch_size = 64

    def _prepare(self, X) -> tuple[torch.Tensor, ...]:
        raise NotImplementedError

    def _build_net(self, data: tuple[torch.Tensor, ...]) -> ClassifierNet:
        raise NotImplementedError

    def _backbone_frozen(self) -> bool:
        return False

    # -- construction -----------------------------------------------------
    def _init_net(self, data) -> ClassifierNet:
        torch.manual_seed(self.random_state)
        net = self._build_net(data)
        net.eval()
        if self._backbone_frozen():
            for p in net.backbone.parameters():
                p.requires_grad_(False)
        self.classes_ = np.arange(N_CLASSES)
        self.net_ = net
        self.is_trained_ = False
        self.history_ = []
        return net

    # -- training ---------------------------------------------------------
    def fit(self, X, y):
        y_ids = torch.as_tensor(encode_labels(y))
        data = self._prepare(X)
        if len(y_ids) == 0 or data[0].shape[0] != len(y_ids):
            raise ValueError(f"got {data[0].shape[0]} samples and {len(y_ids)} labels")
        net = self._init_net(data)
        common = dict(
            optimizer=getattr(self, self._optimizer_param),
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            momentum=getattr(self, "momentum", 0.0),
        )
        if self._backbone_frozen():
            feats = self._backbone_features(data)
            self.history_ = run_training(net.head, (feats,), y_ids, **common)
        else:
            self.history_ = run_training(net, data, y_ids, **common)
        net.eval()
        self.is_trained_ = self.epochs > 0
        return self

    def _backbone_features(self, data) -> torch.Tensor:
        self.net_.eval()
        with torch.no_grad():
            chunks = [
                self.net_.backbone(*_index(data, slice(i, i + self.inference_batch_size)))
                for i in range(0, data[0].shape[0], self.inference_batch_size)
            ]
        return torch.cat(chunks)

    # -- inference --------------------------------------------------------
    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError(f"{type(self).__name__} has no network; call fit or build first")

    def _batched(self, fn, X) -> np.ndarray:
        self._check_fitted()
        data = self._prepare(X)
        self.net_.eval()
        out = []
        with torch.no_grad():
            for i in range(0, data[0].shape[0], self.inference_batch_size):
                out.append(fn(*_index(data, slice(i, i + self.inference_batch_size))))
        return torch.cat(out).double().numpy()

    def decision_function(self, X) -> np.ndarray:
        return self._batched(self.net_, X)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest label id
        return np.argmax(self.predict_proba(X), axis=1)

    def transform(self, X) -> np.ndarray:
        """Penultimate embeddings, shape ``(n_samples, head_widths[0])``."""
        return self._batched(self.net_.embed, X)

    @property
    def embedding_dim(self) -> int:
        self._check_fitted()
        return self.net_.head.hidden[0][0].out_features

    def state_hash(self) -> str:
        self._check_fitted()
        return state_hash(self.net_)

    # subclasses describe what is needed to rebuild the network from a checkpoint
    def _build_spec(self) -> dict:
        return {}

    def _rebuild(self, spec: dict) -> ClassifierNet:
        raise NotImplementedError
