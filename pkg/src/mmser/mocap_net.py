"""CNN / CNN-LSTM / CNN-LSTM-self-attention classifiers for MoCap matrices.

Convolution layers inside the network are PyTorch's ``Conv2d`` which
computes a cross-correlation; since kernels are learned the two conventions
are interchangeable there. :func:`conv2d` is the exported operation and
computes the true (kernel-flipped) convolution
``z(i, j) = sum_m sum_n x(m, n) * y(i - m, j - n)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .base import ClassifierNet, ConfigError, DenseHead, TorchClassifier
from .mocap import COMBINED_DIM, N_PARTITIONS, MoCapTensor, ShapeError

VARIANTS = ("conv", "conv_lstm", "conv_lstm_attn")


def conv2d(x, kernel, mode: str = "valid") -> np.ndarray:
    """2-D convolution with the flipped-kernel definition.

    ``mode="full"`` returns every index with a nonzero overlap,
    ``"valid"`` only positions where the kernel lies inside ``x`` and
    ``"same"`` the centre crop of ``full`` with the shape of ``x``
    (offset ``(a - 1) // 2`` rows, ``(b - 1) // 2`` columns).
    """
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 2 or k.ndim != 2 or x.size == 0 or k.size == 0:
        raise ShapeError(f"conv2d needs non-empty 2-D input and kernel, got {x.shape} and {k.shape}")
    (h, w), (a, b) = x.shape, k.shape
    if mode == "valid" and (a > h or b > w):
        raise ShapeError(f"valid convolution needs kernel {k.shape} no larger than input {x.shape}")
    if mode not in ("full", "valid", "same"):
        raise ValueError(f"unknown mode {mode!r}")
    # cross-correlation with the flipped kernel over a zero-padded input is the full convolution
    xt = torch.from_numpy(x)[None, None]
    kt = torch.from_numpy(k[::-1, ::-1].copy())[None, None]
    full = nn.functional.conv2d(xt, kt, padding=(a - 1, b - 1))[0, 0].numpy()
    if mode == "full":
        return full
    if mode == "valid":
        return full[a - 1 : h, b - 1 : w].copy()
    r0, c0 = (a - 1) // 2, (b - 1) // 2
    return full[r0 : r0 + h, c0 : c0 + w].copy()


class SelfAttention(nn.Module):
    """Scaled dot-product self-attention with learned Q/K/V projections.

    Accepts ``(T, d)`` or ``(batch, T, d)`` and returns the attended
    sequence of the same shape. The last attention weights are kept on
    ``last_weights``.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.last_weights = None

    def forward(self, x):
        q, k, v = self.query(x), self.key(x), self.value(x)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.dim)
        weights = torch.softmax(scores, dim=-1)
        self.last_weights = weights.detach()
        return weights @ v


@dataclass(frozen=True)
class MoCapNetConfig:
    variant: str = "conv_lstm_attn"
    n_blocks: int = 5
    n_filters: int = 128
    kernel_size: int = 3
    stride: int = 1
    dropout: float = 0.2
    dropout_mode: str = "channel"
    lstm_units: int = 128
    attention: bool | None = None
    dense_widths: tuple[int, ...] = (256, 64)
    n_classes: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        attention = self.variant == "conv_lstm_attn" if self.attention is None else bool(self.attention)
        if attention and self.variant == "conv":
            raise ConfigError("self-attention requires an LSTM block; use variant='conv_lstm_attn'")
        if self.variant == "conv_lstm_attn" and not attention:
            raise ConfigError("variant 'conv_lstm_attn' cannot disable attention")
        object.__setattr__(self, "attention", attention)
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.dropout_mode not in ("channel", "element"):
            raise ConfigError("dropout_mode must be 'channel' or 'element'")
        if self.variant != "conv" and self.lstm_units <= 0:
            raise ConfigError("lstm_units must be positive for LSTM variants")
        if self.stride != 1:
            raise ConfigError("'same' padding is only supported at stride 1")
        if self.kernel_size < 1 or self.n_blocks < 1 or self.n_filters < 1:
            raise ConfigError("kernel_size, n_blocks and n_filters must be >= 1")
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        if len(self.dense_widths) < 1:
            raise ConfigError("at least one dense layer is required")

    @property
    def uses_lstm(self) -> bool:
        return self.variant != "conv"


def pooled_size(n: int, n_blocks: int) -> int:
    # 2x2 max-pool with ceil rounding never shrinks a dimension below 1
    for _ in range(n_blocks):
        n = -(-n // 2)
    return n


class MoCapBackbone(nn.Module):
    """``[conv -> relu -> maxpool -> dropout] x n_blocks`` then the sequence part.

    ``dropout_mode="channel"`` drops whole feature maps. Element-wise
    dropout ahead of the next block's max-pool inflates training-time
    activations (the max of rescaled survivors exceeds the max of the
    means) and the gap compounds over five blocks; channel dropout rescales
    a map uniformly, which max-pooling preserves.
    """

    def __init__(self, config: MoCapNetConfig, input_shape: tuple[int, int]):
        super().__init__()
        rows, cols = input_shape
        blocks, c_in = [], 1
        for _ in range(config.n_blocks):
            blocks += [
                nn.Conv2d(c_in, config.n_filters, config.kernel_size, stride=1, padding="same"),
                nn.ReLU(),
                nn.MaxPool2d(2, 2, ceil_mode=True),
                nn.Dropout2d(config.dropout) if config.dropout_mode == "channel" else nn.Dropout(config.dropout),
            ]
            c_in = config.n_filters
        self.conv = nn.Sequential(*blocks)
        self.seq_len = pooled_size(rows, config.n_blocks)
        self.seq_width = pooled_size(cols, config.n_blocks) * config.n_filters
        self.lstm = nn.LSTM(self.seq_width, config.lstm_units, batch_first=True) if config.uses_lstm else None
        self.attention = SelfAttention(config.lstm_units) if config.attention else None
        if self.lstm is None:
            self.out_dim = self.seq_len * self.seq_width
        else:
            self.out_dim = self.seq_len * config.lstm_units

    def forward(self, x):
        z = self.conv(x.unsqueeze(1))  # (batch, filters, rows', cols')
        b, f, r, c = z.shape
        # sequence over rows', each step the (cols', filters) slice
        seq = z.permute(0, 2, 3, 1).reshape(b, r, c * f)
        if self.lstm is not None:
            seq, _ = self.lstm(seq)
            if self.attention is not None:
                seq = self.attention(seq)
        return seq.reshape(b, -1)


def build_model(config: MoCapNetConfig, input_shape: tuple[int, int]) -> ClassifierNet:
    """Untrained network for ``(rows, cols)`` inputs; seed torch beforehand."""
    rows, cols = input_shape
    if rows < 1 or cols < 1:
        raise ShapeError(f"invalid input shape {input_shape}")
    backbone = MoCapBackbone(config, input_shape)
    return ClassifierNet(backbone, DenseHead(backbone.out_dim, config.dense_widths, config.n_classes))


def as_mocap_array(X) -> np.ndarray:
    """Stack MoCap inputs into ``(n_samples, rows, cols)`` float32."""
    if isinstance(X, MoCapTensor):
        X = [X]
    if isinstance(X, (list, tuple)):
        X = [x.values if isinstance(x, MoCapTensor) else np.asarray(x) for x in X]
        if not X:
            raise ValueError("empty MoCap input")
        X = np.stack(X)
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeError(f"MoCap input must be (n_samples, rows, cols), got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("MoCap input contains NaN or Inf")
    return X


class MoCapClassifier(TorchClassifier):
    """Emotion classifier over partition-averaged MoCap matrices.

    ``variant`` selects the plain CNN, CNN-LSTM or CNN-LSTM-attention
    network. ``X`` is ``(n_samples, 200, width)`` with width 189 for the
    combined input or 165/18/6 for a single sub-mode.
    """

    def __init__(
        self,
        variant="conv_lstm_attn",
        n_blocks=5,
        n_filters=128,
        kernel_size=3,
        dropout=0.2,
        dropout_mode="channel",
        lstm_units=128,
        dense_widths=(256, 64),
        optimizer="adam",
        learning_rate=1e-5,
        epochs=200,
        batch_size=8,
        random_state=0,
    ):
        self.variant = variant
        self.n_blocks = n_blocks
        self.n_filters = n_filters
        self.kernel_size = kernel_size
        self.dropout = dropout
        self.dropout_mode = dropout_mode
        self.lstm_units = lstm_units
        self.dense_widths = dense_widths
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    @property
    def config(self) -> MoCapNetConfig:
        return MoCapNetConfig(
            variant=self.variant,
            n_blocks=self.n_blocks,
            n_filters=self.n_filters,
            kernel_size=self.kernel_size,
            dropout=self.dropout,
            dropout_mode=self.dropout_mode,
            lstm_units=self.lstm_units,
            dense_widths=tuple(self.dense_widths),
        )

    def _prepare(self, X):
        X = as_mocap_array(X)
        expected = getattr(self, "input_shape_", None)
        if expected is not None and X.shape[1:] != expected:
            raise ShapeError(f"model expects inputs of shape {expected}, got {X.shape[1:]}")
        return (torch.from_numpy(X),)

    def _build_net(self, data):
        shape = tuple(data[0].shape[1:])
        if shape[0] != N_PARTITIONS:
            raise ShapeError(f"expected {N_PARTITIONS} partitions, got {shape[0]}")
        self.input_shape_ = shape
        return build_model(self.config, shape)

    def build(self, input_shape=(N_PARTITIONS, COMBINED_DIM)):
        """Initialise an untrained network without fitting."""
        self.__dict__.pop("input_shape_", None)
        self._init_net((torch.zeros((1, *input_shape)),))
        return self

    def fit(self, X, y):
        self.__dict__.pop("input_shape_", None)
        return super().fit(X, y)

    def _build_spec(self) -> dict:
        return {"input_shape": list(self.input_shape_), "config": asdict(self.config)}

    def _rebuild(self, spec: dict) -> ClassifierNet:
        self.input_shape_ = tuple(spec["input_shape"])
        return build_model(self.config, self.input_shape_)
