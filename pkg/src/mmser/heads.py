"""Speech and text emotion classifiers on top of pretrained encoders."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .base import ClassifierNet, DenseHead, TorchClassifier
from .encoders import MAX_AUDIO_SAMPLES, MAX_SEQ_LEN, SAMPLE_RATE_HZ, EncoderHandle, prepare_audio


class _EncoderBackbone(nn.Module):
    def __init__(self, encoder: nn.Module):
        super().__init__()
        self.encoder = encoder

    def forward(self, *inputs):
        return self.encoder(*inputs)


class _EncoderClassifier(TorchClassifier):
    modality = ""

    def _handle(self) -> EncoderHandle:
        return EncoderHandle(self.modality, self.encoder, bool(self.freeze_encoder))

    def _backbone_frozen(self) -> bool:
        return bool(self.freeze_encoder)

    def _make_net(self) -> ClassifierNet:
        enc = self._handle().load(self.registry)
        self.encoder_metadata_ = dict(enc.metadata)
        return ClassifierNet(_EncoderBackbone(enc), DenseHead(enc.hidden_size, tuple(self.head_widths)))

    def _build_net(self, data):
        return self._make_net()

    def build(self):
        """Initialise an untrained model (encoder weights plus a fresh head)."""
        self._init_net(None)
        return self

    def _rebuild(self, spec: dict) -> ClassifierNet:
        return self._make_net()


class SpeechEmotionClassifier(_EncoderClassifier):
    """Pretrained acoustic encoder, mean-pooled, then ``256 -> 64 -> 4`` dense layers.

    ``X`` is a sequence of mono waveforms sampled at ``input_rate_hz``; each
    one is resampled to 16 kHz and cut or zero-padded to ``max_samples``.
    """

    modality = "speech"

    def __init__(
        self,
        encoder="test:tiny-speech",
        freeze_encoder=False,
        max_samples=MAX_AUDIO_SAMPLES,
        input_rate_hz=SAMPLE_RATE_HZ,
        head_widths=(256, 64),
        optimizer="sgd",
        learning_rate=1e-5,
        momentum=0.0,
        epochs=30,
        batch_size=4,
        random_state=0,
        registry=None,
    ):
        self.encoder = encoder
        self.freeze_encoder = freeze_encoder
        self.max_samples = max_samples
        self.input_rate_hz = input_rate_hz
        self.head_widths = head_widths
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.registry = registry

    def _prepare(self, X):
        if isinstance(X, np.ndarray) and X.ndim == 1:
            X = [X]
        prepared, flags = [], []
        for w in X:
            audio, degenerate = prepare_audio(w, self.input_rate_hz, self.max_samples, return_flag=True)
            prepared.append(audio)
            flags.append(degenerate)
        if not prepared:
            raise ValueError("empty speech input")
        self.degenerate_ = np.array(flags)
        return (torch.from_numpy(np.stack(prepared)),)


class TextEmotionClassifier(_EncoderClassifier):
    """Pretrained text encoder, mean-pooled over tokens, then dense layers.

    Transcripts are tokenised with the encoder's own tokenizer and cut or
    padded to ``max_seq_len`` tokens. Empty transcripts become a single
    padding token and are flagged in ``degenerate_``.
    """

    modality = "text"

    def __init__(
        self,
        encoder="test:tiny-text",
        freeze_encoder=False,
        max_seq_len=MAX_SEQ_LEN,
        head_widths=(256, 64),
        optimizer="adam",
        learning_rate=1e-5,
        epochs=30,
        batch_size=16,
        random_state=0,
        registry=None,
    ):
        self.encoder = encoder
        self.freeze_encoder = freeze_encoder
        self.max_seq_len = max_seq_len
        self.head_widths = head_widths
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.registry = registry

    def _tokenizer(self):
        tok = getattr(self, "_tok", None)
        if tok is None or self._tok_key != (self.encoder, self.max_seq_len):
            tok = self._handle().load_tokenizer(self.registry)
            self._tok, self._tok_key = tok, (self.encoder, self.max_seq_len)
        return tok

    def tokenize(self, texts):
        return self._tokenizer()(list(texts), self.max_seq_len)

    def _prepare(self, X):
        if isinstance(X, str):
            X = [X]
        if len(X) == 0:
            raise ValueError("empty text input")
        ids, mask, degenerate = self.tokenize(X)
        self.degenerate_ = degenerate
        return torch.from_numpy(ids), torch.from_numpy(mask)
