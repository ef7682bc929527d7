"""Pretrained speech/text encoders and the audio/text preprocessing around them.

Provider ids starting with ``test:`` resolve to tiny randomly initialised
stand-ins (``test:tiny-speech``, ``test:tiny-text``) that need no download.
Anything else is looked up in the registry and loaded with ``transformers``.
"""

from __future__ import annotations

import logging
import math
import re
import zlib
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.signal import resample_poly
from torch import nn

from .labels import EmotionLabel

log = logging.getLogger(__name__)

MAX_AUDIO_SAMPLES = 246000
SAMPLE_RATE_HZ = 16000
MAX_SEQ_LEN = 124

DEFAULT_REGISTRY = {
    "wav2vec2-base": "facebook/wav2vec2-base",
    "bert-base-uncased": "bert-base-uncased",
}


# --------------------------------------------------------------------------
# audio
# --------------------------------------------------------------------------

def resample(waveform: np.ndarray, source_rate_hz: int, target_rate_hz: int = SAMPLE_RATE_HZ) -> np.ndarray:
    if source_rate_hz == target_rate_hz:
        return np.asarray(waveform, dtype=np.float64)
    g = math.gcd(int(source_rate_hz), int(target_rate_hz))
    return resample_poly(np.asarray(waveform, dtype=np.float64), target_rate_hz // g, source_rate_hz // g)


def prepare_audio(
    waveform,
    source_rate_hz: int = SAMPLE_RATE_HZ,
    max_samples: int = MAX_AUDIO_SAMPLES,
    target_rate_hz: int = SAMPLE_RATE_HZ,
    return_flag: bool = False,
):
    """Resample to 16 kHz and fix the length at ``max_samples``.

    Longer clips keep their centre, shorter ones are zero-padded at the
    tail. With ``return_flag`` the result is ``(audio, degenerate)`` where
    ``degenerate`` marks an all-zero input.
    """
    waveform = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if waveform.size == 0:
        raise ValueError("empty waveform")
    x = resample(waveform, source_rate_hz, target_rate_hz)
    if x.size > max_samples:
        start = (x.size - max_samples) // 2
        x = x[start : start + max_samples]
    elif x.size < max_samples:
        x = np.concatenate([x, np.zeros(max_samples - x.size)])
    x = x.astype(np.float32)
    degenerate = not np.any(waveform)
    if degenerate:
        log.warning("all-zero waveform passed to prepare_audio")
    return (x, degenerate) if return_flag else x


def majority_vote(labels: Sequence) -> EmotionLabel:
    """Most frequent label of a framewise sequence; ties go to the lowest id."""
    if len(labels) == 0:
        raise ValueError("majority_vote needs at least one label")
    counts = Counter(EmotionLabel.parse(v) for v in labels)
    best = max(counts.values())
    return min(label for label, c in counts.items() if c == best)


# --------------------------------------------------------------------------
# tokenisation
# --------------------------------------------------------------------------

_WORD = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


class HashingTokenizer:
    """Deterministic word-level tokenizer for the stand-in text encoder."""

    pad_id, cls_id, sep_id = 0, 1, 2
    n_special = 4

    def __init__(self, vocab_size: int = 8192):
        self.vocab_size = vocab_size

    def tokens(self, text: str) -> list[str]:
        return _WORD.findall(text.lower())

    def token_id(self, token: str) -> int:
        return self.n_special + zlib.crc32(token.encode("utf-8")) % (self.vocab_size - self.n_special)

    def __call__(self, texts: Sequence[str], max_len: int = MAX_SEQ_LEN):
        ids = np.zeros((len(texts), max_len), dtype=np.int64)
        mask = np.zeros((len(texts), max_len), dtype=np.int64)
        degenerate = np.zeros(len(texts), dtype=bool)
        for i, text in enumerate(texts):
            words = self.tokens(text or "")
            if not words:
                # a lone padding token keeps the input well-defined
                mask[i, 0] = 1
                degenerate[i] = True
                continue
            seq = [self.cls_id] + [self.token_id(w) for w in words][: max_len - 2] + [self.sep_id]
            ids[i, : len(seq)] = seq
            mask[i, : len(seq)] = 1
        return ids, mask, degenerate


class _HFTokenizer:
    def __init__(self, name: str):
        from transformers import AutoTokenizer

        self.tok = AutoTokenizer.from_pretrained(name)

    def __call__(self, texts: Sequence[str], max_len: int = MAX_SEQ_LEN):
        degenerate = np.array([not (t or "").strip() for t in texts])
        texts = [t if (t or "").strip() else self.tok.pad_token for t in texts]
        enc = self.tok(list(texts), max_length=max_len, truncation=True, padding="max_length", return_tensors="np")
        return enc["input_ids"].astype(np.int64), enc["attention_mask"].astype(np.int64), degenerate


# --------------------------------------------------------------------------
# encoders
# --------------------------------------------------------------------------

class TinySpeechEncoder(nn.Module):
    """wav2vec2-shaped stand-in: 7 strided conv blocks then a transformer.

    Total stride is 320 samples (20 ms at 16 kHz), as in the real model.
    Returns the time-averaged hidden states, ``(batch, hidden_size)``.
    """

    conv_kernels = (10, 3, 3, 3, 3, 2, 2)
    conv_strides = (5, 2, 2, 2, 2, 2, 2)

    def __init__(self, conv_channels=16, hidden_size=64, n_layers=1, n_heads=4):
        super().__init__()
        layers, c_in = [], 1
        for k, s in zip(self.conv_kernels, self.conv_strides):
            layers += [nn.Conv1d(c_in, conv_channels, k, stride=s, bias=False), nn.GELU()]
            c_in = conv_channels
        self.features = nn.Sequential(*layers)
        self.norm = nn.LayerNorm(conv_channels)
        self.project = nn.Linear(conv_channels, hidden_size)
        layer = nn.TransformerEncoderLayer(hidden_size, n_heads, 2 * hidden_size, dropout=0.0, batch_first=True)
        self.transformer = nn.TransformerEncoder(layer, n_layers, enable_nested_tensor=False)
        self.hidden_size = hidden_size
        self.metadata = {
            "n_layers": n_layers,
            "n_heads": n_heads,
            "n_conv_blocks": len(self.conv_kernels),
            "conv_channels": conv_channels,
            "hidden_size": hidden_size,
        }

    def forward(self, audio):
        z = self.features(audio.unsqueeze(1)).transpose(1, 2)
        h = self.transformer(self.project(self.norm(z)))
        return h.mean(dim=1)


class TinyTextEncoder(nn.Module):
    """BERT-shaped stand-in returning masked mean-pooled token states."""

    def __init__(self, vocab_size=8192, hidden_size=64, n_layers=2, n_heads=4, max_len=512):
        super().__init__()
        self.tokens = nn.Embedding(vocab_size, hidden_size)
        self.positions = nn.Embedding(max_len, hidden_size)
        self.norm = nn.LayerNorm(hidden_size)
        layer = nn.TransformerEncoderLayer(hidden_size, n_heads, 2 * hidden_size, dropout=0.0, batch_first=True)
        self.transformer = nn.TransformerEncoder(layer, n_layers, enable_nested_tensor=False)
        self.hidden_size = hidden_size
        self.metadata = {"n_layers": n_layers, "n_heads": n_heads, "hidden_size": hidden_size, "vocab_size": vocab_size}

    def forward(self, input_ids, attention_mask):
        pos = torch.arange(input_ids.shape[1], device=input_ids.device)
        h = self.norm(self.tokens(input_ids) + self.positions(pos)[None])
        h = self.transformer(h, src_key_padding_mask=attention_mask == 0)
        m = attention_mask.unsqueeze(-1).to(h.dtype)
        return (h * m).sum(1) / m.sum(1).clamp_min(1.0)


class HFSpeechEncoder(nn.Module):
    def __init__(self, name: str):
        super().__init__()
        from transformers import Wav2Vec2Model

        self.model = Wav2Vec2Model.from_pretrained(name)
        cfg = self.model.config
        self.hidden_size = cfg.hidden_size
        self.metadata = {
            "n_layers": cfg.num_hidden_layers,
            "n_heads": cfg.num_attention_heads,
            "n_conv_blocks": len(cfg.conv_dim),
            "conv_channels": cfg.conv_dim[0],
            "hidden_size": cfg.hidden_size,
            "n_parameters": sum(p.numel() for p in self.model.parameters()),
        }

    def forward(self, audio):
        return self.model(audio).last_hidden_state.mean(dim=1)


class HFTextEncoder(nn.Module):
    def __init__(self, name: str):
        super().__init__()
        from transformers import AutoModel

        self.model = AutoModel.from_pretrained(name)
        cfg = self.model.config
        self.hidden_size = cfg.hidden_size
        self.metadata = {
            "n_layers": cfg.num_hidden_layers,
            "n_heads": cfg.num_attention_heads,
            "hidden_size": cfg.hidden_size,
            "n_parameters": sum(p.numel() for p in self.model.parameters()),
        }

    def forward(self, input_ids, attention_mask):
        h = self.model(input_ids=input_ids, attention_mask=attention_mask).last_hidden_state
        m = attention_mask.unsqueeze(-1).to(h.dtype)
        return (h * m).sum(1) / m.sum(1).clamp_min(1.0)


_TINY = {
    ("speech", "test:tiny-speech"): TinySpeechEncoder,
    ("text", "test:tiny-text"): TinyTextEncoder,
}
# stand-ins are built from a fixed seed so every load yields the same weights
_TINY_SEED = 20230101


@dataclass(frozen=True)
class EncoderHandle:
    modality: str
    provider_id: str
    frozen: bool = False

    def __post_init__(self):
        if self.modality not in ("speech", "text"):
            raise ValueError(f"encoder modality must be speech or text, got {self.modality!r}")

    @property
    def is_stand_in(self) -> bool:
        return self.provider_id.startswith("test:")

    def resolve(self, registry: dict | None = None) -> str:
        """Local path or hub name for a provider id."""
        if self.is_stand_in:
            if (self.modality, self.provider_id) not in _TINY:
                raise ValueError(f"unknown stand-in encoder {self.provider_id!r} for {self.modality}")
            return self.provider_id
        reg = {**DEFAULT_REGISTRY, **(registry or {})}
        return reg.get(self.provider_id, self.provider_id)

    def load(self, registry: dict | None = None) -> nn.Module:
        target = self.resolve(registry)
        if self.is_stand_in:
            with torch.random.fork_rng():
                torch.manual_seed(_TINY_SEED)
                module = _TINY[(self.modality, target)]()
        elif self.modality == "speech":
            module = HFSpeechEncoder(target)
        else:
            module = HFTextEncoder(target)
        if self.frozen:
            for p in module.parameters():
                p.requires_grad_(False)
        return module

    def load_tokenizer(self, registry: dict | None = None):
        if self.modality != "text":
            raise ValueError("only text encoders have a tokenizer")
        if self.is_stand_in:
            return HashingTokenizer()
        return _HFTokenizer(self.resolve(registry))
