"""Utterance records, JSON-lines manifests and the synthetic corpus.

A manifest is the canonical input of the toolkit: one JSON object per line
with the fields of :class:`UtteranceRecord`. Modality payloads are referenced,
not embedded. References of the form ``synth://<seed>/<index>`` are resolved
by regenerating the synthetic signal, so synthetic manifests need no files.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .labels import LABEL_NAMES, EmotionLabel
from .mocap import SUB_MODE_DIMS, SUB_MODES, SubModeStream, read_stream

TARGET_SAMPLE_RATE_HZ = 16000
SYNTH_SCHEME = "synth://"

MODALITIES = ("speech", "text", "mocap")


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest content."""


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    session_id: int
    speaker_id: str
    audio_ref: str | None
    sample_rate_hz: int | None
    transcript: str | None
    mocap_refs: Mapping[str, str] | None
    start_time_s: float
    end_time_s: float
    label: EmotionLabel

    def __post_init__(self):
        if not self.utterance_id:
            raise ManifestError("utterance_id must be a non-empty string")
        if not 1 <= int(self.session_id) <= 5:
            raise ManifestError(f"{self.utterance_id}: session_id {self.session_id} outside 1..5")
        if not self.end_time_s > self.start_time_s:
            raise ManifestError(f"{self.utterance_id}: end_time_s must exceed start_time_s")
        if self.audio_ref is not None:
            if not self.audio_ref:
                raise ManifestError(f"{self.utterance_id}: empty audio_ref, use null for absent audio")
            if not self.sample_rate_hz or self.sample_rate_hz <= 0:
                raise ManifestError(f"{self.utterance_id}: audio present without a positive sample_rate_hz")
        if self.mocap_refs is not None:
            unknown = set(self.mocap_refs) - set(SUB_MODES)
            if unknown:
                raise ManifestError(f"{self.utterance_id}: unknown MoCap sub-modes {sorted(unknown)}")
            if not self.mocap_refs:
                raise ManifestError(f"{self.utterance_id}: empty mocap_refs, use null for absent MoCap")
        object.__setattr__(self, "label", EmotionLabel.parse(self.label))

    @property
    def availability(self) -> dict[str, bool]:
        """Modality availability mask."""
        return {
            "speech": self.audio_ref is not None,
            "text": self.transcript is not None,
            "mocap": self.mocap_refs is not None,
        }

    def to_json(self) -> dict:
        return {
            "utterance_id": self.utterance_id,
            "session_id": int(self.session_id),
            "speaker_id": self.speaker_id,
            "audio_ref": self.audio_ref,
            "sample_rate_hz": self.sample_rate_hz,
            "transcript": self.transcript,
            "mocap_refs": dict(self.mocap_refs) if self.mocap_refs is not None else None,
            "start_time_s": float(self.start_time_s),
            "end_time_s": float(self.end_time_s),
            "label": self.label.display,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "UtteranceRecord":
        expected = set(cls.__dataclass_fields__)
        missing = expected - set(obj)
        extra = set(obj) - expected
        if missing or extra:
            raise ManifestError(f"fields mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        return cls(**obj)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[UtteranceRecord, ...]
    source: str = "iemocap"
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.source not in ("iemocap", "synthetic"):
            raise ManifestError(f"unknown manifest source {self.source!r}")
        index = {}
        for rec in self.records:
            if rec.utterance_id in index:
                raise ManifestError(f"duplicate utterance_id {rec.utterance_id!r}")
            index[rec.utterance_id] = rec
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[UtteranceRecord]:
        return iter(self.records)

    def __getitem__(self, utterance_id: str) -> UtteranceRecord:
        return self._index[utterance_id]

    @property
    def ids(self) -> list[str]:
        return [r.utterance_id for r in self.records]

    @property
    def class_counts(self) -> dict[str, int]:
        counts = Counter(r.label for r in self.records)
        return {label.display: counts.get(label, 0) for label in EmotionLabel}

    def subset(self, ids: Iterable[str]) -> "DatasetManifest":
        wanted = set(ids)
        return DatasetManifest(tuple(r for r in self.records if r.utterance_id in wanted), self.source)

    def labels(self, ids: Iterable[str] | None = None) -> np.ndarray:
        recs = self.records if ids is None else [self[i] for i in ids]
        return np.array([int(r.label) for r in recs], dtype=np.int64)


def _resolve_ref(ref: str | None, base: Path) -> str | None:
    if ref is None or ref.startswith(SYNTH_SCHEME) or "://" in ref:
        return ref
    p = Path(ref)
    return str(p if p.is_absolute() else (base / p))


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Read a JSON-lines manifest, validating every record."""
    path = Path(path)
    base = path.parent
    records = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ManifestError("record is not a JSON object")
                rec = UtteranceRecord.from_json(obj)
            except (json.JSONDecodeError, ManifestError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if rec.utterance_id in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate utterance_id {rec.utterance_id!r} "
                    f"(first seen on line {seen[rec.utterance_id]})"
                )
            seen[rec.utterance_id] = lineno
            mocap = rec.mocap_refs
            if mocap is not None:
                mocap = {k: _resolve_ref(v, base) for k, v in mocap.items()}
            records.append(
                UtteranceRecord(
                    **{**rec.__dict__, "audio_ref": _resolve_ref(rec.audio_ref, base), "mocap_refs": mocap}
                )
            )
    return DatasetManifest(tuple(records), _infer_source(records))


def _infer_source(records: Sequence[UtteranceRecord]) -> str:
    refs = []
    for r in records:
        refs.append(r.audio_ref)
        refs.extend((r.mocap_refs or {}).values())
    refs = [ref for ref in refs if ref is not None]
    if refs and all(ref.startswith(SYNTH_SCHEME) for ref in refs):
        return "synthetic"
    return "iemocap"


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in manifest.records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")
    return path


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------

SYNTH_TONE_HZ = (200.0, 300.0, 450.0, 675.0)
# cycles per utterance; the network sees utterance-normalised time, so the
# signature must not depend on the utterance duration
SYNTH_MOCAP_CYCLES = (1.0, 2.0, 3.0, 4.0)
SYNTH_MOCAP_FPS = 120.0
SYNTH_NOISE = 0.05

SYNTH_TRANSCRIPTS = {
    EmotionLabel.NEUTRAL: (
        "i will send the report on tuesday",
        "the bus leaves at nine in the morning",
        "we need to check the schedule first",
        "my office is on the second floor",
    ),
    EmotionLabel.EXCITED: (
        "wow this is amazing i got the job",
        "we actually won the tickets",
        "i can not wait for the trip tomorrow",
        "that is the best news ever",
    ),
    EmotionLabel.ANGRY: (
        "stop lying to me right now",
        "this is completely unacceptable",
        "you ruined everything again",
        "i am sick of your excuses",
    ),
    EmotionLabel.SAD: (
        "i miss her so much",
        "nothing ever works out for me",
        "he passed away last night",
        "i feel so alone these days",
    ),
}

_SUB_MODE_CODE = {"facial": 1, "hand": 2, "head": 3}


def _synth_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, stream])


def generate_synthetic(n_per_class: int, seed: int) -> DatasetManifest:
    """Balanced synthetic manifest with class-dependent signals.

    Record ``i`` has label ``i % 4`` and session ``i % 5 + 1``. Audio is a
    sine at ``SYNTH_TONE_HZ[label]`` plus Gaussian noise; every MoCap column
    ``c`` of width ``d`` follows
    ``sin(2*pi*K[label]*u + 2*pi*c/d)`` plus noise, with ``u`` the position
    in the utterance (0 at start, 1 at end) and ``K = SYNTH_MOCAP_CYCLES``.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    records = []
    clock = 0.0
    for i in range(4 * n_per_class):
        label = EmotionLabel(i % 4)
        session = i % 5 + 1
        rng = _synth_rng(seed, i, 0)
        duration = round(float(rng.uniform(0.8, 1.2)), 6)
        templates = SYNTH_TRANSCRIPTS[label]
        transcript = templates[int(rng.integers(len(templates)))]
        ref = f"{SYNTH_SCHEME}{seed}/{i}"
        start = round(clock, 6)
        end = round(clock + duration, 6)
        clock = end + 0.25
        records.append(
            UtteranceRecord(
                utterance_id=f"Ses{session:02d}_syn_{i:05d}",
                session_id=session,
                speaker_id=f"Ses{session:02d}{'FM'[(i // 5) % 2]}",
                audio_ref=ref,
                sample_rate_hz=TARGET_SAMPLE_RATE_HZ,
                transcript=transcript,
                mocap_refs={m: ref for m in SUB_MODES},
                start_time_s=start,
                end_time_s=end,
                label=label,
            )
        )
    return DatasetManifest(tuple(records), "synthetic")


def _parse_synth_ref(ref: str) -> tuple[int, int]:
    seed, index = ref[len(SYNTH_SCHEME):].split("/")
    return int(seed), int(index)


def synthesize_audio(ref: str, label: EmotionLabel, duration_s: float) -> np.ndarray:
    seed, index = _parse_synth_ref(ref)
    rng = _synth_rng(seed, index, 10)
    n = int(round(duration_s * TARGET_SAMPLE_RATE_HZ))
    t = np.arange(n) / TARGET_SAMPLE_RATE_HZ
    tone = 0.5 * np.sin(2 * np.pi * SYNTH_TONE_HZ[label] * t)
    return (tone + SYNTH_NOISE * rng.standard_normal(n)).astype(np.float32)


def synthesize_stream(ref: str, label: EmotionLabel, sub_mode: str, start_s: float, end_s: float) -> SubModeStream:
    seed, index = _parse_synth_ref(ref)
    rng = _synth_rng(seed, index, 20 + _SUB_MODE_CODE[sub_mode])
    d = SUB_MODE_DIMS[sub_mode]
    t = np.arange(start_s, end_s, 1.0 / SYNTH_MOCAP_FPS)
    phase = 2 * np.pi * np.arange(d) / d
    progress = (t[:, None] - start_s) / (end_s - start_s)
    values = np.sin(2 * np.pi * SYNTH_MOCAP_CYCLES[label] * progress + phase[None, :])
    values = values + SYNTH_NOISE * rng.standard_normal(values.shape)
    return SubModeStream(sub_mode, t, values)


# --------------------------------------------------------------------------
# payload resolution
# --------------------------------------------------------------------------

def load_audio(record: UtteranceRecord) -> tuple[np.ndarray, int]:
    """Return ``(mono float32 waveform, sample rate)`` for a record."""
    if record.audio_ref is None:
        raise ManifestError(f"{record.utterance_id}: no audio available")
    if record.audio_ref.startswith(SYNTH_SCHEME):
        duration = record.end_time_s - record.start_time_s
        return synthesize_audio(record.audio_ref, record.label, duration), TARGET_SAMPLE_RATE_HZ
    from scipy.io import wavfile

    rate, data = wavfile.read(record.audio_ref)
    data = np.asarray(data)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float32) / float(np.iinfo(data.dtype).max)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return data.astype(np.float32), int(rate)


def load_mocap_streams(record: UtteranceRecord) -> dict[str, SubModeStream | None]:
    """Load every sub-mode stream of a record; absent sub-modes map to ``None``."""
    refs = record.mocap_refs or {}
    out: dict[str, SubModeStream | None] = {}
    for mode in SUB_MODES:
        ref = refs.get(mode)
        if ref is None:
            out[mode] = None
        elif ref.startswith(SYNTH_SCHEME):
            out[mode] = synthesize_stream(ref, record.label, mode, record.start_time_s, record.end_time_s)
        else:
            out[mode] = read_stream(ref, mode)
    return out


def class_count_table(manifest: DatasetManifest) -> str:
    counts = manifest.class_counts
    return ", ".join(f"{name}={counts[name]}" for name in LABEL_NAMES) + f" (total {len(manifest)})"
