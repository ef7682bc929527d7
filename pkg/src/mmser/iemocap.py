"""IEMOCAP corpus to manifest conversion.

Reads the corpus in its distributed layout (per-dialog evaluation files,
transcriptions, sentence wavs and dialog-level MoCap files). Sub-paths are
configurable through :class:`IemocapLayout`.
"""

from __future__ import annotations

import logging
import os
import re
import wave
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import DatasetManifest, UtteranceRecord
from .labels import map_raw_label

log = logging.getLogger(__name__)

_EVAL_LINE = re.compile(r"^\[(?P<start>[\d.]+)\s*-\s*(?P<end>[\d.]+)\]\s+(?P<utt>\S+)\s+(?P<code>\S+)\s+\[")
_ANNOTATOR_LINE = re.compile(r"^C-E\d+:\s*(?P<cats>.*)$")
_TRANSCRIPT_LINE = re.compile(r"^(?P<utt>Ses\S+)\s+\[[^\]]*\]:\s*(?P<text>.*)$")

# annotator vocabulary of the evaluation files
_ANNOTATOR_CODES = {
    "neutral state": "neu",
    "neutral": "neu",
    "happiness": "hap",
    "excited": "exc",
    "anger": "ang",
    "sadness": "sad",
    "frustration": "fru",
    "surprise": "sur",
    "fear": "fea",
    "disgust": "dis",
    "other": "oth",
}


class IngestError(RuntimeError):
    pass


@dataclass(frozen=True)
class IemocapLayout:
    """Corpus sub-paths relative to each ``Session<n>`` directory."""

    sessions: tuple[int, ...] = (1, 2, 3, 4, 5)
    session_dir: str = "Session{n}"
    evaluation_dir: str = "dialog/EmoEvaluation"
    transcription_dir: str = "dialog/transcriptions"
    wav_dir: str = "sentences/wav"
    mocap_dirs: dict = field(
        default_factory=lambda: {
            "facial": "dialog/MOCAP_rotated",
            "hand": "dialog/MOCAP_hand",
            "head": "dialog/MOCAP_head",
        }
    )


@dataclass
class SkipReport:
    entries: list[tuple[str, str]] = field(default_factory=list)

    def add(self, utterance_id: str, reason: str) -> None:
        self.entries.append((utterance_id, reason))

    def __len__(self) -> int:
        return len(self.entries)

    def reasons(self) -> Counter:
        return Counter(reason.split(":")[0] for _, reason in self.entries)

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for utt, reason in self.entries:
                fh.write(f"{utt}\t{reason}\n")
        return path


@dataclass
class _Evaluation:
    utterance_id: str
    start: float
    end: float
    code: str
    votes: Counter = field(default_factory=Counter)


def _parse_evaluation_file(path: Path) -> list[_Evaluation]:
    out: list[_Evaluation] = []
    with open(path, encoding="utf-8", errors="replace") as fh:
        for line in fh:
            line = line.rstrip("\n")
            m = _EVAL_LINE.match(line)
            if m:
                out.append(_Evaluation(m["utt"], float(m["start"]), float(m["end"]), m["code"]))
                continue
            m = _ANNOTATOR_LINE.match(line)
            if m and out:
                for cat in m["cats"].split(";"):
                    cat = cat.strip().lower()
                    if cat and not cat.startswith("("):
                        out[-1].votes[_ANNOTATOR_CODES.get(cat, cat)] += 1
    return out


def _majority(votes: Counter) -> str | None:
    """Most voted category, ``None`` on a tie or without votes."""
    ranked = votes.most_common()
    if not ranked or (len(ranked) > 1 and ranked[0][1] == ranked[1][1]):
        return None
    return ranked[0][0]


def _read_transcripts(path: Path) -> dict[str, str]:
    texts = {}
    if not path.exists():
        return texts
    with open(path, encoding="utf-8", errors="replace") as fh:
        for line in fh:
            m = _TRANSCRIPT_LINE.match(line.strip())
            if m:
                texts[m["utt"]] = m["text"].strip()
    return texts


def _speaker_of(utterance_id: str) -> str:
    # Ses01F_impro01_F000 -> Ses01F: session prefix plus the gender of the turn
    return utterance_id[:5] + utterance_id.rsplit("_", 1)[-1][0]


def _wav_rate(path: Path) -> int:
    with wave.open(str(path), "rb") as w:
        return w.getframerate()


def scan_iemocap(
    corpus_root: str | os.PathLike,
    layout: IemocapLayout | None = None,
    label_rule: str = "consensus",
) -> tuple[DatasetManifest, SkipReport]:
    """Build the 4-class manifest and the report of excluded utterances.

    ``label_rule="consensus"`` uses the categorical label written on each
    evaluation line (``xxx`` means the annotators disagreed);
    ``label_rule="majority"`` recounts the individual evaluator votes and
    drops ties.
    """
    if label_rule not in ("consensus", "majority"):
        raise ValueError(f"unknown label_rule {label_rule!r}")
    layout = layout or IemocapLayout()
    root = Path(corpus_root)

    missing = []
    for n in layout.sessions:
        sdir = root / layout.session_dir.format(n=n)
        for sub in (layout.evaluation_dir, layout.transcription_dir, layout.wav_dir, *layout.mocap_dirs.values()):
            if not (sdir / sub).is_dir():
                missing.append(str(sdir / sub))
    if missing:
        raise IngestError("IEMOCAP corpus incomplete, missing: " + ", ".join(missing))

    records, skips = [], SkipReport()
    for n in layout.sessions:
        sdir = root / layout.session_dir.format(n=n)
        for eval_path in sorted((sdir / layout.evaluation_dir).glob("*.txt")):
            dialog = eval_path.stem
            transcripts = _read_transcripts(sdir / layout.transcription_dir / f"{dialog}.txt")
            mocap = {
                mode: str(p)
                for mode, sub in layout.mocap_dirs.items()
                if (p := sdir / sub / f"{dialog}.txt").is_file()
            }
            for ev in _parse_evaluation_file(eval_path):
                code = ev.code if label_rule == "consensus" else _majority(ev.votes)
                if code is None or code == "xxx":
                    skips.add(ev.utterance_id, "no_majority")
                    continue
                label = map_raw_label(code)
                if label is None:
                    skips.add(ev.utterance_id, f"out_of_schema:{code}")
                    continue
                wav = sdir / layout.wav_dir / dialog / f"{ev.utterance_id}.wav"
                has_wav = wav.is_file()
                records.append(
                    UtteranceRecord(
                        utterance_id=ev.utterance_id,
                        session_id=n,
                        speaker_id=_speaker_of(ev.utterance_id),
                        audio_ref=str(wav) if has_wav else None,
                        sample_rate_hz=_wav_rate(wav) if has_wav else None,
                        transcript=transcripts.get(ev.utterance_id),
                        mocap_refs=dict(mocap) or None,
                        start_time_s=ev.start,
                        end_time_s=ev.end,
                        label=label,
                    )
                )
    manifest = DatasetManifest(tuple(records), "iemocap")
    log.info("IEMOCAP: kept %d utterances, skipped %d %s", len(records), len(skips), dict(skips.reasons()))
    return manifest, skips


def build_iemocap_manifest(
    corpus_root: str | os.PathLike,
    layout: IemocapLayout | None = None,
    label_rule: str = "consensus",
    skip_report_path: str | os.PathLike | None = None,
) -> DatasetManifest:
    manifest, skips = scan_iemocap(corpus_root, layout, label_rule)
    if skip_report_path is not None:
        skips.write(skip_report_path)
    return manifest
