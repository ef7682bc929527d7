"""Session-based cross-validation, accuracy and confusion matrices."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .base import encode_labels
from .dataset import DatasetManifest
from .labels import LABEL_NAMES, N_CLASSES

log = logging.getLogger(__name__)

SCHEMES = ("holdout_session5", "loso_rotating")


@dataclass(frozen=True)
class EvalProtocol:
    """``holdout_session5`` trains on sessions 1-4 and tests on 5;
    ``loso_rotating`` holds out every session once."""

    scheme: str = "holdout_session5"
    seed: int = 0
    train_fraction_expected: float = 0.8

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown protocol scheme {self.scheme!r}; choose from {SCHEMES}")

    @property
    def test_sessions(self) -> tuple[int, ...]:
        return (5,) if self.scheme == "holdout_session5" else (1, 2, 3, 4, 5)

    @property
    def validation_name(self) -> str:
        return "LOSO (session 5 held out)" if self.scheme == "holdout_session5" else "LOSO (5-fold)"


@dataclass(frozen=True)
class Fold:
    fold_id: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def make_folds(manifest: DatasetManifest, protocol: EvalProtocol) -> list[Fold]:
    """Split utterance ids by session; ``fold_id`` is the held-out session.

    Speakers never cross sessions in the corpus, so session-pure folds are
    also speaker independent. Folds with an empty train or test side are
    skipped with a warning.
    """
    folds = []
    for session in protocol.test_sessions:
        test = tuple(r.utterance_id for r in manifest if r.session_id == session)
        train = tuple(r.utterance_id for r in manifest if r.session_id != session)
        if not test or not train:
            log.warning("skipping fold %d: %d train / %d test utterances", session, len(train), len(test))
            continue
        folds.append(Fold(session, train, test))
    return folds


def accuracy(tp: int, tn: int, fp: int, fn: int) -> float:
    """``(TP + TN) / (TP + TN + FP + FN)``."""
    counts = (tp, tn, fp, fn)
    if any(int(c) != c or c < 0 for c in counts):
        raise ValueError("confusion counts must be non-negative integers")
    total = tp + tn + fp + fn
    if total == 0:
        raise ValueError("accuracy is undefined when all counts are zero")
    return (tp + tn) / total


def multiclass_accuracy(preds: Sequence, truths: Sequence) -> float:
    """Fraction of exact matches.

    This is the one-vs-rest binary accuracy micro-averaged over classes,
    which reduces to ``matches / total``.
    """
    p, t = encode_labels(preds), encode_labels(truths)
    if len(p) != len(t):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(t)} truths")
    if len(p) == 0:
        raise ValueError("accuracy of an empty prediction list is undefined")
    return float(np.mean(p == t))


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true labels, columns predictions, in schema order."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (N_CLASSES, N_CLASSES) or (c < 0).any():
            raise ValueError("confusion counts must be a non-negative 4x4 matrix")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def empty_rows(self) -> np.ndarray:
        return self.counts.sum(axis=1) == 0

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)


def confusion(preds: Sequence, truths: Sequence) -> ConfusionMatrix:
    p, t = encode_labels(preds), encode_labels(truths)
    if len(p) != len(t):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(t)} truths")
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def normalize(cm: ConfusionMatrix) -> np.ndarray:
    """Row-normalised matrix; rows of absent classes stay all zero."""
    rows = cm.counts.sum(axis=1, keepdims=True).astype(np.float64)
    return np.divide(cm.counts, rows, out=np.zeros((N_CLASSES, N_CLASSES)), where=rows > 0)


@dataclass(frozen=True)
class FoldResult:
    fold_id: int
    n_train: int
    n_test: int
    accuracy: float
    confusion: ConfusionMatrix


@dataclass(frozen=True)
class EvalReport:
    protocol: EvalProtocol
    per_fold: tuple[FoldResult, ...]
    name: str = "model"
    notes: tuple[str, ...] = field(default=())

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([f.accuracy for f in self.per_fold]))

    @property
    def normalized_matrices(self) -> list[np.ndarray]:
        return [normalize(f.confusion) for f in self.per_fold]


def evaluate_predictions(fold: Fold, preds, truths) -> FoldResult:
    cm = confusion(preds, truths)
    return FoldResult(fold.fold_id, len(fold.train_ids), len(fold.test_ids), multiclass_accuracy(preds, truths), cm)


def round_row(row: np.ndarray, decimals: int = 2) -> np.ndarray:
    """Round a distribution so the rounded entries keep its rounded sum.

    Largest-remainder rounding: floor everything, then hand the missing
    units to the entries with the biggest remainders (lowest index first).
    """
    scale = 10**decimals
    scaled = np.asarray(row, dtype=np.float64) * scale
    floors = np.floor(scaled + 1e-9)
    short = int(round(scaled.sum())) - int(floors.sum())
    order = np.argsort(-(scaled - floors), kind="stable")
    floors[order[: max(short, 0)]] += 1
    return floors / scale


def format_confusion(cm: ConfusionMatrix, title: str = "") -> str:
    norm = normalize(cm)
    width = max(len(n) for n in LABEL_NAMES) + 2
    lines = []
    if title:
        lines.append(title)
    lines.append("true \\ pred".ljust(width) + "".join(n.rjust(width) for n in LABEL_NAMES))
    footnote = False
    for i, name in enumerate(LABEL_NAMES):
        mark = ""
        if cm.empty_rows[i]:
            mark, footnote = " *", True
        vals = round_row(norm[i])
        lines.append(name.ljust(width) + "".join(f"{v:.2f}".rjust(width) for v in vals) + mark)
    lines.append("")
    lines.append("counts:")
    for i, name in enumerate(LABEL_NAMES):
        lines.append(name.ljust(width) + "".join(str(v).rjust(width) for v in cm.counts[i]))
    if footnote:
        lines.append("* no test utterances of this class; row left at zero")
    return "\n".join(lines) + "\n"


def render_report(report: EvalReport, out_dir: str | os.PathLike, plots: bool = False) -> dict[str, Path]:
    """Write ``metrics.csv`` and one ``confusion_<fold>.txt`` per fold.

    File names and contents depend only on the report, so reruns are
    byte-identical. ``plots=True`` adds ``confusion_<fold>.png`` heatmaps.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    metrics = out / "metrics.csv"
    with open(metrics, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold_id", "n_train", "n_test", "accuracy"])
        for f in report.per_fold:
            w.writerow([f.fold_id, f.n_train, f.n_test, f"{f.accuracy:.6f}"])
        w.writerow(
            [
                "mean",
                sum(f.n_train for f in report.per_fold),
                sum(f.n_test for f in report.per_fold),
                f"{report.mean_accuracy:.6f}",
            ]
        )
    paths["metrics"] = metrics
    for f in report.per_fold:
        p = out / f"confusion_{f.fold_id}.txt"
        title = f"{report.name}: fold {f.fold_id}, accuracy {100 * f.accuracy:.2f}% (normalized by true class)"
        p.write_text(format_confusion(f.confusion, title), encoding="utf-8")
        paths[f"confusion_{f.fold_id}"] = p
        if plots:
            paths[f"plot_{f.fold_id}"] = _plot_confusion(f.confusion, out / f"confusion_{f.fold_id}.png", title)
    return paths


def _plot_confusion(cm: ConfusionMatrix, path: Path, title: str) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    norm = normalize(cm)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
    ax.set_xticks(range(N_CLASSES), LABEL_NAMES, rotation=30)
    ax.set_yticks(range(N_CLASSES), LABEL_NAMES)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(N_CLASSES):
        for j in range(N_CLASSES):
            ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center", color="white" if norm[i, j] > 0.5 else "black")
    ax.set_title(title, fontsize=8)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
