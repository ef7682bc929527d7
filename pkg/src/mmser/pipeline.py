"""Run configuration, artifact layout and the per-fold train/embed/fuse/eval steps.

Every step reads only files under the artifact directory (plus the manifest
payloads), so the command-line steps compose: ``train`` writes checkpoints,
``embed`` reads them and fills the embedding cache, ``fuse`` reads the cache
and ``eval`` reads checkpoints and cache.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .base import ConfigError, TorchClassifier, TrainingError
from .checkpoint import file_sha256, load_checkpoint, read_metadata, save_checkpoint, write_training_log
from .dataset import DatasetManifest, load_audio, load_manifest, load_mocap_streams
from .embeddings import EMBEDDING_MODALITIES, EmbeddingCache, extract_embeddings
from .encoders import SAMPLE_RATE_HZ, resample
from .evaluation import EvalProtocol, EvalReport, Fold, evaluate_predictions, make_folds, render_report
from .fusion import FUSION_SUBSETS, FusionClassifier, ModalitySubset, mef_matrix
from .heads import SpeechEmotionClassifier, TextEmotionClassifier
from .mocap import MoCapFeaturizer, MoCapSample
from .mocap_net import MoCapClassifier

log = logging.getLogger(__name__)

ESTIMATOR_FOR = {
    "speech": SpeechEmotionClassifier,
    "text": TextEmotionClassifier,
    "mocap": MoCapClassifier,
    "fusion": FusionClassifier,
}

# Desk-scale settings used with the stand-in encoders: small enough for a
# CPU-only run, with learning rates raised so few epochs suffice.
TEST_MODE_PROFILE = {
    "speech": {
        "encoder": "test:tiny-speech",
        "max_samples": 20000,
        "learning_rate": 1e-2,
        "momentum": 0.9,
        "epochs": 40,
    },
    "text": {"encoder": "test:tiny-text", "learning_rate": 1e-3, "epochs": 40},
    "mocap": {"n_filters": 16, "learning_rate": 1e-3, "epochs": 100},
    "fusion": {"learning_rate": 1e-3, "epochs": 100},
}

MODEL_NAMES = {
    "speech": "Sp-Wav2Vec",
    "text": "Tx-BERT",
    "mocap": "MC-Conv-LSTM-Attention",
    "Sp+Tx": "W2V-BERT",
    "Sp+MC": "W2V-CLA",
    "Tx+MC": "BERT-CLA",
    "Sp+Tx+MC": "W2V-BERT-CLA",
}


class MissingArtifactError(FileNotFoundError):
    """An upstream artifact is absent; ``producer`` names the command that makes it."""

    def __init__(self, what: str, path, producer: str):
        self.producer = producer
        super().__init__(f"missing {what}: {path} (run `mmser {producer}` first)")

    def __str__(self):
        return self.args[0]


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class RunConfig:
    artifact_dir: str = "artifacts"
    manifest_path: str | None = None
    seed: int = 0
    test_mode: bool = False
    protocol: str = "holdout_session5"
    subsets: list[str] = field(default_factory=lambda: [s.name for s in FUSION_SUBSETS])
    plots: bool = False
    speech: dict = field(default_factory=dict)
    text: dict = field(default_factory=dict)
    mocap: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)

    def with_overrides(self, overrides: Sequence[str]) -> "RunConfig":
        """Apply ``key=value`` overrides; dotted keys reach into modality sections."""
        data = copy.deepcopy(asdict(self))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            value = yaml.safe_load(raw)
            parts = key.strip().replace("-", "_").split(".")
            target = data
            for p in parts[:-1]:
                if not isinstance(target.get(p), dict):
                    raise ConfigError(f"override {key!r}: {p!r} is not a section")
                target = target[p]
            if len(parts) == 1 and parts[0] not in data:
                raise ConfigError(f"unknown config key {parts[0]!r}")
            target[parts[-1]] = value
        return RunConfig.from_dict(data)

    def validate(self):
        try:
            EvalProtocol(self.protocol, int(self.seed))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        for s in self.subsets:
            try:
                sub = ModalitySubset.parse(s)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            if not sub.is_fusion:
                raise ConfigError(f"fusion subset {s!r} needs at least two modalities")
        for name, cls in ESTIMATOR_FOR.items():
            section = getattr(self, name)
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            reserved = {"random_state", "subset"} & set(section)
            bad = sorted((set(section) - set(cls().get_params())) | reserved)
            if bad:
                raise ConfigError(
                    f"{name}: unsupported settings {', '.join(bad)} (random_state follows 'seed', subsets are top-level)"
                )
        MoCapClassifier(**self.estimator_params("mocap")).config  # surfaces topology errors early

    @property
    def eval_protocol(self) -> EvalProtocol:
        return EvalProtocol(self.protocol, int(self.seed))

    @property
    def fusion_subsets(self) -> list[ModalitySubset]:
        return [ModalitySubset.parse(s) for s in self.subsets]

    @property
    def artifacts(self) -> "Artifacts":
        return Artifacts(Path(self.artifact_dir))

    @property
    def resolved_manifest_path(self) -> Path:
        return Path(self.manifest_path) if self.manifest_path else self.artifacts.manifest

    def estimator_params(self, name: str) -> dict:
        params = dict(TEST_MODE_PROFILE[name]) if self.test_mode else {}
        params.update(getattr(self, name))
        params["random_state"] = int(self.seed)
        for key in ("dense_widths", "head_widths"):
            if key in params:
                params[key] = tuple(params[key])
        return params

    def make_estimator(self, name: str) -> TorchClassifier:
        return ESTIMATOR_FOR[name](**self.estimator_params(name))

    def hash(self) -> str:
        """Digest of everything that influences results (paths excluded)."""
        payload = {k: v for k, v in asdict(self).items() if k not in ("artifact_dir", "manifest_path", "plots")}
        payload["resolved"] = {name: self.estimator_params(name) for name in ESTIMATOR_FOR}
        blob = json.dumps(payload, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.hash(), "seed": int(self.seed), "toolkit_version": __version__}


@dataclass(frozen=True)
class Artifacts:
    """``manifests/``, ``checkpoints/fold<k>/``, ``embeddings/`` and ``reports/``."""

    root: Path

    @property
    def manifest(self) -> Path:
        return self.root / "manifests" / "manifest.jsonl"

    def checkpoint(self, fold_id: int, name: str) -> Path:
        return self.root / "checkpoints" / f"fold{fold_id}" / f"{name}.safetensors"

    def training_log(self, fold_id: int, name: str) -> Path:
        return self.root / "checkpoints" / f"fold{fold_id}" / f"{name}.log.csv"

    @property
    def embeddings(self) -> Path:
        return self.root / "embeddings"

    def report(self, name: str) -> Path:
        return self.root / "reports" / name


def fusion_ckpt_name(subset: ModalitySubset) -> str:
    return "fusion_" + subset.name.replace("+", "-")


def write_meta(path: Path, meta: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def require_manifest(cfg: RunConfig) -> DatasetManifest:
    path = cfg.resolved_manifest_path
    if not path.is_file():
        raise MissingArtifactError("manifest", path, "ingest")
    return load_manifest(path)


# --------------------------------------------------------------------------
# modality inputs
# --------------------------------------------------------------------------

class InputLoader:
    """Per-utterance model inputs, computed once and memoised.

    Speech is resampled to 16 kHz here so that records with different
    native rates can share a batch.
    """

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._memo: dict[tuple[str, str], object] = {}
        self._featurizer = MoCapFeaturizer().fit()

    def available(self, modality: str, ids: Sequence[str]) -> list[str]:
        return [i for i in ids if self.manifest[i].availability[modality]]

    def _one(self, modality: str, uid: str):
        key = (modality, uid)
        if key not in self._memo:
            rec = self.manifest[uid]
            if modality == "speech":
                wave, rate = load_audio(rec)
                self._memo[key] = resample(wave, rate, SAMPLE_RATE_HZ) if rate != SAMPLE_RATE_HZ else wave
            elif modality == "text":
                self._memo[key] = rec.transcript
            else:
                sample = MoCapSample(load_mocap_streams(rec), rec.start_time_s, rec.end_time_s)
                self._memo[key] = self._featurizer.transform_one(sample).values.astype(np.float32)
        return self._memo[key]

    def get(self, modality: str, ids: Sequence[str]):
        items = [self._one(modality, i) for i in ids]
        return np.stack(items) if modality == "mocap" else items


# --------------------------------------------------------------------------
# steps
# --------------------------------------------------------------------------

def train_unimodal(cfg: RunConfig, manifest: DatasetManifest, fold: Fold, modality: str, loader: InputLoader):
    ids = loader.available(modality, fold.train_ids)
    if not ids:
        raise TrainingError(f"fold {fold.fold_id}: no training utterances with {modality}")
    model = cfg.make_estimator(modality)
    if modality == "speech":
        model.set_params(input_rate_hz=SAMPLE_RATE_HZ)
    model.fit(loader.get(modality, ids), manifest.labels(ids))
    train_acc = float(model.score(loader.get(modality, ids), manifest.labels(ids)))
    arts = cfg.artifacts
    extra = {**cfg.provenance(), "fold": fold.fold_id, "state_hash": model.state_hash(), "train_ids": len(ids)}
    path = save_checkpoint(model, arts.checkpoint(fold.fold_id, modality), extra)
    write_training_log(model, arts.training_log(fold.fold_id, modality))
    return model, path, train_acc


def _load_model(cfg: RunConfig, fold_id: int, name: str, producer: str):
    path = cfg.artifacts.checkpoint(fold_id, name)
    if not path.is_file():
        raise MissingArtifactError(f"{name} checkpoint for fold {fold_id}", path, producer)
    return load_checkpoint(path), path


def embed_unimodal(cfg: RunConfig, fold: Fold, modality: str, loader: InputLoader) -> int:
    """Fill the embedding cache for every utterance of the fold; returns the count."""
    model, path = _load_model(cfg, fold.fold_id, modality, f"train --modality {modality}")
    ids = loader.available(modality, fold.train_ids + fold.test_ids)
    cache = EmbeddingCache(cfg.artifacts.embeddings)
    inputs = _LazyInputs(loader, modality, ids)
    vecs = extract_embeddings(model, inputs, ids, modality, cache)
    state = read_metadata(path)["state_hash"]
    write_meta(
        cache.root / modality / state[:16] / "provenance.json",
        {**cfg.provenance(), "checkpoint": str(path.relative_to(cfg.artifacts.root)), "n": len(vecs)},
    )
    return len(vecs)


class _LazyInputs:
    """Index-compatible view so that cached utterances are never loaded."""

    def __init__(self, loader: InputLoader, modality: str, ids: Sequence[str]):
        self.loader, self.modality, self.ids = loader, modality, list(ids)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        return self.loader.get(self.modality, [self.ids[i]])[0]


def cached_embeddings(cfg: RunConfig, fold_id: int, modality: str, ids: Sequence[str]) -> np.ndarray:
    path = cfg.artifacts.checkpoint(fold_id, modality)
    if not path.is_file():
        raise MissingArtifactError(f"{modality} checkpoint for fold {fold_id}", path, f"train --modality {modality}")
    state = read_metadata(path)["state_hash"]
    cache = EmbeddingCache(cfg.artifacts.embeddings)
    rows = []
    for uid in ids:
        vec = cache.get(uid, modality, state)
        if vec is None:
            raise MissingArtifactError(f"{modality} embedding of {uid}", cache.path_for(uid, modality, state), "embed")
        rows.append(vec.values)
    return np.stack(rows)


def fusion_ids(loader: InputLoader, subset: ModalitySubset, ids: Sequence[str]) -> list[str]:
    keep = list(ids)
    for m in subset:
        keep = loader.available(m, keep)
    return keep


def train_fusion(cfg: RunConfig, manifest: DatasetManifest, fold: Fold, subset: ModalitySubset, loader: InputLoader):
    """Fit a fusion head on cached embeddings and check the unimodal checkpoints stayed put."""
    ids = fusion_ids(loader, subset, fold.train_ids)
    if not ids:
        raise TrainingError(f"fold {fold.fold_id}: no training utterances with all of {subset.name}")
    members = [cfg.artifacts.checkpoint(fold.fold_id, m) for m in subset]
    before = {p: file_sha256(p) for p in members if p.is_file()}
    X, layout = mef_matrix({m: cached_embeddings(cfg, fold.fold_id, m, ids) for m in subset}, subset)
    model = cfg.make_estimator("fusion").set_params(subset=subset.members)
    model.fit(X, manifest.labels(ids))
    after = {p: file_sha256(p) for p in members}
    if before != after:
        raise TrainingError(f"unimodal checkpoints changed during {subset.name} fusion training")
    train_acc = float(model.score(X, manifest.labels(ids)))
    extra = {
        **cfg.provenance(),
        "fold": fold.fold_id,
        "state_hash": model.state_hash(),
        "layout": {k: list(v) for k, v in layout.items()},
        "member_sha256": {p.name: h for p, h in sorted(after.items())},
    }
    name = fusion_ckpt_name(subset)
    path = save_checkpoint(model, cfg.artifacts.checkpoint(fold.fold_id, name), extra)
    write_training_log(model, cfg.artifacts.training_log(fold.fold_id, name))
    return model, path, train_acc


def predict_fold(cfg: RunConfig, manifest: DatasetManifest, fold: Fold, target: str, loader: InputLoader):
    """``(test ids, predictions)`` for a unimodal name or a fusion subset name."""
    if target in EMBEDDING_MODALITIES:
        model, _ = _load_model(cfg, fold.fold_id, target, f"train --modality {target}")
        ids = loader.available(target, fold.test_ids)
        if not ids:
            return ids, np.zeros(0, dtype=np.int64)
        return ids, model.predict(loader.get(target, ids))
    subset = ModalitySubset.parse(target)
    model, _ = _load_model(cfg, fold.fold_id, fusion_ckpt_name(subset), f"fuse --subset {subset.name}")
    ids = fusion_ids(loader, subset, fold.test_ids)
    if not ids:
        return ids, np.zeros(0, dtype=np.int64)
    X, _ = mef_matrix({m: cached_embeddings(cfg, fold.fold_id, m, ids) for m in subset}, subset)
    return ids, model.predict(X)


def evaluate(cfg: RunConfig, manifest: DatasetManifest, target: str, loader: InputLoader | None = None) -> EvalReport:
    loader = loader or InputLoader(manifest)
    target = target if target in EMBEDDING_MODALITIES else ModalitySubset.parse(target).name
    results, notes = [], []
    for fold in make_folds(manifest, cfg.eval_protocol):
        ids, preds = predict_fold(cfg, manifest, fold, target, loader)
        if not ids:
            notes.append(f"fold {fold.fold_id}: no test utterances with {target}")
            continue
        if len(ids) < len(fold.test_ids):
            notes.append(f"fold {fold.fold_id}: {len(fold.test_ids) - len(ids)} test utterances lack {target}")
        sub = Fold(fold.fold_id, fold.train_ids, tuple(ids))
        results.append(evaluate_predictions(sub, preds, manifest.labels(ids)))
    if not results:
        raise TrainingError(f"no fold could be evaluated for {target}")
    return EvalReport(cfg.eval_protocol, tuple(results), MODEL_NAMES[target], tuple(notes))


def write_report(cfg: RunConfig, manifest: DatasetManifest, report: EvalReport, name: str) -> dict:
    out = cfg.artifacts.report(name)
    paths = render_report(report, out, plots=cfg.plots)
    meta = {**cfg.provenance(), "model": report.name, "protocol": cfg.protocol, "notes": list(report.notes)}
    meta["manifest_sha256"] = file_sha256(cfg.resolved_manifest_path) if cfg.resolved_manifest_path.is_file() else None
    paths["meta"] = write_meta(out / "metrics.meta.json", meta)
    return paths


def report_name(target: str) -> str:
    return target if target in EMBEDDING_MODALITIES else "fusion_" + ModalitySubset.parse(target).name.replace("+", "-")


# --------------------------------------------------------------------------
# combination study
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyRow:
    model: str
    modality: str
    validation: str
    accuracy: float


@dataclass(frozen=True)
class StudyReport:
    rows: tuple[StudyRow, ...]
    reports: dict

    def to_csv(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["Model", "Modality", "Validation", "Accuracy"])
            for r in self.rows:
                w.writerow([r.model, r.modality, r.validation, f"{100 * r.accuracy:.2f}"])
        return path

    def to_text(self) -> str:
        header = ("Model", "Modality", "Validation", "Accuracy(%)")
        body = [(r.model, r.modality, r.validation, f"{100 * r.accuracy:.2f}") for r in self.rows]
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(4)]
        fmt = lambda row: "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()  # noqa: E731
        sep = "  ".join("-" * w for w in widths)
        return "\n".join([fmt(header), sep, *map(fmt, body)]) + "\n"


@contextmanager
def step_context(label: str):
    """Prefix training/config errors with the step they come from."""
    try:
        yield
    except (TrainingError, ConfigError) as exc:
        raise type(exc)(f"{label}: {exc}") from exc


def run_all_steps(cfg: RunConfig, manifest: DatasetManifest, subsets: Sequence[ModalitySubset], loader=None) -> None:
    """Train, embed and fuse every fold of the configured protocol."""
    loader = loader or InputLoader(manifest)
    needed = [m for m in EMBEDDING_MODALITIES if any(m in s for s in subsets)] or list(EMBEDDING_MODALITIES)
    for fold in make_folds(manifest, cfg.eval_protocol):
        for m in needed:
            with step_context(f"fold {fold.fold_id} {m}"):
                train_unimodal(cfg, manifest, fold, m, loader)
                embed_unimodal(cfg, fold, m, loader)
        for s in subsets:
            with step_context(f"fold {fold.fold_id} {s.name}"):
                train_fusion(cfg, manifest, fold, s, loader)


def run_combination_study(
    manifest: DatasetManifest,
    subsets: Sequence = FUSION_SUBSETS,
    protocol: EvalProtocol | None = None,
    config: RunConfig | None = None,
) -> StudyReport:
    """Unimodal rows for every modality, then one row per fusion subset.

    Sub-models are trained in-run under ``config.artifact_dir``; failures
    are re-raised with the row they belong to.
    """
    cfg = copy.deepcopy(config) if config is not None else RunConfig(test_mode=True)
    if protocol is not None:
        cfg.protocol, cfg.seed = protocol.scheme, protocol.seed
    subsets = [ModalitySubset.parse(s) for s in subsets]
    loader = InputLoader(manifest)
    run_all_steps(cfg, manifest, subsets, loader)
    rows, reports = [], {}
    for target in [*EMBEDDING_MODALITIES, *(s.name for s in subsets)]:
        with step_context(target):
            report = evaluate(cfg, manifest, target, loader)
        reports[target] = report
        rows.append(StudyRow(MODEL_NAMES[target], _modality_label(target), cfg.eval_protocol.validation_name, report.mean_accuracy))
    return StudyReport(tuple(rows), reports)


def _modality_label(target: str) -> str:
    if target in EMBEDDING_MODALITIES:
        return {"speech": "Sp", "text": "Tx", "mocap": "MC"}[target]
    return target
