"""Motion-capture preprocessing.

Raw per-utterance streams (facial markers, hand markers, head rotation) are
windowed to the utterance span, split into 200 equal-duration time bins and
averaged per bin, giving one ``(200, d)`` matrix per sub-mode. The three
matrices are concatenated column-wise into the ``(200, 189)`` network input.
"""

from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

SUB_MODES = ("facial", "hand", "head")
SUB_MODE_DIMS = {"facial": 165, "hand": 18, "head": 6}
N_PARTITIONS = 200
COMBINED_DIM = sum(SUB_MODE_DIMS.values())


class ShapeError(ValueError):
    pass


def sub_mode_layout(modes: Sequence[str] = SUB_MODES) -> dict[str, tuple[int, int]]:
    """Column span of each sub-mode in the concatenated matrix."""
    layout, start = {}, 0
    for mode in modes:
        layout[mode] = (start, start + SUB_MODE_DIMS[mode])
        start += SUB_MODE_DIMS[mode]
    return layout


@dataclass(frozen=True)
class SubModeStream:
    """Time-stamped frames of one sub-mode; NaN marks a dropped marker."""

    sub_mode: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.sub_mode not in SUB_MODE_DIMS:
            raise ValueError(f"unknown sub-mode {self.sub_mode!r}")
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        vals = np.asarray(self.values, dtype=np.float64)
        dim = SUB_MODE_DIMS[self.sub_mode]
        if vals.size == 0:
            vals = vals.reshape(0, dim)
        if vals.ndim != 2 or vals.shape[1] != dim:
            raise ShapeError(f"{self.sub_mode}: expected frames of width {dim}, got shape {vals.shape}")
        if vals.shape[0] != ts.shape[0]:
            raise ShapeError(f"{self.sub_mode}: {ts.shape[0]} timestamps for {vals.shape[0]} frames")
        if not np.all(np.isfinite(ts)):
            raise ValueError(f"{self.sub_mode}: non-finite timestamps")
        if ts.size > 1 and np.any(np.diff(ts) < 0):
            raise ValueError(f"{self.sub_mode}: timestamps must be non-decreasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)

    @property
    def feature_dim(self) -> int:
        return SUB_MODE_DIMS[self.sub_mode]

    def __len__(self) -> int:
        return self.timestamps.shape[0]


@dataclass(frozen=True)
class MoCapTensor:
    values: np.ndarray
    layout: Mapping[str, tuple[int, int]] = field(default_factory=dict)
    imputed: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ShapeError(f"MoCap tensor must be 2-D, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("MoCap tensor contains NaN or Inf")
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def impute_missing_markers(stream: SubModeStream) -> SubModeStream:
    """Fill NaN entries column by column.

    Interior gaps are linearly interpolated over the timestamps, edge gaps
    hold the nearest valid value and an all-NaN column becomes zeros.
    """
    values = stream.values.copy()
    if values.shape[0] == 0:
        return stream
    t = stream.timestamps
    missing = np.isnan(values)
    for j in np.flatnonzero(missing.any(axis=0)):
        ok = ~missing[:, j]
        if not ok.any():
            values[:, j] = 0.0
        else:
            values[~ok, j] = np.interp(t[~ok], t[ok], values[ok, j])
    return SubModeStream(stream.sub_mode, t, values)


def partition_average(
    stream: SubModeStream,
    start_time_s: float,
    end_time_s: float,
    n_partitions: int = N_PARTITIONS,
) -> MoCapTensor:
    """Average the frames of ``[start, end]`` into equal-duration bins.

    Frame at time ``t`` falls in bin ``floor((t - start) * n / (end - start))``
    (the frame at ``end`` joins the last bin). Empty bins copy the previous
    nonempty bin; leading empty bins copy the first nonempty one. A window
    without frames yields zeros and ``imputed=True``.
    """
    if not end_time_s > start_time_s:
        raise ValueError("end_time_s must exceed start_time_s")
    if n_partitions < 1:
        raise ValueError("n_partitions must be >= 1")
    if np.isnan(stream.values).any():
        raise ValueError(f"{stream.sub_mode}: stream has missing markers, run impute_missing_markers first")
    dim = stream.feature_dim
    layout = {stream.sub_mode: (0, dim)}
    t = stream.timestamps
    inside = (t >= start_time_s) & (t <= end_time_s)
    if not inside.any():
        return MoCapTensor(np.zeros((n_partitions, dim)), layout, imputed=True)

    rel = (t[inside] - start_time_s) * n_partitions / (end_time_s - start_time_s)
    bins = np.minimum(np.floor(rel).astype(np.int64), n_partitions - 1)
    sums = np.zeros((n_partitions, dim))
    np.add.at(sums, bins, stream.values[inside])
    counts = np.bincount(bins, minlength=n_partitions)
    filled = counts > 0
    out = np.zeros_like(sums)
    out[filled] = sums[filled] / counts[filled, None]

    # index of the nearest nonempty bin at or before each bin, first nonempty for the prefix
    src = np.where(filled, np.arange(n_partitions), -1)
    src = np.maximum.accumulate(src)
    src[src < 0] = np.flatnonzero(filled)[0]
    return MoCapTensor(out[src], layout, imputed=False)


def combine_sub_modes(
    facial: MoCapTensor | None,
    hand: MoCapTensor | None,
    head: MoCapTensor | None,
    n_partitions: int = N_PARTITIONS,
) -> MoCapTensor:
    """Concatenate facial | hand | head columns into one matrix.

    A ``None`` sub-mode is replaced by zeros of the right width and the
    result is flagged ``imputed``.
    """
    parts = []
    imputed = False
    for mode, tensor in zip(SUB_MODES, (facial, hand, head)):
        width = SUB_MODE_DIMS[mode]
        if tensor is None:
            parts.append(np.zeros((n_partitions, width)))
            imputed = True
            continue
        if tensor.shape != (n_partitions, width):
            raise ShapeError(
                f"sub-mode {mode!r}: expected shape {(n_partitions, width)}, got {tensor.shape}"
            )
        parts.append(tensor.values)
        imputed = imputed or tensor.imputed
    return MoCapTensor(np.concatenate(parts, axis=1), sub_mode_layout(), imputed=imputed)


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

_SPLIT = re.compile(r"[,\s;]+")


def read_stream(path: str | os.PathLike, sub_mode: str) -> SubModeStream:
    """Parse a delimited stream file.

    Rows are ``timestamp, v1, ..., vd``; ``NaN`` marks a missing marker.
    Header lines (first token not numeric) are skipped, and rows with one
    extra leading column, as in corpus files that start with a frame
    counter, have that column dropped.
    """
    dim = SUB_MODE_DIMS[sub_mode]
    times, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = [tok for tok in _SPLIT.split(line.strip()) if tok]
            if not tokens:
                continue
            try:
                nums = [float(tok) for tok in tokens]
            except ValueError:
                if rows:
                    raise ValueError(f"{path}:{lineno}: non-numeric value in data row") from None
                continue
            if len(nums) == dim + 2:
                nums = nums[1:]
            if len(nums) != dim + 1:
                raise ShapeError(f"{path}:{lineno}: expected {dim + 1} columns, found {len(nums)}")
            times.append(nums[0])
            rows.append(nums[1:])
    return SubModeStream(sub_mode, np.array(times), np.array(rows).reshape(-1, dim))


def write_stream(path: str | os.PathLike, stream: SubModeStream) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for t, row in zip(stream.timestamps, stream.values):
            fh.write(",".join([repr(float(t))] + ["NaN" if np.isnan(v) else repr(float(v)) for v in row]) + "\n")
    return path


_TENSOR_MAGIC = b"MMSERT1\n"


def save_tensor(path: str | os.PathLike, utterance_id: str, tensor: MoCapTensor) -> Path:
    """Write ``magic | u32 header length | JSON header | row-major float32``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(
        {
            "utterance_id": utterance_id,
            "shape": list(tensor.shape),
            "layout": {k: list(v) for k, v in tensor.layout.items()},
            "imputed": bool(tensor.imputed),
        },
        sort_keys=True,
    ).encode("utf-8")
    payload = np.ascontiguousarray(tensor.values, dtype="<f4").tobytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_TENSOR_MAGIC + struct.pack("<I", len(header)) + header + payload)
    os.replace(tmp, path)
    return path


def load_tensor(path: str | os.PathLike) -> tuple[str, MoCapTensor]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_TENSOR_MAGIC):
        raise ValueError(f"{path}: not a MoCap tensor file")
    off = len(_TENSOR_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    header = json.loads(raw[off + 4 : off + 4 + hlen].decode("utf-8"))
    values = np.frombuffer(raw, dtype="<f4", offset=off + 4 + hlen).reshape(header["shape"])
    layout = {k: tuple(v) for k, v in header["layout"].items()}
    return header["utterance_id"], MoCapTensor(values.astype(np.float64), layout, header["imputed"])


# --------------------------------------------------------------------------
# estimator wrapper
# --------------------------------------------------------------------------

class MoCapSample(NamedTuple):
    streams: Mapping[str, SubModeStream | None]
    start_time_s: float
    end_time_s: float


class MoCapFeaturizer(TransformerMixin, BaseEstimator):
    """Turn raw sub-mode streams into partition-averaged matrices.

    Stateless: ``fit`` only validates parameters. ``transform`` returns an
    array of shape ``(n_samples, n_partitions, width)`` where ``width`` is
    the summed width of ``sub_modes``; ``imputed_`` records which samples
    needed zero-filling.
    """

    def __init__(self, sub_modes=SUB_MODES, n_partitions=N_PARTITIONS, impute=True):
        self.sub_modes = sub_modes
        self.n_partitions = n_partitions
        self.impute = impute

    def fit(self, X=None, y=None):
        unknown = [m for m in self.sub_modes if m not in SUB_MODE_DIMS]
        if unknown or not self.sub_modes:
            raise ValueError(f"invalid sub_modes {self.sub_modes!r}")
        self.layout_ = sub_mode_layout(self.sub_modes)
        self.n_features_out_ = sum(SUB_MODE_DIMS[m] for m in self.sub_modes)
        return self

    def transform_one(self, sample: MoCapSample) -> MoCapTensor:
        tensors = {}
        for mode in SUB_MODES:
            stream = sample.streams.get(mode)
            if stream is None:
                tensors[mode] = None
                continue
            if self.impute:
                stream = impute_missing_markers(stream)
            tensors[mode] = partition_average(stream, sample.start_time_s, sample.end_time_s, self.n_partitions)
        if tuple(self.sub_modes) == SUB_MODES:
            return combine_sub_modes(tensors["facial"], tensors["hand"], tensors["head"], self.n_partitions)
        parts, imputed = [], False
        for mode in self.sub_modes:
            t = tensors[mode]
            if t is None:
                parts.append(np.zeros((self.n_partitions, SUB_MODE_DIMS[mode])))
                imputed = True
            else:
                parts.append(t.values)
                imputed = imputed or t.imputed
        return MoCapTensor(np.concatenate(parts, axis=1), sub_mode_layout(self.sub_modes), imputed)

    def transform(self, X):
        if not hasattr(self, "layout_"):
            self.fit()
        out = np.empty((len(X), self.n_partitions, self.n_features_out_), dtype=np.float64)
        flags = []
        for i, sample in enumerate(X):
            tensor = self.transform_one(MoCapSample(*sample))
            out[i] = tensor.values
            flags.append(tensor.imputed)
        self.imputed_ = np.array(flags, dtype=bool)
        return out
