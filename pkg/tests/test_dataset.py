import json

import numpy as np
import pytest

from mmser.dataset import (
    DatasetManifest,
    ManifestError,
    UtteranceRecord,
    class_count_table,
    generate_synthetic,
    load_audio,
    load_manifest,
    load_mocap_streams,
    save_manifest,
)
from mmser.labels import LABEL_NAMES, EmotionLabel, map_raw_label
from mmser.mocap import SUB_MODE_DIMS


def _record(uid="Ses01F_impro01_F000", **kw):
    base = dict(
        utterance_id=uid,
        session_id=1,
        speaker_id="Ses01F",
        audio_ref="a.wav",
        sample_rate_hz=16000,
        transcript="hello",
        mocap_refs=None,
        start_time_s=0.0,
        end_time_s=1.0,
        label="neutral",
    )
    base.update(kw)
    return UtteranceRecord(**base)


def test_label_schema_order():
    assert LABEL_NAMES == ("neutral", "excited", "angry", "sad")
    assert EmotionLabel.parse("Angry") is EmotionLabel.ANGRY
    assert EmotionLabel.parse(3) is EmotionLabel.SAD
    with pytest.raises(ValueError):
        EmotionLabel.parse("fear")


@pytest.mark.parametrize(
    "raw, expected",
    [("hap", EmotionLabel.EXCITED), ("exc", EmotionLabel.EXCITED), ("neu", EmotionLabel.NEUTRAL),
     ("ang", EmotionLabel.ANGRY), ("sad", EmotionLabel.SAD), ("fea", None), ("fru", None), ("xxx", None)],
)
def test_raw_label_mapping(raw, expected):
    assert map_raw_label(raw) is expected


@pytest.mark.parametrize(
    "kw, match",
    [
        (dict(session_id=6), "session_id"),
        (dict(end_time_s=0.0), "end_time_s"),
        (dict(sample_rate_hz=None), "sample_rate_hz"),
        (dict(mocap_refs={"feet": "x"}), "sub-modes"),
        (dict(label="bored"), "unknown emotion"),
    ],
)
def test_record_validation(kw, match):
    with pytest.raises((ManifestError, ValueError), match=match):
        _record(**kw)


def test_availability_mask():
    rec = _record(audio_ref=None, sample_rate_hz=None, mocap_refs={"hand": "h.txt"})
    assert rec.availability == {"speech": False, "text": True, "mocap": True}


def test_manifest_of_four_lines(tmp_path):
    recs = [_record(f"Ses01F_impro01_F00{i}", label=i % 4) for i in range(4)]
    path = save_manifest(DatasetManifest(tuple(recs)), tmp_path / "m.jsonl")
    loaded = load_manifest(path)
    assert len(loaded) == 4
    assert loaded.class_counts == {"neutral": 1, "excited": 1, "angry": 1, "sad": 1}
    # relative refs resolve against the manifest directory
    assert loaded.records[0].audio_ref == str(tmp_path / "a.wav")


def test_duplicate_id_rejected(tmp_path):
    line = json.dumps(_record().to_json())
    p = tmp_path / "m.jsonl"
    p.write_text(line + "\n" + line + "\n")
    with pytest.raises(ManifestError, match="duplicate utterance_id"):
        load_manifest(p)


def test_malformed_line_names_line_number(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps(_record().to_json()) + "\n{not json\n")
    with pytest.raises(ManifestError, match=r"m\.jsonl:2"):
        load_manifest(p)


def test_class_counts_are_recomputed():
    m = generate_synthetic(3, 1)
    assert m.class_counts == {name: 3 for name in LABEL_NAMES}
    assert "total 12" in class_count_table(m)


def test_synthetic_contract():
    m = generate_synthetic(2, 7)
    assert len(m) == 8
    assert [int(r.label) for r in m] == [0, 1, 2, 3] * 2
    assert m.ids == generate_synthetic(2, 7).ids
    assert m.source == "synthetic"
    assert {r.session_id for r in generate_synthetic(5, 0)} == {1, 2, 3, 4, 5}


def test_synthetic_manifest_bytes_are_reproducible(tmp_path):
    a = save_manifest(generate_synthetic(2, 7), tmp_path / "a.jsonl").read_bytes()
    b = save_manifest(generate_synthetic(2, 7), tmp_path / "b.jsonl").read_bytes()
    c = save_manifest(generate_synthetic(2, 8), tmp_path / "c.jsonl").read_bytes()
    assert a == b
    assert a != c


def test_synthetic_round_trip_keeps_payloads(tmp_path):
    m = generate_synthetic(1, 3)
    loaded = load_manifest(save_manifest(m, tmp_path / "s.jsonl"))
    assert loaded.source == "synthetic"
    for a, b in zip(m, loaded):
        assert a == b
        np.testing.assert_array_equal(load_audio(a)[0], load_audio(b)[0])


def test_synthetic_payloads_are_deterministic_and_shaped():
    rec = generate_synthetic(1, 0).records[2]
    wave1, rate = load_audio(rec)
    wave2, _ = load_audio(rec)
    assert rate == 16000
    np.testing.assert_array_equal(wave1, wave2)
    assert abs(len(wave1) - (rec.end_time_s - rec.start_time_s) * 16000) <= 1
    streams = load_mocap_streams(rec)
    for mode, stream in streams.items():
        assert stream.values.shape[1] == SUB_MODE_DIMS[mode]
        assert stream.timestamps[0] >= rec.start_time_s
        assert stream.timestamps[-1] <= rec.end_time_s


def test_missing_audio_raises():
    rec = _record(audio_ref=None, sample_rate_hz=None)
    with pytest.raises(ManifestError):
        load_audio(rec)
