import itertools
import logging

import numpy as np
import pytest
import torch

from mmser.encoders import EncoderHandle, HashingTokenizer, majority_vote, prepare_audio, resample
from mmser.heads import SpeechEmotionClassifier, TextEmotionClassifier
from mmser.labels import EmotionLabel

from oracles import vote_oracle


def test_prepare_audio_identity_and_padding():
    x = np.random.default_rng(0).uniform(-1, 1, 246000).astype(np.float32)
    np.testing.assert_array_equal(prepare_audio(x), x)
    short = prepare_audio(x[:123000])
    assert short.shape == (246000,)
    np.testing.assert_array_equal(short[:123000], x[:123000])
    assert not short[123000:].any()


def test_prepare_audio_centre_truncation():
    x = np.arange(10, dtype=np.float32)
    np.testing.assert_array_equal(prepare_audio(x, max_samples=4), [3, 4, 5, 6])


@pytest.mark.parametrize("n", [1, 999, 246000, 300001])
def test_prepare_audio_length_is_fixed(n):
    assert prepare_audio(np.ones(n), 8000).shape == (246000,)


def test_resample_preserves_tone():
    n = 8000
    tone = np.sin(2 * np.pi * 440 * np.arange(n) / 8000)
    up = resample(tone, 8000, 16000)
    assert abs(len(up) - 2 * n) <= 1
    spectrum = np.abs(np.fft.rfft(up))
    freqs = np.fft.rfftfreq(len(up), 1 / 16000)
    assert abs(freqs[np.argmax(spectrum)] - 440) <= 1


def test_all_zero_audio_flagged(caplog):
    with caplog.at_level(logging.WARNING):
        _, flag = prepare_audio(np.zeros(100), return_flag=True)
    assert flag and "all-zero" in caplog.text
    with pytest.raises(ValueError):
        prepare_audio(np.zeros(0))


def test_majority_vote_examples():
    assert majority_vote(["angry", "angry", "sad"]) is EmotionLabel.ANGRY
    assert majority_vote(["neutral", "sad"]) is EmotionLabel.NEUTRAL
    assert majority_vote([3, 2]) is EmotionLabel.ANGRY
    with pytest.raises(ValueError):
        majority_vote([])


def test_majority_vote_exhaustive_to_length_six():
    for n in range(1, 7):
        for seq in itertools.product(range(4), repeat=n):
            assert majority_vote(seq) == vote_oracle(seq)


def test_majority_vote_random_length_101(rng):
    for _ in range(200):
        seq = rng.integers(0, 4, 101).tolist()
        assert majority_vote(seq) == vote_oracle(seq)


def test_tokenizer_truncates_to_max_len():
    tok = HashingTokenizer()
    ids, mask, degenerate = tok(["word " * 300, "two words"], 124)
    assert ids.shape == (2, 124)
    assert mask[0].sum() == 124 and ids[0, 0] == tok.cls_id and ids[0, 123] == tok.sep_id
    assert mask[1].sum() == 4
    assert not degenerate.any()


def test_tokenizer_empty_text_is_single_pad():
    ids, mask, degenerate = HashingTokenizer()(["", "   "], 8)
    assert degenerate.all()
    assert mask[:, 0].tolist() == [1, 1] and not ids.any() and mask.sum() == 2


def test_stand_in_encoders_are_reproducible():
    a = EncoderHandle("speech", "test:tiny-speech").load()
    b = EncoderHandle("speech", "test:tiny-speech").load()
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    with pytest.raises(ValueError):
        EncoderHandle("speech", "test:tiny-text").resolve()
    with pytest.raises(ValueError):
        EncoderHandle("mocap", "x")


def test_registry_resolution():
    h = EncoderHandle("text", "bert-base-uncased")
    assert h.resolve() == "bert-base-uncased"
    assert h.resolve({"bert-base-uncased": "/models/bert"}) == "/models/bert"
    assert EncoderHandle("speech", "wav2vec2-base").resolve() == "facebook/wav2vec2-base"


def _tones(n_per_class=4):
    rng = np.random.default_rng(0)
    t = np.arange(8000) / 16000
    X, y = [], []
    for i in range(4 * n_per_class):
        f = (200, 300, 450, 675)[i % 4]
        X.append((0.5 * np.sin(2 * np.pi * f * t) + 0.05 * rng.standard_normal(8000)).astype(np.float32))
        y.append(i % 4)
    return X, np.array(y)


def test_frozen_encoder_receives_no_updates():
    X, y = _tones(1)
    clf = SpeechEmotionClassifier(freeze_encoder=True, max_samples=8000, epochs=1, learning_rate=0.1)
    enc_before = {k: v.clone() for k, v in EncoderHandle("speech", "test:tiny-speech").load().state_dict().items()}
    clf.fit(X, y)
    head_before = SpeechEmotionClassifier(freeze_encoder=True, max_samples=8000).build().net_.head.state_dict()
    for k, v in clf.net_.backbone.encoder.state_dict().items():
        assert torch.equal(v, enc_before[k]), k
    assert any(not torch.equal(v, head_before[k]) for k, v in clf.net_.head.state_dict().items())


def test_unfrozen_encoder_is_fine_tuned():
    X, y = _tones(1)
    clf = SpeechEmotionClassifier(max_samples=8000, epochs=1, learning_rate=0.1).fit(X, y)
    enc = EncoderHandle("speech", "test:tiny-speech").load().state_dict()
    assert any(not torch.equal(v, enc[k]) for k, v in clf.net_.backbone.encoder.state_dict().items())


def test_speech_head_epochs_zero_and_shapes():
    X, y = _tones(1)
    built = SpeechEmotionClassifier(max_samples=8000).build()
    fitted = SpeechEmotionClassifier(max_samples=8000, epochs=0).fit(X, y)
    assert built.state_hash() == fitted.state_hash()
    assert fitted.predict_proba(X).shape == (4, 4)
    assert fitted.transform(X).shape == (4, 256)


def test_speech_different_seeds_same_shapes():
    X, y = _tones(1)
    a = SpeechEmotionClassifier(max_samples=8000, epochs=2, learning_rate=1e-2, random_state=0).fit(X, y)
    b = SpeechEmotionClassifier(max_samples=8000, epochs=2, learning_rate=1e-2, random_state=1).fit(X, y)
    assert a.history_[-1].loss != b.history_[-1].loss
    assert a.predict_proba(X).shape == b.predict_proba(X).shape


def test_speech_input_rate_is_resampled():
    clf = SpeechEmotionClassifier(max_samples=4000, input_rate_hz=8000).build()
    (batch,) = clf._prepare([np.ones(1000)])
    assert batch.shape == (1, 4000)
    assert batch[0, :1900].abs().min() > 0 and not batch[0, 2100:].any()


def test_text_head_handles_empty_transcript():
    clf = TextEmotionClassifier().build()
    p = clf.predict_proba(["", "a sentence"])
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert clf.degenerate_.tolist() == [True, False]


def test_text_head_truncates_long_transcripts():
    clf = TextEmotionClassifier(max_seq_len=124)
    ids, mask = clf._prepare(["word " * 500])
    assert ids.shape == (1, 124) and int(mask.sum()) == 124
    assert clf.build().predict(["word " * 500]).shape == (1,)


def test_text_overfits_templates_within_50_epochs():
    texts = ["a calm and ordinary day", "this is wonderful news", "stop it right now", "i miss them so much"] * 4
    y = np.arange(16) % 4
    clf = TextEmotionClassifier(learning_rate=1e-3, epochs=50).fit(texts, y)
    assert clf.score(texts, y) == 1.0
