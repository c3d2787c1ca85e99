"""Tests for the autoregressive acoustic model and toy linguistic features."""

import numpy as np
import pytest

from spoofbench.corpus import synthesize_toy_utterance
from spoofbench.dsp import FeatureMatrix, MelConfig, Waveform, mel_spectrogram
from spoofbench.nn.checkpoint import ParameterSet
from spoofbench.tts import (ArModelConfig, alignment_seconds_to_frames, ar_forward,
                            synthesize_mel, toy_linguistic_frames, train_acoustic,
                            LINGUISTIC_DIMS, PHONES)

RNG = np.random.default_rng(71)
SR = 8000

TINY = ArModelConfig(ff_widths=(12, 12), bilstm_width=6, unilstm_width=12,
                     mel_bands=5, iterations=10, seed=0)


def random_ling(n_frames, condition="original"):
    if n_frames < 2:
        return toy_linguistic_frames("a", [("a", 0, n_frames)], condition)
    spans = [("a", 0, n_frames // 2), ("b", n_frames // 2, n_frames)]
    return toy_linguistic_frames("ab", spans, condition)


def tiny_pair(n_frames=20, seed=0):
    rng = np.random.default_rng(seed)
    ling = random_ling(n_frames)
    mel = FeatureMatrix(rng.standard_normal((n_frames, TINY.mel_bands)), 0.016, "mel")
    return ling, mel


# ---------------------------------------------------------------------------
# Toy linguistic featurizer
# ---------------------------------------------------------------------------


class TestLinguisticFrames:
    def test_one_hot_layout(self):
        spans = [("a", 0, 5), ("b", 5, 10)]
        feat = toy_linguistic_frames("ab", spans, "original")
        a_idx, b_idx = PHONES.index("a"), PHONES.index("b")
        assert np.all(feat.values[:5, a_idx] == 1.0)
        assert np.all(feat.values[5:, b_idx] == 1.0)
        assert np.all(feat.values[:5, b_idx] == 0.0)
        assert feat.dims == LINGUISTIC_DIMS

    def test_within_phone_position_endpoints(self):
        spans = [("c", 0, 8)]
        feat = toy_linguistic_frames("c", spans, "original")
        pos = feat.values[:, len(PHONES)]
        assert pos[0] == 0.0 and pos[-1] == 1.0

    def test_condition_column_isolated(self):
        spans = [("a", 0, 6)]
        f0 = toy_linguistic_frames("a", spans, "original")
        f1 = toy_linguistic_frames("a", spans, "enhanced:all")
        diff = np.flatnonzero(np.any(f0.values != f1.values, axis=0))
        assert diff.tolist() == [LINGUISTIC_DIMS - 1]

    def test_gap_rejected(self):
        with pytest.raises(ValueError, match="tile"):
            toy_linguistic_frames("ab", [("a", 0, 4), ("b", 5, 8)], "original")

    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="tile"):
            toy_linguistic_frames("ab", [("a", 0, 5), ("b", 4, 8)], "original")

    def test_transcript_mismatch_rejected(self):
        with pytest.raises(ValueError, match="transcript"):
            toy_linguistic_frames("xy", [("a", 0, 4), ("b", 4, 8)], "original")

    def test_seconds_to_frames_covers_everything(self):
        wav, transcript, ali = synthesize_toy_utterance(np.random.default_rng(3), SR)
        n_frames = int(wav.duration / 0.016)
        spans = alignment_seconds_to_frames(ali, 0.016, n_frames)
        assert spans[0][1] == 0 and spans[-1][2] == n_frames
        for (_p, _s, e), (_p2, s2, _e2) in zip(spans, spans[1:]):
            assert s2 == e
        toy_linguistic_frames(transcript, spans, "original")  # validates cleanly

    def test_seconds_to_frames_keeps_letters_when_tight(self):
        ali = [("sil", 0.0, 0.2), ("a", 0.2, 0.21), ("sil", 0.21, 0.4)]
        spans = alignment_seconds_to_frames(ali, 0.1, 4)
        assert ("a", 2, 3) in spans
        toy_linguistic_frames("a", spans, "original")


# ---------------------------------------------------------------------------
# Model forward / training
# ---------------------------------------------------------------------------


class TestArModel:
    def test_n_in_n_out_both_modes(self):
        ling, mel = tiny_pair(24)
        ckpt = train_acoustic([(ling, mel)], TINY)
        for n in (1, 7, 24, 40):
            lf = random_ling(n)
            assert ar_forward(lf, "free", ckpt, cfg=TINY).n_frames == n
        out = ar_forward(ling, "teacher", ckpt, reference=mel, cfg=TINY)
        assert out.n_frames == 24

    def test_teacher_requires_reference(self):
        ling, mel = tiny_pair()
        ckpt = train_acoustic([(ling, mel)], TINY)
        with pytest.raises(ValueError, match="reference"):
            ar_forward(ling, "teacher", ckpt, cfg=TINY)

    def test_seeded_determinism(self):
        ling, mel = tiny_pair()
        ckpt = train_acoustic([(ling, mel)], TINY)
        a = synthesize_mel(ling, ckpt, seed=5, cfg=TINY)
        b = synthesize_mel(ling, ckpt, seed=5, cfg=TINY)
        assert np.array_equal(a.values, b.values)

    def test_full_dropout_makes_modes_identical(self):
        # rate 1.0 severs the feedback path, so teacher and free agree exactly
        cfg = ArModelConfig(ff_widths=(12, 12), bilstm_width=6, unilstm_width=12,
                            mel_bands=5, iterations=10, seed=0, feedback_dropout=1.0)
        ling, mel = tiny_pair()
        ckpt = train_acoustic([(ling, mel)], cfg)
        t_out = ar_forward(ling, "teacher", ckpt, seed=2, reference=mel, cfg=cfg)
        f_out = ar_forward(ling, "free", ckpt, seed=2, cfg=cfg)
        assert np.allclose(t_out.values, f_out.values, atol=1e-12)

    def test_dropout_rate_changes_training(self):
        ling, mel = tiny_pair()
        base = dict(ff_widths=(12, 12), bilstm_width=6, unilstm_width=12,
                    mel_bands=5, iterations=15, seed=0)
        a = train_acoustic([(ling, mel)], ArModelConfig(feedback_dropout=0.0, **base))
        b = train_acoustic([(ling, mel)], ArModelConfig(feedback_dropout=0.25, **base))
        assert a.buffers["log/l1"][-1] != b.buffers["log/l1"][-1]

    def test_length_mismatch_rejected(self):
        ling = random_ling(10)
        mel = FeatureMatrix(RNG.standard_normal((12, 5)), 0.016, "mel")
        with pytest.raises(ValueError, match="frames"):
            train_acoustic([(ling, mel)], TINY)

    def test_reproducible_loss_curve(self):
        ling, mel = tiny_pair()
        a = train_acoustic([(ling, mel)], TINY)
        b = train_acoustic([(ling, mel)], TINY)
        assert np.array_equal(a.buffers["log/l1"], b.buffers["log/l1"])

    def test_condition_reaches_output(self):
        # train briefly on two conditions with distinct targets, then check
        # synthesis differs when only the condition scalar changes
        rng = np.random.default_rng(11)
        n = 16
        ling_a = random_ling(n, "original")
        ling_b = random_ling(n, "enhanced:all")
        mel_a = FeatureMatrix(np.zeros((n, 5)) - 1.0, 0.016, "mel")
        mel_b = FeatureMatrix(np.zeros((n, 5)) + 1.0, 0.016, "mel")
        cfg = ArModelConfig(ff_widths=(12, 12), bilstm_width=6, unilstm_width=12,
                            mel_bands=5, iterations=120, seed=0, learning_rate=2e-3)
        ckpt = train_acoustic([(ling_a, mel_a), (ling_b, mel_b)], cfg)
        out_a = synthesize_mel(ling_a, ckpt, seed=3, cfg=cfg)
        out_b = synthesize_mel(ling_b, ckpt, seed=3, cfg=cfg)
        assert not np.allclose(out_a.values, out_b.values)

    def test_wrong_kind_rejected(self):
        bogus = ParameterSet(kind="wavenet", config_digest="", params={}, buffers={})
        with pytest.raises(ValueError, match="ar-acoustic"):
            ar_forward(random_ling(4), "free", bogus, cfg=TINY)

    def test_overfit_single_utterance(self):
        wav, transcript, ali = synthesize_toy_utterance(np.random.default_rng(5), SR)
        mcfg = MelConfig.desk(SR)
        padded = Waveform(np.concatenate([wav.samples, np.zeros(mcfg.window - mcfg.hop)]), SR)
        mel = mel_spectrogram(padded, mcfg)
        spans = alignment_seconds_to_frames(ali, mel.frame_hop, mel.n_frames)
        ling = toy_linguistic_frames(transcript, spans, "enhanced:all", mel.frame_hop)
        cfg = ArModelConfig(ff_widths=(32, 32), bilstm_width=16, unilstm_width=32,
                            mel_bands=80, learning_rate=3e-3, iterations=250, seed=0)
        ckpt = train_acoustic([(ling, mel)], cfg)
        assert ckpt.buffers["log/l1"][-1] < 0.3  # full overfit lives in acceptance
