"""Tests for corpus construction: segmentation, corruption, manifests."""

import numpy as np
import pytest

from spoofbench.audio_io import write_wav
from spoofbench.corpus import (CorpusManifest, UtteranceRecord, build_manifest,
                               compose_regime, condition_code, corrupt, load_manifest,
                               save_manifest, segment_on_pauses, synthesize_toy_utterance,
                               validate_condition)
from spoofbench.dsp import Waveform, estimate_snr
from spoofbench.errors import NotFoundError

SR = 8000


def steady_tone(dur_s, freq=300.0, amp=0.4):
    t = np.arange(int(dur_s * SR)) / SR
    return amp * np.sin(2 * np.pi * freq * t)


def make_records(n, prefix="u", condition="clean", snr=20.0):
    return [UtteranceRecord(id=f"{prefix}{i:05d}", audio_path=f"{prefix}{i}.wav",
                            transcript="", condition=condition, duration_s=1.0,
                            snr_db=snr) for i in range(n)]


# ---------------------------------------------------------------------------
# Condition tags
# ---------------------------------------------------------------------------


class TestConditions:
    def test_base_tags(self):
        for tag in ("clean", "n", "r", "nr", "DR", "original"):
            assert validate_condition(tag) == tag

    def test_enhanced_tags(self):
        assert validate_condition("enhanced:DR+n") == "enhanced:DR+n"
        with pytest.raises(ValueError):
            validate_condition("enhanced:bogus")

    def test_unknown_rejected(self):
        with pytest.raises(ValueError):
            validate_condition("noisy")

    def test_condition_codes_span_unit_interval(self):
        codes = [condition_code("original")] + \
            [condition_code(f"enhanced:{r}") for r in ("DR", "n", "r", "nr", "DR+n",
                                                       "DR+nr", "all")]
        assert codes[0] == 0.0 and codes[-1] == 1.0
        assert len(set(codes)) == 8


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------


class TestSegmentation:
    def test_continuous_tone_single_segment(self):
        segs = segment_on_pauses(Waveform(steady_tone(1.0), SR), 0.3, 0.5, 24.5)
        assert len(segs) == 1

    def test_tone_silence_tone(self):
        sig = np.concatenate([steady_tone(1.0), np.zeros(SR // 2), steady_tone(1.0)])
        segs = segment_on_pauses(Waveform(sig, SR), min_pause=0.3)
        assert len(segs) == 2
        # boundaries within 50 ms of construction
        assert segs[0].duration == pytest.approx(1.0, abs=0.05)
        assert segs[1].duration == pytest.approx(1.0, abs=0.05)

    def test_all_silence_empty(self):
        assert segment_on_pauses(Waveform(np.zeros(2 * SR), SR), 0.3, 0.5, 24.5) == []

    def test_short_pause_does_not_split(self):
        sig = np.concatenate([steady_tone(0.8), np.zeros(SR // 10), steady_tone(0.8)])
        segs = segment_on_pauses(Waveform(sig, SR), min_pause=0.3)
        assert len(segs) == 1

    def test_duration_bounds_enforced(self):
        sig = np.tile(steady_tone(1.0), 7)
        segs = segment_on_pauses(Waveform(sig, SR), 0.3, 0.5, 2.0)
        assert segs
        for s in segs:
            assert 0.5 <= s.duration <= 2.0
        total = sum(s.duration for s in segs)
        assert total <= len(sig) / SR + 0.05

    def test_fragment_below_min_dropped(self):
        sig = np.concatenate([steady_tone(0.2), np.zeros(SR), steady_tone(1.0)])
        segs = segment_on_pauses(Waveform(sig, SR), 0.3, 0.5, 24.5)
        assert len(segs) == 1


# ---------------------------------------------------------------------------
# Corruption
# ---------------------------------------------------------------------------


class TestCorrupt:
    def _speechish(self, seed=0):
        wav, _, _ = synthesize_toy_utterance(np.random.default_rng(seed), SR)
        return wav

    def test_noise_hits_requested_snr(self):
        wav = self._speechish(1)
        out = corrupt(wav, "n", snr_db=10.0, rng=2)
        assert estimate_snr(out) == pytest.approx(10.0, abs=3.0)

    @pytest.mark.parametrize("snr", [5.0, 10.0, 20.0, 30.0])
    def test_snr_sweep(self, snr):
        wav = self._speechish(3)
        out = corrupt(wav, "n", snr_db=snr, rng=int(snr))
        assert estimate_snr(out) == pytest.approx(snr, abs=3.0)

    def test_reverb_preserves_length(self):
        wav = self._speechish(4)
        out = corrupt(wav, "r", rng=5)
        assert len(out) == len(wav)
        assert not np.array_equal(out.samples, wav.samples)

    def test_clean_is_identity(self):
        wav = self._speechish(6)
        out = corrupt(wav, "clean")
        assert np.array_equal(out.samples, wav.samples)

    def test_device_analogue_removes_highs(self):
        rng = np.random.default_rng(7)
        t = np.arange(2 * SR) / SR
        hi = Waveform(0.4 * np.sin(2 * np.pi * 3800 * t), SR)
        out = corrupt(hi, "DR", rng=rng)
        spec_in = np.abs(np.fft.rfft(hi.samples))
        spec_out = np.abs(np.fft.rfft(out.samples))
        k = int(3800 * len(hi) / SR)
        assert spec_out[k] < 0.5 * spec_in[k]

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="kind"):
            corrupt(self._speechish(), "x")

    def test_nr_applies_both(self):
        wav = self._speechish(8)
        out = corrupt(wav, "nr", snr_db=10.0, rng=9)
        assert len(out) == len(wav)
        assert estimate_snr(out) < estimate_snr(wav)


# ---------------------------------------------------------------------------
# Regime composition
# ---------------------------------------------------------------------------


class TestComposeRegime:
    def _catalog(self):
        return {tag: CorpusManifest(make_records(11572, prefix=tag, condition=tag))
                for tag in ("DR", "n", "r", "nr")}

    def test_pairwise_regime_counts(self):
        catalog = self._catalog()
        assert len(compose_regime(catalog, ["DR", "n"])) == 23144

    def test_full_regime_count(self):
        catalog = self._catalog()
        assert len(compose_regime(catalog, ["DR", "n", "r", "nr"])) == 46288

    def test_singleton_matches_catalog(self):
        catalog = self._catalog()
        out = compose_regime(catalog, ["n"])
        assert len(out) == len(catalog["n"])
        assert [r.id for r in out.records] == [f"n/{r.id}" for r in catalog["n"].records]

    def test_order_insensitive_multiset(self):
        catalog = self._catalog()
        a = compose_regime(catalog, ["DR", "n"])
        b = compose_regime(catalog, ["n", "DR"])
        assert sorted(r.id for r in a.records) == sorted(r.id for r in b.records)

    def test_missing_tag(self):
        with pytest.raises(NotFoundError):
            compose_regime({"n": CorpusManifest(make_records(2))}, ["n", "r"])

    def test_empty_regime(self):
        with pytest.raises(ValueError):
            compose_regime({"n": CorpusManifest(make_records(2))}, [])

    def test_total_duration_adds_up(self):
        catalog = {t: CorpusManifest(make_records(5, prefix=t)) for t in ("n", "r")}
        out = compose_regime(catalog, ["n", "r"])
        assert out.total_duration == pytest.approx(
            catalog["n"].total_duration + catalog["r"].total_duration, abs=1e-3)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


class TestManifest:
    def test_duplicate_ids_rejected(self):
        recs = make_records(2)
        recs[1].id = recs[0].id
        with pytest.raises(ValueError, match="duplicate"):
            CorpusManifest(recs)

    def test_round_trip(self, tmp_path):
        manifest = CorpusManifest([
            UtteranceRecord("a", "x/a.wav", "hello there", "clean", 1.25, 17.5),
            UtteranceRecord("b", "x/b.wav", "", "enhanced:all", 0.54, None),
        ])
        path = tmp_path / "m.jsonl"
        save_manifest(path, manifest)
        back = load_manifest(path)
        assert back.records == manifest.records

    def test_build_manifest_happy_path(self, tmp_path):
        audio = tmp_path / "audio"
        text = tmp_path / "text"
        audio.mkdir()
        text.mkdir()
        for i in range(3):
            wav, transcript, _ = synthesize_toy_utterance(np.random.default_rng(i), SR)
            write_wav(audio / f"u{i}.wav", wav)
            (text / f"u{i}.txt").write_text(transcript)
        manifest = build_manifest(audio, text)
        assert len(manifest) == 3
        assert all(r.transcript for r in manifest.records)
        assert all(r.snr_db is not None for r in manifest.records)

    def test_build_manifest_missing_transcript(self, tmp_path):
        audio = tmp_path / "audio"
        audio.mkdir()
        wav, _, _ = synthesize_toy_utterance(np.random.default_rng(0), SR)
        write_wav(audio / "solo.wav", wav)
        manifest = build_manifest(audio, None)
        assert manifest.records[0].transcript == ""

    def test_build_manifest_empty_dir(self, tmp_path):
        audio = tmp_path / "audio"
        audio.mkdir()
        manifest = build_manifest(audio)
        assert len(manifest) == 0 and manifest.total_duration == 0.0

    def test_build_manifest_skips_unreadable(self, tmp_path):
        audio = tmp_path / "audio"
        audio.mkdir()
        wav, _, _ = synthesize_toy_utterance(np.random.default_rng(0), SR)
        write_wav(audio / "good.wav", wav)
        (audio / "bad.wav").write_bytes(b"this is not audio")
        with pytest.warns(UserWarning, match="skipped 1"):
            manifest = build_manifest(audio)
        assert [r.id for r in manifest.records] == ["good"]


class TestToySynthesis:
    def test_alignment_covers_waveform(self):
        wav, transcript, alignment = synthesize_toy_utterance(np.random.default_rng(1), SR)
        assert alignment[0][1] == 0.0
        assert alignment[-1][2] == pytest.approx(wav.duration, abs=1e-6)
        for (_, _, e0), (_, s1, _) in zip(alignment, alignment[1:]):
            assert s1 == pytest.approx(e0, abs=1e-9)
        letters = [p for p, _s, _e in alignment if p != "sil"]
        assert "".join(letters) == transcript

    def test_deterministic(self):
        a = synthesize_toy_utterance(np.random.default_rng(42), SR)
        b = synthesize_toy_utterance(np.random.default_rng(42), SR)
        assert np.array_equal(a[0].samples, b[0].samples) and a[1] == b[1]

    def test_clean_toy_has_silence_for_snr(self):
        wav, _, _ = synthesize_toy_utterance(np.random.default_rng(2), SR)
        assert estimate_snr(wav) > 40.0
