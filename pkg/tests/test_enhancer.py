"""Tests for the waveform enhancer: chunking, baseline, GAN training."""

import json

import numpy as np
import pytest

from spoofbench.corpus import corrupt, synthesize_toy_utterance
from spoofbench.dsp import Waveform, estimate_snr
from spoofbench.enhancer import (ChunkSpec, SeganConfig, baseline_pre_enhance,
                                 build_segan_params, chunk_stream, concat_stream,
                                 enhance, generator_forward, train_segan)
from spoofbench.nn import tensor as T
from spoofbench.nn.checkpoint import ParameterSet

RNG = np.random.default_rng(2024)
SR = 8000


def toy_pairs(n, snr_db=10.0, seed=0):
    pairs = []
    for i in range(n):
        wav, _, _ = synthesize_toy_utterance(np.random.default_rng(seed + i), SR)
        pairs.append((corrupt(wav, "n", snr_db=snr_db, rng=seed + 1000 + i), wav))
    return pairs


# ---------------------------------------------------------------------------
# Chunk / concat streams
# ---------------------------------------------------------------------------


class TestChunkStream:
    SPEC = ChunkSpec()  # 16384-sample window, 8192 train hop

    def test_train_mode_offsets(self):
        w = Waveform(RNG.uniform(-1, 1, 32768), 16000)
        chunks, cov = chunk_stream(w, self.SPEC, "train")
        assert len(chunks) == 3
        starts = [e.out_end - self.SPEC.window + e.start_in_chunk for e in cov.entries]
        assert [w.samples.tolist().index(c[0]) for c in chunks[:1]] == [0]
        assert np.array_equal(chunks[1], w.samples[8192:8192 + 16384])
        assert np.array_equal(chunks[2], w.samples[16384:])

    def test_single_full_window(self):
        w = Waveform(RNG.uniform(-1, 1, 16384), 16000)
        chunks, cov = chunk_stream(w, self.SPEC, "infer")
        assert len(chunks) == 1 and np.array_equal(chunks[0], w.samples)

    def test_prepadded_tail_case(self):
        w = Waveform(RNG.uniform(-1, 1, 20000), 16000)
        chunks, cov = chunk_stream(w, self.SPEC, "infer")
        assert len(chunks) == 2
        assert np.array_equal(chunks[1], w.samples[3616:20000])
        assert (cov.entries[1].out_start, cov.entries[1].out_end) == (16384, 20000)
        assert np.array_equal(concat_stream(chunks, cov).samples, w.samples)

    def test_round_trip_random_lengths(self):
        rng = np.random.default_rng(7)
        hit_zero_pad = hit_tail = False
        for length in rng.integers(1, 100000, 80):
            w = Waveform(rng.uniform(-1, 1, int(length)), 16000)
            chunks, cov = chunk_stream(w, self.SPEC, "infer")
            hit_zero_pad |= bool(cov.entries[0].zero_padded)
            hit_tail |= len(chunks) > 1 and cov.entries[-1].start_in_chunk > 0
            assert np.array_equal(concat_stream(chunks, cov).samples, w.samples)
        assert hit_zero_pad and hit_tail

    def test_train_mode_round_trip(self):
        w = Waveform(RNG.uniform(-1, 1, 50000), 16000)
        chunks, cov = chunk_stream(w, self.SPEC, "train")
        assert np.array_equal(concat_stream(chunks, cov).samples, w.samples)

    def test_inconsistent_map_rejected(self):
        w = Waveform(RNG.uniform(-1, 1, 20000), 16000)
        chunks, cov = chunk_stream(w, self.SPEC, "infer")
        cov.entries[1].out_start += 5
        with pytest.raises(ValueError, match="contiguous"):
            concat_stream(chunks, cov)

    def test_window_must_be_power_of_two(self):
        with pytest.raises(ValueError, match="power of two"):
            ChunkSpec(window=1000)


# ---------------------------------------------------------------------------
# Baseline pre-enhancement
# ---------------------------------------------------------------------------


class TestBaseline:
    def test_stationary_tone_kept(self):
        t = np.arange(2 * SR) / SR
        w = Waveform(0.4 * np.sin(2 * np.pi * 440 * t), SR)
        out = baseline_pre_enhance(w)
        in_rms = np.sqrt(np.mean(w.samples ** 2))
        out_rms = np.sqrt(np.mean(out.samples ** 2))
        assert out_rms == pytest.approx(in_rms, rel=0.10)
        assert len(out) == len(w)

    def test_snr_gain_on_noisy_speech(self):
        wav, _, _ = synthesize_toy_utterance(np.random.default_rng(11), SR)
        noisy = corrupt(wav, "n", snr_db=10.0, rng=12)
        cleaned = baseline_pre_enhance(noisy)
        assert estimate_snr(cleaned) >= estimate_snr(noisy) + 3.0

    def test_silence_never_amplified(self):
        w = Waveform(np.zeros(2 * SR), SR)
        out = baseline_pre_enhance(w)
        assert np.sqrt(np.mean(out.samples ** 2)) <= 1e-9


# ---------------------------------------------------------------------------
# Generator / training
# ---------------------------------------------------------------------------


class TestSegan:
    def test_zero_head_is_identity(self):
        cfg = SeganConfig(iterations=1)
        params = build_segan_params(cfg, np.random.default_rng(0))
        gen = {k: v for k, v in params.items() if k.startswith("gen/")}
        x = RNG.uniform(-0.8, 0.8, (2, 1024, 1))
        with T.no_grad():
            y = generator_forward(gen, cfg, T.constant(x))
        assert np.array_equal(y.data, x)

    def test_length_preserved_any_input(self):
        pairs = toy_pairs(2, seed=50)
        cfg = SeganConfig(iterations=6, warmup_iterations=2, batch_size=4, seed=0)
        ckpt = train_segan(pairs, cfg, ChunkSpec(window=1024, hop_train=512))
        for n in (900, 1024, 2500, 5000):
            w = Waveform(RNG.uniform(-0.5, 0.5, n), SR)
            assert len(enhance(w, ckpt, cfg)) == n

    def test_phase_switch_in_log(self, tmp_path):
        pairs = toy_pairs(2, seed=60)
        log = tmp_path / "log.jsonl"
        cfg = SeganConfig(iterations=8, warmup_iterations=3, batch_size=4, seed=0)
        train_segan(pairs, cfg, ChunkSpec(window=1024, hop_train=512), log_path=log)
        rows = [json.loads(line) for line in log.read_text().splitlines()]
        assert [r["phase"] for r in rows] == [1, 1, 1, 2, 2, 2, 2, 2]
        assert all(np.isfinite([r["l1_loss"], r["adv_loss"], r["d_loss"]]).all()
                   for r in rows)

    def test_identity_data_overfit(self):
        # noisy == clean: the generator only has to keep its residual at zero
        pairs = []
        for i in range(4):
            wav, _, _ = synthesize_toy_utterance(np.random.default_rng(70 + i), SR)
            pairs.append((wav, wav))
        cfg = SeganConfig(iterations=60, warmup_iterations=2, batch_size=8, seed=0,
                          lambda_adv=0.0)
        ckpt = train_segan(pairs, cfg, ChunkSpec(window=1024, hop_train=512))
        assert ckpt.buffers["log/l1"][-1] <= 1e-3

    def test_deterministic_checkpoints(self, tmp_path):
        from spoofbench.nn.checkpoint import save_checkpoint
        pairs = toy_pairs(2, seed=80)
        cfg = SeganConfig(iterations=5, warmup_iterations=2, batch_size=4, seed=3)
        spec = ChunkSpec(window=1024, hop_train=512)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, train_segan(pairs, cfg, spec))
        save_checkpoint(b, train_segan(pairs, cfg, spec))
        assert a.read_bytes() == b.read_bytes()

    def test_mismatched_pair_rejected(self):
        wav, _, _ = synthesize_toy_utterance(np.random.default_rng(0), SR)
        short = Waveform(wav.samples[:-100], SR)
        with pytest.raises(ValueError, match="aligned"):
            train_segan([(wav, short)], SeganConfig(iterations=1),
                        ChunkSpec(window=1024, hop_train=512))

    def test_wrong_model_kind_rejected(self):
        ckpt = ParameterSet(kind="cyclegan", config_digest="", params={}, buffers={})
        wav, _, _ = synthesize_toy_utterance(np.random.default_rng(0), SR)
        with pytest.raises(ValueError, match="segan"):
            enhance(wav, ckpt)
