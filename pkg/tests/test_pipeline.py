"""Tests for the stage runner, SNR reports, and command-line surfaces."""

import configparser
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from spoofbench.corpus import CorpusManifest, UtteranceRecord
from spoofbench.errors import ConfigError, DependencyError
from spoofbench.pipeline import (STAGES, HistogramReport, PipelineConfig, run_stage,
                                 snr_report)

SMOKE_CFG = """
[pipeline]
workspace = {ws}
seed = 0
sample_rate = 8000

[ingest]
n_utterances = 8
n_source = 4

[corrupt]
condition = n
snr_db = 10

[enhance-train]
iterations = 12
warmup = 3
batch = 8
window = 1024

[vc-train]
iterations = 8
disc_batch = 64
gen_batch = 32
gen_hidden = 32,48,48,32
disc_hidden = 32,48,48,32

[tts-train]
iterations = 8
ff_widths = 24,24
bilstm_width = 12
unilstm_width = 24

[vocoder-train]
iterations = 10
blocks = 4
residual_channels = 8
gate_channels = 8
skip_channels = 12
crop = 384
context = 96

[cm-train]
mixtures = 2
em_iterations = 4
"""


def write_cfg(tmp_path, body=None):
    path = tmp_path / "toy.cfg"
    path.write_text((body or SMOKE_CFG).format(ws=tmp_path / "ws"))
    return path


def records_with_snrs(snrs):
    return CorpusManifest([
        UtteranceRecord(f"u{i}", f"u{i}.wav", "", "clean", 1.0, s)
        for i, s in enumerate(snrs)])


# ---------------------------------------------------------------------------
# SNR reports
# ---------------------------------------------------------------------------


class TestSnrReport:
    def test_single_value_single_bin(self):
        rep = snr_report(records_with_snrs([20.0, 20.0, 20.0]))
        assert np.count_nonzero(rep.counts) == 1
        assert rep.variance == 0.0
        assert rep.counts.sum() == 3

    def test_two_values_population_stats(self):
        rep = snr_report(records_with_snrs([10.0, 20.0]))
        assert rep.mean == pytest.approx(15.0)
        assert rep.variance == pytest.approx(25.0)

    def test_stats_match_recomputation(self):
        rng = np.random.default_rng(0)
        snrs = list(rng.uniform(0, 40, 200))
        rep = snr_report(records_with_snrs(snrs))
        assert rep.mean == pytest.approx(np.mean(snrs), abs=1e-9)
        assert rep.variance == pytest.approx(np.var(snrs), abs=1e-9)
        assert rep.counts.sum() == 200

    def test_one_db_bins(self):
        rep = snr_report(records_with_snrs([3.2, 7.9]))
        assert np.allclose(np.diff(rep.bin_edges), 1.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="SNR"):
            snr_report(CorpusManifest([]))

    def test_text_rendering_round_trip(self):
        rep = snr_report(records_with_snrs([5.0, 6.5, 7.0]), "demo")
        text = rep.to_text()
        assert "demo" in text and text.count("\n") >= 4


# ---------------------------------------------------------------------------
# Stage runner mechanics
# ---------------------------------------------------------------------------


class TestRunStage:
    def test_missing_dependency_names_stage(self, tmp_path):
        cfg = PipelineConfig.load(write_cfg(tmp_path))
        with pytest.raises(DependencyError, match="ingest"):
            run_stage(cfg, "corrupt")

    def test_failed_stage_leaves_no_partial_outputs(self, tmp_path):
        cfg = PipelineConfig.load(write_cfg(tmp_path))
        with pytest.raises(DependencyError):
            run_stage(cfg, "enhance-train")
        assert not (cfg.workspace / "enhance-train").exists()
        assert not (cfg.workspace / ".tmp-enhance-train").exists()

    def test_unknown_stage_is_config_error(self, tmp_path):
        cfg = PipelineConfig.load(write_cfg(tmp_path))
        with pytest.raises(ConfigError, match="unknown stage"):
            run_stage(cfg, "transmogrify")

    def test_rerun_reproduces_digests(self, tmp_path):
        cfg = PipelineConfig.load(write_cfg(tmp_path))
        first = run_stage(cfg, "ingest")
        second = run_stage(cfg, "ingest")
        assert first["outputs_digest"] == second["outputs_digest"]
        assert first["inputs_digest"] == second["inputs_digest"]

    def test_status_record_contents(self, tmp_path):
        cfg = PipelineConfig.load(write_cfg(tmp_path))
        status = run_stage(cfg, "ingest")
        on_disk = json.loads((cfg.workspace / "ingest" / "status.json").read_text())
        assert on_disk["outputs_digest"] == status["outputs_digest"]
        assert on_disk["stage"] == "ingest"
        assert on_disk["wall_time_s"] >= 0

    def test_config_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            PipelineConfig.load(tmp_path / "missing.cfg")
        bad = tmp_path / "bad.cfg"
        bad.write_text("[other]\nx = 1\n")
        with pytest.raises(ConfigError, match="pipeline"):
            PipelineConfig.load(bad)
        worse = tmp_path / "worse.cfg"
        worse.write_text(SMOKE_CFG.format(ws=tmp_path / "ws") + "\n[corrupt2]\n")
        cfg = PipelineConfig.load(worse)
        cfg._cp.set("ingest", "n_utterances", "many")
        with pytest.raises(ConfigError, match="n_utterances"):
            run_stage(cfg, "ingest")


# ---------------------------------------------------------------------------
# Smoke pipeline across every stage (tiny sizes; quality gates live in the
# acceptance suite)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def smoke_ws(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = PipelineConfig.load(write_cfg(tmp))
    statuses = {stage: run_stage(cfg, stage) for stage in STAGES}
    return cfg, statuses


class TestSmokePipeline:
    def test_all_stages_complete(self, smoke_ws):
        cfg, statuses = smoke_ws
        assert set(statuses) == set(STAGES)
        for stage in STAGES:
            assert (cfg.workspace / stage / "status.json").exists()

    def test_eer_written(self, smoke_ws):
        cfg, _ = smoke_ws
        eer = json.loads((cfg.workspace / "cm-score" / "eer.json").read_text())
        assert 0.0 <= eer["eer_percent"] <= 100.0
        assert eer["n_bonafide"] > 0 and eer["n_spoof"] > 0
        scores = (cfg.workspace / "cm-score" / "scores.txt").read_text().splitlines()
        assert len(scores) == eer["n_bonafide"] + eer["n_spoof"]

    def test_report_compares_corpora(self, smoke_ws):
        cfg, _ = smoke_ws
        report = json.loads((cfg.workspace / "report" / "report.json").read_text())
        assert "mean_improvement_db" in report
        hist = (cfg.workspace / "report" / "corrupted_hist.txt").read_text()
        assert "bin_lo_db" in hist

    def test_generated_audio_lengths_match(self, smoke_ws):
        cfg, _ = smoke_ws
        from spoofbench.audio_io import read_wav
        from spoofbench.corpus import load_manifest
        gen = load_manifest(cfg.workspace / "generate" / "generated_eval.jsonl")
        enh = load_manifest(cfg.workspace / "enhance" / "enhanced_eval.jsonl")
        by_id = {r.id: r for r in enh.records}
        for rec in gen.records:
            a = read_wav(cfg.workspace / rec.audio_path)
            b = read_wav(cfg.workspace / by_id[rec.id].audio_path)
            assert len(a) == len(b)

    def test_rerun_stage_reuses_upstream(self, smoke_ws):
        cfg, statuses = smoke_ws
        again = run_stage(cfg, "report")
        assert again["outputs_digest"] == statuses["report"]["outputs_digest"]


# ---------------------------------------------------------------------------
# Command-line entry points
# ---------------------------------------------------------------------------


class TestCli:
    def test_spoofbench_dependency_exit_code(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        proc = subprocess.run(
            [sys.executable, "-m", "spoofbench", "cm-score", "--config", str(cfg_path)],
            capture_output=True, text=True)
        assert proc.returncode == 3
        assert "dependency" in proc.stderr

    def test_spoofbench_config_exit_code(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "spoofbench", "ingest", "--config",
             str(tmp_path / "none.cfg")],
            capture_output=True, text=True)
        assert proc.returncode == 2

    def test_spoofbench_single_stage_runs(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        proc = subprocess.run(
            [sys.executable, "-m", "spoofbench", "ingest", "--config", str(cfg_path)],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert "ingest: done" in proc.stdout

    def test_module_clis_round_trip(self, tmp_path):
        # enhance-train on two tiny pairs, then enhance a file
        from spoofbench.audio_io import write_wav
        from spoofbench.cli import main_enhance, main_enhance_train
        from spoofbench.corpus import corrupt, synthesize_toy_utterance
        pairs_path = tmp_path / "pairs.jsonl"
        rows = []
        for i in range(2):
            wav, _, _ = synthesize_toy_utterance(np.random.default_rng(i), 8000)
            noisy = corrupt(wav, "n", snr_db=10, rng=i)
            write_wav(tmp_path / f"c{i}.wav", wav)
            write_wav(tmp_path / f"n{i}.wav", noisy)
            rows.append(json.dumps({"noisy": str(tmp_path / f"n{i}.wav"),
                                    "clean": str(tmp_path / f"c{i}.wav")}))
        pairs_path.write_text("\n".join(rows))
        scfg = tmp_path / "segan.json"
        scfg.write_text(json.dumps({"iterations": 4, "warmup_iterations": 2,
                                    "batch_size": 4, "seed": 0}))
        ckpt = tmp_path / "segan.ckpt"
        rc = main_enhance_train(["--pairs", str(pairs_path), "--config", str(scfg),
                                 "--window", "1024", "--out", str(ckpt)])
        assert rc == 0 and ckpt.exists()
        out_dir = tmp_path / "enhanced"
        rc = main_enhance(["--ckpt", str(ckpt), "--in", str(tmp_path / "n0.wav"),
                           "--out", str(out_dir), "--window", "1024"])
        assert rc == 0 and (out_dir / "n0.wav").exists()

    def test_cm_cli_round_trip(self, tmp_path):
        from spoofbench.audio_io import write_wav
        from spoofbench.cli import main_cm_score, main_cm_train
        from spoofbench.corpus import (CorpusManifest, UtteranceRecord, save_manifest,
                                       synthesize_toy_utterance)
        from spoofbench.dsp import mu_law_decode, mu_law_encode
        bona_recs, spoof_recs = [], []
        for i in range(4):
            wav, _, _ = synthesize_toy_utterance(np.random.default_rng(10 + i), 8000)
            write_wav(tmp_path / f"b{i}.wav", wav)
            bona_recs.append(UtteranceRecord(f"b{i}", str(tmp_path / f"b{i}.wav"),
                                             "", "original", wav.duration))
            crushed = mu_law_decode(mu_law_encode(wav, 4), 4, 8000)
            write_wav(tmp_path / f"s{i}.wav", crushed)
            spoof_recs.append(UtteranceRecord(f"s{i}", str(tmp_path / f"s{i}.wav"),
                                              "", "original", crushed.duration))
        save_manifest(tmp_path / "bona.jsonl", CorpusManifest(bona_recs))
        save_manifest(tmp_path / "spoof.jsonl", CorpusManifest(spoof_recs))
        rc = main_cm_train(["--bonafide", str(tmp_path / "bona.jsonl"),
                            "--spoof", str(tmp_path / "spoof.jsonl"),
                            "--mix", "2", "--iters", "4",
                            "--out", str(tmp_path / "models")])
        assert rc == 0
        rc = main_cm_score(["--models", str(tmp_path / "models"),
                            "--eval", str(tmp_path / "bona.jsonl"),
                            str(tmp_path / "spoof.jsonl"),
                            "--out", str(tmp_path / "scores.txt")])
        assert rc == 0
        lines = (tmp_path / "scores.txt").read_text().splitlines()
        assert len(lines) == 8
        uid, label, score = lines[0].split()
        assert label in ("bonafide", "spoof") and float(score) == float(score)
