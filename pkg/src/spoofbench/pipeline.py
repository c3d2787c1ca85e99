"""End-to-end stage runner: synthesize a toy corpus, corrupt it, train and
apply the enhancer, extract features, train the generation models, vocode
spoofed audio, and score it against the countermeasure.

Each stage writes its artifacts under workspace/<stage>/ together with a
status record (input digest, output digest, wall time).  Outputs are a pure
function of (upstream digests, config section, seed), so reruns reproduce
digests exactly; failed stages leave no partial outputs.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tts as tts_mod
from . import vc as vc_mod
from . import vocoder as voc_mod
from .audio_io import read_features, read_wav, write_features, write_wav
from .corpus import (CorpusManifest, UtteranceRecord, condition_code, corrupt,
                     load_manifest, save_manifest, synthesize_toy_utterance)
from .countermeasure import evaluate_countermeasure, fit_gmm
from .dsp import (CqccConfig, FeatureMatrix, MelConfig, Waveform, append_deltas,
                  estimate_snr, extract_cqcc, mel_spectrogram)
from .enhancer import ChunkSpec, SeganConfig, enhance, train_segan
from .errors import ConfigError, DependencyError
from .nn.checkpoint import ParameterSet, load_checkpoint, save_checkpoint
from .tts import alignment_seconds_to_frames, toy_linguistic_frames

STAGES = ("ingest", "corrupt", "enhance-train", "enhance", "features",
          "vc-train", "vc-convert", "tts-train", "tts-synth",
          "vocoder-train", "generate", "cm-train", "cm-score", "report")

STAGE_DEPS = {
    "ingest": (),
    "corrupt": ("ingest",),
    "enhance-train": ("corrupt",),
    "enhance": ("enhance-train",),
    "features": ("enhance",),
    "vc-train": ("features",),
    "vc-convert": ("vc-train",),
    "tts-train": ("features",),
    "tts-synth": ("tts-train",),
    "vocoder-train": ("features",),
    "generate": ("vocoder-train",),
    "cm-train": ("generate",),
    "cm-score": ("cm-train",),
    "report": ("enhance",),
}

STATUS_FILE = "status.json"


@dataclass
class HistogramReport:
    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float
    variance: float
    source_id: str

    def to_text(self) -> str:
        lines = [f"# source: {self.source_id}",
                 f"# records: {int(self.counts.sum())}",
                 f"# mean_db: {self.mean!r}",
                 f"# variance_db: {self.variance!r}",
                 "bin_lo_db\tbin_hi_db\tcount"]
        for i, c in enumerate(self.counts):
            lines.append(f"{self.bin_edges[i]:.1f}\t{self.bin_edges[i + 1]:.1f}\t{int(c)}")
        return "\n".join(lines) + "\n"


def snr_report(manifest: CorpusManifest, source_id: str = "") -> HistogramReport:
    """1 dB histogram of per-record SNR plus population mean/variance."""
    snrs = np.asarray([r.snr_db for r in manifest.records if r.snr_db is not None])
    if snrs.size == 0:
        raise ValueError("manifest has no records with SNR estimates")
    lo = float(np.floor(snrs.min()))
    hi = float(np.ceil(snrs.max()))
    if hi <= lo:
        hi = lo + 1.0
    edges = np.arange(lo, hi + 1.0)
    counts, _ = np.histogram(snrs, bins=edges)
    return HistogramReport(edges, counts, float(snrs.mean()), float(snrs.var()),
                           source_id)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class PipelineConfig:
    """INI-style config: a [pipeline] section plus one section per stage."""

    def __init__(self, parser: configparser.ConfigParser, path: str = "<memory>"):
        self._cp = parser
        self.path = path
        try:
            self.workspace = Path(parser.get("pipeline", "workspace"))
            self.seed = parser.getint("pipeline", "seed", fallback=0)
            self.sample_rate = parser.getint("pipeline", "sample_rate", fallback=8000)
        except (configparser.Error, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        parser = configparser.ConfigParser()
        read = parser.read(str(path))
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        if not parser.has_section("pipeline"):
            raise ConfigError(f"{path}: missing [pipeline] section")
        return cls(parser, str(path))

    def _get(self, getter, stage: str, key: str, default):
        try:
            return getter(stage, key, fallback=default)
        except (configparser.Error, ValueError) as exc:
            raise ConfigError(f"{self.path}: [{stage}] {key}: {exc}") from exc

    def get_int(self, stage, key, default):
        return self._get(self._cp.getint, stage, key, default)

    def get_float(self, stage, key, default):
        return self._get(self._cp.getfloat, stage, key, default)

    def get_str(self, stage, key, default):
        return self._get(self._cp.get, stage, key, default)

    def section_digest(self, stage: str) -> str:
        items = sorted(self._cp.items(stage)) if self._cp.has_section(stage) else []
        blob = json.dumps({"items": items, "seed": self.seed,
                           "sample_rate": self.sample_rate}).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def mel_config(self) -> MelConfig:
        return MelConfig(
            bands=self.get_int("features", "mel_bands", 80),
            fft_size=self.get_int("features", "fft_size", 512),
            window=self.get_int("features", "mel_window", 512),
            hop=self.get_int("features", "mel_hop", 128),
            fmin=self.get_float("features", "fmin", 60.0),
            fmax=self.get_float("features", "fmax", self.sample_rate / 2.0),
        )

    def cqcc_config(self) -> CqccConfig:
        return CqccConfig(
            bins_per_octave=self.get_int("features", "cqcc_bins_per_octave", 24),
            octaves=self.get_int("features", "cqcc_octaves", 6),
            n_coeffs=self.get_int("features", "cqcc_coeffs", 20),
            resample_points=self.get_int("features", "cqcc_resample_points", 128),
            hop=self.get_int("features", "cqcc_hop", 80),
        )


def _stage_rng(cfg: PipelineConfig, stage: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, STAGES.index(stage)]))


# ---------------------------------------------------------------------------
# Stage runner
# ---------------------------------------------------------------------------

def _dir_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name != STATUS_FILE:
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()[:16]


def run_stage(cfg: PipelineConfig, stage: str) -> dict:
    """Execute one stage; returns its status record."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage '{stage}' (expected one of {', '.join(STAGES)})")
    ws = cfg.workspace
    ws.mkdir(parents=True, exist_ok=True)
    dep_digests = {}
    for dep in STAGE_DEPS[stage]:
        status_path = ws / dep / STATUS_FILE
        if not status_path.exists():
            raise DependencyError(stage, dep)
        dep_digests[dep] = json.loads(status_path.read_text())["outputs_digest"]
    inputs_digest = hashlib.sha256(json.dumps(
        {"deps": dep_digests, "config": cfg.section_digest(stage)}, sort_keys=True
    ).encode()).hexdigest()[:16]

    tmp = ws / f".tmp-{stage}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    start = time.monotonic()
    try:
        _STAGE_IMPLS[stage](cfg, tmp)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    outputs_digest = _dir_digest(tmp)
    status = {"stage": stage, "inputs_digest": inputs_digest,
              "outputs_digest": outputs_digest,
              "wall_time_s": round(time.monotonic() - start, 3)}
    (tmp / STATUS_FILE).write_text(json.dumps(status, indent=2))
    final = ws / stage
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)
    return status


def run_all(cfg: PipelineConfig) -> list[dict]:
    return [run_stage(cfg, stage) for stage in STAGES]


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def _rel(cfg: PipelineConfig, path: Path) -> str:
    return str(path.relative_to(cfg.workspace))


def _resolve(cfg: PipelineConfig):
    return lambda p: cfg.workspace / p


def _split(records: list, eval_fraction: float) -> tuple[list, list]:
    n_eval = max(int(round(len(records) * eval_fraction)), 1)
    return records[:-n_eval], records[-n_eval:]


def _stage_ingest(cfg: PipelineConfig, out: Path):
    rng = _stage_rng(cfg, "ingest")
    n_utt = cfg.get_int("ingest", "n_utterances", 24)
    n_src = cfg.get_int("ingest", "n_source", 10)
    eval_fraction = cfg.get_float("ingest", "eval_fraction", 0.25)
    sr = cfg.sample_rate
    (out / "clean").mkdir()
    (out / "text").mkdir()
    (out / "align").mkdir()
    (out / "source").mkdir()

    records = []
    for i in range(n_utt):
        wav, transcript, alignment = synthesize_toy_utterance(rng, sr)
        uid = f"u{i:03d}"
        write_wav(out / "clean" / f"{uid}.wav", wav)
        (out / "text" / f"{uid}.txt").write_text(transcript)
        (out / "align" / f"{uid}.json").write_text(json.dumps(alignment))
        records.append(UtteranceRecord(
            id=uid, audio_path=f"ingest/clean/{uid}.wav", transcript=transcript,
            condition="clean", duration_s=wav.duration,
            snr_db=estimate_snr(wav) if wav.duration >= 0.5 else None))
    manifest = CorpusManifest(records)
    save_manifest(out / "clean.jsonl", manifest)
    train, eval_ = _split(records, eval_fraction)
    save_manifest(out / "clean_train.jsonl", CorpusManifest(train))
    save_manifest(out / "clean_eval.jsonl", CorpusManifest(eval_))

    src_records = []
    for i in range(n_src):
        wav, transcript, _ = synthesize_toy_utterance(rng, sr, f0_lo=300.0, f0_hi=450.0)
        uid = f"s{i:03d}"
        write_wav(out / "source" / f"{uid}.wav", wav)
        src_records.append(UtteranceRecord(
            id=uid, audio_path=f"ingest/source/{uid}.wav", transcript=transcript,
            condition="clean", duration_s=wav.duration,
            snr_db=estimate_snr(wav) if wav.duration >= 0.5 else None))
    save_manifest(out / "source.jsonl", CorpusManifest(src_records))


def _stage_corrupt(cfg: PipelineConfig, out: Path):
    # corruption is drawn once per utterance, then reused across the splits
    rng = _stage_rng(cfg, "corrupt")
    kind = cfg.get_str("corrupt", "condition", "n")
    snr_db = cfg.get_float("corrupt", "snr_db", 10.0)
    (out / "audio").mkdir()
    resolve = _resolve(cfg)
    full = load_manifest(cfg.workspace / "ingest" / "clean.jsonl")
    by_id = {}
    for rec in full.records:
        wav = read_wav(resolve(rec.audio_path))
        bad = corrupt(wav, kind, snr_db=snr_db, rng=rng)
        write_wav(out / "audio" / f"{rec.id}.wav", bad)
        noisy = read_wav(out / "audio" / f"{rec.id}.wav")
        by_id[rec.id] = UtteranceRecord(
            id=rec.id, audio_path=f"corrupt/audio/{rec.id}.wav",
            transcript=rec.transcript, condition=kind, duration_s=noisy.duration,
            snr_db=estimate_snr(noisy) if noisy.duration >= 0.5 else None)
    for split in ("", "_train", "_eval"):
        manifest = load_manifest(cfg.workspace / "ingest" / f"clean{split}.jsonl")
        save_manifest(out / f"corrupted{split}.jsonl",
                      CorpusManifest([by_id[r.id] for r in manifest.records]))


def _segan_config(cfg: PipelineConfig) -> tuple[SeganConfig, ChunkSpec]:
    window = cfg.get_int("enhance-train", "window", 1024)
    scfg = SeganConfig(
        iterations=cfg.get_int("enhance-train", "iterations", 240),
        warmup_iterations=cfg.get_int("enhance-train", "warmup", 24),
        batch_size=cfg.get_int("enhance-train", "batch", 16),
        learning_rate=cfg.get_float("enhance-train", "learning_rate", 2e-4),
        seed=cfg.seed,
    )
    return scfg, ChunkSpec(window=window, hop_train=window // 2)


def _stage_enhance_train(cfg: PipelineConfig, out: Path):
    resolve = _resolve(cfg)
    noisy_man = load_manifest(cfg.workspace / "corrupt" / "corrupted_train.jsonl")
    clean_man = load_manifest(cfg.workspace / "ingest" / "clean_train.jsonl")
    clean_by_id = {r.id: r for r in clean_man.records}
    pairs = [(read_wav(resolve(rec.audio_path)),
              read_wav(resolve(clean_by_id[rec.id].audio_path)))
             for rec in noisy_man.records]
    scfg, chunks = _segan_config(cfg)
    ckpt = train_segan(pairs, scfg, chunks, log_path=out / "train_log.jsonl")
    save_checkpoint(out / "segan.ckpt", ckpt)


def _stage_enhance(cfg: PipelineConfig, out: Path):
    resolve = _resolve(cfg)
    ckpt = load_checkpoint(cfg.workspace / "enhance-train" / "segan.ckpt")
    scfg, chunks = _segan_config(cfg)
    regime = cfg.get_str("corrupt", "condition", "n")
    (out / "audio").mkdir()
    done = {}
    for split in ("", "_train", "_eval"):
        manifest = load_manifest(cfg.workspace / "corrupt" / f"corrupted{split}.jsonl")
        records = []
        for rec in manifest.records:
            if rec.id not in done:
                wav = read_wav(resolve(rec.audio_path))
                better = enhance(wav, ckpt, scfg, chunks)
                write_wav(out / "audio" / f"{rec.id}.wav", better)
                better = read_wav(out / "audio" / f"{rec.id}.wav")
                done[rec.id] = UtteranceRecord(
                    id=rec.id, audio_path=f"enhance/audio/{rec.id}.wav",
                    transcript=rec.transcript, condition=f"enhanced:{regime}",
                    duration_s=better.duration,
                    snr_db=estimate_snr(better) if better.duration >= 0.5 else None)
            records.append(done[rec.id])
        save_manifest(out / f"enhanced{split}.jsonl", CorpusManifest(records))


def _feat_manifest_rows(ids_paths):
    return [json.dumps({"id": uid, "path": path}) for uid, path in ids_paths]


def _stage_features(cfg: PipelineConfig, out: Path):
    resolve = _resolve(cfg)
    mel_cfg = cfg.mel_config()
    for sub in ("mel", "meldelta", "src_meldelta", "ling"):
        (out / sub).mkdir()

    enhanced = load_manifest(cfg.workspace / "enhance" / "enhanced.jsonl")
    mel_rows, delta_rows, ling_rows = [], [], []
    pad = mel_cfg.window - mel_cfg.hop
    for rec in enhanced.records:
        wav = read_wav(resolve(rec.audio_path))
        padded = Waveform(np.concatenate([wav.samples, np.zeros(pad)]), wav.sample_rate)
        mel = mel_spectrogram(padded, mel_cfg)
        write_features(out / "mel" / f"{rec.id}.feat", mel)
        mel_rows.append((rec.id, f"features/mel/{rec.id}.feat"))
        write_features(out / "meldelta" / f"{rec.id}.feat", append_deltas(mel))
        delta_rows.append((rec.id, f"features/meldelta/{rec.id}.feat"))

        alignment = json.loads((cfg.workspace / "ingest" / "align" / f"{rec.id}.json").read_text())
        spans = alignment_seconds_to_frames(alignment, mel.frame_hop, mel.n_frames)
        ling = toy_linguistic_frames(rec.transcript, spans, rec.condition, mel.frame_hop)
        write_features(out / "ling" / f"{rec.id}.feat", ling)
        ling_rows.append((rec.id, f"features/ling/{rec.id}.feat"))

    src = load_manifest(cfg.workspace / "ingest" / "source.jsonl")
    src_rows = []
    for rec in src.records:
        wav = read_wav(resolve(rec.audio_path))
        padded = Waveform(np.concatenate([wav.samples, np.zeros(pad)]), wav.sample_rate)
        mel = mel_spectrogram(padded, mel_cfg)
        write_features(out / "src_meldelta" / f"{rec.id}.feat", append_deltas(mel))
        src_rows.append((rec.id, f"features/src_meldelta/{rec.id}.feat"))

    for name, rows in (("mel", mel_rows), ("meldelta", delta_rows),
                       ("ling", ling_rows), ("src_meldelta", src_rows)):
        (out / f"{name}.jsonl").write_text("\n".join(_feat_manifest_rows(rows)) + "\n")


def _load_feat_manifest(cfg: PipelineConfig, path: Path, kind: str = "mel"):
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    return [(row["id"], read_features(cfg.workspace / row["path"], kind)) for row in rows]


def _stage_vc_train(cfg: PipelineConfig, out: Path):
    src = _load_feat_manifest(cfg, cfg.workspace / "features" / "src_meldelta.jsonl",
                              "mel_delta")
    tgt_all = _load_feat_manifest(cfg, cfg.workspace / "features" / "meldelta.jsonl",
                                  "mel_delta")
    min_snr = cfg.get_float("vc-train", "min_snr", 5.0)
    enhanced = load_manifest(cfg.workspace / "enhance" / "enhanced.jsonl")
    kept = {r.id for r in vc_mod.select_training_data(enhanced, min_snr).records}
    tgt = [(uid, f) for uid, f in tgt_all if uid in kept] or tgt_all
    vcfg = vc_mod.CycleGanConfig(
        dims=3 * cfg.get_int("features", "mel_bands", 80),
        gen_hidden=_widths(cfg.get_str("vc-train", "gen_hidden", "64,128,128,64")),
        disc_hidden=_widths(cfg.get_str("vc-train", "disc_hidden", "64,128,128,64")),
        iterations=cfg.get_int("vc-train", "iterations", 150),
        disc_batch=cfg.get_int("vc-train", "disc_batch", 512),
        gen_batch=cfg.get_int("vc-train", "gen_batch", 128),
        seed=cfg.seed,
    )
    ckpt = vc_mod.train_cyclegan(np.vstack([f.values for _i, f in src]),
                                 np.vstack([f.values for _i, f in tgt]),
                                 vcfg, log_path=out / "train_log.jsonl")
    save_checkpoint(out / "cyclegan.ckpt", ckpt)
    (out / "config.json").write_text(json.dumps(
        {"gen_hidden": list(vcfg.gen_hidden), "disc_hidden": list(vcfg.disc_hidden),
         "dims": vcfg.dims}))


def _widths(text: str) -> tuple:
    return tuple(int(v) for v in text.split(","))


def _stage_vc_convert(cfg: PipelineConfig, out: Path):
    ckpt = load_checkpoint(cfg.workspace / "vc-train" / "cyclegan.ckpt")
    meta = json.loads((cfg.workspace / "vc-train" / "config.json").read_text())
    vcfg = vc_mod.CycleGanConfig(dims=meta["dims"], gen_hidden=tuple(meta["gen_hidden"]),
                                 disc_hidden=tuple(meta["disc_hidden"]))
    (out / "converted").mkdir()
    rows = []
    src = _load_feat_manifest(cfg, cfg.workspace / "features" / "src_meldelta.jsonl",
                              "mel_delta")
    for uid, feat in src:
        conv = vc_mod.convert(feat, ckpt, "forward", vcfg)
        write_features(out / "converted" / f"{uid}.feat", conv)
        rows.append((uid, f"vc-convert/converted/{uid}.feat"))
    (out / "converted.jsonl").write_text("\n".join(_feat_manifest_rows(rows)) + "\n")


def _tts_config(cfg: PipelineConfig) -> tts_mod.ArModelConfig:
    return tts_mod.ArModelConfig(
        ff_widths=_widths(cfg.get_str("tts-train", "ff_widths", "48,48")),
        bilstm_width=cfg.get_int("tts-train", "bilstm_width", 24),
        unilstm_width=cfg.get_int("tts-train", "unilstm_width", 48),
        mel_bands=cfg.get_int("features", "mel_bands", 80),
        learning_rate=cfg.get_float("tts-train", "learning_rate", 2e-3),
        iterations=cfg.get_int("tts-train", "iterations", 200),
        seed=cfg.seed,
    )


def _stage_tts_train(cfg: PipelineConfig, out: Path):
    ling = dict(_load_feat_manifest(cfg, cfg.workspace / "features" / "ling.jsonl",
                                    "linguistic"))
    mel = dict(_load_feat_manifest(cfg, cfg.workspace / "features" / "mel.jsonl", "mel"))
    train_ids = [r.id for r in
                 load_manifest(cfg.workspace / "enhance" / "enhanced_train.jsonl").records]
    pairs = [(ling[i], mel[i]) for i in train_ids if i in ling and i in mel]
    ckpt = tts_mod.train_acoustic(pairs, _tts_config(cfg), log_path=out / "train_log.jsonl")
    save_checkpoint(out / "ar.ckpt", ckpt)


def _stage_tts_synth(cfg: PipelineConfig, out: Path):
    ckpt = load_checkpoint(cfg.workspace / "tts-train" / "ar.ckpt")
    acfg = _tts_config(cfg)
    ling = dict(_load_feat_manifest(cfg, cfg.workspace / "features" / "ling.jsonl",
                                    "linguistic"))
    eval_ids = [r.id for r in
                load_manifest(cfg.workspace / "enhance" / "enhanced_eval.jsonl").records]
    (out / "mel").mkdir()
    rows = []
    for i, uid in enumerate(eval_ids):
        if uid not in ling:
            continue
        mel = tts_mod.synthesize_mel(ling[uid], ckpt, seed=cfg.seed + i, cfg=acfg)
        write_features(out / "mel" / f"{uid}.feat", mel)
        rows.append((uid, f"tts-synth/mel/{uid}.feat"))
    (out / "synth.jsonl").write_text("\n".join(_feat_manifest_rows(rows)) + "\n")


def _vocoder_config(cfg: PipelineConfig) -> voc_mod.WaveNetConfig:
    return voc_mod.WaveNetConfig.desk(
        blocks=cfg.get_int("vocoder-train", "blocks", 10),
        bits=cfg.get_int("vocoder-train", "bits", 8),
        residual_channels=cfg.get_int("vocoder-train", "residual_channels", 24),
        gate_channels=cfg.get_int("vocoder-train", "gate_channels", 24),
        skip_channels=cfg.get_int("vocoder-train", "skip_channels", 48),
        mel_bands=cfg.get_int("features", "mel_bands", 80),
        hop=cfg.get_int("features", "mel_hop", 128),
        learning_rate=cfg.get_float("vocoder-train", "learning_rate", 1e-3),
        iterations=cfg.get_int("vocoder-train", "iterations", 300),
        batch_size=cfg.get_int("vocoder-train", "batch", 2),
        crop_len=cfg.get_int("vocoder-train", "crop", 1024),
        context_len=cfg.get_int("vocoder-train", "context", 256),
        seed=cfg.seed,
    )


def _stage_vocoder_train(cfg: PipelineConfig, out: Path):
    resolve = _resolve(cfg)
    vcfg = _vocoder_config(cfg)
    mel = dict(_load_feat_manifest(cfg, cfg.workspace / "features" / "mel.jsonl", "mel"))
    train = load_manifest(cfg.workspace / "enhance" / "enhanced_train.jsonl")
    corpus = []
    for rec in train.records:
        wav = read_wav(resolve(rec.audio_path))
        corpus.append((wav, mel[rec.id], condition_code(rec.condition)))
    ckpt = voc_mod.train_vocoder(corpus, vcfg, log_path=out / "train_log.jsonl")
    save_checkpoint(out / "wavenet.ckpt", ckpt)


def _stage_generate(cfg: PipelineConfig, out: Path):
    resolve = _resolve(cfg)
    vcfg = _vocoder_config(cfg)
    ckpt = load_checkpoint(cfg.workspace / "vocoder-train" / "wavenet.ckpt")
    (out / "audio").mkdir()
    for split in ("_train", "_eval"):
        manifest = load_manifest(cfg.workspace / "enhance" / f"enhanced{split}.jsonl")
        records = []
        for i, rec in enumerate(manifest.records):
            wav = read_wav(resolve(rec.audio_path))
            spoofed = voc_mod.copy_synthesis(wav, condition_code(rec.condition), ckpt,
                                             vcfg, seed=cfg.seed + i, mode="sample")
            write_wav(out / "audio" / f"{rec.id}.wav", spoofed)
            spoofed = read_wav(out / "audio" / f"{rec.id}.wav")
            records.append(UtteranceRecord(
                id=rec.id, audio_path=f"generate/audio/{rec.id}.wav",
                transcript=rec.transcript, condition=rec.condition,
                duration_s=spoofed.duration,
                snr_db=estimate_snr(spoofed) if spoofed.duration >= 0.5 else None))
        save_manifest(out / f"generated{split}.jsonl", CorpusManifest(records))


def _stage_cm_train(cfg: PipelineConfig, out: Path):
    resolve = _resolve(cfg)
    cqcc_cfg = cfg.cqcc_config()
    mixtures = cfg.get_int("cm-train", "mixtures", 8)
    iters = cfg.get_int("cm-train", "em_iterations", 10)

    def stack_features(manifest_path):
        manifest = load_manifest(manifest_path)
        mats = [extract_cqcc(read_wav(resolve(r.audio_path)), cqcc_cfg).values
                for r in manifest.records]
        return np.vstack(mats)

    bona = stack_features(cfg.workspace / "enhance" / "enhanced_train.jsonl")
    spoof = stack_features(cfg.workspace / "generate" / "generated_train.jsonl")
    bona_gmm = fit_gmm(bona, mixtures, iters, seed=cfg.seed)
    spoof_gmm = fit_gmm(spoof, mixtures, iters, seed=cfg.seed + 1)
    for name, gmm in (("bonafide", bona_gmm), ("spoof", spoof_gmm)):
        ps = ParameterSet(kind="cqcc-gmm", config_digest="", step=iters, params={},
                          buffers={"weights": gmm.weights, "means": gmm.means,
                                   "variances": gmm.variances})
        save_checkpoint(out / f"{name}.gmm", ps)


def _load_gmm(path):
    from .countermeasure import GmmModel
    ps = load_checkpoint(path)
    if ps.kind != "cqcc-gmm":
        raise ValueError(f"{path}: expected a cqcc-gmm checkpoint, got '{ps.kind}'")
    weights = ps.buffers["weights"]
    # float32 storage rounds the weights; restore the sum-to-one invariant
    return GmmModel(weights / weights.sum(), ps.buffers["means"],
                    np.maximum(ps.buffers["variances"], 1e-4))


def _stage_cm_score(cfg: PipelineConfig, out: Path):
    bona_gmm = _load_gmm(cfg.workspace / "cm-train" / "bonafide.gmm")
    spoof_gmm = _load_gmm(cfg.workspace / "cm-train" / "spoof.gmm")
    bona_eval = load_manifest(cfg.workspace / "enhance" / "enhanced_eval.jsonl")
    spoof_eval = load_manifest(cfg.workspace / "generate" / "generated_eval.jsonl")
    scores, eer, rows, skipped = evaluate_countermeasure(
        bona_eval, spoof_eval, bona_gmm, spoof_gmm, cfg.cqcc_config(),
        resolve=_resolve(cfg))
    with open(out / "scores.txt", "w", encoding="utf-8") as fh:
        for uid, label, score in rows:
            fh.write(f"{uid} {label} {score!r}\n")
    (out / "eer.json").write_text(json.dumps(
        {"eer_percent": eer, "n_bonafide": len(scores.genuine_scores),
         "n_spoof": len(scores.spoof_scores), "skipped": skipped}, indent=2))


def _stage_report(cfg: PipelineConfig, out: Path):
    corrupted = load_manifest(cfg.workspace / "corrupt" / "corrupted.jsonl")
    enhanced = load_manifest(cfg.workspace / "enhance" / "enhanced.jsonl")
    rep_c = snr_report(corrupted, "corrupted")
    rep_e = snr_report(enhanced, "enhanced")
    (out / "corrupted_hist.txt").write_text(rep_c.to_text())
    (out / "enhanced_hist.txt").write_text(rep_e.to_text())
    (out / "report.json").write_text(json.dumps({
        "corrupted": {"mean_db": rep_c.mean, "variance_db": rep_c.variance},
        "enhanced": {"mean_db": rep_e.mean, "variance_db": rep_e.variance},
        "mean_improvement_db": rep_e.mean - rep_c.mean}, indent=2))


_STAGE_IMPLS = {
    "ingest": _stage_ingest,
    "corrupt": _stage_corrupt,
    "enhance-train": _stage_enhance_train,
    "enhance": _stage_enhance,
    "features": _stage_features,
    "vc-train": _stage_vc_train,
    "vc-convert": _stage_vc_convert,
    "tts-train": _stage_tts_train,
    "tts-synth": _stage_tts_synth,
    "vocoder-train": _stage_vocoder_train,
    "generate": _stage_generate,
    "cm-train": _stage_cm_train,
    "cm-score": _stage_cm_score,
    "report": _stage_report,
}
