"""Corpus construction: segmentation, synthetic corruption, regime composition,
manifest bookkeeping, and a toy utterance synthesizer for desk-scale runs."""

from __future__ import annotations

import json
import warnings
import wave
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .dsp import SILENCE_DB, Waveform, estimate_snr, frame_rms_db
from .audio_io import read_wav
from .errors import NotFoundError

CORRUPTION_KINDS = ("n", "r", "nr", "DR")
BASE_CONDITIONS = ("clean", "original") + CORRUPTION_KINDS
REGIMES = ("DR", "n", "r", "nr", "DR+n", "DR+nr", "all")
# 8 synthesis conditions: untouched source audio plus one per enhancement regime
CONDITION_CODES = {"original": 0.0}
CONDITION_CODES.update({f"enhanced:{r}": (i + 1) / 7.0 for i, r in enumerate(REGIMES)})


def validate_condition(tag: str) -> str:
    if tag in BASE_CONDITIONS:
        return tag
    if tag.startswith("enhanced:") and tag.split(":", 1)[1] in REGIMES:
        return tag
    raise ValueError(f"unknown condition tag '{tag}'")


def condition_code(tag: str) -> float:
    """Scalar in [0, 1] identifying a synthesis condition."""
    try:
        return CONDITION_CODES[tag]
    except KeyError:
        raise ValueError(f"no condition code defined for '{tag}'") from None


@dataclass
class UtteranceRecord:
    id: str
    audio_path: str
    transcript: str
    condition: str
    duration_s: float
    snr_db: float | None = None

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError(f"record '{self.id}' has non-positive duration")
        validate_condition(self.condition)


@dataclass
class CorpusManifest:
    records: list[UtteranceRecord] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate record ids in manifest: {dupes[:5]}")

    def __len__(self):
        return len(self.records)

    @property
    def total_duration(self) -> float:
        return float(sum(r.duration_s for r in self.records))


def save_manifest(path, manifest: CorpusManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            fh.write(json.dumps(asdict(rec)) + "\n")


def load_manifest(path) -> CorpusManifest:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(UtteranceRecord(**json.loads(line)))
    return CorpusManifest(records)


# ---------------------------------------------------------------------------
# Pause-based segmentation
# ---------------------------------------------------------------------------

def segment_on_pauses(wav: Waveform, min_pause: float = 0.3, min_seg: float = 0.5,
                      max_seg: float = 24.5, *, hangover: float = 0.2,
                      threshold_db: float = 6.0, abs_floor_db: float = -60.0
                      ) -> list[Waveform]:
    """Split a recording at silences of at least `min_pause` seconds.

    Voice activity is frame RMS above (noise floor + threshold_db), with an
    absolute floor so stationary signals with no pauses count as voiced.
    Silence dips shorter than `hangover` never split.  Emitted segments are
    clipped to [min_seg, max_seg]; overlong spans are split at their
    quietest interior frame.
    """
    if min_pause <= 0:
        raise ValueError("min_pause must be positive")
    if min_seg >= max_seg:
        raise ValueError("min_seg must be smaller than max_seg")
    hop_s = 0.01
    db = frame_rms_db(wav.samples, wav.sample_rate, 0.02, hop_s)
    if db.size == 0:
        return []
    noise_floor = np.percentile(db, 5.0)
    thr = max(noise_floor + threshold_db, abs_floor_db)
    if not (db > thr).any():
        # stationary input with no pauses: fall back to the absolute floor
        thr = abs_floor_db
    voiced = db > thr
    if not voiced.any():
        return []

    # absorb sub-hangover dips so brief intra-word silences never split
    runs = _runs(voiced)
    min_gap_frames = max(int(round(hangover / hop_s)), 1)
    merged = [runs[0]]
    for start, end in runs[1:]:
        if start - merged[-1][1] < min_gap_frames:
            merged[-1] = (merged[-1][0], end)
        else:
            merged.append((start, end))

    # a pause splits only when it is at least min_pause long
    pause_frames = max(int(round(min_pause / hop_s)), 1)
    spans = [merged[0]]
    for start, end in merged[1:]:
        if start - spans[-1][1] >= pause_frames:
            spans.append((start, end))
        else:
            spans[-1] = (spans[-1][0], end)

    hop_n = max(int(round(hop_s * wav.sample_rate)), 1)
    frame_n = max(int(round(0.02 * wav.sample_rate)), 1)
    out = []
    for f0, f1 in spans:
        s0 = f0 * hop_n
        s1 = min(len(wav), f1 * hop_n + frame_n)
        out.extend(_enforce_bounds(wav, s0, s1, db, hop_n, min_seg, max_seg))
    return out


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    edges = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(int), [0]])))
    return [(int(edges[i]), int(edges[i + 1])) for i in range(0, edges.size, 2)]


def _enforce_bounds(wav: Waveform, s0: int, s1: int, db: np.ndarray, hop_n: int,
                    min_seg: float, max_seg: float) -> list[Waveform]:
    sr = wav.sample_rate
    if (s1 - s0) / sr < min_seg:
        return []
    if (s1 - s0) / sr <= max_seg:
        return [Waveform(wav.samples[s0:s1].copy(), sr)]
    # overlong: split at the quietest frame that keeps both halves >= min_seg
    lo = s0 + int(min_seg * sr)
    hi = s1 - int(min_seg * sr)
    f_lo, f_hi = lo // hop_n, max(hi // hop_n, lo // hop_n + 1)
    f_cut = f_lo + int(np.argmin(db[f_lo:f_hi]))
    cut = f_cut * hop_n
    return (_enforce_bounds(wav, s0, cut, db, hop_n, min_seg, max_seg)
            + _enforce_bounds(wav, cut, s1, db, hop_n, min_seg, max_seg))


# ---------------------------------------------------------------------------
# Synthetic corruption
# ---------------------------------------------------------------------------

def _active_power(x: np.ndarray, sample_rate: int) -> float:
    """Reference signal power: the 95th-percentile frame RMS squared."""
    db = frame_rms_db(x, sample_rate)
    if db.size == 0:
        rms = np.sqrt(np.mean(x * x)) if x.size else 0.0
        return max(rms * rms, 1e-12)
    p95 = np.percentile(db, 95.0)
    return max(10.0 ** (p95 / 10.0), 1e-12)


def _add_noise(x: np.ndarray, sample_rate: int, snr_db: float,
               rng: np.random.Generator) -> np.ndarray:
    p_sig = _active_power(x, sample_rate)
    p_noise = p_sig / 10.0 ** (snr_db / 10.0)
    return x + rng.standard_normal(x.size) * np.sqrt(p_noise)


def _synthetic_rir(sample_rate: int, rt60: float, mix: float,
                   rng: np.random.Generator) -> np.ndarray:
    n = max(int(rt60 * sample_rate * 1.2), 2)
    t = np.arange(1, n) / sample_rate
    tail = rng.standard_normal(n - 1) * 10.0 ** (-3.0 * t / rt60)
    h = np.concatenate([[1.0], mix * tail])
    return h


def corrupt(clean: Waveform, kind: str, *, snr_db: float = 10.0, rt60: float = 0.4,
            reverb_mix: float = 0.35, dr_cutoff: float = 4000.0, dr_snr_db: float = 25.0,
            rng=None) -> Waveform:
    """Apply a synthetic degradation; output length always equals input length.

    kind "n": additive white noise at `snr_db`; "r": synthetic exponentially
    decaying room response; "nr": both; "DR": low-pass plus mild noise
    (consumer-device analogue); "clean"/"original" return the input unchanged.
    """
    if kind in ("clean", "original"):
        return Waveform(clean.samples.copy(), clean.sample_rate)
    if kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption kind '{kind}'")
    rng = np.random.default_rng(rng)
    x = clean.samples
    sr = clean.sample_rate
    peak_in = np.abs(x).max() if x.size else 0.0

    if kind in ("r", "nr"):
        h = _synthetic_rir(sr, rt60, reverb_mix, rng)
        x = sps.fftconvolve(x, h)[:len(clean)]
        peak = np.abs(x).max() if x.size else 0.0
        if peak > 0:
            x = x * (peak_in / peak if peak_in > 0 else 1.0 / peak)
    if kind == "DR":
        cutoff = min(dr_cutoff, 0.45 * sr)
        sos = sps.butter(6, cutoff, btype="low", fs=sr, output="sos")
        x = sps.sosfiltfilt(sos, x)
        x = _add_noise(x, sr, dr_snr_db, rng)
    if kind in ("n", "nr"):
        x = _add_noise(x, sr, snr_db, rng)

    peak = np.abs(x).max() if x.size else 0.0
    if peak > 1.0:
        x = x / peak
    return Waveform(x, sr)


# ---------------------------------------------------------------------------
# Regime composition and manifest building
# ---------------------------------------------------------------------------

def compose_regime(catalog: dict[str, CorpusManifest], regime) -> CorpusManifest:
    """Concatenate the manifests of a training regime, re-qualifying ids by tag."""
    tags = list(regime)
    if not tags:
        raise ValueError("a training regime needs at least one condition tag")
    records = []
    for tag in tags:
        if tag not in catalog:
            raise NotFoundError(f"condition '{tag}' missing from catalog")
        for rec in catalog[tag].records:
            records.append(replace(rec, id=f"{tag}/{rec.id}"))
    return CorpusManifest(records)


def build_manifest(audio_dir, transcript_dir=None, condition: str = "original"
                   ) -> CorpusManifest:
    """One record per readable WAV file; transcripts joined by basename.

    Unreadable files are skipped with a warning reporting the count.
    """
    audio_dir = Path(audio_dir)
    if not audio_dir.is_dir():
        raise ValueError(f"audio directory {audio_dir} does not exist")
    tdir = Path(transcript_dir) if transcript_dir else None
    if tdir is not None and not tdir.is_dir():
        raise ValueError(f"transcript directory {tdir} does not exist")
    records, skipped = [], 0
    for path in sorted(audio_dir.glob("*.wav")):
        try:
            wav = read_wav(path)
            snr = estimate_snr(wav) if wav.duration >= 0.5 else None
        except (ValueError, OSError, EOFError, wave.Error) as exc:
            warnings.warn(f"skipping unreadable file {path.name}: {exc}")
            skipped += 1
            continue
        transcript = ""
        if tdir is not None:
            tpath = tdir / (path.stem + ".txt")
            if tpath.exists():
                transcript = tpath.read_text(encoding="utf-8").strip()
        records.append(UtteranceRecord(
            id=path.stem, audio_path=str(path), transcript=transcript,
            condition=condition, duration_s=wav.duration, snr_db=snr))
    if skipped:
        warnings.warn(f"build_manifest skipped {skipped} unreadable file(s)")
    return CorpusManifest(records)


# ---------------------------------------------------------------------------
# Toy utterance synthesis (desk-scale stand-in for real found data)
# ---------------------------------------------------------------------------

_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def synthesize_toy_utterance(rng, sample_rate: int = 8000, min_syllables: int = 2,
                             max_syllables: int = 5, amplitude: float = 0.4,
                             f0_lo: float = 120.0, f0_hi: float = 260.0
                             ) -> tuple[Waveform, str, list[tuple[str, float, float]]]:
    """Speech-like harmonic bursts separated by pauses.

    Returns (waveform, transcript, alignment) where alignment is a list of
    (phone, start_s, end_s) spans covering the whole utterance; pauses carry
    the pseudo-phone "sil".
    """
    rng = np.random.default_rng(rng)
    n_syll = int(rng.integers(min_syllables, max_syllables + 1))
    pieces, alignment, letters = [], [], []
    t_cursor = 0.0

    def add_silence(dur):
        nonlocal t_cursor
        n = int(round(dur * sample_rate))
        pieces.append(np.zeros(n))
        alignment.append(("sil", t_cursor, t_cursor + n / sample_rate))
        t_cursor += n / sample_rate

    add_silence(rng.uniform(0.15, 0.25))
    for i in range(n_syll):
        dur = rng.uniform(0.15, 0.3)
        n = int(round(dur * sample_rate))
        t = np.arange(n) / sample_rate
        f0 = rng.uniform(f0_lo, f0_hi)
        f0_t = f0 * (1.0 + 0.01 * np.sin(2.0 * np.pi * 3.0 * t + rng.uniform(0, 2 * np.pi)))
        phase = 2.0 * np.pi * np.cumsum(f0_t) / sample_rate
        burst = np.zeros(n)
        for h in range(1, 5):
            burst += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h
        burst *= np.hanning(n) ** 0.5
        pieces.append(burst)
        letter = _LETTERS[int(rng.integers(len(_LETTERS)))]
        letters.append(letter)
        alignment.append((letter, t_cursor, t_cursor + n / sample_rate))
        t_cursor += n / sample_rate
        if i < n_syll - 1:
            add_silence(rng.uniform(0.08, 0.2))
    add_silence(rng.uniform(0.15, 0.25))

    x = np.concatenate(pieces)
    peak = np.abs(x).max()
    if peak > 0:
        x = x * (amplitude / peak)
    return Waveform(x, sample_rate), "".join(letters), alignment
