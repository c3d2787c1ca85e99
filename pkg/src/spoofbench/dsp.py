"""Core signal processing: waveforms, mel spectra, companding, SNR, cepstra.

All functions are pure; nothing here keeps state between calls.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import signal as sps
from scipy.fft import dct

FEATURE_KINDS = ("mel", "mel_delta", "cqcc", "linguistic")
SILENCE_DB = -120.0  # dB value assigned to all-zero frames


@dataclass
class Waveform:
    """Mono audio: float64 samples in [-1, 1] plus a sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if not isinstance(self.sample_rate, (int, np.integer)) or self.sample_rate <= 0:
            raise ValueError(f"sample rate must be a positive integer, got {self.sample_rate!r}")
        self.sample_rate = int(self.sample_rate)
        if self.samples.size:
            peak = np.abs(self.samples).max()
            if peak > 1.0 + 1e-6:
                raise ValueError(f"waveform amplitude {peak:.4f} exceeds [-1, 1]")
            if peak > 1.0:
                self.samples = np.clip(self.samples, -1.0, 1.0)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureMatrix:
    """Frames x dims real matrix with a frame hop in seconds and a kind tag."""

    values: np.ndarray
    frame_hop: float
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains non-finite values")
        if self.frame_hop <= 0:
            raise ValueError(f"frame hop must be positive, got {self.frame_hop}")
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind '{self.kind}'")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]


@dataclass
class MelConfig:
    bands: int = 80
    fft_size: int = 1024
    window: int = 800
    hop: int = 200
    fmin: float = 40.0
    fmax: float | None = None  # None -> Nyquist
    log_floor: float = float(np.log(1e-10))

    def __post_init__(self):
        if not 0 < self.hop <= self.window <= self.fft_size:
            raise ValueError(f"need 0 < hop <= window <= fft_size, got "
                             f"{self.hop}/{self.window}/{self.fft_size}")
        if self.bands <= 0:
            raise ValueError("band count must be positive")

    @classmethod
    def desk(cls, sample_rate: int = 8000) -> "MelConfig":
        """Small preset for 8 kHz desk-scale runs."""
        return cls(bands=80, fft_size=512, window=512, hop=128, fmin=60.0,
                   fmax=0.5 * sample_rate)


@dataclass
class CqccConfig:
    bins_per_octave: int = 96
    octaves: int = 9
    n_coeffs: int = 20
    resample_points: int = 512
    hop: int = 160
    max_kernel: int = 4096

    def __post_init__(self):
        for name in ("bins_per_octave", "octaves", "n_coeffs", "resample_points", "hop",
                     "max_kernel"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_coeffs > self.resample_points:
            raise ValueError("n_coeffs cannot exceed resample_points")

    @classmethod
    def desk(cls) -> "CqccConfig":
        return cls(bins_per_octave=24, octaves=6, n_coeffs=20, resample_points=128,
                   hop=80, max_kernel=4096)


# ---------------------------------------------------------------------------
# Framing helpers
# ---------------------------------------------------------------------------

def frame_signal(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    """Non-centered sliding frames: shape (floor((len-frame)/hop)+1, frame)."""
    if x.size < frame:
        return np.empty((0, frame), dtype=np.float64)
    return np.lib.stride_tricks.sliding_window_view(x, frame)[::hop]


def frame_rms_db(x: np.ndarray, sample_rate: int, frame_s: float = 0.02,
                 hop_s: float = 0.01) -> np.ndarray:
    frame = max(int(round(frame_s * sample_rate)), 1)
    hop = max(int(round(hop_s * sample_rate)), 1)
    frames = frame_signal(x, frame, hop)
    if frames.shape[0] == 0:
        return np.empty(0)
    rms = np.sqrt(np.mean(frames * frames, axis=1))
    out = np.full(rms.shape, SILENCE_DB)
    nz = rms > 0
    out[nz] = np.maximum(20.0 * np.log10(rms[nz]), SILENCE_DB)
    return out


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def resample(wav: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling; output length = ceil(len * ratio)."""
    if not isinstance(target_rate, (int, np.integer)) or target_rate <= 0:
        raise ValueError(f"target rate must be a positive integer, got {target_rate!r}")
    target_rate = int(target_rate)
    if target_rate == wav.sample_rate:
        return Waveform(wav.samples.copy(), wav.sample_rate)
    g = np.gcd(wav.sample_rate, target_rate)
    up, down = target_rate // g, wav.sample_rate // g
    out = sps.resample_poly(wav.samples, up, down)
    return Waveform(np.clip(out, -1.0, 1.0), target_rate)


# ---------------------------------------------------------------------------
# Mel spectrogram and deltas
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig, sample_rate: int) -> np.ndarray:
    """Triangular mel filters as a (bands, fft_bins) weight matrix."""
    fmax = cfg.fmax if cfg.fmax is not None else sample_rate / 2.0
    if not 0 <= cfg.fmin < fmax <= sample_rate / 2.0 + 1e-9:
        raise ValueError(f"need 0 <= fmin < fmax <= Nyquist, got {cfg.fmin}/{fmax}"
                         f" at rate {sample_rate}")
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.bands + 2))
    bin_freqs = np.arange(cfg.fft_size // 2 + 1) * sample_rate / cfg.fft_size
    fb = np.zeros((cfg.bands, bin_freqs.size))
    for b in range(cfg.bands):
        lo, center, hi = edges[b], edges[b + 1], edges[b + 2]
        rising = (bin_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - center, 1e-12)
        fb[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def mel_center_frequencies(cfg: MelConfig, sample_rate: int) -> np.ndarray:
    fmax = cfg.fmax if cfg.fmax is not None else sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.bands + 2))
    return edges[1:-1]


def mel_spectrogram(wav: Waveform, cfg: MelConfig | None = None) -> FeatureMatrix:
    """Log mel filterbank energies; frames = floor((len-window)/hop)+1."""
    cfg = cfg or MelConfig()
    if len(wav) < cfg.window:
        raise ValueError(f"input of {len(wav)} samples shorter than analysis window {cfg.window}")
    frames = frame_signal(wav.samples, cfg.window, cfg.hop)
    windowed = frames * np.hanning(cfg.window)
    spec = np.fft.rfft(windowed, n=cfg.fft_size, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    fb = mel_filterbank(cfg, wav.sample_rate)
    energies = power @ fb.T
    values = np.maximum(np.log(np.maximum(energies, 1e-300)), cfg.log_floor)
    return FeatureMatrix(values, cfg.hop / wav.sample_rate, "mel")


def _central_diff(x: np.ndarray) -> np.ndarray:
    padded = np.vstack([x[:1], x, x[-1:]])
    return (padded[2:] - padded[:-2]) / 2.0


def append_deltas(feat: FeatureMatrix) -> FeatureMatrix:
    """Append first and second central-difference derivatives (dims triple)."""
    if feat.n_frames < 1:
        raise ValueError("cannot compute deltas of an empty feature matrix")
    d1 = _central_diff(feat.values)
    d2 = _central_diff(d1)
    kind = "mel_delta" if feat.kind == "mel" else feat.kind
    return FeatureMatrix(np.hstack([feat.values, d1, d2]), feat.frame_hop, kind)


# ---------------------------------------------------------------------------
# Mu-law companding
# ---------------------------------------------------------------------------

def _check_bits(bits: int):
    if not isinstance(bits, (int, np.integer)) or not 2 <= bits <= 16:
        raise ValueError(f"mu-law bit depth must lie in [2, 16], got {bits!r}")


def mu_law_encode(wav, bits: int = 10) -> np.ndarray:
    """Compand amplitudes to integer classes in [0, 2^bits - 1].

    Out-of-range inputs are clamped (with a warning).  The mapping is
    monotone non-decreasing in amplitude.
    """
    _check_bits(bits)
    x = wav.samples if isinstance(wav, Waveform) else np.asarray(wav, dtype=np.float64)
    n_clip = int(np.count_nonzero(np.abs(x) > 1.0))
    if n_clip:
        warnings.warn(f"mu-law encode clamped {n_clip} out-of-range amplitudes")
        x = np.clip(x, -1.0, 1.0)
    mu = float(2 ** bits - 1)
    y = np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)
    idx = np.floor((y + 1.0) / 2.0 * 2 ** bits).astype(np.int32)
    return np.clip(idx, 0, 2 ** bits - 1)


def mu_law_decode(indices: np.ndarray, bits: int, sample_rate: int) -> Waveform:
    """Expand integer classes back to amplitudes in [-1, 1] (bin centers)."""
    _check_bits(bits)
    idx = np.asarray(indices, dtype=np.float64)
    if idx.size and (idx.min() < 0 or idx.max() > 2 ** bits - 1):
        raise ValueError("mu-law indices outside class range")
    mu = float(2 ** bits - 1)
    y = 2.0 * (idx + 0.5) / 2 ** bits - 1.0
    x = np.sign(y) * np.expm1(np.abs(y) * np.log1p(mu)) / mu
    return Waveform(np.clip(x, -1.0, 1.0), sample_rate)


# ---------------------------------------------------------------------------
# SNR estimation
# ---------------------------------------------------------------------------

def estimate_snr(wav: Waveform, *, frame_s: float = 0.02, hop_s: float = 0.01,
                 noise_percentile: float = 15.0, signal_percentile: float = 95.0) -> float:
    """Signal-to-noise estimate from the frame-RMS histogram.

    The noise floor is a low percentile of per-frame RMS in dB, the signal
    level a high percentile; the estimate is their difference.  Invariant to
    global gain by construction.
    """
    if wav.duration < 0.5:
        raise ValueError(f"SNR estimation needs at least 0.5 s of audio, got {wav.duration:.3f} s")
    db = frame_rms_db(wav.samples, wav.sample_rate, frame_s, hop_s)
    noise = np.percentile(db, noise_percentile)
    signal = np.percentile(db, signal_percentile)
    return float(signal - noise)


# ---------------------------------------------------------------------------
# Constant-Q cepstra
# ---------------------------------------------------------------------------

def cqt_frequencies(cfg: CqccConfig, sample_rate: int) -> np.ndarray:
    """Geometric center frequencies, highest just below 0.95 * Nyquist."""
    fmax = 0.95 * sample_rate / 2.0
    fmin = fmax / 2.0 ** cfg.octaves
    n_bins = cfg.bins_per_octave * cfg.octaves
    return fmin * 2.0 ** (np.arange(n_bins) / cfg.bins_per_octave)


def _cqt_kernels(cfg: CqccConfig, sample_rate: int):
    freqs = cqt_frequencies(cfg, sample_rate)
    q = 1.0 / (2.0 ** (1.0 / cfg.bins_per_octave) - 1.0)
    lengths = np.minimum(np.round(q * sample_rate / freqs).astype(int), cfg.max_kernel)
    n_max = int(lengths.max())
    cos_k = np.zeros((freqs.size, n_max))
    sin_k = np.zeros((freqs.size, n_max))
    for k, (f, n_k) in enumerate(zip(freqs, lengths)):
        n_k = int(n_k)
        off = (n_max - n_k) // 2
        n = np.arange(n_k)
        win = np.hanning(n_k)
        phase = 2.0 * np.pi * f * (n - n_k / 2.0) / sample_rate
        norm = win.sum()
        cos_k[k, off:off + n_k] = win * np.cos(phase) / norm
        sin_k[k, off:off + n_k] = -win * np.sin(phase) / norm
    return freqs, cos_k, sin_k, n_max


def cepstra_from_log_spectra(log_spec: np.ndarray, freqs: np.ndarray,
                             resample_points: int, n_coeffs: int) -> np.ndarray:
    """Uniformly resample geometric-frequency log spectra, then DCT-II.

    A spectrally flat frame yields energy only in coefficient 0.
    """
    grid = np.linspace(freqs[0], freqs[-1], resample_points)
    uniform = np.empty((log_spec.shape[0], resample_points))
    for i in range(log_spec.shape[0]):
        uniform[i] = np.interp(grid, freqs, log_spec[i])
    return dct(uniform, type=2, axis=1, norm="ortho")[:, :n_coeffs]


def extract_cqcc(wav: Waveform, cfg: CqccConfig | None = None) -> FeatureMatrix:
    """Constant-Q cepstral coefficients with first and second derivatives.

    Pipeline: constant-Q transform -> power -> log -> uniform resampling of
    the log spectrum -> DCT -> first n_coeffs coefficients, then deltas.
    """
    cfg = cfg or CqccConfig()
    freqs, cos_k, sin_k, n_max = _cqt_kernels(cfg, wav.sample_rate)
    if len(wav) < n_max:
        raise ValueError(f"input of {len(wav)} samples shorter than longest"
                         f" constant-Q kernel ({n_max})")
    frames = frame_signal(wav.samples, n_max, cfg.hop)
    re = frames @ cos_k.T
    im = frames @ sin_k.T
    log_power = np.log(np.maximum(re * re + im * im, 1e-300))
    coeffs = cepstra_from_log_spectra(log_power, freqs, cfg.resample_points, cfg.n_coeffs)
    base = FeatureMatrix(coeffs, cfg.hop / wav.sample_rate, "cqcc")
    return append_deltas(base)
