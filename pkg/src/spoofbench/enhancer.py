"""Waveform-domain speech enhancement: streaming chunker, spectral-subtraction
baseline, and a residual encoder-decoder GAN trained in two phases (baseline
targets first, clean targets after warm-up)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .dsp import Waveform, frame_rms_db
from .errors import TrainingDivergedError
from .nn import layers as L
from .nn import tensor as T
from .nn.checkpoint import ParameterSet, config_digest
from .nn.optim import RmspropState, collect_grads, rmsprop_step, zero_grads


@dataclass
class ChunkSpec:
    window: int = 2 ** 14
    hop_train: int = 2 ** 13
    hop_infer: int | None = None  # None -> window (no overlap)

    def __post_init__(self):
        if self.window <= 0 or self.window & (self.window - 1):
            raise ValueError(f"window must be a power of two, got {self.window}")
        if self.hop_infer is None:
            self.hop_infer = self.window
        for hop in (self.hop_train, self.hop_infer):
            if not 0 < hop <= self.window:
                raise ValueError(f"need 0 < hop <= window, got hop={hop} window={self.window}")


@dataclass
class CoverageEntry:
    chunk_index: int
    start_in_chunk: int  # first fresh sample within the chunk
    out_start: int
    out_end: int
    zero_padded: int = 0  # leading zeros added for inputs shorter than window


@dataclass
class CoverageMap:
    entries: list[CoverageEntry]
    total_length: int
    sample_rate: int
    window: int


def chunk_stream(wav: Waveform, spec: ChunkSpec, mode: str = "infer"
                 ) -> tuple[list[np.ndarray], CoverageMap]:
    """Slice a waveform into fixed-length chunks plus a fresh-sample map.

    Train mode slides by hop_train (overlapping); infer mode by hop_infer.
    A trailing partial chunk is pre-padded with the preceding samples so
    every chunk is exactly `window` long; inputs shorter than the window
    are left-padded with zeros and flagged.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got '{mode}'")
    if len(wav) < 1:
        raise ValueError("cannot chunk an empty waveform")
    x = wav.samples
    w = spec.window
    hop = spec.hop_train if mode == "train" else spec.hop_infer
    chunks: list[np.ndarray] = []
    entries: list[CoverageEntry] = []

    if len(x) < w:
        pad = w - len(x)
        chunks.append(np.concatenate([np.zeros(pad), x]))
        entries.append(CoverageEntry(0, pad, 0, len(x), zero_padded=pad))
        return chunks, CoverageMap(entries, len(x), wav.sample_rate, w)

    covered = 0
    offset = 0
    while offset + w <= len(x):
        chunks.append(x[offset:offset + w].copy())
        entries.append(CoverageEntry(len(chunks) - 1, covered - offset, covered, offset + w))
        covered = offset + w
        offset += hop
    if covered < len(x):
        # pre-pad the final partial chunk with the samples before it
        chunks.append(x[len(x) - w:].copy())
        start_in_chunk = w - (len(x) - covered)
        entries.append(CoverageEntry(len(chunks) - 1, start_in_chunk, covered, len(x)))
    return chunks, CoverageMap(entries, len(x), wav.sample_rate, w)


def concat_stream(chunks: list[np.ndarray], coverage: CoverageMap) -> Waveform:
    """Re-assemble chunks by emitting each chunk's fresh span in order."""
    out = np.empty(coverage.total_length)
    expected = 0
    for e in coverage.entries:
        if e.out_start != expected or e.out_end > coverage.total_length:
            raise ValueError(f"coverage map is not contiguous at sample {e.out_start}")
        if not 0 <= e.chunk_index < len(chunks):
            raise ValueError(f"coverage references missing chunk {e.chunk_index}")
        chunk = np.asarray(chunks[e.chunk_index])
        span = e.out_end - e.out_start
        if chunk.shape[0] != coverage.window or e.start_in_chunk + span > chunk.shape[0]:
            raise ValueError(f"chunk {e.chunk_index} inconsistent with coverage entry")
        out[e.out_start:e.out_end] = chunk[e.start_in_chunk:e.start_in_chunk + span]
        expected = e.out_end
    if expected != coverage.total_length:
        raise ValueError(f"coverage stops at {expected} of {coverage.total_length} samples")
    return Waveform(np.clip(out, -1.0, 1.0), coverage.sample_rate)


# ---------------------------------------------------------------------------
# Baseline pre-enhancement (spectral subtraction + Wiener-style gain floor)
# ---------------------------------------------------------------------------

def baseline_pre_enhance(wav: Waveform, *, nperseg: int = 512, gain_floor: float = 0.1,
                         oversubtract: float = 2.0) -> Waveform:
    """Classic spectral subtraction with the noise profile taken from the
    lowest-energy frames.

    Subtraction strength scales with the frame-energy dynamic range, so a
    stationary input with no pauses (nothing to learn a noise profile from)
    passes through nearly unchanged.
    """
    x = wav.samples
    if len(x) < nperseg * 2:
        return Waveform(x.copy(), wav.sample_rate)
    hop = nperseg // 4
    freqs, times, stft = sps.stft(x, fs=wav.sample_rate, nperseg=nperseg,
                                  noverlap=nperseg - hop)
    mag = np.abs(stft)
    energy_db = 10.0 * np.log10(np.maximum((mag ** 2).sum(axis=0), 1e-20))
    spread = np.percentile(energy_db, 85) - np.percentile(energy_db, 15)
    strength = float(np.clip(spread / 6.0 - 0.25, 0.0, 1.0))

    n_quiet = max(int(round(0.1 * mag.shape[1])), 1)
    quiet = np.argsort(energy_db)[:n_quiet]
    noise_prof = mag[:, quiet].mean(axis=1, keepdims=True)
    sub = np.minimum(oversubtract * noise_prof / np.maximum(mag, 1e-12), 1.0 - gain_floor)
    gain = 1.0 - strength * sub
    _, out = sps.istft(stft * gain, fs=wav.sample_rate, nperseg=nperseg,
                       noverlap=nperseg - hop)
    if out.size < len(x):
        out = np.pad(out, (0, len(x) - out.size))
    return Waveform(np.clip(out[:len(x)], -1.0, 1.0), wav.sample_rate)


# ---------------------------------------------------------------------------
# Residual encoder-decoder GAN
# ---------------------------------------------------------------------------

@dataclass
class SeganConfig:
    encoder: tuple = ((16, 9, 2), (32, 9, 2), (64, 9, 2))  # (channels, kernel, stride)
    disc: tuple = ((16, 9, 2), (32, 9, 2), (64, 9, 2))
    residual_skip: bool = True
    iterations: int = 400
    warmup_iterations: int | None = None  # None -> 10% of iterations
    batch_size: int = 100
    learning_rate: float = 2e-4
    lambda_adv: float = 1.0
    lambda_l1: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.warmup_iterations is None:
            self.warmup_iterations = max(self.iterations // 10, 1)


MODEL_KIND = "segan"


def build_segan_params(cfg: SeganConfig, rng: np.random.Generator) -> dict:
    params: dict = {}
    c_prev = 1
    for i, (ch, k, _s) in enumerate(cfg.encoder):
        L.init_conv(params, f"gen/enc{i}", k, c_prev, ch, rng)
        c_prev = ch
    enc_ch = [ch for ch, _k, _s in cfg.encoder]
    dec_ch = list(reversed(enc_ch[:-1])) + [max(enc_ch[0] // 2, 4)]
    for i, ch in enumerate(dec_ch):
        k = cfg.encoder[len(cfg.encoder) - 1 - i][1]
        L.init_conv(params, f"gen/dec{i}", k, c_prev, ch, rng)
        c_prev = ch + (enc_ch[len(cfg.encoder) - 2 - i] if i < len(dec_ch) - 1 else 0)
    # zero-initialized residual head: the untrained generator is the identity
    L.init_conv(params, "gen/out", 9, c_prev, 1, rng, zero=True)

    c_prev = 2  # (candidate, noisy) pair
    for i, (ch, k, _s) in enumerate(cfg.disc):
        L.init_conv(params, f"disc/conv{i}", k, c_prev, ch, rng)
        c_prev = ch
    L.init_affine(params, "disc/out", c_prev, 1, rng)
    return params


def generator_forward(params: dict, cfg: SeganConfig, x: T.Tensor) -> T.Tensor:
    """x: (B, W, 1) -> enhanced (B, W, 1); output = input + learned residual."""
    h = x
    skips = []
    for i, (_ch, _k, s) in enumerate(cfg.encoder):
        h = T.leaky_relu(L.conv1d(h, params[f"gen/enc{i}/W"], params[f"gen/enc{i}/b"],
                                  stride=s, padding="same"))
        skips.append(h)
    n_dec = len(cfg.encoder)
    for i in range(n_dec):
        s = cfg.encoder[n_dec - 1 - i][2]
        h = T.leaky_relu(L.conv1d_transpose(h, params[f"gen/dec{i}/W"],
                                            params[f"gen/dec{i}/b"], stride=s))
        if i < n_dec - 1:
            h = T.concat([h, skips[n_dec - 2 - i]], axis=2)
    residual = L.conv1d(h, params["gen/out/W"], params["gen/out/b"], padding="same")
    return T.add(x, residual) if cfg.residual_skip else residual


def discriminator_forward(params: dict, cfg: SeganConfig, candidate: T.Tensor,
                          noisy: T.Tensor) -> T.Tensor:
    h = T.concat([candidate, noisy], axis=2)
    for i, (_ch, _k, s) in enumerate(cfg.disc):
        h = T.leaky_relu(L.conv1d(h, params[f"disc/conv{i}/W"], params[f"disc/conv{i}/b"],
                                  stride=s, padding="same"))
    pooled = T.tmean(h, axis=1)
    return L.affine(pooled, params["disc/out/W"], params["disc/out/b"])


def _subset(params: dict, prefix: str) -> dict:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def train_segan(pairs, cfg: SeganConfig, chunk_spec: ChunkSpec | None = None, *,
                log_path=None) -> ParameterSet:
    """Train the enhancement GAN on sample-aligned (noisy, clean) waveform pairs.

    Phase 1 (warm-up) uses the baseline pre-enhanced signal as the L1 target;
    phase 2 switches to the clean signal.  A least-squares adversarial loss
    runs throughout.
    """
    chunk_spec = chunk_spec or ChunkSpec()
    noisy_chunks, clean_chunks, base_chunks = [], [], []
    for noisy, clean in pairs:
        if len(noisy) != len(clean) or noisy.sample_rate != clean.sample_rate:
            raise ValueError("noisy/clean pair is not sample-aligned")
        baseline = baseline_pre_enhance(noisy)
        nc, _ = chunk_stream(noisy, chunk_spec, "train")
        cc, _ = chunk_stream(clean, chunk_spec, "train")
        bc, _ = chunk_stream(baseline, chunk_spec, "train")
        noisy_chunks.extend(nc)
        clean_chunks.extend(cc)
        base_chunks.extend(bc)
    if not noisy_chunks:
        raise ValueError("no training chunks produced")
    noisy_arr = np.stack(noisy_chunks)[:, :, None]
    clean_arr = np.stack(clean_chunks)[:, :, None]
    base_arr = np.stack(base_chunks)[:, :, None]

    rng = np.random.default_rng(cfg.seed)
    params = build_segan_params(cfg, rng)
    gen_params = _subset(params, "gen/")
    disc_params = _subset(params, "disc/")
    gen_opt = RmspropState(learning_rate=cfg.learning_rate)
    disc_opt = RmspropState(learning_rate=cfg.learning_rate)

    log_rows = []
    curves = {"l1": [], "adv": [], "d": [], "phase": []}
    for step in range(cfg.iterations):
        phase = 1 if step < cfg.warmup_iterations else 2
        idx = rng.choice(noisy_arr.shape[0], size=min(cfg.batch_size, noisy_arr.shape[0]),
                         replace=False)
        x = T.constant(noisy_arr[idx])
        clean_t = T.constant(clean_arr[idx])
        target = T.constant(base_arr[idx] if phase == 1 else clean_arr[idx])

        # discriminator: real pair scores toward 1, enhanced pair toward 0
        with T.no_grad():
            fake_data = generator_forward(gen_params, cfg, x).data
        zero_grads(params)
        d_real = discriminator_forward(disc_params, cfg, clean_t, x)
        d_fake = discriminator_forward(disc_params, cfg, T.constant(fake_data), x)
        d_loss = T.add(T.tmean(T.square(d_real - 1.0)), T.tmean(T.square(d_fake)))
        d_loss = T.mul(d_loss, 0.5)
        d_loss.backward()
        rmsprop_step(disc_params, collect_grads(disc_params), disc_opt)

        # generator: fool the discriminator while matching the L1 target
        zero_grads(params)
        enhanced = generator_forward(gen_params, cfg, x)
        g_adv = T.mul(T.tmean(T.square(
            discriminator_forward(disc_params, cfg, enhanced, x) - 1.0)), 0.5)
        g_l1 = T.tmean(T.absolute(enhanced - target))
        g_loss = T.add(T.mul(g_adv, cfg.lambda_adv), T.mul(g_l1, cfg.lambda_l1))
        g_loss.backward()
        rmsprop_step(gen_params, collect_grads(gen_params), gen_opt)

        row = {"step": step, "phase": phase, "l1_loss": float(g_l1.data),
               "adv_loss": float(g_adv.data), "d_loss": float(d_loss.data)}
        if not all(np.isfinite(v) for v in (row["l1_loss"], row["adv_loss"], row["d_loss"])):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        log_rows.append(row)
        curves["l1"].append(row["l1_loss"])
        curves["adv"].append(row["adv_loss"])
        curves["d"].append(row["d_loss"])
        curves["phase"].append(phase)

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for row in log_rows:
                fh.write(json.dumps(row) + "\n")

    buffers = {f"log/{k}": np.asarray(v, dtype=np.float64) for k, v in curves.items()}
    buffers["chunk/window"] = np.asarray([chunk_spec.window], dtype=np.float64)
    return ParameterSet(kind=MODEL_KIND, config_digest=config_digest(cfg),
                        step=cfg.iterations, params=params, buffers=buffers)


def enhance(wav: Waveform, ckpt: ParameterSet, cfg: SeganConfig | None = None,
            chunk_spec: ChunkSpec | None = None) -> Waveform:
    """Run the generator chunk-wise and stitch fresh spans back together."""
    if ckpt.kind != MODEL_KIND:
        raise ValueError(f"checkpoint is a '{ckpt.kind}' model, expected '{MODEL_KIND}'")
    cfg = cfg or SeganConfig()
    if chunk_spec is None:
        window = int(ckpt.buffers.get("chunk/window", [ChunkSpec().window])[0])
        chunk_spec = ChunkSpec(window=window, hop_train=max(window // 2, 1))
    gen_params = _subset(ckpt.params, "gen/")
    chunks, coverage = chunk_stream(wav, chunk_spec, "infer")
    out_chunks = []
    with T.no_grad():
        for chunk in chunks:
            y = generator_forward(gen_params, cfg, T.constant(chunk[None, :, None]))
            out_chunks.append(np.clip(y.data[0, :, 0], -1.0, 1.0))
    return concat_stream(out_chunks, coverage)
