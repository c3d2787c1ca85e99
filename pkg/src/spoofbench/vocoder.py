"""Neural waveform vocoder: gated dilated causal convolutions over mu-law
classes, conditioned on upsampled mel frames through a recurrent encoder.
Generation runs sample-by-sample with per-block ring buffers."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dsp import FeatureMatrix, MelConfig, Waveform, mel_spectrogram, mu_law_decode, mu_law_encode
from .errors import TrainingDivergedError
from .nn import layers as L
from .nn import tensor as T
from .nn.checkpoint import ParameterSet, config_digest
from .nn.optim import RmspropState, collect_grads, rmsprop_step, zero_grads

MODEL_KIND = "wavenet"


@dataclass
class WaveNetConfig:
    blocks: int = 40
    residual_channels: int = 24
    gate_channels: int = 24
    skip_channels: int = 48
    bits: int = 10
    cond_channels: int = 16
    cond_lstm_width: int = 16
    mel_bands: int = 80
    hop: int = 128  # conditioning samples per frame
    learning_rate: float = 2e-4
    iterations: int = 500
    batch_size: int = 2
    crop_len: int = 1024
    context_len: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("need at least one dilation block")
        if not 2 <= self.bits <= 16:
            raise ValueError("bits must lie in [2, 16]")

    @property
    def dilations(self) -> list[int]:
        """Dilation of block k is 2^(k mod 10)."""
        return [2 ** (k % 10) for k in range(self.blocks)]

    @property
    def classes(self) -> int:
        return 2 ** self.bits

    @classmethod
    def desk(cls, **overrides) -> "WaveNetConfig":
        """8 kHz / 8-bit / 10-block preset for desk-scale runs."""
        base = dict(blocks=10, bits=8, residual_channels=24, gate_channels=24,
                    skip_channels=48, mel_bands=80, hop=128)
        base.update(overrides)
        return cls(**base)


@dataclass
class ConditioningTrack:
    """Per-sample conditioning vectors; length equals the waveform length."""

    values: np.ndarray
    sample_rate: int

    def __len__(self):
        return self.values.shape[0]


def receptive_field(cfg: WaveNetConfig) -> int:
    """Past samples influencing one output: 1 + sum of dilations (kernel 2)."""
    return 1 + sum(cfg.dilations)


def _check_ckpt(ckpt: ParameterSet, cfg: WaveNetConfig) -> None:
    if ckpt.kind != MODEL_KIND:
        raise ValueError(f"checkpoint is a '{ckpt.kind}' model, expected '{MODEL_KIND}'")
    if f"block{cfg.blocks - 1}/conv/W" not in ckpt.params \
            or f"block{cfg.blocks}/conv/W" in ckpt.params:
        raise ValueError(f"checkpoint block count does not match config ({cfg.blocks})")
    classes = ckpt.params["head1/W"].data.shape[1]
    if classes != cfg.classes:
        raise ValueError(f"checkpoint has {classes} mu-law classes, config says {cfg.classes}")


# ---------------------------------------------------------------------------
# Parameters and batch forward
# ---------------------------------------------------------------------------

def build_wavenet_params(cfg: WaveNetConfig, rng: np.random.Generator) -> dict:
    params: dict = {}
    L.init_bilstm(params, "cond/bi", cfg.mel_bands + 1, cfg.cond_lstm_width, rng)
    L.init_conv(params, "cond/conv", 3, 2 * cfg.cond_lstm_width, cfg.cond_channels, rng)
    L.init_affine(params, "in_proj", cfg.classes, cfg.residual_channels, rng)
    for k, _d in enumerate(cfg.dilations):
        L.init_conv(params, f"block{k}/conv", 2, cfg.residual_channels,
                    2 * cfg.gate_channels, rng)
        L.init_affine(params, f"block{k}/cond", cfg.cond_channels, 2 * cfg.gate_channels, rng)
        L.init_affine(params, f"block{k}/res", cfg.gate_channels, cfg.residual_channels, rng)
        L.init_affine(params, f"block{k}/skip", cfg.gate_channels, cfg.skip_channels, rng)
    L.init_affine(params, "head0", cfg.skip_channels, cfg.skip_channels, rng)
    L.init_affine(params, "head1", cfg.skip_channels, cfg.classes, rng)
    return params


def _cond_frames_forward(params: dict, cfg: WaveNetConfig, frames: T.Tensor) -> T.Tensor:
    """(1, N, mel+1) standardized frames -> (1, N, cond_channels)."""
    h = L.bilstm(frames, params, "cond/bi")
    return L.conv1d(h, params["cond/conv/W"], params["cond/conv/b"], padding="same")


def wavenet_logits(params: dict, cfg: WaveNetConfig, classes_in: np.ndarray,
                   cond: T.Tensor) -> T.Tensor:
    """Teacher-forced logits: position i predicts the sample after input i.

    classes_in: (B, T) integer mu-law classes; cond: (B, T, cond_channels)
    aligned to the predicted positions.
    """
    b, t_len = classes_in.shape
    onehot = np.zeros((b, t_len, cfg.classes))
    bi = np.repeat(np.arange(b), t_len)
    onehot[bi, np.tile(np.arange(t_len), b), classes_in.reshape(-1)] = 1.0
    h = L.affine(T.constant(onehot), params["in_proj/W"], params["in_proj/b"])
    skip_sum = None
    g = cfg.gate_channels
    for k, d in enumerate(cfg.dilations):
        z = L.conv1d(h, params[f"block{k}/conv/W"], params[f"block{k}/conv/b"],
                     dilation=d, padding="causal")
        z = T.add(z, L.affine(cond, params[f"block{k}/cond/W"], params[f"block{k}/cond/b"]))
        act = L.gated(T.slice_axis(z, 2, 0, g), T.slice_axis(z, 2, g, 2 * g))
        h = T.add(h, L.affine(act, params[f"block{k}/res/W"], params[f"block{k}/res/b"]))
        s = L.affine(act, params[f"block{k}/skip/W"], params[f"block{k}/skip/b"])
        skip_sum = s if skip_sum is None else T.add(skip_sum, s)
    out = T.relu(skip_sum)
    out = T.relu(L.affine(out, params["head0/W"], params["head0/b"]))
    return L.affine(out, params["head1/W"], params["head1/b"])


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------

def _standardize_frames(feat: FeatureMatrix, condition: float, buffers: dict) -> np.ndarray:
    mel = (feat.values - buffers["norm/mel_mean"]) / buffers["norm/mel_std"]
    cond_col = np.full((feat.n_frames, 1), float(condition))
    return np.hstack([mel, cond_col])


def encode_conditioning(feat: FeatureMatrix, condition: float, target_len: int,
                        ckpt: ParameterSet, cfg: WaveNetConfig | None = None
                        ) -> ConditioningTrack:
    """Encode acoustic frames plus a condition code into a per-sample track.

    Frames pass through the recurrent encoder, then nearest-frame upsampling
    stretches them to `target_len` samples (must agree with the frame count
    within one hop).
    """
    cfg = cfg or WaveNetConfig()
    _check_ckpt(ckpt, cfg)
    if feat.n_frames == 0:
        raise ValueError("conditioning needs at least one frame")
    n_samples = feat.n_frames * cfg.hop
    if abs(target_len - n_samples) > cfg.hop:
        raise ValueError(f"target length {target_len} inconsistent with {feat.n_frames}"
                         f" frames at hop {cfg.hop}")
    frames = _standardize_frames(feat, condition, ckpt.buffers)
    with T.no_grad():
        enc = _cond_frames_forward(ckpt.params, cfg, T.constant(frames[None]))
    track = np.repeat(enc.data[0], cfg.hop, axis=0)
    if track.shape[0] < target_len:
        track = np.vstack([track, np.repeat(track[-1:], target_len - track.shape[0], axis=0)])
    sample_rate = int(round(cfg.hop / feat.frame_hop))
    return ConditioningTrack(track[:target_len], sample_rate)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_vocoder(corpus, cfg: WaveNetConfig | None = None, *, log_path=None
                  ) -> ParameterSet:
    """Teacher-forced cross-entropy training on next-sample mu-law classes.

    `corpus` is a sequence of (Waveform, mel FeatureMatrix, condition code)
    with mel frames aligned to the waveform at the configured hop.
    """
    cfg = cfg or WaveNetConfig()
    if not corpus:
        raise ValueError("training needs at least one utterance")
    items = []
    for wav, mel, condition in corpus:
        if abs(len(wav) - mel.n_frames * cfg.hop) > cfg.hop:
            raise ValueError("mel frames do not align with the waveform at the config hop")
        items.append((mu_law_encode(wav, cfg.bits), mel, float(condition)))

    all_mel = np.vstack([mel.values for _c, mel, _k in items])
    buffers = {"norm/mel_mean": all_mel.mean(axis=0),
               "norm/mel_std": np.maximum(all_mel.std(axis=0), 1e-6),
               "mu_law/classes": np.asarray([cfg.classes], dtype=np.float64)}

    rng = np.random.default_rng(cfg.seed)
    params = build_wavenet_params(cfg, rng)
    opt = RmspropState(learning_rate=cfg.learning_rate)
    losses, accs, log_rows = [], [], []
    ctx, crop = cfg.context_len, cfg.crop_len

    for step in range(cfg.iterations):
        classes, mel, condition = items[int(rng.integers(len(items)))]
        frames = _standardize_frames(mel, condition, buffers)
        zero_grads(params)
        cond_frames = _cond_frames_forward(params, cfg, T.constant(frames[None]))
        cond_up = T.repeat_axis(cond_frames, cfg.hop, axis=1)
        l_eff = min(classes.shape[0], cond_up.data.shape[1])
        lo = ctx
        hi = l_eff - crop - 1
        if hi <= lo:
            raise ValueError(f"utterance of {l_eff} samples too short for"
                             f" crop {crop} + context {ctx}")
        in_batch, cond_parts, tgt_batch, masks = [], [], [], []
        for b in range(cfg.batch_size):
            # the first crop always covers the utterance start so the model
            # learns the zero-history behaviour generation begins from
            t0 = ctx if b == 0 else int(rng.integers(lo, hi + 1))
            in_batch.append(classes[t0 - ctx:t0 + crop])
            cond_parts.append(T.slice_axis(cond_up, 1, t0 - ctx + 1, t0 + crop + 1))
            tgt_batch.append(classes[t0 - ctx + 1:t0 + crop + 1])
            mask = np.ones(ctx + crop) if b == 0 else \
                np.concatenate([np.zeros(ctx), np.ones(crop)])
            masks.append(mask)
        logits = wavenet_logits(params, cfg, np.stack(in_batch), T.concat(cond_parts, axis=0))
        targets = np.stack(tgt_batch)
        weights = np.stack(masks)
        loss = T.softmax_cross_entropy(logits, targets, weights)
        loss.backward()
        rmsprop_step(params, collect_grads(params), opt)

        val = float(loss.data)
        if not np.isfinite(val):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        hit = (logits.data.argmax(axis=2) == targets) * weights
        acc = float(hit.sum() / weights.sum())
        losses.append(val)
        accs.append(acc)
        log_rows.append({"step": step, "ce_loss": val, "top1_acc": acc})

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for row in log_rows:
                fh.write(json.dumps(row) + "\n")

    buffers["log/ce"] = np.asarray(losses)
    buffers["log/acc"] = np.asarray(accs)
    return ParameterSet(kind=MODEL_KIND, config_digest=config_digest(cfg),
                        step=cfg.iterations, params=params, buffers=buffers)


# ---------------------------------------------------------------------------
# Incremental generation
# ---------------------------------------------------------------------------

class _Stepper:
    """Single-sample forward pass with per-block ring buffers of past inputs."""

    def __init__(self, ckpt: ParameterSet, cfg: WaveNetConfig):
        p = {k: v.data for k, v in ckpt.params.items()}
        self.cfg = cfg
        self.in_w, self.in_b = p["in_proj/W"], p["in_proj/b"]
        self.blocks = []
        for k, d in enumerate(cfg.dilations):
            w = p[f"block{k}/conv/W"]
            self.blocks.append({
                "d": d, "w_past": w[0], "w_cur": w[1], "b": p[f"block{k}/conv/b"],
                "wc": p[f"block{k}/cond/W"], "bc": p[f"block{k}/cond/b"],
                "wr": p[f"block{k}/res/W"], "br": p[f"block{k}/res/b"],
                "ws": p[f"block{k}/skip/W"], "bs": p[f"block{k}/skip/b"],
                "buf": np.zeros((d, cfg.residual_channels)),
            })
        self.h0_w, self.h0_b = p["head0/W"], p["head0/b"]
        self.h1_w, self.h1_b = p["head1/W"], p["head1/b"]
        self.t = 0

    def step(self, prev_class: int, cond_t: np.ndarray) -> np.ndarray:
        """Distribution over the next sample given the previous class."""
        cfg = self.cfg
        g = cfg.gate_channels
        h = self.in_w[prev_class] + self.in_b
        skip = np.zeros(cfg.skip_channels)
        for blk in self.blocks:
            slot = self.t % blk["d"]
            past = blk["buf"][slot].copy()
            blk["buf"][slot] = h
            z = past @ blk["w_past"] + h @ blk["w_cur"] + blk["b"] + cond_t @ blk["wc"] + blk["bc"]
            act = np.tanh(z[:g]) * _sigmoid(z[g:])
            h = h + act @ blk["wr"] + blk["br"]
            skip += act @ blk["ws"] + blk["bs"]
        out = np.maximum(skip, 0.0)
        out = np.maximum(out @ self.h0_w + self.h0_b, 0.0)
        logits = out @ self.h1_w + self.h1_b
        self.t += 1
        z = logits - logits.max()
        e = np.exp(z)
        return e / e.sum()


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def next_sample_distribution(history, cond: ConditioningTrack, ckpt: ParameterSet,
                             cfg: WaveNetConfig | None = None) -> np.ndarray:
    """Probability vector over mu-law classes for the sample following `history`.

    Causal: depends only on the history (zero-padded to the receptive field)
    and the conditioning at the predicted position.
    """
    cfg = cfg or WaveNetConfig()
    _check_ckpt(ckpt, cfg)
    hist = np.asarray(history, dtype=np.int64)
    if hist.size < 1:
        raise ValueError("history must contain at least one sample")
    t = hist.size
    if t >= len(cond):
        raise ValueError(f"no conditioning available for position {t}")
    rf = receptive_field(cfg)
    start = max(t - rf, 0)
    inputs = hist[start:t][None, :]
    cond_slice = cond.values[start + 1:t + 1][None]
    with T.no_grad():
        logits = wavenet_logits(ckpt.params, cfg, inputs, T.constant(cond_slice))
    z = logits.data[0, -1]
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def generate(cond: ConditioningTrack, ckpt: ParameterSet, seed: int = 0,
             mode: str = "sample", cfg: WaveNetConfig | None = None) -> Waveform:
    """Autoregressive synthesis; output length equals the conditioning length."""
    if mode not in ("sample", "argmax"):
        raise ValueError(f"mode must be 'sample' or 'argmax', got '{mode}'")
    cfg = cfg or WaveNetConfig()
    _check_ckpt(ckpt, cfg)
    rng = np.random.default_rng(seed)
    stepper = _Stepper(ckpt, cfg)
    out = np.empty(len(cond), dtype=np.int64)
    # the net predicts each sample from its predecessors; sample 0 has none
    # and is pinned to the zero-amplitude class, matching the causal zero
    # padding the model was trained with
    out[0] = cfg.classes // 2
    for t in range(1, len(cond)):
        probs = stepper.step(int(out[t - 1]), cond.values[t])
        if mode == "argmax":
            out[t] = int(np.argmax(probs))
        else:
            out[t] = min(int(np.searchsorted(np.cumsum(probs), rng.random())),
                         cfg.classes - 1)
    return mu_law_decode(out, cfg.bits, cond.sample_rate)


def copy_synthesis(wav: Waveform, condition: float, ckpt: ParameterSet,
                   cfg: WaveNetConfig | None = None, mel_cfg: MelConfig | None = None,
                   seed: int = 0, mode: str = "sample") -> Waveform:
    """Vocode a natural waveform's own mel frames (vocoder-quality probe).

    The tail is edge-padded before analysis so the conditioning track covers
    the input within one frame hop.
    """
    cfg = cfg or WaveNetConfig()
    mel_cfg = mel_cfg or MelConfig(bands=cfg.mel_bands, fft_size=512, window=512,
                                   hop=cfg.hop, fmin=60.0)
    if mel_cfg.hop != cfg.hop:
        raise ValueError(f"mel hop {mel_cfg.hop} differs from vocoder hop {cfg.hop}")
    pad = mel_cfg.window - mel_cfg.hop
    padded = Waveform(np.concatenate([wav.samples, np.full(pad, wav.samples[-1] if len(wav) else 0.0)]),
                      wav.sample_rate)
    mel = mel_spectrogram(padded, mel_cfg)
    track = encode_conditioning(mel, condition, len(wav), ckpt, cfg)
    return generate(track, ckpt, seed=seed, mode=mode, cfg=cfg)
