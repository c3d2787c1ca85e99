"""Autoregressive acoustic model: linguistic frames to mel frames with
previous-frame feedback, feedback dropout in both training and generation,
plus a toy linguistic featurizer driven by per-phone frame alignments."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .corpus import condition_code
from .dsp import FeatureMatrix
from .errors import TrainingDivergedError
from .nn import layers as L
from .nn import tensor as T
from .nn.checkpoint import ParameterSet, config_digest
from .nn.optim import RmspropState, collect_grads, rmsprop_step, zero_grads

MODEL_KIND = "ar-acoustic"
PHONES = tuple("abcdefghijklmnopqrstuvwxyz") + ("sil", "unk")
LINGUISTIC_DIMS = len(PHONES) + 3  # one-hot + in-phone pos + utterance pos + condition


@dataclass
class ArModelConfig:
    ff_widths: tuple = (64, 64)
    bilstm_width: int = 32
    unilstm_width: int = 64
    mel_bands: int = 80
    feedback_dropout: float = 0.25
    learning_rate: float = 2e-4
    iterations: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.feedback_dropout <= 1.0:
            raise ValueError("feedback_dropout must lie in [0, 1]")
        if len(self.ff_widths) != 2:
            raise ValueError("the model uses exactly two feedforward layers")


def _phone_index(phone: str) -> int:
    try:
        return PHONES.index(phone)
    except ValueError:
        return PHONES.index("unk")


def alignment_seconds_to_frames(alignment, hop_s: float, n_frames: int):
    """Convert (phone, start_s, end_s) spans to contiguous frame spans.

    Empty silence spans are dropped; every letter span is guaranteed at
    least one frame (boundaries are nudged forward if rounding collapsed it).
    """
    bounds = [0]
    for _phone, _t0, t1 in alignment:
        bounds.append(int(round(t1 / hop_s)))
    bounds[-1] = n_frames
    bounds = list(np.clip(np.maximum.accumulate(bounds), 0, n_frames))
    for i, (phone, _t0, _t1) in enumerate(alignment):
        if phone != "sil" and bounds[i + 1] <= bounds[i]:
            if bounds[i] + 1 > n_frames:
                raise ValueError(f"too few frames ({n_frames}) to keep phone {phone!r}")
            bounds[i + 1] = bounds[i] + 1
            for j in range(i + 2, len(bounds)):
                bounds[j] = max(bounds[j], bounds[i + 1])
    if bounds[-1] != n_frames:
        raise ValueError(f"too few frames ({n_frames}) for the alignment")
    out = []
    for i, (phone, _t0, _t1) in enumerate(alignment):
        if bounds[i + 1] > bounds[i]:
            out.append((phone, int(bounds[i]), int(bounds[i + 1])))
    return out


def toy_linguistic_frames(transcript: str, alignment, condition: str,
                          frame_hop: float = 0.016) -> FeatureMatrix:
    """Per-frame linguistic features from a phone alignment.

    Each frame carries a phone one-hot, its fractional position within the
    phone, its fractional position within the utterance, and the condition
    code of the enhancement regime.  `alignment` is a list of
    (phone, start_frame, end_frame) spans covering [0, N) without overlap.
    """
    if not alignment:
        raise ValueError("alignment must contain at least one span")
    spans = sorted(alignment, key=lambda s: s[1])
    expected = 0
    for phone, start, end in spans:
        if start != expected or end <= start:
            raise ValueError(f"alignment spans must tile [0, N): bad span"
                             f" ({phone!r}, {start}, {end}) at frame {expected}")
        expected = end
    n_frames = expected
    letters = "".join(p for p, _s, _e in spans if p != "sil")
    if letters != "".join(ch for ch in transcript if ch != " "):
        raise ValueError("alignment phones do not match the transcript")

    code = condition_code(condition)
    values = np.zeros((n_frames, LINGUISTIC_DIMS))
    for phone, start, end in spans:
        idx = _phone_index(phone)
        span = end - start
        for f in range(start, end):
            values[f, idx] = 1.0
            values[f, len(PHONES)] = (f - start) / (span - 1) if span > 1 else 0.0
    denom = max(n_frames - 1, 1)
    values[:, len(PHONES) + 1] = np.arange(n_frames) / denom
    values[:, len(PHONES) + 2] = code
    return FeatureMatrix(values, frame_hop, "linguistic")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def build_ar_params(cfg: ArModelConfig, rng: np.random.Generator,
                    linguistic_dims: int = LINGUISTIC_DIMS) -> dict:
    params: dict = {}
    L.init_affine(params, "ff0", linguistic_dims, cfg.ff_widths[0], rng)
    L.init_affine(params, "ff1", cfg.ff_widths[0], cfg.ff_widths[1], rng)
    L.init_bilstm(params, "bi", cfg.ff_widths[1], cfg.bilstm_width, rng)
    L.init_lstm(params, "uni", 2 * cfg.bilstm_width + cfg.mel_bands, cfg.unilstm_width, rng)
    L.init_affine(params, "out", cfg.unilstm_width, cfg.mel_bands, rng)
    return params


def _ar_core(params: dict, cfg: ArModelConfig, ling: np.ndarray, mask: np.ndarray,
             ref_std: np.ndarray | None) -> list:
    """Shared forward pass; `ref_std` enables teacher forcing, None free-runs.

    Returns the list of per-frame output tensors (standardized mel space).
    """
    n = ling.shape[0]
    h = T.constant(ling[None])
    h = T.tanh(L.affine(h, params["ff0/W"], params["ff0/b"]))
    h = T.tanh(L.affine(h, params["ff1/W"], params["ff1/b"]))
    hb = L.bilstm(h, params, "bi")

    hidden = cfg.unilstm_width
    state_h = T.constant(np.zeros((1, hidden)))
    state_c = T.constant(np.zeros((1, hidden)))
    prev = T.constant(np.zeros((1, cfg.mel_bands)))
    outs = []
    for t in range(n):
        if t == 0:
            fb = T.constant(np.zeros((1, cfg.mel_bands)))
        elif ref_std is not None:
            fb = T.constant(ref_std[t - 1][None] * mask[t])
        else:
            fb = T.mul(prev, float(mask[t]))
        ht = T.reshape(T.slice_axis(hb, 1, t, t + 1), (1, -1))
        xt = T.concat([ht, fb], axis=1)
        state_h, state_c = L.lstm_cell(xt, state_h, state_c, params["uni/Wx"],
                                       params["uni/Wh"], params["uni/b"])
        yt = L.affine(state_h, params["out/W"], params["out/b"])
        outs.append(yt)
        prev = yt
    return outs


def ar_forward(ling: FeatureMatrix, feedback: str, ckpt: ParameterSet, seed: int = 0,
               reference: FeatureMatrix | None = None,
               cfg: ArModelConfig | None = None) -> FeatureMatrix:
    """Run the acoustic model over linguistic frames; N frames in, N out.

    `feedback` is "teacher" (requires `reference` mel frames) or "free".
    The feedback vector is dropped out at the configured rate in both modes,
    seeded for determinism.
    """
    if ckpt.kind != MODEL_KIND:
        raise ValueError(f"checkpoint is a '{ckpt.kind}' model, expected '{MODEL_KIND}'")
    if feedback not in ("teacher", "free"):
        raise ValueError(f"feedback mode must be 'teacher' or 'free', got '{feedback}'")
    cfg = cfg or ArModelConfig()
    mel_mean = ckpt.buffers["norm/mel_mean"]
    mel_std = ckpt.buffers["norm/mel_std"]
    ref_std = None
    if feedback == "teacher":
        if reference is None:
            raise ValueError("teacher forcing requires reference mel frames")
        if reference.n_frames != ling.n_frames:
            raise ValueError("reference frame count differs from linguistic frames")
        ref_std = (reference.values - mel_mean) / mel_std
    rng = np.random.default_rng(seed)
    mask = L.feedback_dropout_mask(ling.n_frames, cfg.feedback_dropout, rng)
    with T.no_grad():
        outs = _ar_core(ckpt.params, cfg, ling.values, mask, ref_std)
    std_out = np.concatenate([o.data for o in outs], axis=0)
    return FeatureMatrix(std_out * mel_std + mel_mean, ling.frame_hop, "mel")


def synthesize_mel(ling: FeatureMatrix, ckpt: ParameterSet, seed: int = 0,
                   cfg: ArModelConfig | None = None) -> FeatureMatrix:
    """Free-running synthesis; deterministic for a fixed seed."""
    return ar_forward(ling, "free", ckpt, seed=seed, cfg=cfg)


def train_acoustic(pairs, cfg: ArModelConfig | None = None, *, log_path=None
                   ) -> ParameterSet:
    """Teacher-forced training with frame-wise L1 on standardized mel."""
    cfg = cfg or ArModelConfig()
    if not pairs:
        raise ValueError("training needs at least one (linguistic, mel) pair")
    for ling, mel in pairs:
        if ling.n_frames != mel.n_frames:
            raise ValueError(f"pair has {ling.n_frames} linguistic frames but"
                             f" {mel.n_frames} mel frames")
        if mel.dims != cfg.mel_bands:
            raise ValueError(f"mel has {mel.dims} bands, config says {cfg.mel_bands}")
    all_mel = np.vstack([mel.values for _l, mel in pairs])
    mel_mean = all_mel.mean(axis=0)
    mel_std = np.maximum(all_mel.std(axis=0), 1e-6)

    rng = np.random.default_rng(cfg.seed)
    params = build_ar_params(cfg, rng, pairs[0][0].dims)
    opt = RmspropState(learning_rate=cfg.learning_rate)
    losses = []
    log_rows = []
    for step in range(cfg.iterations):
        ling, mel = pairs[int(rng.integers(len(pairs)))]
        ref_std = (mel.values - mel_mean) / mel_std
        mask = L.feedback_dropout_mask(ling.n_frames, cfg.feedback_dropout, rng)
        zero_grads(params)
        outs = _ar_core(params, cfg, ling.values, mask, ref_std)
        pred = T.concat(outs, axis=0)
        loss = T.tmean(T.absolute(pred - T.constant(ref_std)))
        loss.backward()
        rmsprop_step(params, collect_grads(params), opt)
        val = float(loss.data)
        if not np.isfinite(val):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        losses.append(val)
        log_rows.append({"step": step, "l1_loss": val})

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for row in log_rows:
                fh.write(json.dumps(row) + "\n")

    buffers = {"norm/mel_mean": mel_mean, "norm/mel_std": mel_std,
               "log/l1": np.asarray(losses)}
    return ParameterSet(kind=MODEL_KIND, config_digest=config_digest(cfg),
                        step=cfg.iterations, params=params, buffers=buffers)
