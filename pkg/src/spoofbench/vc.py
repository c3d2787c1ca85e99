"""Voice conversion over 240-dim mel(+deltas) frames with a pair of cycle-
consistent generators trained adversarially on non-parallel data."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .corpus import CorpusManifest
from .dsp import FeatureMatrix
from .errors import TrainingDivergedError
from .nn import layers as L
from .nn import tensor as T
from .nn.checkpoint import ParameterSet, config_digest
from .nn.optim import RmspropState, collect_grads, rmsprop_step, zero_grads

MODEL_KIND = "cyclegan"
DIRECTIONS = ("forward", "backward")


@dataclass
class CycleGanConfig:
    dims: int = 240
    gen_hidden: tuple = (256, 512, 512, 256)
    disc_hidden: tuple = (256, 512, 512, 256)
    gen_batch: int = 128
    disc_batch: int = 4096
    gen_lr: float = 1e-3
    disc_lr: float = 1e-4
    lambda_cyc: float = 10.0
    iterations: int = 300
    init_gain: float = 4.0  # sigmoid hidden layers want ~4x the fan-in scale
    lr_decay_every: int | None = None  # halve the generator lr every N steps
    seed: int = 0

    def __post_init__(self):
        if len(self.gen_hidden) != 4 or len(self.disc_hidden) != 4:
            raise ValueError("generators and discriminators are six-layer networks"
                             " (input + 4 hidden + output)")
        if min(self.gen_hidden) < self.dims:
            warnings.warn(f"generator hidden width {min(self.gen_hidden)} below the"
                          f" {self.dims}-dim features bottlenecks cycle reconstruction")


def _init_mlp(params: dict, buffers: dict, prefix: str, dims_in: int, hidden: tuple,
              dims_out: int, rng, batch_norm: bool, gain: float = 4.0):
    widths = [dims_in, *hidden, dims_out]
    for i in range(len(widths) - 1):
        L.init_affine(params, f"{prefix}/l{i}", widths[i], widths[i + 1], rng)
        if i < len(widths) - 2:
            # hidden layers feed sigmoids; widen the init to keep gradients alive
            params[f"{prefix}/l{i}/W"].data *= gain
            if batch_norm:
                L.init_batchnorm(params, buffers, f"{prefix}/bn{i}", widths[i + 1])


def _generator(params: dict, buffers: dict, prefix: str, x: T.Tensor, hidden: tuple, *,
               training: bool, update_running: bool = True) -> T.Tensor:
    h = x
    for i in range(len(hidden)):
        h = L.affine(h, params[f"{prefix}/l{i}/W"], params[f"{prefix}/l{i}/b"])
        h = L.batchnorm(h, params[f"{prefix}/bn{i}/gamma"], params[f"{prefix}/bn{i}/beta"],
                        buffers, f"{prefix}/bn{i}", training=training,
                        update_running=update_running)
        h = T.sigmoid(h)
    i = len(hidden)
    return L.affine(h, params[f"{prefix}/l{i}/W"], params[f"{prefix}/l{i}/b"])


def _discriminator(params: dict, prefix: str, x: T.Tensor, hidden: tuple) -> T.Tensor:
    h = x
    for i in range(len(hidden)):
        h = T.sigmoid(L.affine(h, params[f"{prefix}/l{i}/W"], params[f"{prefix}/l{i}/b"]))
    i = len(hidden)
    return L.affine(h, params[f"{prefix}/l{i}/W"], params[f"{prefix}/l{i}/b"])


def cycle_loss_tensor(g_fn, f_fn, x: T.Tensor, y: T.Tensor) -> T.Tensor:
    """Mean per-frame L1 of F(G(x))-x plus mean per-frame L1 of G(F(y))-y."""
    back_x = f_fn(g_fn(x))
    back_y = g_fn(f_fn(y))
    loss_x = T.tmean(T.tsum(T.absolute(back_x - x), axis=1))
    loss_y = T.tmean(T.tsum(T.absolute(back_y - y), axis=1))
    return T.add(loss_x, loss_y)


def cycle_loss(g_fn, f_fn, batch_x: np.ndarray, batch_y: np.ndarray) -> float:
    """Cycle-consistency loss of two plain-array mapping functions."""
    bx = np.asarray(batch_x, dtype=np.float64)
    by = np.asarray(batch_y, dtype=np.float64)
    if bx.ndim != 2 or by.ndim != 2 or bx.shape[1] != by.shape[1]:
        raise ValueError(f"batches must share frame dims, got {bx.shape} and {by.shape}")
    loss_x = np.mean(np.abs(f_fn(g_fn(bx)) - bx).sum(axis=1))
    loss_y = np.mean(np.abs(g_fn(f_fn(by)) - by).sum(axis=1))
    return float(loss_x + loss_y)


def _norm_stats(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = frames.mean(axis=0)
    std = np.maximum(frames.std(axis=0), 1e-6)
    return mean, std


def _frames_of(x) -> np.ndarray:
    return x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)


def train_cyclegan(source, target, cfg: CycleGanConfig | None = None, *,
                   log_path=None) -> ParameterSet:
    """Learn forward (source->target) and backward mappings from unpaired
    frame sets, balancing least-squares adversarial losses against the
    cycle-consistency loss.
    """
    cfg = cfg or CycleGanConfig()
    src = _frames_of(source)
    tgt = _frames_of(target)
    for name, arr in (("source", src), ("target", tgt)):
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ValueError(f"{name} frames must be a non-empty 2-D array")
        if arr.shape[1] != cfg.dims:
            raise ValueError(f"{name} frames have {arr.shape[1]} dims, config says {cfg.dims}")

    src_mean, src_std = _norm_stats(src)
    tgt_mean, tgt_std = _norm_stats(tgt)
    xs = (src - src_mean) / src_std
    ys = (tgt - tgt_mean) / tgt_std

    rng = np.random.default_rng(cfg.seed)
    params: dict = {}
    buffers: dict = {}
    _init_mlp(params, buffers, "gen_g", cfg.dims, cfg.gen_hidden, cfg.dims, rng, True,
              cfg.init_gain)
    _init_mlp(params, buffers, "gen_f", cfg.dims, cfg.gen_hidden, cfg.dims, rng, True,
              cfg.init_gain)
    _init_mlp(params, buffers, "disc_x", cfg.dims, cfg.disc_hidden, 1, rng, False,
              cfg.init_gain)
    _init_mlp(params, buffers, "disc_y", cfg.dims, cfg.disc_hidden, 1, rng, False,
              cfg.init_gain)

    gen_params = {k: v for k, v in params.items() if k.startswith("gen_")}
    disc_params = {k: v for k, v in params.items() if k.startswith("disc_")}
    gen_opt = RmspropState(learning_rate=cfg.gen_lr)
    disc_opt = RmspropState(learning_rate=cfg.disc_lr)

    def g_fn(x, training=True, update=True):
        return _generator(params, buffers, "gen_g", x, cfg.gen_hidden,
                          training=training, update_running=update)

    def f_fn(y, training=True, update=True):
        return _generator(params, buffers, "gen_f", y, cfg.gen_hidden,
                          training=training, update_running=update)

    log_rows = []
    curves = {"d": [], "adv": [], "cyc": []}
    for step in range(cfg.iterations):
        if cfg.lr_decay_every:
            gen_opt.learning_rate = max(cfg.gen_lr * 0.5 ** (step / cfg.lr_decay_every),
                                        cfg.gen_lr / 50.0)
        bx = xs[rng.choice(xs.shape[0], size=min(cfg.disc_batch, xs.shape[0]))]
        by = ys[rng.choice(ys.shape[0], size=min(cfg.disc_batch, ys.shape[0]))]
        with T.no_grad():
            fake_y = g_fn(T.constant(bx), update=False).data
            fake_x = f_fn(T.constant(by), update=False).data
        zero_grads(params)
        d_loss = T.mul(T.add(
            T.add(T.tmean(T.square(_discriminator(params, "disc_y", T.constant(by), cfg.disc_hidden) - 1.0)),
                  T.tmean(T.square(_discriminator(params, "disc_y", T.constant(fake_y), cfg.disc_hidden)))),
            T.add(T.tmean(T.square(_discriminator(params, "disc_x", T.constant(bx), cfg.disc_hidden) - 1.0)),
                  T.tmean(T.square(_discriminator(params, "disc_x", T.constant(fake_x), cfg.disc_hidden))))),
            0.5)
        d_loss.backward()
        rmsprop_step(disc_params, collect_grads(disc_params), disc_opt)

        gx = T.constant(xs[rng.choice(xs.shape[0], size=min(cfg.gen_batch, xs.shape[0]))])
        gy = T.constant(ys[rng.choice(ys.shape[0], size=min(cfg.gen_batch, ys.shape[0]))])
        zero_grads(params)
        mapped_y = g_fn(gx)
        mapped_x = f_fn(gy)
        adv = T.mul(T.add(
            T.tmean(T.square(_discriminator(params, "disc_y", mapped_y, cfg.disc_hidden) - 1.0)),
            T.tmean(T.square(_discriminator(params, "disc_x", mapped_x, cfg.disc_hidden) - 1.0))),
            0.5)
        cyc = cycle_loss_tensor(g_fn, f_fn, gx, gy)
        g_loss = T.add(adv, T.mul(cyc, cfg.lambda_cyc))
        g_loss.backward()
        rmsprop_step(gen_params, collect_grads(gen_params), gen_opt)

        row = {"step": step, "d_loss": float(d_loss.data), "adv_loss": float(adv.data),
               "cyc_loss": float(cyc.data)}
        if not all(np.isfinite(v) for v in row.values() if isinstance(v, float)):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        log_rows.append(row)
        curves["d"].append(row["d_loss"])
        curves["adv"].append(row["adv_loss"])
        curves["cyc"].append(row["cyc_loss"])

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for row in log_rows:
                fh.write(json.dumps(row) + "\n")

    buffers.update({
        "norm/src_mean": src_mean, "norm/src_std": src_std,
        "norm/tgt_mean": tgt_mean, "norm/tgt_std": tgt_std,
    })
    buffers.update({f"log/{k}": np.asarray(v) for k, v in curves.items()})
    return ParameterSet(kind=MODEL_KIND, config_digest=config_digest(cfg),
                        step=cfg.iterations, params=params, buffers=buffers)


def convert(frames: FeatureMatrix, ckpt: ParameterSet, direction: str = "forward",
            cfg: CycleGanConfig | None = None) -> FeatureMatrix:
    """Map frames between the two learned feature domains (frame count kept)."""
    if ckpt.kind != MODEL_KIND:
        raise ValueError(f"checkpoint is a '{ckpt.kind}' model, expected '{MODEL_KIND}'")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got '{direction}'")
    cfg = cfg or CycleGanConfig()
    if frames.dims != cfg.dims:
        raise ValueError(f"frames have {frames.dims} dims, model expects {cfg.dims}")
    if direction == "forward":
        in_mean, in_std = ckpt.buffers["norm/src_mean"], ckpt.buffers["norm/src_std"]
        out_mean, out_std = ckpt.buffers["norm/tgt_mean"], ckpt.buffers["norm/tgt_std"]
        prefix = "gen_g"
    else:
        in_mean, in_std = ckpt.buffers["norm/tgt_mean"], ckpt.buffers["norm/tgt_std"]
        out_mean, out_std = ckpt.buffers["norm/src_mean"], ckpt.buffers["norm/src_std"]
        prefix = "gen_f"
    x = (frames.values - in_mean) / in_std
    with T.no_grad():
        y = _generator(ckpt.params, ckpt.buffers, prefix, T.constant(x), cfg.gen_hidden,
                       training=False)
    out = y.data * out_std + out_mean
    return FeatureMatrix(out, frames.frame_hop, frames.kind)


def select_training_data(manifest: CorpusManifest, min_snr: float) -> CorpusManifest:
    """Keep records whose estimated SNR exceeds `min_snr` dB."""
    kept, missing = [], 0
    for rec in manifest.records:
        if rec.snr_db is None:
            missing += 1
            continue
        if rec.snr_db > min_snr:
            kept.append(rec)
    if missing:
        warnings.warn(f"select_training_data excluded {missing} record(s) without SNR")
    return CorpusManifest(kept)
