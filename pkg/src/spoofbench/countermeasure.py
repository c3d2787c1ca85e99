"""Anti-spoofing back-end: diagonal-covariance GMMs fit by EM over cepstral
features, log-likelihood-ratio scoring, and equal-error-rate computation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .audio_io import read_wav
from .dsp import CqccConfig, FeatureMatrix, extract_cqcc

VARIANCE_FLOOR = 1e-4
DEGENERATE_WEIGHT = 1e-6


@dataclass
class GmmModel:
    weights: np.ndarray       # (M,), non-negative, sums to 1
    means: np.ndarray         # (M, D)
    variances: np.ndarray     # (M, D), diagonal, floored
    ll_curve: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-9 or (self.weights < 0).any():
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if (self.variances < VARIANCE_FLOOR - 1e-12).any():
            raise ValueError(f"variances must respect the floor {VARIANCE_FLOOR}")

    @property
    def n_mixtures(self) -> int:
        return self.weights.size

    @property
    def dims(self) -> int:
        return self.means.shape[1]

    def log_likelihood(self, frames: np.ndarray) -> np.ndarray:
        """Per-frame log density under the mixture."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[1] != self.dims:
            raise ValueError(f"frames have {frames.shape[1]} dims, model has {self.dims}")
        comp = _log_gauss_diag(frames, self.means, self.variances)
        comp = comp + np.log(np.maximum(self.weights, 1e-300))
        top = comp.max(axis=1, keepdims=True)
        return (top[:, 0] + np.log(np.exp(comp - top).sum(axis=1)))


@dataclass
class ScoreSet:
    genuine_scores: list[float] = field(default_factory=list)
    spoof_scores: list[float] = field(default_factory=list)


def _log_gauss_diag(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """(N, D) frames against (M, D) diagonal Gaussians -> (N, M) log densities."""
    d = x.shape[1]
    const = -0.5 * (d * np.log(2.0 * np.pi) + np.log(variances).sum(axis=1))
    inv = 1.0 / variances
    quad = (x * x) @ inv.T - 2.0 * x @ (means * inv).T + (means * means * inv).sum(axis=1)
    return const[None, :] - 0.5 * quad


def _kmeans_init(frames: np.ndarray, m: int, rng: np.random.Generator,
                 steps: int = 10):
    idx = rng.choice(frames.shape[0], size=m, replace=False)
    centers = frames[idx].copy()
    assign = np.zeros(frames.shape[0], dtype=np.int64)
    sq = (frames * frames).sum(axis=1, keepdims=True)
    for _ in range(steps):
        d2 = sq - 2.0 * frames @ centers.T + (centers * centers).sum(axis=1)
        assign = d2.argmin(axis=1)
        for k in range(m):
            member = frames[assign == k]
            if member.shape[0] == 0:
                centers[k] = frames[int(rng.integers(frames.shape[0]))]
            else:
                centers[k] = member.mean(axis=0)
    return centers, assign


def fit_gmm(features, n_mixtures: int = 32, iterations: int = 20, seed: int = 0
            ) -> GmmModel:
    """K-means initialization followed by EM with variance flooring.

    The per-iteration total log-likelihood is recorded in `ll_curve`; absent
    flooring/re-seeding interventions it is non-decreasing.  A degenerate
    component (weight < 1e-6) is re-seeded by splitting the heaviest one.
    """
    frames = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    frames = frames.astype(np.float64)
    if frames.ndim != 2:
        raise ValueError("features must be a frames x dims matrix")
    if frames.shape[0] < 10 * n_mixtures:
        raise ValueError(f"need at least {10 * n_mixtures} frames to fit"
                         f" {n_mixtures} mixtures, got {frames.shape[0]}")
    rng = np.random.default_rng(seed)
    centers, assign = _kmeans_init(frames, n_mixtures, rng)
    weights = np.bincount(assign, minlength=n_mixtures).astype(np.float64)
    weights = np.maximum(weights, 1.0)
    weights /= weights.sum()
    variances = np.empty_like(centers)
    for k in range(n_mixtures):
        member = frames[assign == k]
        variances[k] = member.var(axis=0) if member.shape[0] > 1 else frames.var(axis=0)
    variances = np.maximum(variances, VARIANCE_FLOOR)

    ll_curve = []
    for _it in range(iterations):
        # E step
        comp = _log_gauss_diag(frames, centers, variances) + np.log(weights)[None, :]
        top = comp.max(axis=1, keepdims=True)
        log_norm = top[:, 0] + np.log(np.exp(comp - top).sum(axis=1))
        ll_curve.append(float(log_norm.sum()))
        resp = np.exp(comp - log_norm[:, None])
        # M step
        nk = resp.sum(axis=0)
        weights = nk / nk.sum()
        centers = (resp.T @ frames) / np.maximum(nk[:, None], 1e-12)
        sq = (resp.T @ (frames * frames)) / np.maximum(nk[:, None], 1e-12)
        variances = np.maximum(sq - centers * centers, VARIANCE_FLOOR)
        # re-seed collapsed components from the heaviest one
        for k in np.flatnonzero(weights < DEGENERATE_WEIGHT):
            heavy = int(weights.argmax())
            warnings.warn(f"re-seeding degenerate mixture component {k} from {heavy}")
            centers[k] = centers[heavy] + 0.1 * np.sqrt(variances[heavy])
            variances[k] = variances[heavy]
            weights[k] = weights[heavy] / 2.0
            weights[heavy] /= 2.0
        weights = weights / weights.sum()
    return GmmModel(weights, centers, variances, ll_curve)


def score_llr(utt_features: FeatureMatrix, bonafide: GmmModel, spoof: GmmModel) -> float:
    """Mean per-frame log-likelihood under the bona fide model minus the
    spoof model; positive scores favour bona fide."""
    if utt_features.dims != bonafide.dims or utt_features.dims != spoof.dims:
        raise ValueError(f"feature dims {utt_features.dims} do not match models"
                         f" ({bonafide.dims}/{spoof.dims})")
    x = utt_features.values
    return float(bonafide.log_likelihood(x).mean() - spoof.log_likelihood(x).mean())


def compute_eer(scores: ScoreSet) -> float:
    """Equal error rate (percent) via an exhaustive threshold sweep.

    FAR(t) is the fraction of spoof scores >= t, FRR(t) the fraction of
    genuine scores < t; the EER is taken at the FAR=FRR crossing with linear
    interpolation between adjacent operating points.
    """
    genuine = np.asarray(scores.genuine_scores, dtype=np.float64)
    spoof = np.asarray(scores.spoof_scores, dtype=np.float64)
    if genuine.size == 0 or spoof.size == 0:
        raise ValueError("EER needs non-empty genuine and spoof score lists")
    if not (np.all(np.isfinite(genuine)) and np.all(np.isfinite(spoof))):
        raise ValueError("scores must be finite")
    thresholds = np.unique(np.concatenate([genuine, spoof]))
    far = [1.0]
    frr = [0.0]
    for t in thresholds:
        far.append(float(np.mean(spoof >= t)))
        frr.append(float(np.mean(genuine < t)))
    far.append(0.0)
    frr.append(1.0)
    for i in range(len(far) - 1):
        d0 = far[i] - frr[i]
        d1 = far[i + 1] - frr[i + 1]
        if d0 >= 0.0 and d1 <= 0.0:
            if d0 == d1:
                return 100.0 * far[i]
            alpha = d0 / (d0 - d1)
            return 100.0 * (far[i] + alpha * (far[i + 1] - far[i]))
    return 100.0 * far[-1]


def evaluate_countermeasure(bonafide_manifest, spoof_manifest, bonafide_gmm: GmmModel,
                            spoof_gmm: GmmModel, cqcc_cfg: CqccConfig | None = None,
                            resolve=None):
    """Score every utterance of both manifests and report the EER.

    Returns (ScoreSet, eer_percent, rows, skipped) where rows are
    (utterance id, label, score) triples; unreadable audio is skipped with a
    warning and counted.
    """
    cqcc_cfg = cqcc_cfg or CqccConfig.desk()
    resolve = resolve or (lambda p: p)
    scores = ScoreSet()
    rows = []
    skipped = 0
    for manifest, label, bucket in ((bonafide_manifest, "bonafide", scores.genuine_scores),
                                    (spoof_manifest, "spoof", scores.spoof_scores)):
        for rec in manifest.records:
            try:
                wav = read_wav(resolve(rec.audio_path))
                feats = extract_cqcc(wav, cqcc_cfg)
            except (ValueError, OSError, EOFError) as exc:
                warnings.warn(f"skipping unreadable utterance {rec.id}: {exc}")
                skipped += 1
                continue
            s = score_llr(feats, bonafide_gmm, spoof_gmm)
            bucket.append(s)
            rows.append((rec.id, label, s))
    eer = compute_eer(scores)
    return scores, eer, rows, skipped
