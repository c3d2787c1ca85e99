"""File I/O: RIFF/WAV (PCM16 mono) and the binary feature-matrix format.

Feature files: magic "FEAT" | u32 version | u32 frames | u32 dims
| f64 hop-seconds | row-major float32 little-endian values.
"""

from __future__ import annotations

import struct
import wave

import numpy as np

from .dsp import FeatureMatrix, Waveform

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(np.clip(samples, -1.0, 1.0), rate)


def write_wav(path, wav: Waveform) -> None:
    pcm = np.clip(np.round(wav.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.sample_rate)
        fh.writeframes(pcm.tobytes())


def write_features(path, feat: FeatureMatrix) -> None:
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<III", FEAT_VERSION, feat.n_frames, feat.dims))
        fh.write(struct.pack("<d", feat.frame_hop))
        fh.write(np.ascontiguousarray(feat.values, dtype="<f4").tobytes())


def read_features(path, kind: str = "mel") -> FeatureMatrix:
    with open(path, "rb") as fh:
        if fh.read(4) != FEAT_MAGIC:
            raise ValueError(f"{path}: not a feature file (bad magic)")
        version, frames, dims = struct.unpack("<III", fh.read(12))
        if version != FEAT_VERSION:
            raise ValueError(f"{path}: unsupported feature version {version}")
        (hop,) = struct.unpack("<d", fh.read(8))
        data = np.frombuffer(fh.read(4 * frames * dims), dtype="<f4")
    values = data.astype(np.float64).reshape(frames, dims)
    return FeatureMatrix(values, hop, kind)
