"""Command-line entry points.

`spoofbench <stage> --config pipeline.cfg` drives the stage runner; the
remaining commands are thin wrappers over the individual modules.  Exit
codes: 0 success, 2 configuration error, 3 dependency error, 4 training
diverged.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tts as tts_mod
from . import vc as vc_mod
from . import vocoder as voc_mod
from .audio_io import read_features, read_wav, write_features, write_wav
from .corpus import load_manifest, save_manifest
from .countermeasure import GmmModel, compute_eer, evaluate_countermeasure, fit_gmm
from .dsp import CqccConfig, extract_cqcc
from .enhancer import ChunkSpec, SeganConfig, enhance, train_segan
from .errors import ConfigError, DependencyError, TrainingDivergedError
from .nn.checkpoint import ParameterSet, load_checkpoint, save_checkpoint
from .pipeline import STAGES, PipelineConfig, run_all, run_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_DIVERGED = 4


def _run(fn) -> int:
    try:
        fn()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, FileNotFoundError, KeyError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def _load_json_config(path, cls):
    if path is None:
        return cls()
    try:
        payload = json.loads(Path(path).read_text())
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in payload.items()})
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"cannot load config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Pipeline runner
# ---------------------------------------------------------------------------

def main_spoofbench(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="spoofbench",
                                     description="run pipeline stages end to end")
    parser.add_argument("stage", choices=STAGES + ("all",))
    parser.add_argument("--config", required=True, help="pipeline .cfg file")
    args = parser.parse_args(argv)

    def go():
        cfg = PipelineConfig.load(args.config)
        if args.stage == "all":
            for status in run_all(cfg):
                print(f"{status['stage']}: done in {status['wall_time_s']}s"
                      f" (out {status['outputs_digest']})")
        else:
            status = run_stage(cfg, args.stage)
            print(f"{status['stage']}: done in {status['wall_time_s']}s"
                  f" (out {status['outputs_digest']})")

    return _run(go)


# ---------------------------------------------------------------------------
# Enhancer
# ---------------------------------------------------------------------------

def main_enhance_train(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="enhance-train")
    parser.add_argument("--pairs", required=True,
                        help="JSONL with {'noisy': wav, 'clean': wav} per line")
    parser.add_argument("--config", default=None, help="JSON with SeganConfig fields")
    parser.add_argument("--window", type=int, default=None)
    parser.add_argument("--out", required=True)
    parser.add_argument("--log", default=None)
    args = parser.parse_args(argv)

    def go():
        cfg = _load_json_config(args.config, SeganConfig)
        rows = [json.loads(line) for line in Path(args.pairs).read_text().splitlines()
                if line.strip()]
        pairs = [(read_wav(r["noisy"]), read_wav(r["clean"])) for r in rows]
        spec = ChunkSpec(window=args.window, hop_train=args.window // 2) \
            if args.window else ChunkSpec()
        ckpt = train_segan(pairs, cfg, spec, log_path=args.log)
        save_checkpoint(args.out, ckpt)
        print(f"wrote {args.out} ({ckpt.n_values()} parameter values)")

    return _run(go)


def main_enhance(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="enhance")
    parser.add_argument("--ckpt", required=True)
    parser.add_argument("--in", dest="inputs", required=True,
                        help="a wav file or a corpus manifest")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--config", default=None)
    parser.add_argument("--window", type=int, default=None)
    args = parser.parse_args(argv)

    def go():
        cfg = _load_json_config(args.config, SeganConfig)
        ckpt = load_checkpoint(args.ckpt)
        spec = ChunkSpec(window=args.window, hop_train=args.window // 2) \
            if args.window else None
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        src = Path(args.inputs)
        paths = [src] if src.suffix == ".wav" else \
            [Path(r.audio_path) for r in load_manifest(src).records]
        for path in paths:
            wav = read_wav(path)
            write_wav(out_dir / path.name, enhance(wav, ckpt, cfg, spec))
        print(f"enhanced {len(paths)} file(s) into {out_dir}")

    return _run(go)


# ---------------------------------------------------------------------------
# Voice conversion
# ---------------------------------------------------------------------------

def _load_feat_list(manifest_path, kind):
    rows = [json.loads(line) for line in Path(manifest_path).read_text().splitlines()
            if line.strip()]
    return np.vstack([read_features(r["path"], kind).values for r in rows])


def main_vc_train(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vc-train")
    parser.add_argument("--src", required=True, help="source feature manifest (JSONL)")
    parser.add_argument("--tgt", required=True, help="target feature manifest (JSONL)")
    parser.add_argument("--config", default=None, help="JSON with CycleGanConfig fields")
    parser.add_argument("--out", required=True)
    parser.add_argument("--log", default=None)
    args = parser.parse_args(argv)

    def go():
        cfg = _load_json_config(args.config, vc_mod.CycleGanConfig)
        src = _load_feat_list(args.src, "mel_delta")
        tgt = _load_feat_list(args.tgt, "mel_delta")
        ckpt = vc_mod.train_cyclegan(src, tgt, cfg, log_path=args.log)
        save_checkpoint(args.out, ckpt)
        print(f"wrote {args.out}")

    return _run(go)


def main_vc_convert(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vc-convert")
    parser.add_argument("--ckpt", required=True)
    parser.add_argument("--dir", choices=vc_mod.DIRECTIONS, default="forward")
    parser.add_argument("--in", dest="inputs", required=True, help="input .feat file")
    parser.add_argument("--out", required=True, help="output .feat file")
    parser.add_argument("--config", default=None)
    args = parser.parse_args(argv)

    def go():
        cfg = _load_json_config(args.config, vc_mod.CycleGanConfig)
        feat = read_features(args.inputs, "mel_delta")
        out = vc_mod.convert(feat, load_checkpoint(args.ckpt), args.dir, cfg)
        write_features(args.out, out)
        print(f"wrote {args.out} ({out.n_frames} frames)")

    return _run(go)


# ---------------------------------------------------------------------------
# TTS acoustic model
# ---------------------------------------------------------------------------

def _read_alignment_file(path):
    spans = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            phone, start, end = line.split()
            spans.append((phone, int(start), int(end)))
    return spans


def main_tts_train(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tts-train")
    parser.add_argument("--pairs", required=True,
                        help="JSONL with {'linguistic': feat, 'mel': feat} per line")
    parser.add_argument("--config", default=None, help="JSON with ArModelConfig fields")
    parser.add_argument("--out", required=True)
    parser.add_argument("--log", default=None)
    args = parser.parse_args(argv)

    def go():
        cfg = _load_json_config(args.config, tts_mod.ArModelConfig)
        rows = [json.loads(line) for line in Path(args.pairs).read_text().splitlines()
                if line.strip()]
        pairs = [(read_features(r["linguistic"], "linguistic"), read_features(r["mel"], "mel"))
                 for r in rows]
        ckpt = tts_mod.train_acoustic(pairs, cfg, log_path=args.log)
        save_checkpoint(args.out, ckpt)
        print(f"wrote {args.out}")

    return _run(go)


def main_tts_synth(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tts-synth")
    parser.add_argument("--ckpt", required=True)
    parser.add_argument("--transcript", required=True, help="transcript text file")
    parser.add_argument("--alignment", required=True,
                        help="lines of (phone, start_frame, end_frame)")
    parser.add_argument("--condition", required=True,
                        help="synthesis condition tag, e.g. enhanced:all")
    parser.add_argument("--config", default=None)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True, help="output .feat file")
    args = parser.parse_args(argv)

    def go():
        cfg = _load_json_config(args.config, tts_mod.ArModelConfig)
        transcript = Path(args.transcript).read_text().strip()
        spans = _read_alignment_file(args.alignment)
        ling = tts_mod.toy_linguistic_frames(transcript, spans, args.condition)
        mel = tts_mod.synthesize_mel(ling, load_checkpoint(args.ckpt), args.seed, cfg)
        write_features(args.out, mel)
        print(f"wrote {args.out} ({mel.n_frames} frames)")

    return _run(go)


# ---------------------------------------------------------------------------
# Vocoder
# ---------------------------------------------------------------------------

def main_vocoder_train(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vocoder-train")
    parser.add_argument("--corpus", required=True,
                        help="JSONL with {'wav': path, 'mel': feat, 'condition': float}")
    parser.add_argument("--config", default=None, help="JSON with WaveNetConfig fields")
    parser.add_argument("--out", required=True)
    parser.add_argument("--log", default=None)
    args = parser.parse_args(argv)

    def go():
        cfg = _load_json_config(args.config, voc_mod.WaveNetConfig)
        rows = [json.loads(line) for line in Path(args.corpus).read_text().splitlines()
                if line.strip()]
        corpus = [(read_wav(r["wav"]), read_features(r["mel"], "mel"),
                   float(r.get("condition", 0.0))) for r in rows]
        ckpt = voc_mod.train_vocoder(corpus, cfg, log_path=args.log)
        save_checkpoint(args.out, ckpt)
        print(f"wrote {args.out}")

    return _run(go)


def main_vocoder_generate(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vocoder-generate")
    parser.add_argument("--ckpt", required=True)
    parser.add_argument("--mel", required=True, help="conditioning mel .feat file")
    parser.add_argument("--condition", type=float, default=0.0)
    parser.add_argument("--mode", choices=("sample", "argmax"), default="sample")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", default=None)
    parser.add_argument("--out", required=True, help="output wav")
    args = parser.parse_args(argv)

    def go():
        cfg = _load_json_config(args.config, voc_mod.WaveNetConfig)
        ckpt = load_checkpoint(args.ckpt)
        mel = read_features(args.mel, "mel")
        track = voc_mod.encode_conditioning(mel, args.condition,
                                            mel.n_frames * cfg.hop, ckpt, cfg)
        wav = voc_mod.generate(track, ckpt, seed=args.seed, mode=args.mode, cfg=cfg)
        write_wav(args.out, wav)
        print(f"wrote {args.out} ({wav.duration:.2f} s)")

    return _run(go)


def main_copy_synth(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="copy-synth")
    parser.add_argument("--ckpt", required=True)
    parser.add_argument("--in", dest="inputs", required=True, help="input wav")
    parser.add_argument("--condition", type=float, default=0.0)
    parser.add_argument("--mode", choices=("sample", "argmax"), default="sample")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", default=None)
    parser.add_argument("--out", required=True, help="output wav")
    args = parser.parse_args(argv)

    def go():
        cfg = _load_json_config(args.config, voc_mod.WaveNetConfig)
        wav = read_wav(args.inputs)
        out = voc_mod.copy_synthesis(wav, args.condition, load_checkpoint(args.ckpt),
                                     cfg, seed=args.seed, mode=args.mode)
        write_wav(args.out, out)
        print(f"wrote {args.out} ({out.duration:.2f} s)")

    return _run(go)


# ---------------------------------------------------------------------------
# Countermeasure
# ---------------------------------------------------------------------------

def main_cm_train(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cm-train")
    parser.add_argument("--bonafide", required=True, help="bona fide corpus manifest")
    parser.add_argument("--spoof", required=True, help="spoofed corpus manifest")
    parser.add_argument("--mix", type=int, default=32)
    parser.add_argument("--iters", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True, help="output directory for the model pair")
    args = parser.parse_args(argv)

    def go():
        cqcc_cfg = CqccConfig.desk()
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, manifest_path, seed in (("bonafide", args.bonafide, args.seed),
                                          ("spoof", args.spoof, args.seed + 1)):
            manifest = load_manifest(manifest_path)
            frames = np.vstack([extract_cqcc(read_wav(r.audio_path), cqcc_cfg).values
                                for r in manifest.records])
            gmm = fit_gmm(frames, args.mix, args.iters, seed)
            ps = ParameterSet(kind="cqcc-gmm", config_digest="", step=args.iters,
                              params={}, buffers={"weights": gmm.weights,
                                                  "means": gmm.means,
                                                  "variances": gmm.variances})
            save_checkpoint(out_dir / f"{name}.gmm", ps)
        print(f"wrote model pair into {out_dir}")

    return _run(go)


def main_cm_score(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cm-score")
    parser.add_argument("--models", required=True, help="directory from cm-train")
    parser.add_argument("--eval", nargs=2, required=True,
                        metavar=("BONAFIDE", "SPOOF"), help="evaluation manifests")
    parser.add_argument("--out", required=True, help="scores file")
    args = parser.parse_args(argv)

    def go():
        models = Path(args.models)
        gmms = {}
        for name in ("bonafide", "spoof"):
            ps = load_checkpoint(models / f"{name}.gmm")
            w = ps.buffers["weights"]
            gmms[name] = GmmModel(w / w.sum(), ps.buffers["means"],
                                  np.maximum(ps.buffers["variances"], 1e-4))
        bona = load_manifest(args.eval[0])
        spoof = load_manifest(args.eval[1])
        scores, eer, rows, skipped = evaluate_countermeasure(
            bona, spoof, gmms["bonafide"], gmms["spoof"], CqccConfig.desk())
        with open(args.out, "w", encoding="utf-8") as fh:
            for uid, label, score in rows:
                fh.write(f"{uid} {label} {score!r}\n")
        print(f"EER: {eer:.2f}% over {len(rows)} utterances ({skipped} skipped)")

    return _run(go)


def main(argv=None) -> int:
    return main_spoofbench(argv)


if __name__ == "__main__":
    sys.exit(main())
