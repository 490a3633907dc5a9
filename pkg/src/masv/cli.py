"""Command-line entry point: ``masv {synth,train,eval,verify,stream,bench}``.

Exit codes: 0 success / accept, 1 reject, 2 usage or input error, 3 numeric failure.

Options can also come from a ``key=value`` file (``--config``, ``#`` comments);
explicit flags win over the file, the file wins over built-in defaults, and the
fully resolved configuration is logged and written next to the outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import ABLATIONS, ModelConfig, MASV, new_stream, streaming_update
from .checkpoint import file_digest, load_checkpoint
from .complexity import CALIBRATION_FRAMES, default_matrix, emit_comparison
from .errors import ConfigError, MasvError, NumericError
from .features import (FeatureSeq, RunningCMN, StreamingLogMel, WORKING_RATE, extract, read_wav, write_wav)
from .metrics import TrialSet, cosine_score, metrics_report, read_trials, write_metrics, write_trials
from .train import ScheduleConfig, TrainConfig, embed, synth_speakers, train_loop

log = logging.getLogger("masv")

EXIT_OK, EXIT_REJECT, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

FEATURE_PARAMS = {"n_mels": 80, "frame_len_ms": 25.0, "shift_ms": 10.0, "n_fft": 512, "preemph": 0.97,
                  "cmn": "utterance"}


class UsageError(MasvError):
    pass


# -- config handling -------------------------------------------------------------

TRAIN_DEFAULTS = {
    "seed": 0,
    "precision": "f32",
    "model": "tiny",
    "ablation": "complete",
    "steps": 2000,
    "batch_size": 32,
    "speakers_per_batch": 16,
    "crop_frames": 80,
    "lr_min": 1e-8,
    "lr_max": 1e-3,
    "cycle_steps": 2000,
    "weight_decay": 5e-5,
    "checkpoint_every": 0,
}


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def _coerce(key: str, value, default):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.strip("()[] ").split(",") if v.strip())
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {value!r}") from None
    return value


def resolve(defaults: dict, file_values: dict, flag_values: dict) -> dict:
    """flag > file > default; ``model.<field>`` keys override model config fields."""
    model_fields = ModelConfig().to_dict()
    resolved = dict(defaults)
    for source in (file_values, flag_values):
        for key, value in source.items():
            if value is None:
                continue
            if key.startswith("model."):
                name = key[6:]
                if name not in model_fields:
                    raise UsageError(f"unknown model config key {key!r}")
                default = model_fields[name]
                if isinstance(default, list):
                    default = tuple(default)
                resolved[key] = _coerce(key, value, default)
            elif key in defaults:
                resolved[key] = _coerce(key, value, defaults[key])
            else:
                raise UsageError(f"unknown config key {key!r}")
    return resolved


def _parse_sets(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def write_resolved(path, resolved: dict) -> None:
    lines = [f"{k}={resolved[k]}" for k in sorted(resolved)]
    Path(path).write_text("\n".join(lines) + "\n")


def model_config_from(resolved: dict) -> ModelConfig:
    if resolved["ablation"] not in ABLATIONS:
        raise UsageError(f"unknown ablation {resolved['ablation']!r}; choose from {sorted(ABLATIONS)}")
    overrides = dict(ABLATIONS[resolved["ablation"]])
    overrides.update({k[6:]: v for k, v in resolved.items() if k.startswith("model.")})
    try:
        if resolved["model"] == "tiny":
            return ModelConfig.tiny(**overrides)
        if resolved["model"] == "full":
            return ModelConfig(**overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    raise UsageError(f"model must be 'tiny' or 'full', got {resolved['model']!r}")


def _dtype(precision: str):
    if precision not in ("f32", "f64"):
        raise UsageError(f"precision must be f32 or f64, got {precision!r}")
    return np.float32 if precision == "f32" else np.float64


# -- data helpers ----------------------------------------------------------------------

def scan_data_dir(data_dir) -> tuple[list[Path], np.ndarray, list[str]]:
    """``data_dir/<speaker>/<utt>.wav``; speakers are labeled in sorted order."""
    root = Path(data_dir)
    if not root.is_dir():
        raise UsageError(f"data directory not found: {root}")
    speakers = sorted(p.name for p in root.iterdir() if p.is_dir())
    paths, labels = [], []
    for k, spk in enumerate(speakers):
        for wav in sorted((root / spk).glob("*.wav")):
            paths.append(wav)
            labels.append(k)
    if len(set(labels)) < 2:
        raise UsageError(f"{root}: need at least two speaker directories containing .wav files")
    return paths, np.array(labels), speakers


def _load_features(path) -> FeatureSeq:
    return extract(read_wav(path))


# -- commands --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    """Write a seeded synthetic corpus: ``train/`` and ``test/`` speaker dirs plus ``test/trials.txt``."""
    out = Path(args.out)
    if args.heldout >= args.utts:
        raise UsageError("--heldout must be smaller than --utts")
    ds = synth_speakers(args.speakers, args.utts, seed=args.seed)
    counts: dict[int, int] = {}
    test_items = []
    for audio, label in zip(ds.audio, ds.labels):
        k = counts.get(int(label), 0)
        counts[int(label)] = k + 1
        split = "test" if k >= args.utts - args.heldout else "train"
        rel = Path(f"spk{int(label):03d}") / f"utt{k:03d}.wav"
        (out / split / rel.parent).mkdir(parents=True, exist_ok=True)
        write_wav(out / split / rel, audio)
        if split == "test":
            test_items.append((int(label), rel.as_posix()))
    lines = []
    for i in range(len(test_items)):
        for j in range(i + 1, len(test_items)):
            (li, pi), (lj, pj) = test_items[i], test_items[j]
            lines.append(f"{int(li == lj)} {pi} {pj}")
    (out / "test" / "trials.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(ds.audio)} utterances and {len(lines)} trials under {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    flags = _parse_sets(args.set)
    for key in ("seed", "precision", "steps", "ablation", "model"):
        if getattr(args, key) is not None:
            flags[key] = getattr(args, key)
    resolved = resolve(TRAIN_DEFAULTS, file_values, flags)
    cfg = model_config_from(resolved)
    dtype = _dtype(resolved["precision"])
    paths, labels, speakers = scan_data_dir(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True, default=str))
    write_resolved(out / "config.txt", resolved)

    feats = [_load_features(p) for p in paths]
    try:
        schedule = ScheduleConfig(resolved["lr_min"], resolved["lr_max"], resolved["cycle_steps"],
                                  resolved["weight_decay"], resolved["batch_size"])
    except MasvError as exc:
        raise UsageError(str(exc)) from None
    tcfg = TrainConfig(steps=resolved["steps"], seed=resolved["seed"],
                       speakers_per_batch=resolved["speakers_per_batch"], crop_frames=resolved["crop_frames"],
                       checkpoint_every=resolved["checkpoint_every"], schedule=schedule)
    model = MASV(cfg, seed=resolved["seed"], dtype=dtype)
    train_loop(model, feats, labels, tcfg, out_dir=out, resume_from=args.resume)
    print(f"trained on {len(paths)} utterances from {len(speakers)} speakers; outputs in {out}")
    return EXIT_OK


def _embedding_cache_key(ckpt_digest: str, audio_path: Path) -> str:
    feat_hash = hashlib.sha256(json.dumps(FEATURE_PARAMS, sort_keys=True).encode()).hexdigest()
    raw = f"{ckpt_digest}\n{audio_path.resolve()}\n{feat_hash}"
    return hashlib.sha256(raw.encode()).hexdigest()


def _load_model(path) -> MASV:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    model, _, _ = load_checkpoint(path)
    model.eval()
    return model


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    if not Path(args.trials).is_file():
        raise UsageError(f"trial list not found: {args.trials}")
    trials = read_trials(args.trials)
    audio_dir = Path(args.audio_dir)
    names = sorted({n for t in trials.trials for n in (t.enroll, t.test)})
    missing = [n for n in names if not (audio_dir / n).is_file()]
    if missing:
        shown = "\n  ".join(missing[:10])
        raise UsageError(f"{len(missing)} trial audio files missing under {audio_dir}; first entries:\n  {shown}")
    out = Path(args.out)
    cache = out / "embedding_cache"
    cache.mkdir(parents=True, exist_ok=True)
    digest = file_digest(args.checkpoint)
    emb = {}
    hits = 0
    for n in names:
        path = audio_dir / n
        cfile = cache / (_embedding_cache_key(digest, path) + ".npy")
        if cfile.is_file():
            emb[n] = np.load(cfile)
            hits += 1
        else:
            emb[n] = embed(model, _load_features(path))
            np.save(cfile, emb[n])
    log.info("embeddings: %d cached, %d computed", hits, len(names) - hits)
    scores = np.array([cosine_score(emb[t.enroll], emb[t.test]) for t in trials.trials])
    scored = TrialSet(trials.trials, scores)
    write_trials(out / "scores.txt", scored, with_scores=True)
    report = metrics_report(scores, trials.labels)
    write_metrics(out / "metrics.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    model = _load_model(args.checkpoint)
    ea = embed(model, _load_features(args.wav_a))
    eb = embed(model, _load_features(args.wav_b))
    score = cosine_score(ea, eb)
    accept = score >= args.threshold
    print(f"score={score:.6f} decision={'accept' if accept else 'reject'}")
    return EXIT_OK if accept else EXIT_REJECT


def split_buffers(n_samples: int, buffer_ms: float, sample_rate: int = WORKING_RATE) -> list[tuple[int, int]]:
    """Sample ranges of consecutive buffers; the last one may be short."""
    size = int(round(buffer_ms * sample_rate / 1000))
    return [(lo, min(lo + size, n_samples)) for lo in range(0, n_samples, size)]


def stream_frames(samples: np.ndarray, buffer_ms: float) -> list[np.ndarray]:
    """Log-Mel + running CMN frames per buffer; a tail with fewer than 2 frames joins the previous buffer."""
    front = StreamingLogMel()
    raw = [front.push(samples[lo:hi]) for lo, hi in split_buffers(len(samples), buffer_ms)]
    if len(raw) > 1 and raw[-1].shape[0] < 2:
        tail = raw.pop()
        raw[-1] = np.concatenate([raw[-1], tail])
    if not raw or raw[0].shape[0] < 2:
        raise UsageError("audio too short for one streaming buffer of at least 2 frames")
    norm = RunningCMN()
    return [norm(FeatureSeq(f)).frames for f in raw]


def cmd_stream(args) -> int:
    if args.buffer_ms < 100:
        raise UsageError(f"--buffer-ms must be >= 100, got {args.buffer_ms}")
    model = _load_model(args.checkpoint)
    audio = read_wav(args.wav)
    enroll = embed(model, _load_features(args.enroll)) if args.enroll else None
    state = new_stream(model, accumulate=not args.per_buffer)
    rows = []
    prev_score = None
    for frames in stream_frames(audio.samples, args.buffer_ms):
        state, emb = streaming_update(model, state, frames)
        e = emb.data[0]
        row = {"buffer": state.buffers_seen, "frames_seen": state.frames_seen,
               "buffers_seen": state.buffers_seen, "norm": f"{np.linalg.norm(e):.10f}"}
        if enroll is not None:
            score = cosine_score(e, enroll)
            row["score"] = f"{score:.10f}"
            row["score_change"] = "" if prev_score is None else f"{abs(score - prev_score):.10f}"
            prev_score = score
        rows.append(row)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    if args.save_embedding:
        np.save(args.save_embedding, e)
    print(f"{len(rows)} buffers written to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    configs = []
    for C in args.channels:
        for name, cfg in default_matrix(C):
            configs.append((f"{name}-C{C}", cfg))
    table, breakdown = emit_comparison(configs, T=args.frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(table)
    (out / "breakdown.json").write_text(breakdown + "\n")
    sys.stdout.write(table)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="masv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic multi-speaker corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--speakers", type=int, default=20)
    s.add_argument("--utts", type=int, default=20)
    s.add_argument("--heldout", type=int, default=5, help="utterances per speaker kept for test trials")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on data_dir/<speaker>/<utt>.wav")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.add_argument("--seed", type=int)
    t.add_argument("--precision", choices=("f32", "f64"))
    t.add_argument("--steps", type=int)
    t.add_argument("--ablation", choices=sorted(ABLATIONS))
    t.add_argument("--model", choices=("tiny", "full"))
    t.add_argument("--resume", help="checkpoint written by an earlier run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a trial list and report EER/minDCF")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--trials", required=True)
    e.add_argument("--audio-dir", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="accept or reject one pair of recordings")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("wav_a")
    v.add_argument("wav_b")
    v.add_argument("--threshold", type=float, default=0.5)
    v.set_defaults(func=cmd_verify)

    st = sub.add_parser("stream", help="buffer-by-buffer embedding trace")
    st.add_argument("--checkpoint", required=True)
    st.add_argument("--wav", required=True)
    st.add_argument("--buffer-ms", type=float, default=500.0)
    st.add_argument("--enroll", help="enrollment recording to score each buffer against")
    st.add_argument("--per-buffer", action="store_true", help="pool each buffer on its own")
    st.add_argument("--save-embedding", help="write the final embedding as .npy")
    st.add_argument("--out", required=True)
    st.set_defaults(func=cmd_stream)

    b = sub.add_parser("bench", help="parameter / FLOP comparison table")
    b.add_argument("--channels", type=int, nargs="+", default=[512])
    b.add_argument("--frames", type=int, default=CALIBRATION_FRAMES)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if not args.verbose:
            logging.getLogger().setLevel(logging.WARNING)
            log.setLevel(logging.INFO)
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(json.dumps(diag, default=str)[:2000], file=sys.stderr)
        return EXIT_NUMERIC
    except (MasvError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
