"""Training: Circle loss, triangular cyclical LR, Adam with decoupled weight
decay, a synthetic multi-speaker corpus, and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import MASV
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractError, NumericError
from .features import AudioBuffer, FeatureSeq, extract

log = logging.getLogger(__name__)


# -- Circle loss ------------------------------------------------------------------

@dataclass(frozen=True)
class CircleLossConfig:
    m: float = 0.35
    s: float = 60.0

    def __post_init__(self):
        if not 0 < self.m < 1 or self.s <= 0:
            raise ContractError("circle loss needs 0 < m < 1 and s > 0")


_MASKED = -1e9


def circle_loss(embeddings: Tensor, labels, cfg: CircleLossConfig = CircleLossConfig()) -> Tensor:
    """Pairwise Circle loss with optima ``O_p = 1 + m``, ``O_n = -m`` and margins
    ``Delta_p = 1 - m``, ``Delta_n = m``, averaged over anchors that have both a
    positive and a negative partner in the batch.

    The adaptive weights ``alpha_p``, ``alpha_n`` are part of the graph, so the
    gradient is that of the loss value exactly as computed.
    """
    labels = np.asarray(labels)
    B = embeddings.shape[0]
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(B, dtype=bool)
    neg = ~same
    valid = pos.any(axis=1) & neg.any(axis=1)
    if not pos.any() or not neg.any():
        raise ContractError("circle loss needs at least one positive and one negative pair in the batch")
    e = ad.l2_normalize(embeddings, axis=1)
    sim = ad.matmul(e, ad.transpose(e))
    m, s = cfg.m, cfg.s
    alpha_p = ad.relu(1.0 + m - sim)
    alpha_n = ad.relu(sim + m)
    logit_p = -s * alpha_p * (sim - (1.0 - m))
    logit_n = s * alpha_n * (sim - m)
    dtype = embeddings.dtype
    mask_p = Tensor(np.where(pos, 0.0, _MASKED).astype(dtype))
    mask_n = Tensor(np.where(neg, 0.0, _MASKED).astype(dtype))
    lse = ad.logsumexp(logit_p + mask_p, axis=1) + ad.logsumexp(logit_n + mask_n, axis=1)
    per_anchor = ad.softplus(ad.getitem(lse, np.flatnonzero(valid)))
    return ad.mean(per_anchor)


# -- schedule and optimizer --------------------------------------------------------

@dataclass
class ScheduleConfig:
    lr_min: float = 1e-8
    lr_max: float = 1e-3
    cycle_steps: int = 100_000
    weight_decay: float = 5e-5
    batch_size: int = 256

    def __post_init__(self):
        if not self.lr_min < self.lr_max or self.cycle_steps < 2:
            raise ContractError("schedule needs lr_min < lr_max and cycle_steps >= 2")

    @classmethod
    def desk(cls, **overrides) -> ScheduleConfig:
        """Desk-scale preset: batch 64, 2000-step cycles."""
        return cls(**{"cycle_steps": 2000, "batch_size": 64, **overrides})


def cyclical_lr(step: int, cfg: ScheduleConfig) -> float:
    """Triangular cycle: ``lr_min`` at multiples of ``cycle_steps``, ``lr_max`` half-way."""
    if step < 0:
        raise ContractError("step must be >= 0")
    half = cfg.cycle_steps / 2.0
    pos = step % cfg.cycle_steps
    frac = pos / half if pos <= half else (cfg.cycle_steps - pos) / half
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * frac


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 5e-5,
              betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One Adam update in place on ``params`` (arrays or tensors).

    Weight decay is decoupled: ``p <- p - lr * wd * p`` outside the moments.
    Any non-finite gradient refuses the whole step.
    """
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]
    if len(arrays) != len(grads):
        raise ContractError("params and grads differ in length")
    for a, g in zip(arrays, grads):
        if g.shape != a.shape:
            raise ContractError(f"grad shape {g.shape} != param shape {a.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; Adam step refused")
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            a -= lr * weight_decay * a
        a -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# -- synthetic speakers ------------------------------------------------------------

@dataclass
class SpeakerProfile:
    f0: float
    formants: np.ndarray
    bandwidths: np.ndarray
    tilt: float
    breathiness: float


@dataclass
class SynthDataset:
    audio: list[AudioBuffer]
    labels: np.ndarray
    profiles: list[SpeakerProfile]


_FORMANT_RANGES = ((300, 850), (850, 2300), (2100, 3200), (3200, 4300))


def _resonator(x, freq, bw, sr):
    r = math.exp(-math.pi * bw / sr)
    theta = 2 * math.pi * freq / sr
    a = [1.0, -2 * r * math.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def _utterance(p: SpeakerProfile, rng: np.random.Generator, sr: int, min_s: float, max_s: float) -> np.ndarray:
    n = int(rng.uniform(min_s, max_s) * sr)
    t = np.arange(n) / sr
    # Pitch: per-utterance offset, slow intonation drift and small vibrato.
    f0 = p.f0 * rng.normal(1.0, 0.04)
    drift = 1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 2 * np.pi))
    vib = 1 + 0.01 * np.sin(2 * np.pi * 5.5 * t)
    phase = np.cumsum(f0 * drift * vib / sr)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    excitation = pulses + p.breathiness * rng.normal(0, 0.05, n)
    excitation = lfilter([1.0], [1.0, -p.tilt], excitation)
    y = np.zeros(n)
    for k, (fc, bw) in enumerate(zip(p.formants, p.bandwidths)):
        jitter = rng.normal(1.0, 0.03)
        y += _resonator(excitation, fc * jitter, bw, sr) * (0.6 ** k)
    # Syllable-rate amplitude envelope, then background noise.
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(2.5, 5.0) * t + rng.uniform(0, 2 * np.pi))
    y = y * env
    y = y / (np.max(np.abs(y)) + 1e-9) * 0.5
    y = y + rng.normal(0, 10 ** rng.uniform(-3.0, -2.0), n)
    return np.clip(y, -1.0, 1.0)


def synth_speakers(num_speakers: int, utts_per_speaker: int, seed: int = 0, sample_rate: int = 16000,
                   min_seconds: float = 2.0, max_seconds: float = 4.0) -> SynthDataset:
    """Speakers are fixed formant/pitch profiles; utterances jitter pitch, formants and noise."""
    if num_speakers < 2:
        raise ContractError("need at least two speakers")
    rng = np.random.default_rng(seed)
    profiles = []
    for _ in range(num_speakers):
        k = int(rng.integers(3, 5))
        formants = np.array([rng.uniform(*_FORMANT_RANGES[i]) for i in range(k)])
        profiles.append(SpeakerProfile(
            f0=float(np.exp(rng.uniform(np.log(85), np.log(260)))),
            formants=formants,
            bandwidths=rng.uniform(60, 220, k),
            tilt=float(rng.uniform(0.6, 0.95)),
            breathiness=float(rng.uniform(0.2, 1.5)),
        ))
    audio, labels = [], []
    for spk, prof in enumerate(profiles):
        for _ in range(utts_per_speaker):
            audio.append(AudioBuffer(_utterance(prof, rng, sample_rate, min_seconds, max_seconds), sample_rate))
            labels.append(spk)
    return SynthDataset(audio, np.array(labels), profiles)


# -- training loop -----------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    seed: int = 0
    speakers_per_batch: int = 16
    crop_frames: int = 100
    checkpoint_every: int = 0
    loss: CircleLossConfig = field(default_factory=CircleLossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig.desk)

    @classmethod
    def toy(cls, **overrides) -> TrainConfig:
        """Toy acceptance preset: 16 speakers x 2 crops of 80 frames per step."""
        base = dict(crop_frames=80, schedule=ScheduleConfig.desk(batch_size=32))
        return cls(**{**base, **overrides})


class TrainingDiverged(NumericError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def sample_batch(feats: list[FeatureSeq], labels: np.ndarray, batch_size: int, speakers_per_batch: int,
                 crop_frames: int, rng: np.random.Generator, dtype=np.float32):
    """``speakers_per_batch`` speakers x ``batch_size // speakers_per_batch`` random crops."""
    per = max(2, batch_size // speakers_per_batch)
    speakers = np.unique(labels)
    chosen = rng.choice(speakers, size=min(speakers_per_batch, len(speakers)), replace=False)
    xs, ys = [], []
    for spk in chosen:
        pool = np.flatnonzero(labels == spk)
        for idx in rng.choice(pool, size=per, replace=len(pool) < per):
            f = feats[idx].frames
            if f.shape[0] <= crop_frames:
                reps = -(-crop_frames // f.shape[0])
                f = np.tile(f, (reps, 1))
            start = int(rng.integers(0, f.shape[0] - crop_frames + 1))
            xs.append(f[start:start + crop_frames].T)
            ys.append(spk)
    return np.stack(xs).astype(dtype), np.array(ys)


@dataclass
class TrainResult:
    history: list[dict]
    model: MASV

    def smoothed_losses(self, window: int = 50) -> np.ndarray:
        losses = np.array([h["loss"] for h in self.history])
        w = min(window, len(losses))
        return np.convolve(losses, np.ones(w) / w, mode="valid")


def _optimizer_arrays(state: AdamState) -> dict[str, np.ndarray]:
    out = {"adam.step": np.array(state.step, dtype=np.int64)}
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        out[f"adam.m.{i}"] = m
        out[f"adam.v.{i}"] = v
    return out


def _optimizer_from_arrays(extra: dict) -> AdamState:
    st = AdamState(step=int(extra.get("adam.step", 0)))
    i = 0
    while f"adam.m.{i}" in extra:
        st.m.append(extra[f"adam.m.{i}"].copy())
        st.v.append(extra[f"adam.v.{i}"].copy())
        i += 1
    return st


def train_loop(model: MASV, feats: list[FeatureSeq], labels, cfg: TrainConfig, out_dir=None,
               resume_from=None, log_every: int = 100) -> TrainResult:
    """Deterministic given ``cfg.seed``: the batch at step ``k`` depends only on (seed, k)."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ContractError("training needs at least two speakers")
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    opt = AdamState()
    history: list[dict] = []
    start = 0
    if resume_from is not None:
        loaded, meta, extra = load_checkpoint(resume_from)
        model.load_state_dict(loaded.state_dict())
        opt = _optimizer_from_arrays(extra)
        start = int(meta.get("train_step", 0))
        history = list(meta.get("history", []))
    params = model.parameters()
    sched = cfg.schedule
    model.train()
    for step in range(start, cfg.steps):
        lr = cyclical_lr(step, sched)
        rng = np.random.default_rng([cfg.seed, step])
        x, y = sample_batch(feats, labels, sched.batch_size, cfg.speakers_per_batch, cfg.crop_frames, rng,
                            dtype=model.dtype)
        model.zero_grad()
        loss = circle_loss(model(Tensor(x)), y, cfg.loss)
        value = loss.item()
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        grad_norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
        if not math.isfinite(value) or not math.isfinite(grad_norm):
            diag = {
                "step": step, "lr": lr, "loss": value,
                "grad_norms": {name: float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0
                               for name, p in model.named_parameters()},
            }
            if out_dir:
                (out_dir / "divergence.json").write_text(json.dumps(diag, indent=2, default=str))
            raise TrainingDiverged(f"non-finite loss or gradient at step {step}", diag)
        adam_step(params, grads, opt, lr, weight_decay=sched.weight_decay)
        history.append({"step": step, "loss": value, "lr": lr, "grad_norm": grad_norm})
        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            log.info("step %d loss %.4f lr %.3g grad_norm %.3g", step, value, lr, grad_norm)
        done = step + 1
        if out_dir and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.steps:
            save_training_checkpoint(out_dir / f"step{done}.ckpt", model, opt, done, history)
    if out_dir:
        save_training_checkpoint(out_dir / "model.ckpt", model, opt, cfg.steps, history)
        write_loss_csv(out_dir / "loss.csv", history)
    return TrainResult(history, model)


def save_training_checkpoint(path, model: MASV, opt: AdamState, step: int, history: list[dict]) -> None:
    save_checkpoint(path, model, extra=_optimizer_arrays(opt), meta={"train_step": step, "history": history})


def write_loss_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "grad_norm"])
        for h in history:
            w.writerow([h["step"], repr(h["loss"]), repr(h["lr"]), repr(h["grad_norm"])])


def extract_all(dataset: SynthDataset) -> list[FeatureSeq]:
    return [extract(a) for a in dataset.audio]


def embed(model: MASV, feats: FeatureSeq | np.ndarray) -> np.ndarray:
    """Unit-norm embedding of one utterance (model must be in eval mode)."""
    frames = feats.frames if isinstance(feats, FeatureSeq) else np.asarray(feats)
    with ad.no_grad():
        return model(Tensor(frames.T[None].astype(model.dtype))).data[0]
