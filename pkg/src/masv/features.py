"""Audio ingestion and 80-band log-Mel features with cepstral mean normalization.

Defaults follow Kaldi-style front ends: 16 kHz working rate, 25 ms Hamming
frames every 10 ms, pre-emphasis 0.97, 512-point FFT, triangular Mel filters
from 0 Hz to Nyquist, ``log(power + 1e-6)``.  No voice activity detection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import ContractError, LengthError, ParseError

SUPPORTED_RATES = (8000, 16000, 44100, 48000)
WORKING_RATE = 16000
LOG_FLOOR = 1e-6
FEAT_MAGIC = b"MASVFEAT"


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = WORKING_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate not in SUPPORTED_RATES:
            raise ContractError(f"sample rate {self.sample_rate} not in {SUPPORTED_RATES}")
        if not np.all(np.isfinite(self.samples)):
            raise ContractError("audio samples must be finite")

    @property
    def duration_ms(self) -> float:
        return 1000.0 * len(self.samples) / self.sample_rate


@dataclass
class FeatureSeq:
    frames: np.ndarray  # [T, n_mels]
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def resample(audio: AudioBuffer, target_rate: int = WORKING_RATE) -> AudioBuffer:
    """Polyphase windowed-sinc resampling (no-op when rates agree)."""
    if audio.sample_rate == target_rate:
        return audio
    ratio = Fraction(target_rate, audio.sample_rate)
    out = resample_poly(audio.samples, ratio.numerator, ratio.denominator)
    return AudioBuffer(out, target_rate)


# -- log-Mel ---------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = 80, sample_rate: int = WORKING_RATE) -> np.ndarray:
    edges = np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(n_mels: int = 80, n_fft: int = 512, sample_rate: int = WORKING_RATE) -> np.ndarray:
    """Triangular filters ``[n_mels, n_fft // 2 + 1]``, built in the Mel domain."""
    edges = np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2)
    bin_mel = hz_to_mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel - left) / (center - left)
    down = (right - bin_mel) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def num_frames(n_samples: int, frame_len: int, shift: int) -> int:
    if n_samples < frame_len:
        return 0
    return 1 + (n_samples - frame_len) // shift


def logmel(audio: AudioBuffer, n_mels: int = 80, frame_len_ms: float = 25.0, shift_ms: float = 10.0,
           n_fft: int = 512, preemph: float = 0.97) -> FeatureSeq:
    audio = resample(audio, WORKING_RATE)
    sr = audio.sample_rate
    frame_len = int(round(sr * frame_len_ms / 1000))
    shift = int(round(sr * shift_ms / 1000))
    T = num_frames(len(audio.samples), frame_len, shift)
    if T < 1:
        raise LengthError(
            f"audio has {len(audio.samples)} samples; one {frame_len_ms} ms frame needs {frame_len}"
        )
    idx = np.arange(frame_len)[None, :] + shift * np.arange(T)[:, None]
    frames = audio.samples[idx]
    # Per-frame pre-emphasis; the first sample is paired with itself.
    prev = np.concatenate([frames[:, :1], frames[:, :-1]], axis=1)
    frames = frames - preemph * prev
    frames = frames * np.hamming(frame_len)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    mel = power @ mel_filterbank(n_mels, n_fft, sr).T
    return FeatureSeq(np.log(mel + LOG_FLOOR), frame_shift_ms=shift_ms, frame_length_ms=frame_len_ms)


def cmn(feats: FeatureSeq) -> FeatureSeq:
    """Subtract the per-coefficient mean over the whole utterance."""
    f = feats.frames
    return FeatureSeq(f - f.mean(axis=0, keepdims=True), feats.frame_shift_ms, feats.frame_length_ms)


class RunningCMN:
    """Causal CMN for streaming: each buffer is normalized by the mean of every
    frame seen so far, including its own."""

    def __init__(self, dims: int = 80):
        self.total = np.zeros(dims)
        self.count = 0

    def __call__(self, feats: FeatureSeq) -> FeatureSeq:
        self.total = self.total + feats.frames.sum(axis=0)
        self.count += feats.num_frames
        mean = self.total / self.count
        return FeatureSeq(feats.frames - mean, feats.frame_shift_ms, feats.frame_length_ms)


def extract(audio: AudioBuffer) -> FeatureSeq:
    return cmn(logmel(audio))


# -- WAV I/O ----------------------------------------------------------------------

_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def read_wav(path, target_rate: int | None = WORKING_RATE) -> AudioBuffer:
    """Read 16-bit PCM or 32/64-bit float WAV; stereo is averaged to mono.

    Audio at another rate is resampled to ``target_rate`` (pass ``None`` to keep it).
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ParseError(f"{path}: not a RIFF/WAVE file", 0)
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        size = struct.unpack_from("<I", raw, pos + 4)[0]
        body = pos + 8
        if body + size > len(raw) and cid != b"data":
            raise ParseError(f"{path}: chunk {cid!r} runs past end of file", pos)
        if cid == b"fmt ":
            if size < 16:
                raise ParseError(f"{path}: fmt chunk too small ({size} bytes)", pos)
            tag, channels, rate, _, align, bits = struct.unpack_from("<HHIIHH", raw, body)
            if tag == _EXTENSIBLE and size >= 40:
                tag = struct.unpack_from("<H", raw, body + 24)[0]
            fmt = (tag, channels, rate, align, bits, pos)
        elif cid == b"data":
            data = raw[body:min(body + size, len(raw))]
            data_pos = body
        pos = body + size + (size & 1)
    if fmt is None:
        raise ParseError(f"{path}: missing fmt chunk", 12)
    if data is None:
        raise ParseError(f"{path}: missing data chunk", 12)
    tag, channels, rate, align, bits, fmt_pos = fmt
    if channels < 1:
        raise ParseError(f"{path}: zero channels", fmt_pos + 10)
    if tag == _PCM and bits == 16:
        samples = np.frombuffer(data[:len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FLOAT and bits in (32, 64):
        dt = "<f4" if bits == 32 else "<f8"
        n = bits // 8
        samples = np.frombuffer(data[:len(data) // n * n], dtype=dt).astype(np.float64)
    else:
        raise ParseError(f"{path}: unsupported codec (format tag {tag}, {bits} bits)", fmt_pos + 8)
    if len(samples) % channels:
        raise ParseError(f"{path}: data size not a multiple of the frame size", data_pos)
    samples = samples.reshape(-1, channels).mean(axis=1)
    if rate not in SUPPORTED_RATES:
        raise ParseError(f"{path}: unsupported sample rate {rate}", fmt_pos + 12)
    audio = AudioBuffer(samples, rate)
    return resample(audio, target_rate) if target_rate else audio


def write_wav(path, audio: AudioBuffer) -> None:
    """Write mono 16-bit PCM (values are clipped to [-1, 1))."""
    q = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, _PCM, 1, audio.sample_rate, 2 * audio.sample_rate, 2, 16)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


# -- feature cache -------------------------------------------------------------------

def write_feature_cache(path, feats: FeatureSeq) -> None:
    frames = np.ascontiguousarray(feats.frames, dtype="<f4")
    T, dims = frames.shape
    Path(path).write_bytes(FEAT_MAGIC + struct.pack("<II", T, dims) + frames.tobytes())


def read_feature_cache(path) -> FeatureSeq:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != FEAT_MAGIC:
        raise ParseError(f"{path}: bad feature cache magic", 0)
    T, dims = struct.unpack_from("<II", raw, 8)
    if len(raw) != 16 + 4 * T * dims:
        raise ParseError(f"{path}: payload size does not match header [{T}, {dims}]", 16)
    frames = np.frombuffer(raw, dtype="<f4", offset=16).reshape(T, dims).astype(np.float64)
    return FeatureSeq(frames)


# -- streaming front end --------------------------------------------------------------

class StreamingLogMel:
    """Incremental :func:`logmel` at the working rate.

    Samples are pushed buffer by buffer; each call returns the frames that are
    complete so far, so concatenating all outputs gives the same frames as one
    ``logmel`` call on the whole signal.
    """

    def __init__(self, n_mels: int = 80, frame_len_ms: float = 25.0, shift_ms: float = 10.0):
        self.n_mels = n_mels
        self.frame_len_ms, self.shift_ms = frame_len_ms, shift_ms
        self.frame_len = int(round(WORKING_RATE * frame_len_ms / 1000))
        self.shift = int(round(WORKING_RATE * shift_ms / 1000))
        self.pending = np.zeros(0)

    def push(self, samples: np.ndarray) -> np.ndarray:
        self.pending = np.concatenate([self.pending, np.asarray(samples, dtype=np.float64)])
        T = num_frames(len(self.pending), self.frame_len, self.shift)
        if T == 0:
            return np.zeros((0, self.n_mels))
        used = self.pending[:(T - 1) * self.shift + self.frame_len]
        frames = logmel(AudioBuffer(used, WORKING_RATE), self.n_mels, self.frame_len_ms, self.shift_ms).frames
        self.pending = self.pending[T * self.shift:]
        return frames
