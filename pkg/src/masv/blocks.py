"""MASV building blocks, the full embedding network, and streaming inference.

Block map::

    LCBMamba       ReLU+IN -> [ctx -> Mamba -> IN]  and  flip -> [ctx -> Mamba -> IN] -> flip
                   -> concat -> merge (2W -> W) + input -> ReLU+IN
    TriMambaBlock  Conv(C->W)+ReLU+BN -> LCBMamba -> Mamba+ReLU+BN (global, stateful)
                   -> Conv(W->C)+ReLU+BN -> SE -> + input
    SERes2Block    ECAPA baseline block (Res2 dilated convs in place of the Mamba paths)
    MASV           stem -> blocks with dense additive skips -> MFA -> ASP -> BN -> FC -> L2
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ContractError, DimensionError, StateError
from .nn import BatchNorm1d, Conv1d, InstanceNorm1d, Linear, Module, PointwiseConv
from .ssm import DEFAULT_CHUNK, MambaLayer, MambaState

INPUT_DIM = 80
MFA_CHANNELS = 1536
# Mamba paths inside a Tri-Mamba block run at this fraction of the block width,
# rounded to a multiple of 8 (C=512 -> 240, C=1024 -> 480, C=64 -> 32).
BOTTLENECK_RATIO = 15 / 32


@dataclass
class ModelConfig:
    channels: int = 512
    mfa_channels: int = MFA_CHANNELS
    num_tri_blocks: int = 3
    state_dim: int = 16
    expand: int = 2
    k_conv: int = 4
    context_window: int = 8
    embedding_dim: int = 192
    se_reduction: int = 8
    mamba_width: int | None = None
    res2_scale: int = 8
    dilations: tuple[int, ...] = (2, 3, 4)
    asp_hidden: int = 128
    stem_kernel: int = 5
    input_dim: int = INPUT_DIM
    chunk_size: int = DEFAULT_CHUNK
    scan_method: str = "auto"
    use_lcb: bool = True
    use_tri: bool = True
    use_full_skip: bool = True
    baseline_res2: bool = False

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        self.validate()

    @property
    def width(self) -> int:
        """Channel width of the Mamba paths inside each block."""
        if self.baseline_res2:
            return self.channels
        if self.mamba_width:
            return self.mamba_width
        return max(8, 8 * int(round(BOTTLENECK_RATIO * self.channels / 8)))

    def dilation(self, i: int) -> int:
        return self.dilations[i] if i < len(self.dilations) else self.dilations[-1] + i - len(self.dilations) + 1

    def validate(self) -> None:
        if self.channels < 1 or self.num_tri_blocks < 1 or self.state_dim < 1:
            raise ConfigError("channels, num_tri_blocks and state_dim must be positive")
        if self.scan_method not in ("auto", "fast", "naive"):
            raise ConfigError(f"scan_method must be auto, fast or naive, got {self.scan_method!r}")
        if self.context_window < 0:
            raise ConfigError("context_window must be >= 0")
        if self.channels // self.se_reduction < 1:
            raise ConfigError(f"SE reduction {self.se_reduction} too large for {self.channels} channels")
        uses_res2 = self.baseline_res2 or not self.use_lcb
        if uses_res2 and self.width % self.res2_scale:
            raise ConfigError(f"Res2 width {self.width} not divisible by scale {self.res2_scale}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def ablation(cls, name: str, **overrides) -> ModelConfig:
        """Named ablation configuration: base, lcb, tri, complete (or no_lcb)."""
        flags = ABLATIONS.get(name)
        if flags is None:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return cls(**{**flags, **overrides})

    @classmethod
    def tiny(cls, **overrides) -> ModelConfig:
        """Desk-scale model: C=64, 2 blocks; MFA width shrunk to 3C to match."""
        base = dict(channels=64, num_tri_blocks=2, state_dim=8, context_window=4, embedding_dim=64,
                    mfa_channels=192)
        return cls(**{**base, **overrides})


ABLATIONS = {
    "base": dict(baseline_res2=True, use_lcb=False, use_tri=False, use_full_skip=False),
    "lcb": dict(baseline_res2=False, use_lcb=True, use_tri=False, use_full_skip=False),
    "tri": dict(baseline_res2=False, use_lcb=True, use_tri=True, use_full_skip=False),
    "complete": dict(baseline_res2=False, use_lcb=True, use_tri=True, use_full_skip=True),
    "no_lcb": dict(baseline_res2=False, use_lcb=False, use_tri=True, use_full_skip=True),
}


# -- small pieces -------------------------------------------------------------

def local_context_window(x: Tensor, weight: Tensor | None, direction: str = "forward") -> Tensor:
    """Add a learned depthwise summary of the ``c`` neighbouring frames inside the buffer.

    forward:  ``out_t = x_t + sum_{j=1..c} w_j * x_{t-j}``
    backward: ``out_t = x_t + sum_{j=1..c} w_j * x_{t+j}``

    ``weight`` is ``[C, c]`` (column ``j-1`` holds ``w_j``); frames outside the
    buffer count as zero, so ``c >= T`` simply covers the whole buffer.
    """
    if weight is None or weight.shape[1] == 0:
        return x
    c = weight.shape[1]
    ones = Tensor(np.ones((weight.shape[0], 1), dtype=weight.dtype))
    if direction == "forward":
        # taps ordered oldest..current: w_c, ..., w_1, 1
        kernel = ad.concat([ad.getitem(weight, (slice(None), slice(None, None, -1))), ones], axis=1)
        return ad.depthwise_conv1d(x, kernel, pad_left=c)
    if direction == "backward":
        kernel = ad.concat([ones, weight], axis=1)
        return ad.depthwise_conv1d(x, kernel, pad_right=c)
    raise ContractError(f"direction must be 'forward' or 'backward', got {direction!r}")


class LocalContext(Module):
    def __init__(self, channels: int, window: int, rng: np.random.Generator, direction: str = "forward",
                 dtype=np.float64):
        super().__init__()
        self.direction = direction
        self.weight = (
            Parameter(rng.normal(0.0, 0.5 / math.sqrt(window), (channels, window)).astype(dtype))
            if window > 0 else None
        )

    def forward(self, x: Tensor) -> Tensor:
        return local_context_window(x, self.weight, self.direction)


class SEBlock(Module):
    """Squeeze-and-excitation: per-channel gates from the time-averaged input."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 8, dtype=np.float64):
        super().__init__()
        hidden = channels // reduction
        if hidden < 1:
            raise ConfigError(f"SE reduction {reduction} too large for {channels} channels")
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype)

    def gates(self, x: Tensor) -> Tensor:
        s = ad.mean(x, axis=2)
        return ad.sigmoid(self.fc2(ad.relu(self.fc1(s))))

    def forward(self, x: Tensor) -> Tensor:
        return x * ad.reshape(self.gates(x), (x.shape[0], x.shape[1], 1))


class ConvReluBN(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, kernel: int = 1, dilation: int = 1,
                 dtype=np.float64):
        super().__init__()
        if kernel == 1:
            self.conv = PointwiseConv(cin, cout, rng, dtype=dtype)
        else:
            self.conv = Conv1d(cin, cout, kernel, rng, dilation=dilation, dtype=dtype)
        self.bn = BatchNorm1d(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(ad.relu(self.conv(x)))


class Res2Conv(Module):
    """Hierarchical dilated 3-tap convolutions over ``scale`` channel groups."""

    def __init__(self, channels: int, scale: int, dilation: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if channels % scale:
            raise ConfigError(f"Res2 channels {channels} not divisible by scale {scale}")
        self.scale = scale
        self.group = channels // scale
        n = 1 if scale == 1 else scale - 1
        self.convs = [ConvReluBN(self.group, self.group, rng, kernel=3, dilation=dilation, dtype=dtype)
                      for _ in range(n)]

    def forward(self, x: Tensor) -> Tensor:
        if self.scale == 1:
            return self.convs[0](x)
        parts = ad.split(x, [self.group] * self.scale, axis=1)
        outs = [parts[0]]
        prev = None
        for i, conv in enumerate(self.convs, start=1):
            inp = parts[i] if prev is None else parts[i] + prev
            prev = conv(inp)
            outs.append(prev)
        return ad.concat(outs, axis=1)


class SERes2Block(Module):
    """ECAPA-TDNN SE-Res2Block: 1x1 conv -> Res2 -> 1x1 conv -> SE -> + input."""

    def __init__(self, channels: int, scale: int, dilation: int, rng: np.random.Generator,
                 se_reduction: int = 8, dtype=np.float64):
        super().__init__()
        self.conv1 = ConvReluBN(channels, channels, rng, dtype=dtype)
        self.res2 = Res2Conv(channels, scale, dilation, rng, dtype=dtype)
        self.conv2 = ConvReluBN(channels, channels, rng, dtype=dtype)
        self.se = SEBlock(channels, rng, se_reduction, dtype=dtype)

    def forward(self, x: Tensor, global_state=None):
        out = self.se(self.conv2(self.res2(self.conv1(x))))
        return out + x, None


def se_res2_block(x: Tensor, block: SERes2Block) -> Tensor:
    return block(x)[0]


# -- LCB-Mamba ------------------------------------------------------------------

class LCBMamba(Module):
    """Local-context bidirectional Mamba: both directions stay inside the buffer."""

    def __init__(self, width: int, rng: np.random.Generator, N: int = 16, expand: int = 2, k_conv: int = 4,
                 context_window: int = 8, chunk_size: int = DEFAULT_CHUNK, scan_method: str = "auto",
                 dtype=np.float64):
        super().__init__()
        self.chunk_size = chunk_size
        self.scan_method = scan_method
        self.in_norm = InstanceNorm1d(width, dtype=dtype)
        self.ctx_fwd = LocalContext(width, context_window, rng, "forward", dtype=dtype)
        self.mamba_fwd = MambaLayer(width, rng, N=N, expand=expand, k_conv=k_conv, dtype=dtype)
        self.norm_fwd = InstanceNorm1d(width, dtype=dtype)
        self.ctx_bwd = LocalContext(width, context_window, rng, "forward", dtype=dtype)
        self.mamba_bwd = MambaLayer(width, rng, N=N, expand=expand, k_conv=k_conv, dtype=dtype)
        self.norm_bwd = InstanceNorm1d(width, dtype=dtype)
        self.merge = PointwiseConv(2 * width, width, rng, bias=False, dtype=dtype)
        self.out_norm = InstanceNorm1d(width, dtype=dtype)

    def forward_path(self, z: Tensor) -> Tensor:
        y, _ = self.mamba_fwd(self.ctx_fwd(z), None, self.scan_method, self.chunk_size)
        return self.norm_fwd(y)

    def backward_path(self, z: Tensor) -> Tensor:
        # Local context is applied to the flipped stream, i.e. it looks at later frames.
        y, _ = self.mamba_bwd(self.ctx_bwd(ad.flip_time(z)), None, self.scan_method, self.chunk_size)
        return ad.flip_time(self.norm_bwd(y))

    def forward(self, x: Tensor) -> Tensor:
        z = self.in_norm(ad.relu(x))
        merged = self.merge(ad.concat([self.forward_path(z), self.backward_path(z)], axis=1)) + x
        return self.out_norm(ad.relu(merged))


def lcb_mamba_forward(x: Tensor, block: LCBMamba) -> Tensor:
    return block(x)


# -- Tri-Mamba ------------------------------------------------------------------

class GlobalMamba(Module):
    """Mamba + ReLU + BN whose hidden state is carried across buffers."""

    def __init__(self, width: int, rng: np.random.Generator, N: int, expand: int, k_conv: int,
                 chunk_size: int = DEFAULT_CHUNK, scan_method: str = "auto", dtype=np.float64):
        super().__init__()
        self.chunk_size = chunk_size
        self.scan_method = scan_method
        self.mamba = MambaLayer(width, rng, N=N, expand=expand, k_conv=k_conv, dtype=dtype)
        self.bn = BatchNorm1d(width, dtype=dtype)

    def forward(self, x: Tensor, state: MambaState | None = None):
        y, new_state = self.mamba(x, state, self.scan_method, self.chunk_size)
        return self.bn(ad.relu(y)), new_state


class TriMambaBlock(Module):
    def __init__(self, cfg: ModelConfig, index: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        C, W = cfg.channels, cfg.width
        self.conv_in = ConvReluBN(C, W, rng, dtype=dtype)
        if cfg.use_lcb:
            self.local = LCBMamba(W, rng, N=cfg.state_dim, expand=cfg.expand, k_conv=cfg.k_conv,
                                  context_window=cfg.context_window, chunk_size=cfg.chunk_size,
                                  scan_method=cfg.scan_method, dtype=dtype)
        else:
            self.local = Res2Conv(W, cfg.res2_scale, cfg.dilation(index), rng, dtype=dtype)
        self.glob = (
            GlobalMamba(W, rng, cfg.state_dim, cfg.expand, cfg.k_conv, cfg.chunk_size, cfg.scan_method, dtype=dtype)
            if cfg.use_tri else None
        )
        self.conv_out = ConvReluBN(W, C, rng, dtype=dtype)
        self.se = SEBlock(C, rng, cfg.se_reduction, dtype=dtype)

    def pre_se(self, x: Tensor, global_state: MambaState | None = None):
        h = self.local(self.conv_in(x))
        new_state = None
        if self.glob is not None:
            h, new_state = self.glob(h, global_state)
        return self.conv_out(h), new_state

    def forward(self, x: Tensor, global_state: MambaState | None = None):
        h, new_state = self.pre_se(x, global_state)
        return self.se(h) + x, new_state


def tri_mamba_forward(x: Tensor, block: TriMambaBlock, global_state: MambaState | None = None):
    return block(x, global_state)


# -- pooling --------------------------------------------------------------------

class AttentiveStatsPool(Module):
    """Channel-wise attentive statistics pooling: ``[B, C, T] -> [B, 2C]``.

    With ``global_context`` the scorer also sees the plain per-channel mean
    and std; that variant cannot be accumulated exactly across buffers.
    """

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator, global_context: bool = False,
                 dtype=np.float64):
        super().__init__()
        self.global_context = global_context
        cin = 3 * channels if global_context else channels
        self.attn_in = PointwiseConv(cin, hidden, rng, dtype=dtype)
        self.attn_out = PointwiseConv(hidden, channels, rng, dtype=dtype)

    def logits(self, x: Tensor) -> Tensor:
        inp = x
        if self.global_context:
            T = x.shape[2]
            mu = ad.mean(x, axis=2, keepdims=True)
            sd = ad.std(x, axis=2, keepdims=True, eps=1e-5)
            ones = Tensor(np.ones((1, 1, T), dtype=x.dtype))
            inp = ad.concat([x, mu * ones, sd * ones], axis=1)
        return self.attn_out(ad.tanh(self.attn_in(inp)))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] < 2:
            raise ContractError("attentive statistics pooling needs T >= 2 frames")
        alpha = ad.softmax(self.logits(x), axis=2)
        mu = ad.sum_(alpha * x, axis=2)
        second = ad.sum_(alpha * ad.square(x), axis=2)
        sigma = ad.sqrt(ad.clamp_min(second - ad.square(mu), 0.0))
        return ad.concat([mu, sigma], axis=1)


def asp_pool(x: Tensor, pool: AttentiveStatsPool) -> Tensor:
    return pool(x)


# -- full model -----------------------------------------------------------------

class MASV(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        C = cfg.channels
        self.stem = ConvReluBN(cfg.input_dim, C, rng, kernel=cfg.stem_kernel, dtype=dtype)
        if cfg.baseline_res2:
            self.blocks = [SERes2Block(C, cfg.res2_scale, cfg.dilation(i), rng, cfg.se_reduction, dtype=dtype)
                           for i in range(cfg.num_tri_blocks)]
        else:
            self.blocks = [TriMambaBlock(cfg, i, rng, dtype=dtype) for i in range(cfg.num_tri_blocks)]
        self.mfa = PointwiseConv(cfg.num_tri_blocks * C, cfg.mfa_channels, rng, dtype=dtype)
        self.pool = AttentiveStatsPool(cfg.mfa_channels, cfg.asp_hidden, rng, dtype=dtype)
        self.pool_bn = BatchNorm1d(2 * cfg.mfa_channels, dtype=dtype)
        self.fc = Linear(2 * cfg.mfa_channels, cfg.embedding_dim, rng, dtype=dtype)

    @property
    def dtype(self):
        return self.fc.weight.dtype

    def frame_features(self, feats: Tensor, global_states=None):
        """Everything up to (not including) pooling: returns ``([B, mfa, T], new_states)``."""
        if feats.ndim != 3 or feats.shape[1] != self.cfg.input_dim:
            raise DimensionError(
                f"MASV expects features [B, {self.cfg.input_dim}, T], got {feats.shape} (axis 1 mismatch)"
            )
        if global_states is None:
            global_states = [None] * len(self.blocks)
        elif len(global_states) != len(self.blocks):
            raise StateError(f"{len(global_states)} block states for {len(self.blocks)} blocks")
        stem = self.stem(feats)
        outs = []
        new_states = []
        inp = stem
        for block, st in zip(self.blocks, global_states):
            out, ns = block(inp, st)
            outs.append(out)
            new_states.append(ns)
            if self.cfg.use_full_skip:
                inp = inp + out
            else:
                inp = out
        frames = ad.relu(self.mfa(ad.concat(outs, axis=1)))
        return frames, new_states

    def embed_pooled(self, pooled: Tensor) -> Tensor:
        return ad.l2_normalize(self.fc(self.pool_bn(pooled)), axis=1)

    def forward(self, feats: Tensor) -> Tensor:
        frames, _ = self.frame_features(ad.as_tensor(feats))
        return self.embed_pooled(self.pool(frames))


def masv_forward(feats, model: MASV) -> Tensor:
    return model(ad.as_tensor(feats))


# -- streaming ------------------------------------------------------------------

@dataclass
class StreamState:
    """Everything a stream carries between buffers.

    Pool statistics are stored as log-sum-exp style partial sums per channel:
    running max logit ``m`` and ``s0 = sum exp(e - m)``, ``s1 = sum exp(e - m) x``,
    ``s2 = sum exp(e - m) x^2``.
    """

    global_states: list = field(default_factory=list)
    m: np.ndarray | None = None
    s0: np.ndarray | None = None
    s1: np.ndarray | None = None
    s2: np.ndarray | None = None
    buffers_seen: int = 0
    frames_seen: int = 0
    accumulate: bool = True
    fingerprint: str = ""

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {
            "buffers_seen": np.array(self.buffers_seen),
            "frames_seen": np.array(self.frames_seen),
            "accumulate": np.array(self.accumulate),
            "fingerprint": np.array(self.fingerprint),
        }
        for name in ("m", "s0", "s1", "s2"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        for i, st in enumerate(self.global_states):
            if st is not None:
                out[f"g{i}.h"] = st.h
                out[f"g{i}.conv_tail"] = st.conv_tail
        return out

    @classmethod
    def from_arrays(cls, arrays, num_blocks: int) -> StreamState:
        st = cls(
            buffers_seen=int(arrays["buffers_seen"]), frames_seen=int(arrays["frames_seen"]),
            accumulate=bool(arrays["accumulate"]), fingerprint=str(arrays["fingerprint"]),
        )
        for name in ("m", "s0", "s1", "s2"):
            if name in arrays:
                setattr(st, name, np.array(arrays[name]))
        if st.buffers_seen:
            st.global_states = [
                MambaState(np.array(arrays[f"g{i}.h"]), np.array(arrays[f"g{i}.conv_tail"]))
                if f"g{i}.h" in arrays else None
                for i in range(num_blocks)
            ]
        return st

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.to_arrays())

    @classmethod
    def load(cls, path, num_blocks: int) -> StreamState:
        with np.load(path) as data:
            return cls.from_arrays({k: data[k] for k in data.files}, num_blocks)


def config_fingerprint(cfg: ModelConfig) -> str:
    return repr(sorted(cfg.to_dict().items()))


def new_stream(model: MASV, accumulate: bool = True) -> StreamState:
    return StreamState(accumulate=accumulate, fingerprint=config_fingerprint(model.cfg))


def _as_feature_batch(buffer, dtype) -> Tensor:
    frames = getattr(buffer, "frames", buffer)
    arr = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    if arr.ndim == 2:
        arr = arr.T[None]  # [T, F] -> [1, F, T]
    return Tensor(np.ascontiguousarray(arr, dtype=dtype))


def streaming_update(model: MASV, state: StreamState, buffer) -> tuple[StreamState, Tensor]:
    """Feed one buffer of features (``[T, 80]`` or ``[B, 80, T]``); returns the new
    state and the embedding of all audio seen so far.

    Local LCB paths and IN statistics see only this buffer; the global Mamba
    states and the pooling sums carry over.  The model must be in eval mode.
    """
    if model.training:
        raise StateError("streaming_update requires a model in eval mode")
    if state.fingerprint and state.fingerprint != config_fingerprint(model.cfg):
        raise StateError("stream state was created for a different model configuration")
    x = _as_feature_batch(buffer, model.dtype)
    if x.shape[2] < 2:
        raise ContractError("streaming buffers need at least 2 frames")
    prev = state.global_states if state.buffers_seen else None
    with ad.no_grad():
        frames, new_states = model.frame_features(x, prev)
        e = model.pool.logits(frames).data
        xf = frames.data
        m_new = e.max(axis=2)
        if state.accumulate and state.m is not None:
            m = np.maximum(state.m, m_new)
            scale_old = np.exp(state.m - m)
            w = np.exp(e - m[:, :, None])
            s0 = state.s0 * scale_old + w.sum(axis=2)
            s1 = state.s1 * scale_old + (w * xf).sum(axis=2)
            s2 = state.s2 * scale_old + (w * xf * xf).sum(axis=2)
        else:
            m = m_new
            w = np.exp(e - m[:, :, None])
            s0, s1, s2 = w.sum(axis=2), (w * xf).sum(axis=2), (w * xf * xf).sum(axis=2)
        mu = s1 / s0
        sigma = np.sqrt(np.maximum(s2 / s0 - mu * mu, 0.0))
        emb = model.embed_pooled(Tensor(np.concatenate([mu, sigma], axis=1)))
    new = StreamState(
        global_states=new_states, m=m, s0=s0, s1=s1, s2=s2,
        buffers_seen=state.buffers_seen + 1, frames_seen=state.frames_seen + x.shape[2],
        accumulate=state.accumulate, fingerprint=config_fingerprint(model.cfg),
    )
    return new, emb
