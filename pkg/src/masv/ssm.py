"""Selective state-space kernels and the Mamba layer.

The continuous system ``h'(t) = A h(t) + B u(t)``, ``y(t) = C h(t)`` uses a
diagonal negative-real ``A`` (one row of ``N`` poles per channel).  Discretized
with zero-order hold on ``A`` and an Euler step on ``B``::

    A_bar = exp(delta * A)        B_bar = delta * B
    h_t   = A_bar_t * h_{t-1} + B_bar_t * u_t
    y_t   = C_t . h_t + D * u_t

``B``, ``C`` and ``delta`` are functions of the input at every step (the
selection mechanism).  Two evaluators of the recurrence are provided: a plain
sequential loop, kept as the reference, and a chunked evaluator that runs all
chunks in lock-step and stitches them together with the associative
composition ``(a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ContractError, DimensionError, StateError
from .nn import Module, PointwiseConv

DEFAULT_CHUNK = 64


# -- initialization ---------------------------------------------------------

def hippo_init(N: int, D: int) -> np.ndarray:
    """Real diagonal HiPPO approximation: ``A[d, n] = -(n + 1)``; returns ``log(-A)``."""
    if N < 1:
        raise ContractError("state dimension N must be >= 1")
    return np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (D, 1))


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


# -- raw recurrence kernels -------------------------------------------------
# All arrays are time-major: a, b are [T, ...], h0 matches a[0].

def scan_sequential(a: np.ndarray, b: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """Every state of ``h_t = a_t * h_{t-1} + b_t``, one step at a time."""
    h = np.empty_like(b)
    prev = h0
    for t in range(a.shape[0]):
        prev = a[t] * prev + b[t]
        h[t] = prev
    return h


def compose(first, second):
    """Associative composition of two affine maps ``h -> a h + b`` (first applied first)."""
    a1, b1 = first
    a2, b2 = second
    return a2 * a1, a2 * b1 + b2


def scan_chunked(a: np.ndarray, b: np.ndarray, h0: np.ndarray, chunk_size: int = DEFAULT_CHUNK) -> np.ndarray:
    """Same result as :func:`scan_sequential` in ``chunk_size + T/chunk_size`` sequential steps."""
    if chunk_size < 1:
        raise ContractError("chunk_size must be >= 1")
    T = a.shape[0]
    if chunk_size == 1 or T == 0:
        return scan_sequential(a, b, h0)
    L = min(chunk_size, T)
    n_chunks = -(-T // L)
    pad = n_chunks * L - T
    if pad:
        a = np.concatenate([a, np.ones((pad,) + a.shape[1:], dtype=a.dtype)])
        b = np.concatenate([b, np.zeros((pad,) + b.shape[1:], dtype=b.dtype)])
    rest = a.shape[1:]
    a_c = a.reshape((n_chunks, L) + rest)
    b_c = b.reshape((n_chunks, L) + rest)

    # Within-chunk states from a zero start, all chunks at once.
    local = np.empty_like(b_c)
    decay = np.empty_like(a_c)
    local[:, 0] = b_c[:, 0]
    decay[:, 0] = a_c[:, 0]
    for i in range(1, L):
        np.multiply(a_c[:, i], local[:, i - 1], out=local[:, i])
        local[:, i] += b_c[:, i]
        np.multiply(a_c[:, i], decay[:, i - 1], out=decay[:, i])

    # Each chunk is the affine map (decay[-1], local[-1]); fold the prefix.
    carry_in = np.empty((n_chunks,) + rest, dtype=np.result_type(b.dtype, h0.dtype))
    acc = (np.ones_like(h0), np.asarray(h0))
    for k in range(n_chunks):
        carry_in[k] = acc[1]
        acc = compose(acc, (decay[:, -1][k], local[:, -1][k]))

    h = local + decay * carry_in[:, None]
    h = h.reshape((n_chunks * L,) + rest)
    return h[:T] if pad else h


# Above this many elements per time step, numpy is memory-bound and the plain
# loop beats the chunked evaluator.
AUTO_SEQUENTIAL_MIN = 4096


def _scan(a, b, h0, method: str, chunk_size: int):
    if method == "auto":
        method = "naive" if a[0].size >= AUTO_SEQUENTIAL_MIN else "fast"
    if method == "naive":
        return scan_sequential(a, b, h0)
    if method == "fast":
        return scan_chunked(a, b, h0, chunk_size)
    raise ContractError(f"unknown scan method {method!r}")


def discretize_zoh(A: np.ndarray, B_t: np.ndarray, delta_t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ZOH on the diagonal ``A``, Euler on ``B``.

    Shapes: ``A [D, N]``, ``B_t [B, T, N]``, ``delta_t [B, T, D]``; both results
    are ``[B, T, D, N]``.
    """
    A = np.asarray(A)
    delta_t = np.asarray(delta_t)
    if np.any(delta_t <= 0):
        raise ContractError("discretize_zoh needs delta > 0")
    A_bar = np.exp(delta_t[..., None] * A)
    B_bar = delta_t[..., None] * np.asarray(B_t)[:, :, None, :]
    return A_bar, B_bar


# -- selective scan as a differentiable op ---------------------------------

def selective_scan(u, delta, A, B, C, D_skip, h0=None, method: str = "fast",
                   chunk_size: int = DEFAULT_CHUNK):
    """Run the selective recurrence over ``u [B, D, T]``.

    ``delta [B, D, T]`` (positive), ``A [D, N]`` (negative), ``B, C [B, N, T]``,
    ``D_skip [D]``, ``h0 [B, D, N]``.  Returns ``(y [B, D, T], hT [B, D, N])``;
    ``y`` is differentiable with respect to every tensor input, ``hT`` is a
    plain array used to carry state between buffers.
    """
    u, delta, A, B, C, D_skip = (ad.as_tensor(t) for t in (u, delta, A, B, C, D_skip))
    if u.ndim != 3:
        raise DimensionError(f"selective_scan expects u as [B, D, T], got {u.shape}")
    Bsz, D, T = u.shape
    N = A.shape[1]
    if A.shape != (D, N) or delta.shape != u.shape or B.shape != (Bsz, N, T) or C.shape != (Bsz, N, T):
        raise DimensionError(
            f"selective_scan shapes: u {u.shape}, delta {delta.shape}, A {A.shape}, B {B.shape}, C {C.shape}"
        )
    h0_t = None
    if h0 is None:
        h0_arr = np.zeros((Bsz, D, N), dtype=u.dtype)
    else:
        h0_t = ad.as_tensor(h0)
        if h0_t.shape != (Bsz, D, N):
            raise StateError(f"initial state shape {h0_t.shape} != {(Bsz, D, N)}")
        h0_arr = h0_t.data
    if np.any(delta.data <= 0):
        raise ContractError("selective_scan needs delta > 0")

    # Time-major working copies.
    u_t = np.ascontiguousarray(u.data.transpose(2, 0, 1))          # [T, B, D]
    dt_t = np.ascontiguousarray(delta.data.transpose(2, 0, 1))     # [T, B, D]
    B_t = np.ascontiguousarray(B.data.transpose(2, 0, 1))          # [T, B, N]
    C_t = np.ascontiguousarray(C.data.transpose(2, 0, 1))          # [T, B, N]
    Ad = A.data
    a = np.exp(dt_t[..., None] * Ad)                               # [T, B, D, N]
    dtu = dt_t * u_t
    bu = dtu[..., None] * B_t[:, :, None, :]
    h = _scan(a, bu, h0_arr, method, chunk_size)
    y_t = np.einsum("tbdn,tbn->tbd", h, C_t) + D_skip.data * u_t
    y = np.ascontiguousarray(y_t.transpose(1, 2, 0))
    hT = h[-1].copy() if T else h0_arr.copy()

    def backward(gy):
        gy_t = np.ascontiguousarray(gy.transpose(2, 0, 1))
        direct = gy_t[..., None] * C_t[:, :, None, :]
        # Adjoint recurrence runs backwards with the next step's decay.
        a_next = np.concatenate([a[1:], np.zeros_like(a[:1])])
        g = _scan(a_next[::-1], direct[::-1], np.zeros_like(h0_arr), method, chunk_size)[::-1]
        h_prev = np.concatenate([h0_arr[None], h[:-1]])
        g_a = g * h_prev * a                                       # d/d(delta*A)
        gC = np.einsum("tbdn,tbd->tbn", h, gy_t)
        gB = np.einsum("tbdn,tbd->tbn", g, dtu)
        gbu_n = np.einsum("tbdn,tbn->tbd", g, B_t)                 # d/d(delta*u)
        gu = gbu_n * dt_t + D_skip.data * gy_t
        gdelta = gbu_n * u_t + np.einsum("tbdn,dn->tbd", g_a, Ad)
        gA = np.einsum("tbdn,tbd->dn", g_a, dt_t)
        gD = (gy_t * u_t).sum(axis=(0, 1))
        grads = [
            gu.transpose(1, 2, 0), gdelta.transpose(1, 2, 0), gA,
            gB.transpose(1, 2, 0), gC.transpose(1, 2, 0), gD,
        ]
        if h0_t is not None:
            grads.append(a[0] * g[0])
        return tuple(np.ascontiguousarray(x) for x in grads)

    parents = (u, delta, A, B, C, D_skip) + ((h0_t,) if h0_t is not None else ())
    return ad.make_result(y, parents, backward), hT


# -- modules ----------------------------------------------------------------

class SsmCore(Module):
    """Selective SSM over ``D`` channels with ``N`` states per channel.

    ``delta`` uses a low-rank projection (``D -> dt_rank -> D``) plus bias and a
    softplus, as in the Mamba lineage.
    """

    def __init__(self, D: int, N: int, rng: np.random.Generator, dt_rank: int | None = None,
                 dt_min: float = 1e-3, dt_max: float = 1e-1, dtype=np.float64):
        super().__init__()
        self.D, self.N = D, N
        self.dt_rank = dt_rank or math.ceil(D / 16)
        self.A_log = Parameter(hippo_init(N, D).astype(dtype))
        self.B_proj = PointwiseConv(D, N, rng, bias=False, dtype=dtype)
        self.C_proj = PointwiseConv(D, N, rng, bias=False, dtype=dtype)
        self.dt_down = PointwiseConv(D, self.dt_rank, rng, bias=False, dtype=dtype)
        bound = self.dt_rank ** -0.5
        self.dt_up = Parameter(rng.uniform(-bound, bound, (D, self.dt_rank)).astype(dtype))
        dt0 = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), D))
        self.dt_bias = Parameter(inverse_softplus(dt0).astype(dtype))
        self.D_skip = Parameter(np.ones(D, dtype=dtype))

    def realized_A(self) -> Tensor:
        return ad.neg(ad.exp(self.A_log))

    def selection(self, u: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Input-dependent ``(delta, B, C)`` for ``u [B, D, T]``."""
        delta = ad.softplus(ad.channel_linear(self.dt_down(u), self.dt_up, self.dt_bias))
        return delta, self.B_proj(u), self.C_proj(u)

    def forward(self, u: Tensor, h0=None, method: str = "fast", chunk_size: int = DEFAULT_CHUNK):
        if u.ndim != 3 or u.shape[1] != self.D:
            raise DimensionError(f"SsmCore expects [B, {self.D}, T] input, got {u.shape}")
        delta, B, C = self.selection(u)
        return selective_scan(u, delta, self.realized_A(), B, C, self.D_skip, h0,
                              method=method, chunk_size=chunk_size)


def selective_scan_naive(u: Tensor, core: SsmCore, h0=None):
    """Reference evaluation: one recurrence step per time index."""
    return core(ad.as_tensor(u), h0, method="naive")


def selective_scan_fast(u: Tensor, core: SsmCore, h0=None, chunk_size: int = DEFAULT_CHUNK):
    """Chunked evaluation; numerically equal to :func:`selective_scan_naive`."""
    return core(ad.as_tensor(u), h0, method="fast", chunk_size=chunk_size)


@dataclass
class MambaState:
    """Carry-over between consecutive buffers: SSM state and causal-conv tail."""

    h: np.ndarray         # [B, E*D, N]
    conv_tail: np.ndarray  # [B, E*D, k_conv - 1]


class MambaLayer(Module):
    """in_proj -> (main, gate); main -> causal depthwise conv -> SiLU -> selective
    scan; output = scan * SiLU(gate) -> out_proj.  Maps ``[B, D, T]`` to itself."""

    def __init__(self, D: int, rng: np.random.Generator, N: int = 16, expand: int = 2,
                 k_conv: int = 4, dt_rank: int | None = None, dtype=np.float64):
        super().__init__()
        self.D, self.N, self.expand, self.k_conv = D, N, expand, k_conv
        inner = expand * D
        self.inner = inner
        self.in_proj = PointwiseConv(D, 2 * inner, rng, bias=False, dtype=dtype)
        bound = 1.0 / math.sqrt(k_conv)
        self.conv_w = Parameter(rng.uniform(-bound, bound, (inner, k_conv)).astype(dtype))
        self.conv_b = Parameter(rng.uniform(-bound, bound, inner).astype(dtype))
        self.ssm = SsmCore(inner, N, rng, dt_rank=dt_rank or math.ceil(D / 16), dtype=dtype)
        self.out_proj = PointwiseConv(inner, D, rng, bias=False, dtype=dtype)

    def initial_state(self, batch: int, dtype=None) -> MambaState:
        dtype = dtype or self.in_proj.weight.dtype
        return MambaState(
            np.zeros((batch, self.inner, self.N), dtype=dtype),
            np.zeros((batch, self.inner, self.k_conv - 1), dtype=dtype),
        )

    def forward(self, x: Tensor, state: MambaState | None = None, method: str = "fast",
                chunk_size: int = DEFAULT_CHUNK) -> tuple[Tensor, MambaState]:
        if x.ndim != 3 or x.shape[1] != self.D:
            raise DimensionError(f"MambaLayer expects channel axis 1 = {self.D}, got input {x.shape}")
        Bsz, _, T = x.shape
        if state is None:
            state = self.initial_state(Bsz, x.dtype)
        elif state.h.shape != (Bsz, self.inner, self.N) or state.conv_tail.shape != (Bsz, self.inner, self.k_conv - 1):
            raise StateError(
                f"Mamba state shapes {state.h.shape}/{state.conv_tail.shape} do not fit batch {Bsz}, "
                f"width {self.inner}, N {self.N}"
            )
        main, gate = ad.split(self.in_proj(x), [self.inner, self.inner], axis=1)
        tail = Tensor(state.conv_tail.astype(x.dtype, copy=False))
        padded = ad.concat([tail, main], axis=2)
        conv = ad.silu(ad.depthwise_conv1d(padded, self.conv_w, self.conv_b))
        y, hT = self.ssm(conv, Tensor(state.h), method=method, chunk_size=chunk_size)
        out = self.out_proj(y * ad.silu(gate))
        new_tail = padded.data[:, :, padded.shape[2] - (self.k_conv - 1):].copy()
        return out, MambaState(hT, new_tail)


def mamba_forward(x: Tensor, layer: MambaLayer, h0: MambaState | None = None):
    return layer(ad.as_tensor(x), h0)
