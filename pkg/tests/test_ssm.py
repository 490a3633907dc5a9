import math

import numpy as np
import pytest

from masv import autodiff as ad
from masv.autodiff import Tensor, grad_check
from masv.errors import ContractError, DimensionError, StateError
from masv.ssm import (MambaLayer, MambaState, SsmCore, compose, discretize_zoh, hippo_init, mamba_forward,
                      scan_chunked, scan_sequential, selective_scan, selective_scan_fast, selective_scan_naive)


def reference_scan(u, delta, A, B, C, D_skip, h0):
    # Scalar loop over every index; the slow oracle.
    Bsz, D, T = u.shape
    N = A.shape[1]
    h = h0.copy()
    y = np.zeros_like(u)
    for b in range(Bsz):
        for t in range(T):
            for d in range(D):
                acc = 0.0
                for n in range(N):
                    h[b, d, n] = math.exp(delta[b, d, t] * A[d, n]) * h[b, d, n] + delta[b, d, t] * B[b, n, t] * u[b, d, t]
                    acc += C[b, n, t] * h[b, d, n]
                y[b, d, t] = acc + D_skip[d] * u[b, d, t]
    return y, h


def random_inputs(rng, Bsz, D, N, T):
    u = rng.normal(size=(Bsz, D, T))
    delta = np.exp(rng.uniform(np.log(1e-3), np.log(1.0), (Bsz, D, T)))
    A = -np.exp(rng.uniform(-1, 2, (D, N)))
    B = rng.normal(size=(Bsz, N, T))
    C = rng.normal(size=(Bsz, N, T))
    D_skip = rng.normal(size=D)
    h0 = rng.normal(size=(Bsz, D, N))
    return u, delta, A, B, C, D_skip, h0


# -- initialization and discretization -------------------------------------------

def test_hippo_init_values():
    np.testing.assert_array_equal(-np.exp(hippo_init(1, 1)), [[-1.0]])
    A = -np.exp(hippo_init(4, 3))
    np.testing.assert_allclose(A, np.tile([-1.0, -2.0, -3.0, -4.0], (3, 1)), rtol=1e-15)
    a_bar = np.exp(0.5 * A)
    assert np.all((a_bar > 0) & (a_bar < 1))
    with pytest.raises(ContractError):
        hippo_init(0, 2)


def test_discretize_analytic_and_limits():
    A = np.array([[-1.0]])
    A_bar, B_bar = discretize_zoh(A, np.ones((1, 1, 1)), np.full((1, 1, 1), math.log(2.0)))
    assert A_bar[0, 0, 0, 0] == pytest.approx(0.5, abs=1e-15)
    assert B_bar[0, 0, 0, 0] == pytest.approx(math.log(2.0), abs=1e-15)
    A_bar, B_bar = discretize_zoh(A, np.ones((1, 1, 1)), np.full((1, 1, 1), 1e-12))
    assert A_bar[0, 0, 0, 0] == pytest.approx(1.0, abs=1e-11)
    assert abs(B_bar[0, 0, 0, 0]) < 1e-11
    with pytest.raises(ContractError):
        discretize_zoh(A, np.ones((1, 1, 1)), np.zeros((1, 1, 1)))


def test_discretize_matches_scalar_loop():
    rng = np.random.default_rng(0)
    A = -rng.uniform(0.1, 5, (3, 4))
    Bt = rng.normal(size=(2, 5, 4))
    dt = rng.uniform(0.01, 1.0, (2, 5, 3))
    A_bar, B_bar = discretize_zoh(A, Bt, dt)
    for b in range(2):
        for t in range(5):
            for d in range(3):
                for n in range(4):
                    assert A_bar[b, t, d, n] == pytest.approx(math.exp(dt[b, t, d] * A[d, n]), rel=1e-14)
                    assert B_bar[b, t, d, n] == pytest.approx(dt[b, t, d] * Bt[b, t, n], rel=1e-14)


def test_stability_range_and_state_bound():
    rng = np.random.default_rng(1)
    A = -np.exp(hippo_init(4, 2))
    dt = rng.uniform(1e-3, 10.0, (1, 50, 2))
    A_bar, _ = discretize_zoh(A, np.zeros((1, 50, 4)), dt)
    assert np.all((A_bar > 0) & (A_bar < 1))
    # Frozen parameters: constant delta, B and bounded input.
    T, D, N = 200, 2, 4
    u = rng.uniform(-1, 1, (1, D, T))
    a_bar = np.exp(0.3 * A)
    h = scan_sequential(np.broadcast_to(a_bar, (T, 1, D, N)).copy(),
                        (0.3 * u.transpose(2, 0, 1)[..., None] * np.ones(N)), np.zeros((1, D, N)))
    bound = np.abs(0.3 * u).max() / (1 - a_bar.max())
    assert np.abs(h).max() <= bound + 1e-12


# -- raw scans ----------------------------------------------------------------------

def test_compose_is_associative():
    rng = np.random.default_rng(2)
    p, q, r = [(rng.normal(size=3), rng.normal(size=3)) for _ in range(3)]
    left = compose(compose(p, q), r)
    right = compose(p, compose(q, r))
    np.testing.assert_allclose(left[0], right[0], rtol=1e-14)
    np.testing.assert_allclose(left[1], right[1], rtol=1e-14)


@pytest.mark.parametrize("T", [1, 2, 5, 63, 64, 65, 200])
@pytest.mark.parametrize("chunk", [1, 3, 64, 1000])
def test_scan_chunked_matches_sequential(T, chunk):
    rng = np.random.default_rng(T * 7 + chunk)
    a = rng.uniform(0.2, 1.0, (T, 2, 3))
    b = rng.normal(size=(T, 2, 3))
    h0 = rng.normal(size=(2, 3))
    ref = scan_sequential(a, b, h0)
    got = scan_chunked(a, b, h0, chunk)
    assert np.abs(got - ref).max() <= 1e-12 * max(1.0, np.abs(ref).max())


def test_chunk_size_one_and_T_are_naive_results():
    rng = np.random.default_rng(3)
    a = rng.uniform(0.2, 1.0, (40, 2))
    b = rng.normal(size=(40, 2))
    h0 = np.zeros(2)
    np.testing.assert_array_equal(scan_chunked(a, b, h0, 1), scan_sequential(a, b, h0))
    np.testing.assert_array_equal(scan_chunked(a, b, h0, 40), scan_sequential(a, b, h0))


# -- selective scan ------------------------------------------------------------------

def test_selective_scan_matches_scalar_reference():
    rng = np.random.default_rng(4)
    args = random_inputs(rng, 2, 3, 4, 9)
    for method in ("naive", "fast"):
        y, hT = selective_scan(*args, method=method, chunk_size=4)
        y_ref, h_ref = reference_scan(*args)
        np.testing.assert_allclose(y.data, y_ref, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(hT, h_ref, rtol=1e-12, atol=1e-12)


def test_zero_dynamics():
    core = SsmCore(4, 3, np.random.default_rng(0))
    y, hT = selective_scan_naive(Tensor(np.zeros((2, 4, 6))), core, np.zeros((2, 4, 3)))
    assert not y.data.any() and not hT.any()


def test_single_step_closed_form():
    rng = np.random.default_rng(5)
    D, N = 3, 4
    u = rng.normal(size=(1, D, 1))
    delta = np.full((1, D, 1), 0.7)
    A = -np.ones((D, N))
    B = rng.normal(size=(1, N, 1))
    C = rng.normal(size=(1, N, 1))
    Ds = rng.normal(size=D)
    y, _ = selective_scan(u, delta, A, B, C, Ds)
    expected = np.array([C[0, :, 0] @ (0.7 * B[0, :, 0] * u[0, d, 0]) + Ds[d] * u[0, d, 0] for d in range(D)])
    np.testing.assert_allclose(y.data[0, :, 0], expected, rtol=1e-14)


def test_frozen_selection_is_linear():
    rng = np.random.default_rng(6)
    u, delta, A, B, C, Ds, _ = random_inputs(rng, 1, 3, 4, 20)
    y1, _ = selective_scan(u, delta, A, B, C, Ds)
    y2, _ = selective_scan(2.0 * u, delta, A, B, C, Ds)
    np.testing.assert_array_equal(y2.data, 2.0 * y1.data)


def test_selective_scan_shape_errors():
    rng = np.random.default_rng(7)
    u, delta, A, B, C, Ds, h0 = random_inputs(rng, 1, 3, 4, 5)
    with pytest.raises(DimensionError):
        selective_scan(u, delta, A, B[:, :2], C, Ds)
    with pytest.raises(StateError):
        selective_scan(u, delta, A, B, C, Ds, h0[:, :2])
    with pytest.raises(ContractError):
        selective_scan(u, -delta, A, B, C, Ds)


def test_selective_scan_gradients_all_inputs():
    rng = np.random.default_rng(8)
    for method in ("naive", "fast"):
        u, delta, A, B, C, Ds, h0 = random_inputs(rng, 2, 2, 3, 7)
        ts = [Tensor(v) for v in (u, np.log(delta), A, B, C, Ds, h0)]

        def f(t):
            y, _ = selective_scan(t[0], ad.exp(t[1]), t[2], t[3], t[4], t[5], t[6], method=method, chunk_size=3)
            return ad.sum_(y * y)

        assert grad_check(f, ts) < 1e-4


def test_fast_equals_naive_through_core():
    rng = np.random.default_rng(9)
    core = SsmCore(6, 5, rng)
    u = Tensor(rng.normal(size=(2, 6, 130)))
    h0 = rng.normal(size=(2, 6, 5))
    y1, h1 = selective_scan_naive(u, core, h0)
    y2, h2 = selective_scan_fast(u, core, h0, chunk_size=16)
    assert np.abs(y1.data - y2.data).max() / np.abs(y1.data).max() < 1e-10
    assert np.abs(h1 - h2).max() / np.abs(h1).max() < 1e-10


def test_delta_positive_and_bias_init_range():
    rng = np.random.default_rng(10)
    core = SsmCore(64, 4, rng)
    dt0 = np.log1p(np.exp(core.dt_bias.data))
    assert dt0.min() >= 1e-3 - 1e-12 and dt0.max() <= 1e-1 + 1e-12
    delta, _, _ = core.selection(Tensor(rng.normal(size=(1, 64, 10))))
    assert np.all(delta.data > 0)
    assert np.all(core.realized_A().data < 0)


# -- Mamba layer ------------------------------------------------------------------------

def test_mamba_shapes_and_channel_error():
    layer = MambaLayer(6, np.random.default_rng(0), N=4)
    y, st = layer(Tensor(np.random.default_rng(1).normal(size=(2, 6, 11))))
    assert y.shape == (2, 6, 11)
    assert st.h.shape == (2, 12, 4) and st.conv_tail.shape == (2, 12, 3)
    with pytest.raises(DimensionError):
        layer(Tensor(np.zeros((2, 5, 11))))


def test_mamba_causality_exact():
    rng = np.random.default_rng(11)
    layer = MambaLayer(4, rng, N=4)
    x = rng.normal(size=(1, 4, 40))
    for t0 in (0, 1, 17, 39):
        x2 = x.copy()
        x2[:, :, t0] += rng.normal(size=4)
        for method in ("naive", "fast"):
            base, _ = layer(Tensor(x), method=method, chunk_size=8)
            out, _ = layer(Tensor(x2), method=method, chunk_size=8)
            np.testing.assert_array_equal(out.data[:, :, :t0], base.data[:, :, :t0])
            assert np.abs(out.data[:, :, t0:] - base.data[:, :, t0:]).max() > 0


def test_mamba_zero_out_proj_gives_zero():
    layer = MambaLayer(4, np.random.default_rng(12), N=4)
    layer.out_proj.weight.data[:] = 0.0
    y, _ = layer(Tensor(np.random.default_rng(13).normal(size=(1, 4, 9))))
    assert not y.data.any()


@pytest.mark.parametrize("split", [1, 2, 3, 20, 49])
def test_mamba_streaming_split_equals_whole(split):
    rng = np.random.default_rng(14)
    layer = MambaLayer(5, rng, N=4)
    x = rng.normal(size=(2, 5, 50))
    whole, st_whole = mamba_forward(Tensor(x), layer)
    a, st = layer(Tensor(x[:, :, :split]))
    b, st2 = layer(Tensor(x[:, :, split:]), st)
    joined = np.concatenate([a.data, b.data], axis=2)
    assert np.abs(joined - whole.data).max() < 1e-10
    assert np.abs(st2.h - st_whole.h).max() < 1e-10


def test_mamba_state_mismatch():
    layer = MambaLayer(4, np.random.default_rng(15), N=4)
    bad = MambaState(np.zeros((1, 8, 3)), np.zeros((1, 8, 3)))
    with pytest.raises(StateError):
        layer(Tensor(np.zeros((1, 4, 5))), bad)


def test_mamba_layer_grad_check():
    rng = np.random.default_rng(16)
    layer = MambaLayer(3, rng, N=2, expand=2, k_conv=3)
    x = Tensor(rng.normal(size=(2, 3, 6)))
    params = [x] + layer.parameters()

    def f(_):
        y, _ = layer(x)
        return ad.sum_(y * y)

    assert grad_check(f, params) < 1e-4
