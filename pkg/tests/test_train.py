import json

import numpy as np
import pytest

from masv.autodiff import Tensor, grad_check, no_grad
from masv.blocks import MASV, ModelConfig
from masv.checkpoint import file_digest, load_checkpoint, read_container, save_checkpoint, write_container
from masv.errors import ContractError, NumericError, ParseError
from masv.features import logmel
from masv.train import (AdamState, CircleLossConfig, ScheduleConfig, TrainConfig, TrainingDiverged, adam_step,
                        circle_loss, cyclical_lr, extract_all, sample_batch, synth_speakers, train_loop)


def micro_config():
    return ModelConfig(channels=8, num_tri_blocks=2, state_dim=4, context_window=2, embedding_dim=6,
                       mfa_channels=12, asp_hidden=4, se_reduction=4, res2_scale=2)


@pytest.fixture(scope="module")
def small_corpus():
    ds = synth_speakers(4, 3, seed=5, min_seconds=0.5, max_seconds=0.8)
    return extract_all(ds), ds.labels


# -- Circle loss ----------------------------------------------------------------------

def test_circle_loss_near_zero_at_optimum():
    # One positive and one negative partner per anchor: s_p = 1, s_n = -1 gives
    # softplus(exp(-s * m * m)) contributions, about 6.4e-4 at s = 60.
    e = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    loss = circle_loss(Tensor(e), [0, 0, 1]).item()
    assert 0 <= loss < 1e-3
    assert abs(loss - np.log1p(np.exp(-60 * 0.35 * 0.35))) < 1e-12


def test_circle_loss_positive_when_undiscriminated():
    e = np.ones((4, 3))
    assert circle_loss(Tensor(e), [0, 0, 1, 1]).item() > np.log(2)


def test_circle_loss_hand_value():
    # Two speakers with orthogonal embeddings: s_p = 1, s_n = 0 for every anchor.
    m, s = 0.35, 60.0
    e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    # alpha_p = alpha_n = m; each anchor has one positive and two negatives.
    logit_p = -s * m * (1 - (1 - m))
    logit_n = s * m * (0 - m)
    expected = np.log1p(np.exp(logit_p + np.log(2) + logit_n))
    assert abs(circle_loss(Tensor(e), [0, 0, 1, 1]).item() - expected) < 1e-12


def test_circle_loss_grad_check():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(6, 5)))
    labels = [0, 0, 1, 1, 2, 2]
    err = grad_check(lambda t: circle_loss(t, labels, CircleLossConfig(s=8.0)), x)
    assert err < 1e-4
    err = grad_check(lambda t: circle_loss(t, labels), x)
    assert err < 1e-4


def test_circle_loss_decreases_as_a_positive_similarity_grows():
    # Orthonormal embeddings: rotating e_i towards e_j raises s_ij alone.
    B = 4
    labels = [0, 0, 1, 1]
    base = np.eye(B)
    losses = []
    for t in np.linspace(0, 0.3, 7):
        e = base.copy()
        e[0] = np.cos(t) * base[0] + np.sin(t) * base[1]
        losses.append(circle_loss(Tensor(e), labels).item())
    assert np.all(np.diff(losses) <= 0)


def test_circle_loss_contract():
    with pytest.raises(ContractError):
        circle_loss(Tensor(np.eye(3)), [0, 1, 2])
    with pytest.raises(ContractError):
        circle_loss(Tensor(np.eye(3)), [0, 0, 0])
    with pytest.raises(ContractError):
        CircleLossConfig(m=1.5)


# -- schedule and Adam ---------------------------------------------------------------------

def test_cyclical_lr_examples():
    cfg = ScheduleConfig()
    assert cyclical_lr(0, cfg) == 1e-8
    assert cyclical_lr(50_000, cfg) == 1e-3
    assert cyclical_lr(100_000, cfg) == 1e-8
    assert abs(cyclical_lr(25_000, cfg) - (1e-8 + 1e-3) / 2) < 1e-18
    assert cyclical_lr(130_000, cfg) == cyclical_lr(30_000, cfg) == cyclical_lr(70_000, cfg)
    with pytest.raises(ContractError):
        cyclical_lr(-1, cfg)
    with pytest.raises(ContractError):
        ScheduleConfig(lr_min=1e-3, lr_max=1e-4)


def test_adam_one_step_hand_value():
    p = np.array([2.0])
    adam_step([p], [np.array([0.5])], AdamState(), lr=0.1, weight_decay=0.0)
    # m_hat = 0.5, v_hat = 0.25 after bias correction.
    assert abs(p[0] - (2.0 - 0.1 * 0.5 / (0.5 + 1e-8))) < 1e-15


def test_adam_zero_grads_and_decoupled_decay():
    p = np.array([1.0, -3.0])
    st = AdamState()
    adam_step([p], [np.zeros(2)], st, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p, [1.0, -3.0])
    adam_step([p], [np.zeros(2)], st, lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(p, [0.95, -2.85], rtol=1e-15)


def test_adam_asymptotic_step_is_lr():
    p = np.array([0.0])
    st = AdamState()
    for _ in range(2000):
        prev = p[0]
        adam_step([p], [np.array([-3.0])], st, lr=1e-3, weight_decay=0.0)
    assert abs((p[0] - prev) - 1e-3) < 1e-9


def test_adam_refuses_non_finite():
    p = np.array([1.0, 2.0])
    with pytest.raises(NumericError):
        adam_step([p], [np.array([np.nan, 0.0])], AdamState(), lr=0.1)
    np.testing.assert_array_equal(p, [1.0, 2.0])
    with pytest.raises(ContractError):
        adam_step([p], [np.zeros(3)], AdamState(), lr=0.1)


# -- synthetic data ------------------------------------------------------------------------

def test_synth_deterministic_and_counts():
    a = synth_speakers(3, 2, seed=11)
    b = synth_speakers(3, 2, seed=11)
    for x, y in zip(a.audio, b.audio):
        np.testing.assert_array_equal(x.samples, y.samples)
    c = synth_speakers(3, 2, seed=12)
    assert not np.array_equal(a.audio[0].samples[:1000], c.audio[0].samples[:1000])
    full = synth_speakers(20, 20, seed=0)
    assert len(full.audio) == 400
    np.testing.assert_array_equal(np.bincount(full.labels), [20] * 20)
    durations = np.array([x.duration_ms for x in full.audio])
    assert durations.min() >= 2000 and durations.max() <= 4000
    with pytest.raises(ContractError):
        synth_speakers(1, 5)


def test_synth_speakers_are_separable():
    ds = synth_speakers(8, 5, seed=3)
    means = np.stack([logmel(a).frames.mean(axis=0) for a in ds.audio])
    d = np.linalg.norm(means[:, None] - means[None], axis=2)
    same = ds.labels[:, None] == ds.labels[None]
    off = ~np.eye(len(ds.labels), dtype=bool)
    assert d[same & off].mean() < d[~same].mean()


def test_sample_batch_layout(small_corpus):
    feats, labels = small_corpus
    x, y = sample_batch(feats, labels, 8, 4, 30, np.random.default_rng(0))
    assert x.shape == (8, 80, 30) and x.dtype == np.float32
    assert np.all(np.bincount(y) == 2)


# -- training loop ---------------------------------------------------------------------------

def test_lr_trace_and_determinism(small_corpus):
    feats, labels = small_corpus
    cfg = TrainConfig(steps=3, speakers_per_batch=4, crop_frames=20, schedule=ScheduleConfig.desk(batch_size=8,
                                                                                                 cycle_steps=4))
    r1 = train_loop(MASV(micro_config(), seed=0, dtype=np.float64), feats, labels, cfg, log_every=0)
    r2 = train_loop(MASV(micro_config(), seed=0, dtype=np.float64), feats, labels, cfg, log_every=0)
    assert [h["lr"] for h in r1.history] == [cyclical_lr(k, cfg.schedule) for k in range(3)]
    assert [h["loss"] for h in r1.history] == [h["loss"] for h in r2.history]
    assert all(np.isfinite(h["grad_norm"]) for h in r1.history)


def test_resume_is_bit_identical_in_f64(small_corpus, tmp_path):
    feats, labels = small_corpus
    sched = ScheduleConfig.desk(batch_size=8, cycle_steps=6)
    cfg = TrainConfig(steps=4, speakers_per_batch=4, crop_frames=20, checkpoint_every=2, schedule=sched)
    full = train_loop(MASV(micro_config(), seed=1, dtype=np.float64), feats, labels, cfg, out_dir=tmp_path / "a",
                      log_every=0)
    assert (tmp_path / "a" / "step2.ckpt").exists()
    resumed = train_loop(MASV(micro_config(), seed=99, dtype=np.float64), feats, labels, cfg,
                         out_dir=tmp_path / "b", resume_from=tmp_path / "a" / "step2.ckpt", log_every=0)
    assert [h["loss"] for h in resumed.history] == [h["loss"] for h in full.history]
    for (n, a), (_, b) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=n)
    lines = (tmp_path / "a" / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr,grad_norm" and len(lines) == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_dump(small_corpus, tmp_path):
    feats, labels = small_corpus
    model = MASV(micro_config(), seed=2, dtype=np.float64)
    model.stem.conv.weight.data[0, 0, 0] = np.nan
    cfg = TrainConfig(steps=2, speakers_per_batch=4, crop_frames=20, schedule=ScheduleConfig.desk(batch_size=8))
    with pytest.raises(TrainingDiverged) as e:
        train_loop(model, feats, labels, cfg, out_dir=tmp_path, log_every=0)
    diag = json.loads((tmp_path / "divergence.json").read_text())
    assert diag["step"] == 0 and "grad_norms" in diag and e.value.diagnostics["lr"] == diag["lr"]


def test_train_needs_two_speakers(small_corpus):
    feats, labels = small_corpus
    with pytest.raises(ContractError):
        train_loop(MASV(micro_config()), feats, np.zeros_like(labels), TrainConfig(steps=1))


# -- checkpoints ------------------------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip(tmp_path, dtype):
    model = MASV(micro_config(), seed=3, dtype=dtype).train()
    x = np.random.default_rng(0).normal(size=(2, 80, 12)).astype(dtype)
    model(Tensor(x))
    model.eval()
    save_checkpoint(tmp_path / "m.ckpt", model, extra={"foo": np.arange(3)}, meta={"note": "hi"})
    loaded, meta, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.cfg == model.cfg and loaded.dtype == model.dtype
    assert meta["note"] == "hi"
    np.testing.assert_array_equal(extra["foo"], np.arange(3))
    loaded.eval()
    with no_grad():
        np.testing.assert_array_equal(loaded(Tensor(x)).data, model(Tensor(x)).data)
    assert len(file_digest(tmp_path / "m.ckpt")) == 64


def test_container_errors(tmp_path):
    write_container(tmp_path / "c", {"a": 1}, {"t": np.ones((2, 3), np.float32)})
    meta, t = read_container(tmp_path / "c")
    assert meta == {"a": 1} and t["t"].shape == (2, 3)
    raw = (tmp_path / "c").read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX1" + raw[5:])
    with pytest.raises(ParseError):
        read_container(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-4])
    with pytest.raises(ParseError):
        read_container(tmp_path / "short")
