import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scribblesod import trainer as T
from scribblesod.data import generate_toy_dataset
from scribblesod.losses import LossConfig
from scribblesod.synthgen import SynthConfig
from scribblesod.trainer import OptimizerState, TrainConfig, ToyModel, triangular_lr


# ---------------------------------------------------------------- lr

def test_lr_endpoints_and_peak():
    cfg = TrainConfig()
    trace = [triangular_lr(s, 101, cfg) for s in range(101)]
    assert trace[0] == 1e-5 and trace[-1] == 1e-5
    assert max(trace) == 5e-3 and trace.index(5e-3) == 25


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 400), st.floats(0.05, 0.95))
def test_lr_piecewise_linear(total, frac):
    cfg = TrainConfig(lr_peak_fraction=frac)
    trace = np.array([triangular_lr(s, total, cfg) for s in range(total)])
    peak = int(np.argmax(trace))
    assert trace[0] == cfg.lr_min and trace[-1] == cfg.lr_min
    assert trace[peak] == cfg.lr_max
    for seg in (trace[:peak + 1], trace[peak:]):
        if len(seg) > 2:
            np.testing.assert_allclose(np.diff(seg, 2), 0, atol=1e-15)


def test_lr_short_runs():
    cfg = TrainConfig()
    assert [triangular_lr(s, 2, cfg) for s in range(2)] == [1e-5, 1e-5]
    with pytest.raises(ValueError):
        triangular_lr(5, 5, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_min=1e-2, lr_max=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(gib_only_fraction=1.0)
    assert TrainConfig(epochs=55).gib_only_epochs == 28


# ---------------------------------------------------------------- sgd

def test_sgd_two_steps_by_hand():
    cfg = TrainConfig(momentum=0.9, weight_decay=0.1)
    p = [np.array([1.0, -2.0])]
    st_ = OptimizerState.zeros_like(p)
    g1, g2 = np.array([0.5, 0.5]), np.array([-1.0, 2.0])
    T.sgd_step(p, [g1], st_, 0.1, cfg)
    v1 = g1 + 0.1 * np.array([1.0, -2.0])  # [0.6, 0.3]
    p1 = np.array([1.0, -2.0]) - 0.1 * v1  # [0.94, -2.03]
    np.testing.assert_allclose(p[0], p1, atol=1e-15)
    T.sgd_step(p, [g2], st_, 0.05, cfg)
    v2 = 0.9 * v1 + g2 + 0.1 * p1
    np.testing.assert_allclose(p[0], p1 - 0.05 * v2, atol=1e-15)
    assert st_.step == 2


def test_sgd_rejects_nan():
    p = [np.zeros(3)]
    with pytest.raises(T.TrainingError):
        T.sgd_step(p, [np.array([0.0, np.nan, 0.0])], OptimizerState.zeros_like(p), 0.1, TrainConfig())


# ---------------------------------------------------------------- model

def test_model_output_range_and_checksum():
    m = ToyModel(width=4, seed=0)
    out = m.predict(np.random.default_rng(0).random((20, 24, 3)))
    assert out.shape == (20, 24) and (out > 0).all() and (out < 1).all()
    assert m.checksum() == ToyModel(width=4, seed=0).checksum()
    assert m.checksum() != ToyModel(width=4, seed=1).checksum()


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def tiny():
    data = generate_toy_dataset(6, 48, seed=1)
    return data[:4], data[4:]


def small_cfg(**kw):
    base = dict(epochs=4, batch_size=2, width=4, seed=3)
    base.update(kw)
    return TrainConfig(**base)


SYN = SynthConfig(n_variants=2)


def test_train_deterministic(tiny):
    tr, te = tiny
    m1, r1 = T.train(tr, small_cfg(), LossConfig(), SYN, te)
    m2, r2 = T.train(tr, small_cfg(), LossConfig(), SYN, te)
    assert r1.to_json() == r2.to_json() and m1.checksum() == m2.checksum()


def test_workers_do_not_change_result(tiny):
    tr, _ = tiny
    m1, _ = T.train(tr, small_cfg(epochs=3), LossConfig(), SYN)
    m2, _ = T.train(tr, small_cfg(epochs=3, workers=2), LossConfig(), SYN)
    assert m1.checksum() == m2.checksum()


def test_phase_schedule_and_trace(tiny):
    tr, _ = tiny
    cfg = small_cfg(epochs=5)
    _, rep = T.train(tr, cfg, LossConfig(), SYN)
    phases = [s["phase"] for s in rep.steps]
    assert phases == ["gib_only"] * 2 * cfg.gib_only_epochs + ["full"] * 2 * (5 - cfg.gib_only_epochs)
    assert rep.lr_trace == [triangular_lr(i, 10, cfg) for i in range(10)]
    full = [s for s in rep.steps if s["phase"] == "full"]
    assert all(s["sc"] != 0 for s in full)
    assert all(s["sc"] == 0 and s["boundary"] == 0 for s in rep.steps if s["phase"] == "gib_only")


def test_baseline_has_no_branch_terms(tiny):
    tr, _ = tiny
    _, rep = T.train(tr, small_cfg(use_bab=False, use_sc=False), LossConfig())
    assert all(s["sc"] == 0 and s["boundary"] == 0 for s in rep.steps)


def test_weight_sharing(tiny, monkeypatch):
    """Every forward pass inside one step (GIB, BAB and both SSC scales) sees one parameter vector."""
    tr, _ = tiny
    calls = []
    real_forward, real_element = ToyModel.forward, T._element

    def forward(params, image):
        calls[-1].append(hashlib.sha256(b"".join(p.value.tobytes() for p in params)).hexdigest())
        return real_forward(params, image)

    def element(model, *a, **k):
        calls.append([model.checksum()])
        return real_element(model, *a, **k)

    monkeypatch.setattr(ToyModel, "forward", staticmethod(forward))
    monkeypatch.setattr(T, "_element", element)
    T.train(tr, small_cfg(epochs=3), LossConfig(), SYN)
    full = [c for c in calls if len(c) > 3]  # GIB x2 scales + BAB x2 scales
    assert full and len(full) < len(calls)
    assert all(len(set(c)) == 1 for c in calls)


def test_resume_matches_uninterrupted(tiny, tmp_path):
    tr, te = tiny
    cfg = small_cfg(epochs=4)
    m_full, r_full = T.train(tr, cfg, LossConfig(), SYN, checkpoint_dir=str(tmp_path))
    m_res, r_res = T.train(tr, cfg, LossConfig(), SYN, resume=str(tmp_path / "epoch_001.ckpt"))
    head = [s for s in r_full.steps if s["epoch"] <= 1]
    assert [s["lr"] for s in head] + r_res.lr_trace == r_full.lr_trace
    assert r_res.steps == r_full.steps[len(head):]
    assert m_res.checksum() == m_full.checksum()


def test_checkpoint_roundtrip(tmp_path):
    m = ToyModel(width=4, seed=9)
    st_ = OptimizerState([np.random.default_rng(0).random(p.shape) for p in m.params], 17)
    T.save_checkpoint(tmp_path / "a.ckpt", m, st_, 3, {"note": "x"})
    params, st2, epoch, meta = T.load_checkpoint(tmp_path / "a.ckpt")
    assert epoch == 3 and meta == {"note": "x"} and st2.step == 17
    for a, b in zip(params + st2.velocity, m.params + st_.velocity):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_corrupt(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"nonsense")
    with pytest.raises(T.CheckpointError, match="magic"):
        T.load_checkpoint(tmp_path / "bad.ckpt")
    m = ToyModel(width=4)
    T.save_checkpoint(tmp_path / "t.ckpt", m, OptimizerState.zeros_like(m.params), 0)
    raw = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:len(raw) // 2])
    with pytest.raises(T.CheckpointError):
        T.load_checkpoint(tmp_path / "t.ckpt")


def test_single_image_bookkeeping(tiny):
    tr, te = tiny
    cfg = small_cfg(epochs=3, batch_size=4)
    _, rep = T.train(tr[:1], cfg, LossConfig(), SYN, te)
    assert len(rep.steps) == 3 and [s["step"] for s in rep.steps] == [0, 1, 2]
    assert [e["epoch"] for e in rep.epochs] == [0, 1, 2]
    assert rep.final == rep.epochs[-1]


def test_report_json_roundtrip(tiny):
    tr, te = tiny
    _, rep = T.train(tr, small_cfg(epochs=2), LossConfig(), SYN, te)
    back = T.TrainReport.from_json(rep.to_json())
    assert back.to_json() == rep.to_json()


def test_empty_training_set():
    with pytest.raises(ValueError):
        T.train([], small_cfg())


def test_full_phase_needs_variants(tiny):
    tr, _ = tiny
    with pytest.raises(T.TrainingError, match="variants"):
        T.train(tr, small_cfg(epochs=2), LossConfig(), SYN, variants=[[] for _ in tr])
