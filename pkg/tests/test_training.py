import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import bce_loop, mse_loop
from tapsed.gradcheck import tiny_model_config
from tapsed.model import Predictions, build_model
from tapsed.tensor import Tensor
from tapsed.training import (
    LN10_OVER_20, Adam, LossWeights, TrainConfig, TrainData, Trainer, consistency_loss, consistency_ramp, ema_update,
    filter_augment, frameshift, instance_standardize, make_teacher, mixup, pool_labels, time_mask, total_loss,
)

def preds(strong, weak, grad=False):
    return Predictions(Tensor(strong, requires_grad=grad), Tensor(weak, requires_grad=grad))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 3), st.integers(0, 3), st.integers(1, 3), st.floats(0, 80), st.integers(0, 10**6))
def test_total_loss_matches_loop_oracle(ns, nw, nu, epoch, seed):
    rng = np.random.default_rng(seed)
    n, C, T = ns + nw + nu, 3, 5
    ss, sw = rng.uniform(0.01, 0.99, (n, C, T)), rng.uniform(0.01, 0.99, (n, C))
    ts, tw = rng.uniform(0.01, 0.99, (n, C, T)), rng.uniform(0.01, 0.99, (n, C))
    ys = rng.integers(0, 2, (ns, C, T)).astype(float)
    yw = rng.integers(0, 2, (nw, C)).astype(float)
    terms = total_loss(preds(ss, sw), preds(ts, tw), ys, yw, ns, nw, LossWeights(), epoch)
    strong = bce_loop(ss[:ns], ys) if ns else 0.0
    weak = bce_loop(sw[ns:ns + nw], yw) if nw else 0.0
    cons = mse_loop(ss, ts) + mse_loop(sw, tw)
    w_c = 2.0 * math.exp(-5.0 * (1.0 - min(epoch / 50.0, 1.0)) ** 2)
    assert terms.w_cons == pytest.approx(w_c, rel=1e-15)
    assert terms.consistency.item() == pytest.approx(cons, rel=1e-12)
    assert terms.total.item() == pytest.approx(strong + 0.5 * weak + w_c * cons, rel=1e-12, abs=1e-15)


def test_half_predictions_give_ln2():
    s = np.full((2, 3, 4), 0.5)
    w = np.full((2, 3), 0.5)
    ys = np.random.default_rng(0).integers(0, 2, (1, 3, 4)).astype(float)
    yw = np.ones((1, 3))
    terms = total_loss(preds(s, w), preds(s, w), ys, yw, 1, 1)
    assert terms.strong.item() == pytest.approx(math.log(2), abs=1e-12)
    assert terms.weak.item() == pytest.approx(math.log(2), abs=1e-12)
    assert terms.consistency.item() == 0.0


def test_ramp_values():
    assert consistency_ramp(50) == 2.0
    assert consistency_ramp(500) == 2.0
    assert consistency_ramp(0) == pytest.approx(2.0 * math.exp(-5.0))
    with pytest.raises(ValueError):
        consistency_ramp(-1)


@given(st.floats(0, 100), st.floats(0, 100))
def test_ramp_is_monotone(a, b):
    lo, hi = sorted((a, b))
    assert consistency_ramp(lo) <= consistency_ramp(hi) <= 2.0


def test_stop_gradient_modes():
    rng = np.random.default_rng(1)
    s = preds(rng.random((2, 2, 3)), rng.random((2, 2)), grad=True)
    t = preds(rng.random((2, 2, 3)), rng.random((2, 2)), grad=True)
    consistency_loss(s, t, "teacher").backward()
    assert s.strong.grad is not None and t.strong.grad is None
    frozen = consistency_loss(s, t, "student")
    assert not frozen.requires_grad
    with pytest.raises(ValueError):
        consistency_loss(s, t, "both")


def test_ema_update_and_teacher_is_frozen():
    student = build_model(tiny_model_config(), 0)
    teacher = make_teacher(student)
    assert all(not p.trainable for p in teacher.parameters())
    before = {k: v.copy() for k, v in teacher.state_dict().items()}
    for p in student.parameters():
        p.data = p.data + 1.0
    ema_update(teacher, student, decay=0.9)
    after = dict(teacher.named_parameters())
    for name, p in student.named_parameters():
        np.testing.assert_allclose(after[name].data, 0.9 * before[name] + 0.1 * p.data, atol=1e-12)
    with pytest.raises(KeyError):
        ema_update(teacher, build_model(replace(tiny_model_config(), variant="static"), 0))


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0, 1e-3])
    opt = Adam([p], lr=0.1)
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], atol=1e-4)


@given(arrays(float, (4, 3, 6), elements=st.floats(-3, 3)), st.floats(0, 1), st.integers(0, 10**6))
def test_mixup_is_convex(x, lam, seed):
    y = (x > 0).astype(float)
    perm = np.random.default_rng(seed).permutation(4)
    mx, my = mixup(x, y, lam=lam, perm=perm)
    np.testing.assert_allclose(mx, lam * x + (1 - lam) * x[perm])
    assert ((my >= 0) & (my <= 1)).all()


def test_time_mask_hits_features_and_labels_alike():
    x = np.ones((4, 10))
    y = np.ones((2, 10))
    fx, fy = time_mask(x, y, 5, start=3, length=4)
    assert not fx[:, 3:7].any() and fx[:, :3].all() and fx[:, 7:].all()
    np.testing.assert_array_equal(fy, fx[:2])
    with pytest.raises(ValueError):
        time_mask(x, y, 10)


@given(st.integers(-12, 12))
def test_frameshift_keeps_alignment(shift):
    x = np.arange(24.0).reshape(2, 12)
    y = (x[:1] % 3 == 0).astype(float)
    fx, fy = frameshift(x, y, 12, shift=shift)
    np.testing.assert_array_equal(fy, (fx[:1] % 3 == 0).astype(float))


def test_filter_augment_adds_constant_per_band():
    x = np.random.default_rng(0).normal(size=(8, 5))
    out, bounds, gains = filter_augment(x, np.random.default_rng(1), return_params=True)
    diff = out - x
    for lo, hi, g in zip(bounds[:-1], bounds[1:], gains):
        np.testing.assert_allclose(diff[lo:hi], g * LN10_OVER_20)
        assert -6 <= g <= 6
    with pytest.raises(ValueError):
        filter_augment(x, bounds=[0, 4, 4, 8], gains=[0, 0, 0])


@given(arrays(float, (3, 4, 5), elements=st.floats(-50, 50)))
def test_instance_standardize(x):
    z = instance_standardize(x)
    np.testing.assert_allclose(z.mean(axis=(1, 2)), 0, atol=1e-6)
    for zi, xi in zip(z, x):
        if xi.std() > 1e-3:
            assert zi.std() == pytest.approx(1.0, abs=1e-6)


def test_pool_labels_takes_max():
    y = np.array([[0, 0, 1, 0, 0, 0, 0, 1, 1]], float)
    np.testing.assert_array_equal(pool_labels(y, 4), [[1, 1]])


def tiny_data(seed=0):
    rng = np.random.default_rng(seed)
    T = 32
    xs = rng.normal(size=(3, 16, T))
    ys = (rng.random((3, 2, T)) > 0.7).astype(float)
    return TrainData(xs, ys, rng.normal(size=(2, 16, T)), np.eye(2), rng.normal(size=(4, 16, T)), classes=("a", "b"))


def tiny_cfg(**kw):
    base = TrainConfig(epochs=1, batch_strong=2, batch_weak=2, batch_unlabeled=2, dtype="float64",
                       time_mask_frames=4, frameshift_frames=4)
    return replace(base, **kw)


def test_trainer_is_bitwise_reproducible():
    runs = []
    for _ in range(2):
        tr = Trainer(tiny_model_config(), tiny_cfg(), seed=5)
        hist = tr.fit(tiny_data(), epochs=2)
        runs.append((hist, tr.state_tensors()))
    (h1, s1), (h2, s2) = runs
    assert [r.line() for r in h1] == [r.line() for r in h2]
    assert all(np.array_equal(s1[k], s2[k]) for k in s1)
    assert math.isnan(h1[0].val_psds1)
    assert any(not np.array_equal(s1[k], s1[k.replace("student.", "teacher.")])
               for k in s1 if k.startswith("student.") and k.endswith("weight"))


def test_trainer_seed_changes_result():
    a = Trainer(tiny_model_config(), tiny_cfg(), seed=1)
    b = Trainer(tiny_model_config(), tiny_cfg(), seed=2)
    a.fit(tiny_data(), epochs=1)
    b.fit(tiny_data(), epochs=1)
    assert a.history[0].loss != b.history[0].loss


def test_trainer_handles_missing_subsets_and_restores_dtype():
    from tapsed.tensor import get_default_dtype

    before = get_default_dtype()
    d = tiny_data()
    d = replace(d, weak_x=d.weak_x[:0], weak_y=d.weak_y[:0], unlabeled_x=d.unlabeled_x[:0])
    tr = Trainer(tiny_model_config(), tiny_cfg(dtype="float32"), seed=0)
    tr.fit(d, epochs=1)
    assert tr.history[0].weak_loss == 0.0
    assert get_default_dtype() == before
    assert tr.student.parameters()[0].dtype == np.float32
    empty = replace(d, strong_x=d.strong_x[:0], strong_y=d.strong_y[:0])
    with pytest.raises(ValueError):
        tr.steps_per_epoch(empty)
