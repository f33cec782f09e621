import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atdsr.data import (
    build_dataset,
    dihedral,
    dihedral_inverse,
    make_pair,
    mod_crop,
    sample_batch,
    synthetic_images,
    usable_pairs,
)
from atdsr.errors import ConfigError, ContractError, DataError, NonFiniteError
from atdsr.metrics import bicubic_down
from atdsr.model import build_model, preset
from atdsr.tensor import Tensor
from atdsr.train import AdamState, TrainConfig, adamw_step, l1_loss, lr_schedule, train_loop


def test_l1_examples():
    a = np.random.default_rng(0).normal(size=(3, 4))
    assert l1_loss(Tensor(a), a).item() == 0
    assert l1_loss(Tensor(a + 0.5), a).item() == pytest.approx(0.5, abs=1e-15)
    assert l1_loss(Tensor([0.0, 1.0]), np.array([1.0, 1.0])).item() == 0.5


def test_l1_shape_mismatch():
    with pytest.raises(ContractError):
        l1_loss(Tensor(np.zeros(3)), np.zeros(4))


def test_adamw_zero_grad_no_decay_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adamw_first_step_is_signed_lr():
    p = {"w": np.zeros(3)}
    adamw_step(p, {"w": np.array([0.3, -5.0, 1e-3])}, AdamState(), 1e-3, (0.9, 0.9), eps=1e-12)
    np.testing.assert_allclose(p["w"], [-1e-3, 1e-3, -1e-3], rtol=1e-6)


def test_adamw_decay_only():
    p = {"w": np.array([2.0, 4.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState(), 1.0, weight_decay=0.01)
    np.testing.assert_allclose(p["w"], [1.98, 3.96], rtol=1e-15)


def test_adamw_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 4))
    p = {"w": np.ones(4)}
    state = AdamState()
    w, m, v = np.ones(4), np.zeros(4), np.zeros(4)
    for t, g in enumerate(grads, 1):
        adamw_step(p, {"w": g}, state, 0.01, (0.9, 0.99), 0.1, 1e-8)
        w = w * (1 - 0.01 * 0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-8)
    np.testing.assert_allclose(p["w"], w, rtol=1e-13)


def test_lr_schedule_examples():
    cfg = TrainConfig(lr=2e-4, warmup_iters=10, lr_milestones=(100, 200), iters=300)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(10, cfg) == 2e-4
    assert lr_schedule(5, cfg) == pytest.approx(1e-4)
    assert lr_schedule(250, cfg) == 5e-5


def test_bad_milestones():
    with pytest.raises(ConfigError):
        TrainConfig(lr_milestones=(200, 100), iters=300)


# -- data ------------------------------------------------------------------

@given(st.integers(0, 7), st.integers(0, 2**31))
def test_dihedral_inverse(code, seed):
    img = np.random.default_rng(seed).normal(size=(3, 4, 4))
    np.testing.assert_array_equal(dihedral_inverse(dihedral(img, code), code), img)


def test_dihedral_codes_distinct():
    img = np.arange(16.0).reshape(1, 4, 4)
    assert len({dihedral(img, c).tobytes() for c in range(8)}) == 8
    np.testing.assert_array_equal(dihedral(img, 0), img)


def test_pair_alignment():
    hr = np.random.default_rng(0).uniform(size=(3, 33, 35))
    pair = make_pair("a", hr, 2)
    assert pair.hr.shape == (3, 32, 34) and pair.lr.shape == (3, 16, 17)
    np.testing.assert_array_equal(pair.hr, mod_crop(hr, 2))
    np.testing.assert_allclose(pair.lr, bicubic_down(pair.hr, 2), atol=0.5 / 255 + 1e-12)


def test_sample_batch_deterministic_and_aligned():
    data = build_dataset(synthetic_images(4, 32, 0), 2)
    a = sample_batch(data, 6, 8, 2, np.random.default_rng(3))
    b = sample_batch(data, 6, 8, 2, np.random.default_rng(3))
    for s, t in zip(a, b):
        np.testing.assert_array_equal(s.lr_patch, t.lr_patch)
        pair = next(p for p in data if p.name == s.image)
        y, x = s.offset
        np.testing.assert_array_equal(dihedral_inverse(s.lr_patch, s.aug), pair.lr[:, y:y + 8, x:x + 8])
        np.testing.assert_array_equal(dihedral_inverse(s.hr_patch, s.aug),
                                      pair.hr[:, 2 * y:2 * y + 16, 2 * x:2 * x + 16])


def test_undersized_images_skipped(caplog):
    data = build_dataset({**synthetic_images(1, 32, 0), "small": np.zeros((3, 8, 8))}, 2)
    with caplog.at_level(logging.WARNING):
        assert [p.name for p in usable_pairs(data, 8)] == ["toy0000"]
    assert "small" in caplog.text
    with pytest.raises(DataError):
        usable_pairs(data[1:], 8)


def test_synthetic_images_deterministic():
    a, b = synthetic_images(3, 32, 5), synthetic_images(3, 32, 5)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
        assert a[k].shape == (3, 32, 32) and 0 <= a[k].min() and a[k].max() <= 1


# -- loop ------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    return build_dataset(synthetic_images(6, 32, 1), 2)


def small_cfg(**kw):
    return TrainConfig(**{"batch": 2, "patch_lr": 8, "iters": 4, "lr": 1e-3, **kw})


def test_zero_iterations_leave_model_unchanged(toy):
    model = build_model(preset("atd_tiny"), 0)
    before = {n: t.data.copy() for n, t in model.named_parameters()}
    res = train_loop(model, toy, small_cfg(iters=0))
    assert res.curve == []
    for n, t in model.named_parameters():
        np.testing.assert_array_equal(t.data, before[n])


def test_training_is_deterministic(toy):
    runs = []
    for _ in range(2):
        model = build_model(preset("atd_tiny"), 0)
        res = train_loop(model, toy, small_cfg())
        runs.append((res.curve, b"".join(t.data.tobytes() for t in model.parameters())))
    assert runs[0] == runs[1]


def test_resume_matches_uninterrupted(toy):
    full = build_model(preset("atd_tiny"), 0)
    train_loop(full, toy, small_cfg(iters=4))
    part = build_model(preset("atd_tiny"), 0)
    res = train_loop(part, toy, small_cfg(iters=2))
    train_loop(part, toy, small_cfg(iters=4), optimizer=res.optimizer, rng=res.rng, start=2)
    for a, b in zip(full.parameters(), part.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_checkpoint_callback(toy):
    seen = []
    train_loop(build_model(preset("atd_tiny"), 0), toy, small_cfg(checkpoint_every=2),
               lambda it, *_: seen.append(it))
    assert seen == [2, 4]


def test_stage_two_uses_larger_patches(toy):
    res = train_loop(build_model(preset("atd_tiny"), 0), toy,
                     small_cfg(iters=1, stage2_iters=1, stage2_patch_lr=12))
    assert len(res.curve) == 2


def test_temperature_stays_clamped(toy):
    model = build_model(preset("atd_tiny"), 0)
    for layer in model.blocks[0].layers:
        layer.tdca.tau.data[0] = 0.0105
    train_loop(model, toy, small_cfg(iters=2, lr=0.05))
    assert all(0.01 <= layer.tdca.tau.data[0] <= 2 for layer in model.blocks[0].layers)


def test_nan_aborts_with_tensor_name(toy):
    model = build_model(preset("atd_tiny"), 0)
    model.conv_last.w.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="conv_last.w"):
        train_loop(model, toy, small_cfg(iters=1))


def test_loss_decreases_short_run(toy):
    model = build_model(preset("atd_tiny"), 0)
    curve = train_loop(model, toy, small_cfg(iters=60, batch=4, lr=2e-3, warmup_iters=5)).curve
    losses = [c[1] for c in curve]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
