import math

import numpy as np
import pytest

from gradcheck import check_pipeline, tiny_instance, tiny_pair
from tractreg.errors import FormatError, ValidationError
from tractreg.network import init_params
from tractreg.streamlines import Tractogram
from tractreg.train import (LOG_HEADER, OptimizerState, TrainConfig, adam_step, checkpoint_load,
                            checkpoint_save, fit, format_config, lr_schedule, new_state,
                            parse_config, patch_loss_and_grads, train_iteration)


def toy_subjects(n_subjects=2, n=40, p=5, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.normal(0, 15, size=(n, 1, 3)) + np.cumsum(rng.normal(0, 3, size=(n, p, 3)), axis=1)
    return [Tractogram.from_array(base + rng.normal(0, 1.0, size=3)) for _ in range(n_subjects)]


def toy_config(**kw):
    base = dict(n_keypoints=6, hidden=8, layers=2, n_points=5, patches=2, patch_size=15,
                epochs=4, decay_every=2, seed=5, checkpoint_every=2)
    base.update(kw)
    return TrainConfig(**base).validate()


# -- adam and schedule ------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    arrays = {"w": np.array([1.0, -2.0])}
    state = OptimizerState.zeros_like(arrays)
    out, state = adam_step(arrays, {"w": np.zeros(2)}, state, 1e-3)
    np.testing.assert_array_equal(out["w"], arrays["w"])
    assert state.step == 1


def test_adam_first_step_closed_form():
    arrays = {"w": np.array([0.5])}
    out, state = adam_step(arrays, {"w": np.array([1.0])}, OptimizerState.zeros_like(arrays), 1e-3)
    m = 0.1 * 1.0
    v = 0.001 * 1.0
    mhat, vhat = m / (1 - 0.9), v / (1 - 0.999)
    assert out["w"][0] == pytest.approx(0.5 - 1e-3 * mhat / (math.sqrt(vhat) + 1e-8), abs=1e-15)
    assert out["w"][0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_two_step_recurrence():
    arrays = {"w": np.array([0.0])}
    state = OptimizerState.zeros_like(arrays)
    g1, g2 = 2.0, -0.5
    arrays, state = adam_step(arrays, {"w": np.array([g1])}, state, 1e-2)
    arrays, state = adam_step(arrays, {"w": np.array([g2])}, state, 1e-2)
    assert state.step == 2
    m = 0.9 * (0.1 * g1) + 0.1 * g2
    v = 0.999 * (0.001 * g1 ** 2) + 0.001 * g2 ** 2
    assert state.m["w"][0] == pytest.approx(m, rel=1e-15)
    assert state.v["w"][0] == pytest.approx(v, rel=1e-15)


def test_adam_shape_mismatch():
    arrays = {"w": np.zeros(2)}
    with pytest.raises(ValidationError):
        adam_step(arrays, {"w": np.zeros(3)}, OptimizerState.zeros_like(arrays), 1e-3)


def test_lr_schedule_values():
    assert lr_schedule(0) == 1e-3
    assert lr_schedule(10) == 5e-4
    assert lr_schedule(25) == 2.5e-4
    for epoch in range(0, 1001):
        assert lr_schedule(epoch) == 1e-3 * 0.5 ** (epoch // 10)
    with pytest.raises(ValidationError):
        lr_schedule(-1)


# -- config ----------------------------------------------------------------------------

def test_default_hyperparameters():
    c = TrainConfig()
    assert (c.n_keypoints, c.patches, c.patch_size, c.n_points) == (512, 4, 2200, 15)
    assert (c.temperature, c.lr, c.decay, c.decay_every, c.epochs) == (0.6, 1e-3, 0.5, 10, 1000)
    assert c.lambda_infer == 0.5 and c.subset_size == 30000


def test_config_round_trip():
    c = toy_config(lr=3e-3)
    assert parse_config(format_config(c)) == c


def test_config_parse_and_errors():
    c = parse_config("# comment\nmodel.n_keypoints = 32\n\nhidden=16  # bare key\n")
    assert c.n_keypoints == 32 and c.hidden == 16
    with pytest.raises(FormatError, match="line 2"):
        parse_config("model.hidden = 8\nmodel.bogus = 1\n")
    with pytest.raises(FormatError, match="line 1"):
        parse_config("optim.lr = fast\n")
    with pytest.raises(FormatError, match="line 3"):
        parse_config("\n\nno equals sign\n")
    with pytest.raises(ValidationError):
        parse_config("optim.decay = 0\n")


# -- gradients through the full pipeline ---------------------------------------------

def test_end_to_end_gradient_matches_finite_differences():
    # seed 6 is an instance where no stencil crosses a switch, so every entry is compared
    worst, crossing, checked = check_pipeline(*tiny_instance(6), h=1e-4)
    assert crossing == 0
    assert worst < 1e-3


@pytest.mark.parametrize("seed", range(8))
def test_end_to_end_gradient_on_smooth_stencils(seed):
    # K=4 keypoints pin the affine part exactly, so the loss can be sharply
    # curved; a smaller step keeps the truncation error below the tolerance
    worst, crossing, checked = check_pipeline(*tiny_instance(seed), h=1e-6)
    assert crossing <= 5
    assert worst < 1e-3


def test_identical_subjects_give_zero_loss():
    _, fixed = tiny_pair()
    params = init_params(n_keypoints=4, hidden=8, layers=2, seed=0)
    loss, grads = patch_loss_and_grads(params, fixed, fixed, lam=0.5)
    assert loss < 1e-9
    assert max(np.abs(g).max() for g in grads.values()) < 1e-6


# -- iterations, determinism and checkpoints ---------------------------------------------

def test_train_iteration_updates_state():
    subjects = toy_subjects()
    state = new_state(toy_config())
    rng = np.random.default_rng(0)
    params, opt, loss, lam = train_iteration(subjects[0], subjects[1], state.params,
                                             state.opt_state, state.config, rng)
    assert np.isfinite(loss) and 1e-3 <= lam <= 10
    assert opt.step == 1
    assert any(not np.array_equal(params.arrays[k], state.params.arrays[k]) for k in params.arrays)


def test_fit_is_deterministic(tmp_path):
    subjects = toy_subjects()
    a = fit(subjects, toy_config(), log_path=tmp_path / "a.csv")
    b = fit(subjects, toy_config(), log_path=tmp_path / "b.csv")
    assert a.history == b.history
    for k in a.params.arrays:
        np.testing.assert_array_equal(a.params.arrays[k], b.params.arrays[k])
    strip = lambda p: [ln.rsplit(",", 1)[0] for ln in p.read_text().splitlines()]
    assert strip(tmp_path / "a.csv") == strip(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == LOG_HEADER


def test_checkpoint_resave_is_byte_identical(tmp_path):
    state = fit(toy_subjects(), toy_config(epochs=2))
    checkpoint_save(state, tmp_path / "a.ckpt")
    checkpoint_save(checkpoint_load(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    subjects = toy_subjects()
    full = fit(subjects, toy_config(epochs=10, decay_every=3))
    assert len(full.history) >= 10
    half = fit(subjects, toy_config(epochs=10, decay_every=3), epochs=4)
    checkpoint_save(half, tmp_path / "half.ckpt")
    resumed = fit(subjects, state=checkpoint_load(tmp_path / "half.ckpt"))
    assert half.history + resumed.history == full.history
    for k in full.params.arrays:
        np.testing.assert_array_equal(resumed.params.arrays[k], full.params.arrays[k])


def test_fit_writes_periodic_checkpoints(tmp_path):
    fit(toy_subjects(), toy_config(epochs=4), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == \
        ["epoch_0002.ckpt", "epoch_0004.ckpt", "last.ckpt"]


@pytest.mark.parametrize("damage", ["truncate", "magic", "version", "garbage"])
def test_corrupt_checkpoint(tmp_path, damage):
    state = fit(toy_subjects(), toy_config(epochs=1))
    checkpoint_save(state, tmp_path / "c.ckpt")
    data = bytearray((tmp_path / "c.ckpt").read_bytes())
    if damage == "truncate":
        data = data[:len(data) // 2]
    elif damage == "magic":
        data[:4] = b"NOPE"
    elif damage == "version":
        data[4] = 7
    else:
        data[12:40] = b"\xff" * 28
    (tmp_path / "c.ckpt").write_bytes(bytes(data))
    with pytest.raises(FormatError):
        checkpoint_load(tmp_path / "c.ckpt")


def test_fit_needs_two_subjects():
    with pytest.raises(ValidationError):
        fit(toy_subjects()[:1], toy_config())
