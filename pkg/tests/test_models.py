import math

import numpy as np
import pytest
from conftest import make_match
from oracles import central_difference, relative_error

from trajdet import autodiff as ad
from trajdet.models import (
    ModelConfig,
    SamplingError,
    TrainConfig,
    TrainingData,
    TrainingDiverged,
    TrajectoryModel,
    kinematic_lift,
    sample_batch,
    sample_centers,
    train,
)
from trajdet.trajstore import EventLabel, WindowSpec, build_windows, normalize, windows_to_features

GRAD_CFG = ModelConfig(t=9, k=1, d=8, dilations=(1, 2, 4), heads=2, encoder_layers=2, ffn_dim=16)


def randomize_head(model, seed=0):
    rng = np.random.default_rng(seed)
    model.params["head.w"].data = rng.normal(scale=0.5, size=model.params["head.w"].shape)
    model.params["head.b"].data = rng.normal(scale=0.5, size=model.params["head.b"].shape)
    return model


def full_model_gradient_errors(variant="tcn_transformer"):
    """Max relative error of every parameter's gradient against central differences."""
    cfg = ModelConfig(**{**GRAD_CFG.__dict__, "variant": variant})
    model = randomize_head(TrajectoryModel(cfg, seed=3))
    rng = np.random.default_rng(4)
    feats = rng.random((3, cfg.t, cfg.input_channels))
    targets = np.array([0, 1, 3])
    ad.zero_grads(model.params.values())
    model.loss(feats, targets).backward()
    errors = {}
    for name, p in model.params.items():
        numeric = central_difference(lambda: model.loss(feats, targets).item(), p.data)
        errors[name] = float(relative_error(p.grad, numeric).max())
    return errors


@pytest.mark.parametrize("variant", ["tcn", "transformer", "tcn_transformer"])
def test_full_model_gradients(variant):
    errors = full_model_gradient_errors(variant)
    worst = max(errors, key=errors.get)
    assert errors[worst] <= 1e-3, f"{worst}: {errors[worst]:.2e}"


def test_default_config_forward():
    model = randomize_head(TrajectoryModel(ModelConfig(d=16, ffn_dim=16), seed=0))
    rng = np.random.default_rng(0)
    window = rng.random((2, 51, 6))
    from trajdet.trajstore import WindowTensor

    p = model.forward_window(WindowTensor(window, np.ones((51, 6), bool)))
    assert p.shape == (4,) and abs(p.sum() - 1) <= 1e-9 and np.all(p >= 0)


def test_zero_head_gives_uniform():
    model = TrajectoryModel(GRAD_CFG, seed=1)
    feats = np.random.default_rng(1).random((5, 9, 4))
    assert np.array_equal(model.predict(feats), np.full((5, 4), 0.25))


def test_attention_rows_sum_to_one():
    model = TrajectoryModel(GRAD_CFG, seed=2)
    model.predict(np.random.default_rng(2).random((3, 9, 4)))
    assert len(model.last_attention) == 2
    for a in model.last_attention:
        assert a.shape == (3, 2, 9, 9)
        assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-12)


def test_outputs_are_distributions():
    rng = np.random.default_rng(3)
    for variant in ("tcn", "transformer", "tcn_transformer"):
        model = randomize_head(TrajectoryModel(ModelConfig(**{**GRAD_CFG.__dict__, "variant": variant}), seed=3))
        p = model.predict(rng.random((6, 9, 4)) * 3)
        assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_combined_without_encoder_equals_tcn():
    a = TrajectoryModel(ModelConfig(**{**GRAD_CFG.__dict__, "variant": "tcn"}), seed=5)
    b = TrajectoryModel(ModelConfig(**{**GRAD_CFG.__dict__, "encoder_layers": 0}), seed=5)
    assert a.params.keys() == b.params.keys()
    randomize_head(a)
    b.load_state(a.state())
    feats = np.random.default_rng(5).random((4, 9, 4))
    assert np.array_equal(a.predict(feats), b.predict(feats))


def test_single_step_decreases_sample_loss():
    model = randomize_head(TrajectoryModel(GRAD_CFG, seed=6))
    feats = np.random.default_rng(6).random((1, 9, 4))
    target = np.array([2])
    base = model.state()
    before = model.loss(feats, target).item()
    improved = []
    for lr in (1e-2, 1e-3, 1e-4):
        model.load_state(base)
        ad.zero_grads(model.params.values())
        model.loss(feats, target).backward()
        for p in model.params.values():
            p.data = p.data - lr * p.grad
        improved.append(model.loss(feats, target).item() < before)
    assert any(improved)


@pytest.mark.parametrize(
    "kwargs, msg",
    [
        ({"d": 10, "heads": 4}, "divisible"),
        ({"dilations": (1, 3, 4)}, "powers of 2"),
        ({"dilations": (2, 1)}, "powers of 2"),
        ({"dilations": (1, 2, 4)}, "receptive field"),
        ({"variant": "lstm"}, "variant"),
        ({"t": 50}, "odd"),
    ],
)
def test_model_config_validation(kwargs, msg):
    with pytest.raises(ValueError, match=msg):
        ModelConfig(**kwargs)


def test_transformer_ignores_dilation_constraint():
    ModelConfig(variant="transformer", dilations=(1,))


def test_forward_shape_mismatch():
    model = TrajectoryModel(GRAD_CFG)
    with pytest.raises(ad.ShapeError, match=r"\(2, 9, 6\)"):
        model.forward(np.zeros((2, 9, 6)))


def test_kinematic_lift_channels():
    feats = np.zeros((1, 3, 6))
    feats[0, :, 0:2] = [[0.1, 0.2], [0.2, 0.2], [0.4, 0.2]]  # ball
    feats[0, :, 2:4] = [[0.3, 0.3], [0.3, 0.3], [0.3, 0.3]]  # player
    # slot 2 is padding
    out = kinematic_lift(feats)
    assert out.shape == (1, 3, 16) and ModelConfig(k=2, d=8, heads=2).lifted_channels == 16
    assert np.array_equal(out[..., :6], feats)
    vel = out[0, :, 6:12].reshape(3, 3, 2)
    assert np.allclose(vel[1:, 0, 0], [5.0, 10.0]) and np.all(vel[0] == 0) and np.all(vel[:, 2] == 0)
    rel = out[0, :, 12:].reshape(3, 2, 2)
    assert np.allclose(rel[:, 0, 0], [2.0, 1.0, -1.0]) and np.all(rel[:, 1] == 0)


def test_raw_input_mode():
    cfg = ModelConfig(**{**GRAD_CFG.__dict__, "kinematic": False})
    model = TrajectoryModel(cfg)
    assert model.params["in.w"].shape == (4, 8)


def test_checkpoint_round_trip(tmp_path):
    model = randomize_head(TrajectoryModel(GRAD_CFG, seed=7))
    model.save(tmp_path / "m.json", TrainConfig())
    back = TrajectoryModel.load(tmp_path / "m.json")
    assert back.config == model.config
    feats = np.random.default_rng(7).random((2, 9, 4))
    assert np.array_equal(back.predict(feats), model.predict(feats))
    with pytest.raises(FileNotFoundError):
        TrajectoryModel.load(tmp_path / "missing.json")


# ---------------------------------------------------------------- sampling and training


def speed_match(n=3000, every=100, burst=8, seed=0):
    """Ball drifts slowly and darts fast right after each pass label."""
    rng = np.random.default_rng(seed)
    labels = [EventLabel(f, "pass") for f in range(every, n - every, every)]
    step = rng.normal(scale=0.05, size=(n, 2))
    for e in labels:
        step[e.frame : e.frame + burst] = rng.choice([-1.5, 1.5], size=2)
    ball = np.clip(np.cumsum(step, axis=0) + [52, 34], 1, [104, 67])
    return make_match(ball, {"p": ball + 2.0}), labels


def ball_only_cfg():
    return ModelConfig(t=21, k=0, d=8, dilations=(1, 2, 4, 8), heads=2, encoder_layers=1, ffn_dim=8)


def test_background_fraction_and_spacing():
    m, labels = speed_match()
    data = TrainingData.build([(m, labels)], half=10, jitter=2)
    cfg = TrainConfig(batch_size=32, background_ratio=0.5, jitter=2)
    rng = np.random.default_rng(0)
    n_bg = []
    for _ in range(200):
        picks = sample_centers(data, cfg, rng)
        assert len(picks) == 32
        n_bg.append(sum(c == 0 for _, _, c in picks))
        for _, center, cls in picks:
            dist = min(abs(center - e.frame) for e in labels)
            assert dist > 10 if cls == 0 else dist <= 2
    assert abs(np.mean(n_bg) - 16) < 1.0
    assert 0 < np.std(n_bg) < 5


def test_near_miss_backgrounds_sit_just_outside_the_jitter_band():
    m, labels = speed_match()
    labels = labels + [EventLabel(labels[3].frame + 50, "shot")]
    data = TrainingData.build([(m, labels)], half=10, jitter=2)
    cfg = TrainConfig(batch_size=32, background_ratio=1.0, near_miss_ratio=1.0, jitter=2)
    rng = np.random.default_rng(3)
    near_shot = 0
    for _ in range(50):
        for _, center, cls in sample_centers(data, cfg, rng):
            dist = min(abs(center - e.frame) for e in labels)
            assert cls == 0 and 4 < dist <= 10
            near_shot += abs(center - labels[-1].frame) <= 10
    # the shot class is drawn half the time even though it has one label against 28 passes
    assert 0.4 < near_shot / (50 * 32) < 0.6


def test_jitter_zero_centers_on_label():
    m, labels = speed_match()
    data = TrainingData.build([(m, labels)], half=10)
    picks = sample_centers(data, TrainConfig(background_ratio=0.0, jitter=0), np.random.default_rng(1))
    frames = {e.frame for e in labels}
    assert all(c in frames for _, c, _ in picks)


def test_sample_batch_is_deterministic():
    m, labels = speed_match()
    spec = WindowSpec(21, 0)
    a = sample_batch([(m, labels)], TrainConfig(), np.random.default_rng(2), spec)
    b = sample_batch([(m, labels)], TrainConfig(), np.random.default_rng(2), spec)
    assert [c for _, c in a] == [c for _, c in b]
    assert all(np.array_equal(x.values, y.values) for (x, _), (y, _) in zip(a, b))
    assert a[0][0].values.shape == (2, 21, 1)


def test_sampling_errors():
    m, _ = speed_match(n=300)
    with pytest.raises(SamplingError, match="no labeled events"):
        sample_batch([(m, [])], TrainConfig(), np.random.default_rng(0), WindowSpec(21, 0))
    dense = [EventLabel(f, "pass") for f in range(0, 300, 5)]
    with pytest.raises(SamplingError, match="background"):
        sample_batch([(m, dense)], TrainConfig(), np.random.default_rng(0), WindowSpec(21, 0))


def test_training_loss_decreases_on_separable_windows():
    m, labels = speed_match()
    model = TrajectoryModel(ball_only_cfg(), seed=0)
    cfg = TrainConfig(batch_size=20, learning_rate=3e-3, max_epochs=5, steps_per_epoch=10, seed=0)
    _, hist = train(model, [(m, labels)], cfg)
    losses = [h.train_loss for h in hist]
    assert losses[-1] < 0.7 * losses[0]
    assert all(b < a + 0.05 for a, b in zip(losses, losses[1:]))


def test_zero_learning_rate_keeps_parameters():
    m, labels = speed_match()
    model = TrajectoryModel(ball_only_cfg(), seed=0)
    before = model.state()
    train(model, [(m, labels)], TrainConfig(learning_rate=0.0, max_epochs=1, steps_per_epoch=3))
    after = model.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_is_deterministic():
    m, labels = speed_match()
    cfg = TrainConfig(batch_size=8, max_epochs=2, steps_per_epoch=3, seed=11)
    runs = [train(TrajectoryModel(ball_only_cfg(), seed=0), [(m, labels)], cfg) for _ in range(2)]
    assert [h.train_loss for h in runs[0][1]] == [h.train_loss for h in runs[1][1]]
    s0, s1 = runs[0][0].state(), runs[1][0].state()
    assert all(np.array_equal(s0[k], s1[k]) for k in s0)


def test_best_validation_epoch_is_kept():
    m, labels = speed_match(seed=0)
    v, vlabels = speed_match(n=1500, seed=1)
    model = TrajectoryModel(ball_only_cfg(), seed=0)
    cfg = TrainConfig(batch_size=16, learning_rate=3e-3, max_epochs=4, steps_per_epoch=8, val_segments=2)
    model, hist = train(model, [(m, labels)], cfg, validation=[(v, vlabels)])
    from trajdet.models import validation_score

    val = TrainingData.build([(v, vlabels)], half=10)
    best = max(h.val_f_score for h in hist)
    assert math.isclose(validation_score(model, val, cfg)[0], best)


def test_divergence_is_reported(monkeypatch):
    m, labels = speed_match()
    model = TrajectoryModel(ball_only_cfg(), seed=0)
    monkeypatch.setattr(model, "loss", lambda f, t: ad.Tensor(np.array(np.nan)))
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train(model, [(m, labels)], TrainConfig(max_epochs=1, steps_per_epoch=1))


def test_windows_to_features_layout():
    m, _ = speed_match(n=200)
    values, _ = build_windows(normalize(m), WindowSpec(21, 1), [100])
    feats = windows_to_features(values)
    assert feats.shape == (1, 21, 4)
    assert np.array_equal(feats[0, :, 0], values[0, 0, :, 0]) and np.array_equal(feats[0, :, 1], values[0, 1, :, 0])
