import numpy as np
import pytest

from conftest import toy_cohort, toy_config, toy_grid, toy_model
from mlsurv import autodiff as ad
from mlsurv.data.cohort import Cohort
from mlsurv.encoding import TimeGrid
from mlsurv.errors import CheckpointError, ConfigurationError, TrainingError
from mlsurv.metrics import concordance_index
from mlsurv.network import (AdamW, EncoderConfig, SurvivalModel, TrainConfig, adamw_step, batch_loss,
                            cohort_masks, evaluate_loss, forward, load_checkpoint, predict_cohort,
                            save_checkpoint, train)


def test_default_configs():
    cfg, tc = EncoderConfig(), TrainConfig()
    assert len(cfg.conv_channels) == 4 and cfg.clinical_width == 11 and len(cfg.labels) == 4 and cfg.K == 16
    assert (tc.lr, tc.batch_size, tc.epochs, tc.plateau_factor, tc.beta) == (1e-3, 128, 100, 0.1, 1.0)
    assert tc.label_weights == (1.0, 1.0, 1.0, 1.0)


@pytest.mark.parametrize("kw", [dict(conv_channels=(4, 4), conv_strides=(2,)), dict(kernel=2),
                                dict(modality="audio"), dict(K=1), dict(kernel=5, padding=0, volume_extents=(4, 4, 4))])
def test_encoder_config_validation(kw):
    with pytest.raises(ConfigurationError):
        EncoderConfig(**{**dict(volume_extents=(16, 16, 8)), **kw})


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(plateau_factor=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)


def test_untrained_model_predicts_uniform():
    model = SurvivalModel(toy_config(), toy_grid())
    rng = np.random.default_rng(0)
    for curve in forward(model, rng.normal(size=(2, 4, 4, 4)), rng.normal(size=11)).curves():
        np.testing.assert_allclose(curve.pmf, 0.25, atol=1e-15)


def test_zero_parameters_give_uniform_pmf():
    model = toy_model()
    for p in model.params.values():
        p.value = np.zeros_like(p.value)
    rng = np.random.default_rng(1)
    curves = forward(model, rng.normal(size=(2, 4, 4, 4)), rng.normal(size=11)).curves()
    assert len(curves) == 4
    for c in curves:
        np.testing.assert_array_equal(c.pmf, 0.25)


def test_forward_is_deterministic(model):
    rng = np.random.default_rng(2)
    vol, clin = rng.normal(size=(2, 4, 4, 4)), rng.normal(size=11)
    a = forward(model, vol, clin).curves()
    b = forward(model, vol.copy(), clin.copy()).curves()
    for ca, cb in zip(a, b):
        assert ca.pmf.tobytes() == cb.pmf.tobytes()


def test_clinical_permutation_twin():
    model = toy_model(seed=3)
    twin = toy_model(seed=3)
    perm = np.random.default_rng(3).permutation(11)
    W = model.params["fc.weight"].value
    W_twin = W.copy()
    W_twin[:11] = W[:11][perm]
    twin.params["fc.weight"].value = W_twin
    rng = np.random.default_rng(4)
    vol, clin = rng.normal(size=(2, 4, 4, 4)), rng.normal(size=11)
    for ca, cb in zip(forward(model, vol, clin).curves(), forward(twin, vol, clin[perm]).curves()):
        np.testing.assert_allclose(ca.pmf, cb.pmf, atol=1e-12)


def test_batched_forward_matches_single(model):
    c = toy_cohort(n=3)
    batch = forward(model, c.volumes, c.clinical)
    for j in range(3):
        one = forward(model, c.volumes[j], c.clinical[j])
        for s in range(4):
            np.testing.assert_allclose(batch.scores[s].data[j], one.scores[s].data[0], atol=1e-12)


def test_forward_shape_errors(model):
    with pytest.raises(ConfigurationError):
        forward(model, np.zeros((2, 4, 4, 5)), np.zeros(11))
    with pytest.raises(ConfigurationError):
        forward(model, np.zeros((1, 4, 4, 4)), np.zeros(11))
    with pytest.raises(ConfigurationError):
        forward(model, np.zeros((2, 4, 4, 4)), np.zeros(10))


def test_clinical_modality_zeroes_the_image_block():
    model = toy_model(modality="clinical")
    rng = np.random.default_rng(5)
    clin = rng.normal(size=11)
    a = forward(model, rng.normal(size=(2, 4, 4, 4)), clin)
    b = forward(model, rng.normal(size=(2, 4, 4, 4)), clin)
    np.testing.assert_array_equal(a.nodes["features"].data, b.nodes["features"].data)
    fused_width = 11 + 4
    assert model.params["fc.weight"].value.shape == (fused_width, 6)


def test_image_modality_ignores_clinical():
    model = toy_model(modality="image")
    rng = np.random.default_rng(6)
    vol = rng.normal(size=(2, 4, 4, 4))
    a = forward(model, vol, rng.normal(size=11)).scores[0].data
    b = forward(model, vol, rng.normal(size=11)).scores[0].data
    np.testing.assert_array_equal(a, b)


def test_end_to_end_gradient(model, cohort):
    small = cohort.subset([0, 1, 2])
    masks = cohort_masks(model, small)
    params = list(model.params.values())
    err = ad.grad_check_params(
        lambda tape: batch_loss(model, small.volumes, small.clinical, masks, np.ones(4), 1.0, tape)[0], params)
    assert err <= 1e-5


def test_label_isolation(model, cohort):
    masks = cohort_masks(model, cohort)
    model.zero_grad()
    loss, fp = batch_loss(model, cohort.volumes, cohort.clinical, masks, [1.0, 0.0, 0.0, 0.0], 1.0)
    fp.tape.backward(loss)
    for lab in ("lffs", "rffs", "dffs"):
        theta = model.params[f"mtlr.{lab}.theta"]
        assert np.array_equal(theta.grad, theta.value)
        assert not model.params[f"mtlr.{lab}.bias"].grad.any()


def test_adamw_examples():
    p, m, v = adamw_step(np.array([1.0, -2.0]), np.zeros(2), np.zeros(2), np.zeros(2), 1, lr=0.1,
                         weight_decay=0.0)
    assert p.tolist() == [1.0, -2.0]
    p, _, _ = adamw_step(np.array([1.0]), np.zeros(1), np.zeros(1), np.zeros(1), 1, lr=0.1, weight_decay=0.01)
    assert p[0] == pytest.approx(0.999, abs=1e-15)


def test_adamw_constant_gradient_oracle():
    # with a constant gradient the bias-corrected step is lr * g / (|g| + eps) every time
    p, m, v = np.array([0.0, 0.0]), np.zeros(2), np.zeros(2)
    g = np.array([0.5, -3.0])
    expected = np.array([0.0, 0.0])
    for t in range(1, 101):
        p, m, v = adamw_step(p, g, m, v, t, lr=0.01, weight_decay=0.0)
        expected = expected - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, expected, atol=1e-10)
    assert p[0] < 0 < p[1]


def test_adamw_class_uses_parameter_grads():
    p = ad.Parameter(np.ones(3))
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.array([1.0, -1.0, 0.0])
    opt.step()
    np.testing.assert_allclose(p.value, [0.9, 1.1, 1.0], atol=1e-6)


def test_zero_lr_epoch_leaves_parameters(model, cohort):
    before = model.state()
    res = train(model, cohort.subset(range(8)), cohort.subset(range(8, 12)),
                TrainConfig(lr=0.0, epochs=1, batch_size=4, augment=False, weight_decay=0.0))
    assert len(res.history) == 1
    for k, v in before.items():
        assert np.array_equal(model.params[k].value, v)


def test_training_is_reproducible(cohort):
    tc = TrainConfig(lr=1e-2, epochs=3, batch_size=5, augment=True, max_shift_vox=1, seed=3)
    logs, states = [], []
    for _ in range(2):
        m = toy_model(seed=1, nonzero_heads=False)
        res = train(m, cohort.subset(range(8)), cohort.subset(range(8, 12)), tc)
        logs.append([(e.train_loss, e.val_loss) for e in res.history])
        states.append(m.state())
    assert logs[0] == logs[1]
    for k in states[0]:
        assert states[0][k].tobytes() == states[1][k].tobytes()


def test_returned_state_is_best_validation(cohort):
    m = toy_model(seed=2, nonzero_heads=False)
    tr, va = cohort.subset(range(8)), cohort.subset(range(8, 12))
    tc = TrainConfig(lr=5e-2, epochs=8, batch_size=4, augment=False)
    res = train(m, tr, va, tc)
    final = evaluate_loss(m, va, tc)
    assert all(final <= e.val_loss + 1e-12 for e in res.history)
    assert final == pytest.approx(min(e.val_loss for e in res.history), abs=1e-12)


def test_plateau_decay(cohort):
    m = toy_model(seed=2, nonzero_heads=False)
    # lr so large the validation loss cannot keep improving
    res = train(m, cohort.subset(range(8)), cohort.subset(range(8, 12)),
                TrainConfig(lr=0.5, epochs=12, batch_size=8, augment=False, plateau_patience=1))
    lrs = [e.lr for e in res.history]
    assert min(lrs) < 0.5
    assert all(b in (a, a * 0.1) or b == pytest.approx(a * 0.1) for a, b in zip(lrs, lrs[1:]))


def test_nan_loss_aborts_with_diagnostic(cohort):
    m = toy_model()
    m.params["mtlr.os.theta"].value[0, 0] = np.nan
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(m, cohort.subset(range(8)), cohort.subset(range(8, 12)), TrainConfig(epochs=1, augment=False))


def test_separable_cohort_is_learned():
    rng = np.random.default_rng(7)
    n = 120
    clinical = rng.normal(size=(n, 11))
    # event time is a decreasing function of feature 3 alone
    times = np.exp(-clinical[:, 3])[:, None] * np.ones((1, 4))
    events = np.ones((n, 4), bool)
    cohort = Cohort([f"S{i}" for i in range(n)], np.zeros((n, 2, 4, 4, 4)), clinical, times, events)
    grid = TimeGrid(tuple(np.quantile(times[:, 0], [0.25, 0.5, 0.75])))
    m = SurvivalModel(toy_config(modality="clinical", fc_width=8), grid)
    train(m, cohort.subset(range(90)), cohort.subset(range(90, 120)),
          TrainConfig(lr=2e-2, epochs=60, batch_size=30, augment=False))
    _, risk = predict_cohort(m, cohort.subset(range(90)))
    assert concordance_index(risk[:, 0], times[:90, 0], events[:90, 0]) >= 0.95


def test_checkpoint_round_trip(tmp_path, model):
    model.epoch = 7
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config and loaded.grid == model.grid and loaded.epoch == 7
    for k, p in model.params.items():
        assert loaded.params[k].value.tobytes() == p.value.tobytes()
    rng = np.random.default_rng(8)
    vol, clin = rng.normal(size=(2, 4, 4, 4)), rng.normal(size=11)
    assert forward(model, vol, clin).scores[1].data.tobytes() == forward(loaded, vol, clin).scores[1].data.tobytes()


def test_truncated_checkpoint(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    data = path.read_bytes()
    for cut in (4, 20, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
    path.write_bytes(b"garbage" * 3)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_config_mismatch_names_tensor(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    with pytest.raises(CheckpointError, match="conv0.weight"):
        load_checkpoint(path, toy_config(conv_channels=(5, 3, 4, 4)))
