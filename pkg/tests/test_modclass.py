import warnings

import numpy as np
import pytest

from phyadv import modclass as mc
from phyadv import nn
from phyadv import wireless as w
from phyadv.errors import ConfigError


@pytest.fixture(scope="module")
def small_model():
    ds = w.synthesize_dataset(24, 5, snrs=(10, 14, 18))
    model, _ = mc.train_classifier(ds, mc.ClassifierConfig(epochs=4, batch_size=64, seed=1))
    return model, ds.test_set


def test_train_smoke_80_frames():
    ds = w.synthesize_dataset(10, 0, snrs=(10,))
    assert len(ds) == 80
    model, hist = mc.train_classifier(ds, mc.ClassifierConfig(epochs=1, seed=0))
    assert len(hist) == 1
    assert np.isfinite(hist[0]["train_loss"]) and np.isfinite(hist[0]["test_loss"])
    assert model.spec.output_shape == (8,)


def test_train_rejects_missing_classes():
    ds = w.synthesize_dataset(4, 0, snrs=(10,))
    with pytest.raises(ConfigError):
        mc.train_classifier(ds.subset(ds.labels != 3), mc.ClassifierConfig(epochs=1))


def test_training_is_deterministic():
    ds = w.synthesize_dataset(4, 0, snrs=(10,))
    cfg = mc.ClassifierConfig(epochs=1, seed=3)
    a, ha = mc.train_classifier(ds, cfg)
    b, hb = mc.train_classifier(ds, cfg)
    assert ha == hb
    for pa, pb in zip(a.flat_params(), b.flat_params()):
        assert pa.data.tobytes() == pb.data.tobytes()


def test_classifier_config_requires_eight_classes():
    bad = nn.ModelSpec((2, 128), (nn.flatten(), nn.dense(256, 5), nn.softmax()))
    with pytest.raises(ConfigError):
        mc.ClassifierConfig(spec=bad)


def test_threat_model_validation():
    tm = mc.ThreatModel("white-box", "full model knowledge", "accuracy drop")
    assert tm.to_dict()["phase"] == "evasion"
    with pytest.raises(ConfigError):
        mc.ThreatModel("omniscient", "x", "y")
    with pytest.raises(ConfigError):
        mc.ThreatModel("white-box", "", "y")


def test_accuracy_vs_snr_stub_predictors():
    ds = w.synthesize_dataset(2, 0, snrs=(0, 10))
    perfect = mc.accuracy_vs_snr(lambda x: ds.labels, ds, expected_snrs=(0, 10))
    assert perfect == [(0, 1.0), (10, 1.0)]
    constant = mc.accuracy_vs_snr(lambda x: np.zeros(len(x), dtype=int), ds, expected_snrs=(0, 10))
    assert constant == [(0, 0.125), (10, 0.125)]


def test_accuracy_vs_snr_warns_on_missing_cells():
    ds = w.synthesize_dataset(1, 0, snrs=(0,))
    with pytest.warns(UserWarning):
        curve = mc.accuracy_vs_snr(lambda x: ds.labels, ds)
    assert curve == [(0, 1.0)]


def test_rotation_preserves_power():
    x = np.random.default_rng(0).normal(size=(3, 2, 16))
    r = mc.rotate_iq(x, np.array([0.3, 1.0, -2.0]))
    np.testing.assert_allclose(np.sum(r**2, axis=(1, 2)), np.sum(x**2, axis=(1, 2)))
    np.testing.assert_allclose(mc.rotate_iq(x, np.zeros(3)), x)


def test_fgsm_zero_epsilon(small_model):
    model, test = small_model
    x, y = test.x[:5].astype(float), test.labels[:5]
    d = mc.fgsm_attack(model, x, y, 0.0)
    assert not d.any()
    np.testing.assert_array_equal(mc.predict(model, x + d), mc.predict(model, x))


def test_fgsm_components_are_plus_minus_epsilon(small_model):
    model, test = small_model
    x, y = test.x[:6].astype(float), test.labels[:6]
    eps = mc.fgsm_epsilon(x, 0.05)
    d = mc.fgsm_attack(model, x, y, eps)
    for di, ei in zip(d, eps):
        assert set(np.unique(np.abs(di))) <= {0.0, ei}
        assert np.max(np.abs(di)) == ei
    full = np.sum(d**2, axis=(1, 2))
    np.testing.assert_allclose(full, 0.05 * np.sum(x**2, axis=(1, 2)), rtol=1e-9)


def test_cw_on_misclassified_frame_returns_zero(small_model):
    model, test = small_model
    pred = mc.predict(model, test.x)
    i = int(np.flatnonzero(pred != test.labels)[0])
    delta, rec = mc.cw_l2_attack(model, test.x[i], test.labels[i])
    assert rec.success and rec.l2 == 0.0 and rec.iterations == 0
    assert not delta.any()


@pytest.fixture(scope="module")
def cw_run(small_model):
    model, test = small_model
    pred = mc.predict(model, test.x)
    idx = np.flatnonzero(pred == test.labels)[:12]
    x, y = test.x[idx].astype(float), test.labels[idx]
    cfg = mc.CwAttackConfig(steps=60, search_steps=4)
    deltas, records = mc.cw_l2_attack(model, x, y, cfg)
    return model, x, y, cfg, deltas, records


def test_cw_successful_records_misclassify(cw_run):
    model, x, y, cfg, deltas, records = cw_run
    assert any(r.success for r in records)
    for xi, yi, d, r in zip(x, y, deltas, records):
        if r.success:
            assert mc.predict(model, (xi + d)[None])[0] != yi
            assert np.linalg.norm(d) == pytest.approx(r.l2)
            assert r.power_ratio <= cfg.max_power_ratio + 1e-12
            assert r.power_ratio == pytest.approx(r.l2**2 / np.sum(xi**2))
        else:
            assert not d.any()


def test_cw_accepted_norm_non_increasing(cw_run):
    *_, records = cw_run
    for r in records:
        accepted = [l2 for _, ok, l2 in r.trace if np.isfinite(l2)]
        assert all(b <= a + 1e-15 for a, b in zip(accepted, accepted[1:]))
        if r.success and len(r.trace) > 1:
            assert r.trace[0][0] == pytest.approx(100.0)


def test_cw_deterministic(cw_run):
    model, x, y, cfg, deltas, _ = cw_run
    again, _ = mc.cw_l2_attack(model, x, y, cfg)
    assert again.tobytes() == deltas.tobytes()


def test_cw_failure_is_a_record_not_an_exception(small_model):
    model, test = small_model
    pred = mc.predict(model, test.x)
    i = int(np.flatnonzero(pred == test.labels)[0])
    cfg = mc.CwAttackConfig(steps=5, search_steps=2, max_power_ratio=1e-8)
    delta, rec = mc.cw_l2_attack(model, test.x[i], test.labels[i], cfg)
    assert not rec.success and not delta.any()


def test_cw_config_validation():
    with pytest.raises(ConfigError):
        mc.CwAttackConfig(c_range=(0.0, 1.0))
    with pytest.raises(ConfigError):
        mc.CwAttackConfig(steps=0)


def test_matched_random_perturbation_norms():
    d = np.random.default_rng(0).normal(size=(4, 2, 8))
    d[2] = 0
    r = mc.matched_random_perturbation(d, 3)
    np.testing.assert_allclose(np.linalg.norm(r.reshape(4, -1), axis=1), np.linalg.norm(d.reshape(4, -1), axis=1))


@pytest.mark.parametrize("augment", ["gaussian", "fgsm"])
def test_augmented_training_runs(augment):
    ds = w.synthesize_dataset(3, 0, snrs=(10,))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        model, hist = mc.train_classifier(ds, mc.ClassifierConfig(epochs=1, augment=augment, seed=2))
    assert np.isfinite(hist[0]["train_loss"])
