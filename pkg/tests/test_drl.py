import numpy as np
import pytest

from phyadv import autoenc as ae
from phyadv import drl
from phyadv import nn
from phyadv.errors import ConfigError


def fresh_system(seed=0):
    return drl.init_system(drl.DrlConfig(seed=seed))


def test_config_validation():
    with pytest.raises(ConfigError):
        drl.DrlConfig(sigma_pi=0.0)
    with pytest.raises(ConfigError):
        drl.DrlConfig(sigma_f=-1.0)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        drl.AttackSchedule([np.zeros(7)], start=300, end=200)
    with pytest.raises(ConfigError):
        drl.AttackSchedule([])
    with pytest.raises(ConfigError):
        drl.AttackSchedule([np.zeros(7)], policy="sorted")
    with pytest.raises(ConfigError):
        drl.run_simulation(drl.DrlConfig(total_steps=300), drl.AttackSchedule([np.zeros(7)]))


def test_receiver_accuracy_one_on_correct_batch():
    sys_ = fresh_system()
    y = np.random.default_rng(0).normal(size=(64, 7))
    labels = np.argmax(nn.forward(sys_.decoder, y), axis=1)
    acc, _ = drl.train_step_receiver(sys_.decoder, sys_.rx_optim, y, labels)
    assert acc == 1.0


def test_untrained_receiver_is_at_chance():
    sys_ = fresh_system(3)
    rng = np.random.default_rng(1)
    msgs = rng.integers(0, 16, 20_000)
    y = nn.forward(sys_.encoder, ae.one_hot(msgs, 16)) + rng.normal(size=(20_000, 7))
    acc, _ = drl.train_step_receiver(sys_.decoder, sys_.rx_optim, y, msgs)
    # an untrained decoder can favour a few classes, so allow a wide band around 1/16
    assert 0.02 < acc < 0.15


def test_receiver_loss_decreases_on_fixed_batch():
    sys_ = fresh_system(1)
    msgs = np.arange(16).repeat(8)
    y = nn.forward(sys_.encoder, ae.one_hot(msgs, 16))
    losses = [drl.train_step_receiver(sys_.decoder, sys_.rx_optim, y, msgs)[1] for _ in range(11)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_policy_gradient_matches_white_box_gradient():
    sys_ = fresh_system(2)
    sigma, n = 0.15, 1000
    msgs = np.full(n, 5)
    rng = np.random.default_rng(0)
    w = sigma * rng.standard_normal((n, 7))
    x = nn.forward(sys_.encoder, ae.one_hot(msgs, 16))
    losses = drl.per_example_losses(sys_.decoder, x + w, msgs)
    pg = drl.policy_gradient(sys_.encoder, msgs, w, losses, sigma)

    etape = nn.forward_record(sys_.encoder, ae.one_hot(msgs[:1], 16))
    dtape = nn.forward_record(sys_.decoder, etape.output)
    _, g = nn.cross_entropy(dtape.activations[-2], msgs[:1], from_logits=True)
    gin = nn.backward(sys_.decoder, dtape, g, at=len(sys_.decoder.spec.layers) - 1).input
    true = [x for gs in nn.backward(sys_.encoder, etape, gin).params for x in gs]

    a = np.concatenate([v.ravel() for v in pg])
    b = np.concatenate([v.ravel() for v in true])
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) > 0.9


def test_constant_losses_give_no_update():
    sys_ = fresh_system()
    rng = np.random.default_rng(0)
    msgs = rng.integers(0, 16, 512)
    w = 0.15 * rng.standard_normal((512, 7))
    grads = drl.policy_gradient(sys_.encoder, msgs, w, np.full(512, 2.5), 0.15)
    assert max(np.abs(g).max() for g in grads) == 0.0


def test_update_norm_shrinks_with_batch_for_pure_noise_feedback():
    sys_ = fresh_system()
    norms = []
    for n in (100, 10_000):
        rng = np.random.default_rng(n)
        msgs = rng.integers(0, 16, n)
        w = 0.15 * rng.standard_normal((n, 7))
        grads = drl.policy_gradient(sys_.encoder, msgs, w, rng.normal(size=n), 0.15)
        norms.append(np.sqrt(sum(np.sum(g**2) for g in grads)))
    assert norms[1] < norms[0] / 3


def test_transmitter_skips_non_finite_feedback():
    sys_ = fresh_system()
    before = [p.data.copy() for p in sys_.encoder.flat_params()]
    msgs = np.arange(4)
    w = np.zeros((4, 7))
    with pytest.warns(RuntimeWarning):
        ok = drl.train_step_transmitter(sys_.encoder, sys_.tx_optim, msgs, w, [1.0, np.nan, 2.0, 1.0], 0.15)
    assert not ok
    assert all(np.array_equal(a, p.data) for a, p in zip(before, sys_.encoder.flat_params()))


def test_transmitter_update_keeps_unit_power():
    sys_ = fresh_system()
    rng = np.random.default_rng(0)
    msgs = rng.integers(0, 16, 256)
    w = 0.15 * rng.standard_normal((256, 7))
    assert drl.train_step_transmitter(sys_.encoder, sys_.tx_optim, msgs, w, rng.random(256), 0.15)
    x = nn.forward(sys_.encoder, ae.one_hot(np.arange(16), 16))
    np.testing.assert_allclose(np.mean(x**2, axis=1), 1.0, atol=1e-9)


@pytest.fixture(scope="module")
def clean_trace():
    return drl.run_simulation(drl.DrlConfig(seed=0))


def test_trace_shape_and_range(clean_trace):
    assert len(clean_trace) == 600
    assert np.all((clean_trace.accuracy >= 0) & (clean_trace.accuracy <= 1))
    assert not clean_trace.attacked.any() and clean_trace.window is None


def test_plateau_without_attack(clean_trace):
    assert clean_trace.mean(200, 600) >= 0.9


def test_simulation_is_deterministic(clean_trace):
    again = drl.run_simulation(drl.DrlConfig(seed=0))
    assert again.accuracy.tobytes() == clean_trace.accuracy.tobytes()


def test_black_box_contract(monkeypatch):
    """The adversary adds no model access: counts match an unattacked run."""
    counts = {"forward": 0, "backward": 0, "forward_record": 0}
    for name in counts:
        real = getattr(nn, name)

        def wrapped(*a, _real=real, _name=name, **k):
            counts[_name] += 1
            return _real(*a, **k)
        monkeypatch.setattr(nn, name, wrapped)
    cfg = drl.DrlConfig(total_steps=40)
    drl.run_simulation(cfg)
    clean = dict(counts)
    for k in counts:
        counts[k] = 0
    trace = drl.run_simulation(cfg, drl.AttackSchedule([np.ones(7)], start=10, end=30))
    assert counts == clean
    assert trace.attacked.sum() == 20


def test_attack_window_flags_and_policies():
    pool = [np.full(7, v) for v in (0.1, 0.2, 0.3)]
    rr = drl.BroadcastAdversary(drl.AttackSchedule(pool, start=2, end=8, policy="round-robin"))
    assert rr.perturbation(1) is None and rr.perturbation(8) is None
    assert [rr.perturbation(t)[0] for t in range(2, 8)] == [0.1, 0.2, 0.3, 0.1, 0.2, 0.3]
    un = drl.BroadcastAdversary(drl.AttackSchedule(pool, start=0, end=300, seed=1))
    seen = {un.perturbation(t)[0] for t in range(300)}
    assert seen == {0.1, 0.2, 0.3}


@pytest.fixture(scope="module")
def source():
    return drl.craft_source_run(ae.AutoencoderConfig(seed=7), candidates=30, steps=100)


def test_transfer_selection(source):
    pool = drl.transfer_perturbations(source, 20, trials=2000)
    assert len(pool) == 20
    impacts = [m.surrogate_bler for m in pool]
    assert impacts == sorted(impacts, reverse=True)
    assert all(m.surrogate_bler > m.clean_bler for m in pool)


def test_transfer_shortfall(source):
    with pytest.raises(ConfigError, match="shortfall"):
        drl.transfer_perturbations(source, 31, trials=2000)


def test_transfer_rate_on_zero_and_pool(source):
    target = ae.train_autoencoder(ae.AutoencoderConfig(seed=11, steps=1500))
    rate, _, clean = drl.transfer_rate([np.zeros(7)], target.encoder, target.decoder, 4.0)
    assert rate == 0.0 and 0 < clean <= 1
    pool = drl.transfer_perturbations(source, 10, trials=2000)
    rate, acc, clean = drl.transfer_rate(pool, target.encoder, target.decoder, 4.0)
    assert len(acc) == 10 and 0 <= rate <= 1


def test_trace_csv(tmp_path, clean_trace):
    clean_trace.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "time_step,accuracy,attacked_flag" and len(lines) == 601
    drl.write_aggregate_csv([clean_trace, clean_trace], tmp_path / "a.csv")
    row = (tmp_path / "a.csv").read_text().splitlines()[1].split(",")
    assert row[0] == "0" and float(row[2]) == 0.0 and row[3] == "2"
