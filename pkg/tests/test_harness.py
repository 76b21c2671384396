import json

import numpy as np
import pytest
import yaml

from phyadv import modclass as mc
from phyadv import nn
from phyadv import wireless as w
from phyadv.errors import ConfigError, ReportError
from phyadv.harness import attacks, cli, config, ood, report
from phyadv.harness.experiment import run_experiment, run_stage

THREAT = {"knowledge": "white-box", "assumptions": "weights known", "success_metric": "accuracy"}

TINY = {
    "a": {"case_study": "a", "threat_model": THREAT, "data": {"per_cell": 4, "snrs": [0, 10, 18]},
          "classifier": {"epochs": 1},
          "attack": {"frames_per_snr": 4, "cw": {"steps": 20, "search_steps": 2}, "random_search": {"queries": 20}},
          "ood": {"per_cell": 2, "snrs": [9, 11]}, "transfer": {"seeds": [1, 2], "epochs": 1, "frames": 20}},
    "b": {"case_study": "b", "threat_model": THREAT, "autoencoder": {"steps": 300}, "perturbation": {"steps": 20},
          "bler": {"trials": 2000, "grid": [0, 6]}, "transfer": {"seeds": [0, 1]}},
    "c": {"case_study": "c", "threat_model": {**THREAT, "knowledge": "black-box"}, "autoencoder": {"steps": 300},
          "perturbation": {"steps": 20},
          "drl": {"seeds": [0], "total_steps": 60, "window": [20, 40], "candidates": 12, "pool": 6}},
}


def write_cfg(tmp_path, raw, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return path


# --- config -------------------------------------------------------------------

def test_missing_threat_model_names_the_guideline():
    raw = {k: v for k, v in TINY["a"].items() if k != "threat_model"}
    with pytest.raises(ConfigError, match="threat-model guideline"):
        config.ExperimentConfig.from_dict(raw)


def test_incomplete_threat_model_rejected():
    raw = {**TINY["a"], "threat_model": {"knowledge": "white-box", "assumptions": "x"}}
    with pytest.raises(ConfigError, match="success_metric"):
        config.ExperimentConfig.from_dict(raw)


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigError, match="classifier.epoch"):
        config.ExperimentConfig.from_dict({**TINY["a"], "classifier": {"epoch": 3}})
    with pytest.raises(ConfigError, match="not used"):
        config.ExperimentConfig.from_dict({**TINY["b"], "data": {"per_cell": 3}})
    with pytest.raises(ConfigError):
        config.ExperimentConfig.from_dict({**TINY["a"], "case_study": "z"})


def test_bad_values_fail_before_compute():
    with pytest.raises(ConfigError):
        config.ExperimentConfig.from_dict({**TINY["c"], "drl": {"window": [500, 700]}})
    with pytest.raises(ConfigError):
        config.ExperimentConfig.from_dict({**TINY["a"], "classifier": {"augment": "mixup"}})


def test_seed_override_and_echo():
    cfg = config.ExperimentConfig.from_dict(TINY["b"], seed=5)
    assert cfg.seed == 5 and cfg.autoencoder_config().seed == 5
    echo = cfg.to_dict()
    assert echo["threat_model"]["knowledge"] == "white-box" and echo["autoencoder"]["steps"] == 300


def test_shipped_configs_validate():
    from pathlib import Path
    for path in sorted((Path(__file__).parent.parent / "configs").glob("*.yaml")):
        config.load_config(path)


# --- random search -------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_model():
    ds = w.synthesize_dataset(12, 2, snrs=(10, 18))
    model, _ = mc.train_classifier(ds, mc.ClassifierConfig(epochs=3, seed=0))
    return model, ds.test_set


def test_random_search_zero_queries_is_failure(tiny_model):
    model, test = tiny_model
    rec = attacks.random_search_attack(attacks.Oracle(model), test.x[0], int(test.labels[0]), 0.1, 0)
    assert not rec.success and rec.queries == 0 and not rec.delta.any()


def test_random_search_respects_budget_and_counts_queries(tiny_model):
    model, test = tiny_model
    oracle = attacks.Oracle(model)
    deltas, recs = attacks.random_search_frames(oracle, test.x[:10].astype(float), test.labels[:10], 0.1, 40)
    assert oracle.queries == sum(r.queries for r in recs)
    for x, d, r in zip(test.x[:10], deltas, recs):
        assert r.queries <= 40
        assert np.sum(d**2) <= 0.1 * np.sum(x.astype(float) ** 2) * (1 + 1e-9)


def test_random_search_successes_are_real(tiny_model):
    model, test = tiny_model
    x, y = test.x[:10].astype(float), test.labels[:10]
    deltas, recs = attacks.random_search_frames(attacks.Oracle(model), x, y, 0.3, 60, seed=1)
    for xi, yi, d, r in zip(x, y, deltas, recs):
        assert (mc.predict(model, (xi + d)[None])[0] != yi) == r.success


def test_oracle_exposes_no_model():
    model = nn.init_model(mc.default_classifier_spec(), 0)
    oracle = attacks.Oracle(model)
    assert not any(isinstance(v, nn.ModelState) for v in vars(oracle).values())


def test_random_search_not_stronger_than_cw(tiny_model):
    model, test = tiny_model
    idx = np.flatnonzero(mc.predict(model, test.x) == test.labels)[:8]
    x, y = test.x[idx].astype(float), test.labels[idx]
    _, cw = mc.cw_l2_attack(model, x, y, mc.CwAttackConfig(steps=60, search_steps=3))
    _, rs = attacks.random_search_frames(attacks.Oracle(model), x, y, 0.1, 100)
    assert np.mean([r.success for r in rs]) <= np.mean([r.success for r in cw])


# --- out-of-distribution probes ------------------------------------------------------

def test_ood_suite_and_probe(tiny_model):
    model, _ = tiny_model
    suite = ood.build_ood_suite(2, 0, snrs=(9, 11))
    assert len(suite.unseen_snr.labels) == 8 * 2 * 2
    assert len(suite.held_out_scheme.labels) == 2 * 2 * 2
    train = w.synthesize_dataset(2, 1, snrs=(10,))
    out = ood.ood_probe(model, suite, training=train)
    for name in ("unseen_snr", "held_out_scheme", "pure_noise"):
        assert 0 <= out[name]["accuracy"] <= 1 and 0 < out[name]["confidence"] <= 1


def test_ood_overlap_detected():
    suite = ood.build_ood_suite(1, 0, snrs=(9,))
    train = w.synthesize_dataset(1, 1, snrs=(10,))
    leaked = w.Dataset(np.concatenate([train.x, suite.pure_noise.x[:1].astype(np.float32)]),
                       np.concatenate([train.labels, [0]]), np.concatenate([train.snr, [10]]),
                       np.ones(len(train) + 1, dtype=bool))
    with pytest.raises(ConfigError, match="overlaps"):
        ood.check_disjoint(suite, leaked)
    odd = w.Dataset(train.x, train.labels, np.full(len(train), 9), train.train)
    with pytest.raises(ConfigError, match="trained SNR"):
        ood.check_disjoint(suite, odd)


def test_pure_noise_near_chance():
    suite = ood.build_ood_suite(50, 3, snrs=(9,))
    out = ood.ood_probe(nn.init_model(mc.default_classifier_spec(), 1), suite)
    assert abs(out["pure_noise"]["accuracy"] - 1 / 8) < 0.06


# --- report -----------------------------------------------------------------------

def blk(acc):
    return {"accuracy": acc, "precision": acc, "recall": acc, "f1": acc,
            "false_positives": [1, 2], "false_negatives": [2, 1]}


def results(**acc):
    fams = {"cw": "gradient-based", "rs": "gradient-free", "noise": "random-noise"}
    return {"budget_power_ratio": 0.1, "clean": blk(0.9),
            "attacks": [report.attack_entry(n, fams[n], 0.1, blk(a)) for n, a in acc.items()]}


def test_report_schema_and_families():
    rep = report.build_report(results(cw=0.1, rs=0.5, noise=0.85), THREAT, {"case_study": "a", "seed": 0})
    assert rep["schema"] == "phyadv-report/1"
    assert set(rep["families"]) == {"gradient-based", "gradient-free", "random-noise"}
    assert rep["strongest_attack"]["attacks"] == ["cw"] and not rep["strongest_attack"]["tie"]
    assert rep["threat_model"] == THREAT
    assert rep["adaptive_evaluation"]["status"] == "not-performed"
    row = rep["metric_table"][0]
    assert row["accuracy_delta"] == pytest.approx(-0.8) and row["false_positives_delta_total"] == 0
    assert not rep["anomalies"]


def test_report_refuses_mismatched_budgets():
    res = results(cw=0.1, rs=0.5, noise=0.85)
    res["attacks"][2]["power_ratio"] = 0.2
    with pytest.raises(ReportError, match="matched"):
        report.build_report(res, THREAT, {})


def test_report_records_ties():
    rep = report.build_report(results(cw=0.4, rs=0.4, noise=0.4), THREAT, {})
    assert rep["strongest_attack"]["tie"]
    assert rep["strongest_attack"]["families"] == ["gradient-based", "gradient-free", "random-noise"]


def test_report_flags_noise_anomaly():
    rep = report.build_report(results(cw=0.6, rs=0.7, noise=0.3), THREAT, {})
    assert rep["anomalies"] and "random noise" in rep["anomalies"][0]["rule"]


def test_report_requires_every_family_or_reason():
    res = results(cw=0.1, noise=0.8)
    with pytest.raises(ReportError, match="gradient-free"):
        report.build_report(res, THREAT, {})
    res["skipped"] = {"gradient-free": "not applicable"}
    rep = report.build_report(res, THREAT, {})
    assert rep["families"]["gradient-free"] == {"status": "skipped", "reason": "not applicable"}


def test_report_warns_without_gradient_attack():
    res = results(rs=0.5, noise=0.8)
    res["skipped"] = {"gradient-based": "not run"}
    rep = report.build_report(res, THREAT, {})
    assert any("false sense of security" in x for x in rep["warnings"])


def test_transfer_matrix_summary():
    rep = report.build_report(results(cw=0.1, rs=0.5, noise=0.8), THREAT, {},
                              transfer={"status": "run", "matrix": [[0.9, 0.4], [0.5, 0.8]]})
    assert rep["transferability"]["diagonal_mean"] == pytest.approx(0.85)
    assert rep["transferability"]["off_diagonal_mean"] == pytest.approx(0.45)


# --- experiments and CLI ------------------------------------------------------------------

@pytest.mark.parametrize("case", ["a", "b", "c"])
def test_rerun_reproduces_manifest(tmp_path, case):
    cfg = config.ExperimentConfig.from_dict(TINY[case])
    run_experiment(cfg, tmp_path / "one")
    run_experiment(cfg, tmp_path / "two")
    one = json.loads((tmp_path / "one" / "manifest.json").read_text())
    two = json.loads((tmp_path / "two" / "manifest.json").read_text())
    assert one == two and "report.json" in one["files"]
    rep = json.loads((tmp_path / "one" / "report.json").read_text())
    assert rep["schema"] == "phyadv-report/1"
    assert set(rep["families"]) == {"gradient-based", "gradient-free", "random-noise"}


def test_case_a_emits_curve_csv(tmp_path):
    run_experiment(config.ExperimentConfig.from_dict(TINY["a"]), tmp_path)
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "snr_db,clean_acc,cw_acc,fgsm_acc,jam_acc" and len(lines) == 4
    assert (tmp_path / "records.csv").read_text().startswith("frame_id,success,l2,power_ratio,iters")


def test_report_is_pure_function_of_artifacts(tmp_path):
    run_experiment(config.ExperimentConfig.from_dict(TINY["b"]), tmp_path)
    assert report.generate_report(tmp_path) == report.generate_report(tmp_path)
    assert (tmp_path / "bler.csv").read_text().startswith("ebno_db,bler_clean,bler_jam,bler_adv,trials")


def test_cli_stages_and_exit_codes(tmp_path, capsys):
    path = write_cfg(tmp_path, TINY["b"])
    out = tmp_path / "out"
    assert cli.main(["train", "--config", str(path), "--out", str(out)]) == 0
    assert cli.main(["attack", "--config", str(path), "--out", str(out), "--seed", "0"]) == 0
    assert cli.main(["report", "--config", str(path), "--out", str(out)]) == 0
    assert (out / "report.json").exists() and (out / "report.txt").exists()
    assert cli.main(["simulate", "--config", str(path), "--out", str(out)]) == 2
    bad = write_cfg(tmp_path, {"case_study": "b"}, "bad.yaml")
    assert cli.main(["run", "--config", str(bad), "--out", str(out)]) == 2
    assert "threat-model guideline" in capsys.readouterr().err


def test_cli_numeric_failure_exit_code(tmp_path, monkeypatch):
    from phyadv.errors import TrainingError
    from phyadv.harness import experiment

    def boom(cfg, root):
        raise TrainingError("diverged", 3)
    monkeypatch.setitem(experiment._HANDLERS, ("b", "train"), boom)
    path = write_cfg(tmp_path, TINY["b"])
    assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 3


def test_stage_order_enforced(tmp_path):
    cfg = config.ExperimentConfig.from_dict(TINY["b"])
    with pytest.raises(ConfigError, match="train"):
        run_stage(cfg, "attack", tmp_path)
