"""Experiment stages and the artifact directory they fill.

Each stage reads what earlier stages wrote and adds its own files, so the
CLI can run them one at a time and ``run_experiment`` can chain them.
Every file name and column set is fixed; all randomness is derived from
the config's base seed, so a re-run reproduces the manifest exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .. import autoenc as ae
from .. import drl
from .. import modclass as mc
from .. import nn
from ..errors import ConfigError, FormatError
from ..wireless import SCHEMES, jamming_noise, load_dataset, save_dataset, synthesize_dataset
from .attacks import Oracle, random_search_frames
from .config import ExperimentConfig
from .ood import build_ood_suite, ood_probe
from .report import attack_entry, metric_block, write_report

log = logging.getLogger(__name__)

STAGES = {"a": ("generate-data", "train", "attack", "report"),
          "b": ("train", "attack", "report"),
          "c": ("train", "attack", "simulate", "report")}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for row in rows:
            out.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{path.name} not found in {path.parent}; run the {stage} stage first")
    return path


def write_manifest(out) -> dict:
    """sha256 of every file under ``out`` except the manifest itself."""
    root = Path(out)
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {"files": files}
    _write_json(root / "manifest.json", manifest)
    return manifest


def _prepare(cfg: ExperimentConfig, out) -> Path:
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    _write_json(root / "config.json", cfg.to_dict())
    return root


# --- case study a: modulation classifier ---------------------------------------

def _dataset(cfg: ExperimentConfig):
    d = cfg["data"]
    return synthesize_dataset(d["per_cell"], cfg.seed, d["test_fraction"], snrs=tuple(d["snrs"]))


def stage_generate_data(cfg: ExperimentConfig, out) -> None:
    if cfg.case_study != "a":
        raise ConfigError(f"case study {cfg.case_study} generates its data on the fly; no generate-data stage")
    root = _prepare(cfg, out)
    save_dataset(_dataset(cfg), root / "dataset.bin")


def _load_or_make_dataset(cfg, root: Path):
    path = root / "dataset.bin"
    if not path.exists():
        save_dataset(_dataset(cfg), path)
    return load_dataset(path)


def _train_a(cfg, root: Path) -> None:
    ds = _load_or_make_dataset(cfg, root)
    model, history = mc.train_classifier(ds, cfg.classifier_config())
    nn.save_weights(model, root / "classifier.bin")
    _write_csv(root / "history.csv", ["epoch", "train_loss", "train_acc", "test_loss", "test_acc"],
               [[h["epoch"], h["train_loss"], h["train_acc"], h["test_loss"], h["test_acc"]] for h in history])


def _attack_frames(cfg, test):
    a = cfg["attack"]
    rng = np.random.default_rng([cfg.seed, 4])
    picks = []
    for snr in sorted(set(test.snr.tolist())):
        if snr < a["min_snr"]:
            continue
        idx = np.flatnonzero(test.snr == snr)
        picks.append(np.sort(rng.choice(idx, min(a["frames_per_snr"], len(idx)), replace=False)))
    if not picks:
        raise ConfigError("no test frames at or above attack.min_snr")
    return np.concatenate(picks)


def _gaussian_noise(x, power_ratio, seed):
    flat = x.reshape(len(x), -1)
    noise = jamming_noise(flat.shape, power_ratio * np.sum(flat**2, axis=1), np.random.default_rng(seed))
    return noise.reshape(x.shape)


def _transfer_matrix_a(cfg, ds, root: Path, r: float) -> dict:
    t = cfg["transfer"]
    if not t["seeds"]:
        return {"status": "skipped", "reason": "transfer.seeds is empty"}
    test = ds.test_set
    keep = np.flatnonzero(test.snr >= 10)[: t["frames"]]
    x, y = test.x[keep].astype(float), test.labels[keep]
    models = []
    for s in t["seeds"]:
        c = cfg.classifier_config(seed=int(s))
        c.epochs = t["epochs"]
        models.append(mc.train_classifier(ds, c)[0])
    preds = [mc.predict(m, x) == y for m in models]
    eps = mc.fgsm_epsilon(x, r)
    adv = [x + mc.fgsm_attack(m, x, y, eps) for m in models]
    matrix = []
    for i in range(len(models)):
        row = []
        for j, target in enumerate(models):
            both = preds[i] & preds[j]
            row.append(float(np.mean(mc.predict(target, adv[i][both]) != y[both])) if both.any() else 0.0)
        matrix.append(row)
    return {"status": "run", "attack": "fgsm", "sources": list(t["seeds"]), "targets": list(t["seeds"]),
            "matrix": matrix, "frames": int(len(keep))}


def _attack_a(cfg, root: Path) -> None:
    ds = load_dataset(_require(root / "dataset.bin", "generate-data"))
    model = nn.load_weights(_require(root / "classifier.bin", "train"), mc.default_classifier_spec())
    r = cfg["attack"]["power_ratio"]
    test = ds.test_set
    idx = _attack_frames(cfg, test)
    x, y, snr = test.x[idx].astype(float), test.labels[idx], test.snr[idx]
    clean = mc.predict(model, x)

    cw_d, cw_rec = mc.cw_l2_attack(model, x, y, cfg.cw_config())
    cw = mc.predict(model, x + cw_d)
    fgsm = mc.predict(model, x + mc.fgsm_attack(model, x, y, mc.fgsm_epsilon(x, r)))
    noise = mc.predict(model, x + _gaussian_noise(x, r, [cfg.seed, 2]))
    matched = mc.predict(model, x + mc.matched_random_perturbation(cw_d, [cfg.seed, 5]))
    oracle = Oracle(model)
    q = cfg["attack"]["random_search"]["queries"]
    rs_d, rs_rec = random_search_frames(oracle, x, y, r, q, seed=cfg.seed + 3)
    rs = mc.predict(model, x + rs_d)

    rows = []
    for s in sorted(set(snr.tolist())):
        m = snr == s
        rows.append([s] + [float(np.mean(p[m] == y[m])) for p in (clean, cw, fgsm, noise)])
    _write_csv(root / "curve.csv", ["snr_db", "clean_acc", "cw_acc", "fgsm_acc", "jam_acc"], rows)
    frame_ids = np.flatnonzero(~ds.train)[idx]
    _write_csv(root / "records.csv", ["frame_id", "success", "l2", "power_ratio", "iters"],
               [[int(f), int(rec.success), rec.l2, rec.power_ratio, rec.iterations]
                for f, rec in zip(frame_ids, cw_rec)])

    k = len(SCHEMES)
    correct = clean == y
    ratios = [rec.power_ratio for rec, c in zip(cw_rec, correct) if c and rec.success]
    results = {
        "budget_power_ratio": r,
        "seeds": {"base": cfg.seed, "data": cfg.seed, "classifier": cfg.seed, "frames": [cfg.seed, 4],
                  "noise": [cfg.seed, 2], "random_search": cfg.seed + 3},
        "clean": metric_block(clean, y, k),
        "attacks": [
            attack_entry("cw-l2", "gradient-based", r, metric_block(cw, y, k),
                         success_rate=float(np.mean([rec.success for rec in cw_rec]))),
            attack_entry("fgsm", "gradient-based", r, metric_block(fgsm, y, k)),
            attack_entry("random-search", "gradient-free", r, metric_block(rs, y, k),
                         mean_queries=float(np.mean([rec.queries for rec in rs_rec])),
                         success_rate=float(np.mean([rec.success for rec in rs_rec]))),
            attack_entry("gaussian-noise", "random-noise", r, metric_block(noise, y, k)),
        ],
        "skipped": {},
        "summary": {
            "frames": int(len(y)),
            "cw_success_rate_on_correct": float(np.mean([rec.success for rec, c in zip(cw_rec, correct) if c]))
            if correct.any() else None,
            "cw_median_power_ratio": float(np.median(ratios)) if ratios else None,
            "cw_matched_norm_random_accuracy": float(np.mean(matched == y)),
        },
    }
    _write_json(root / "results" / "families.json", results)
    o = cfg["ood"]
    suite = build_ood_suite(o["per_cell"], cfg.seed + 1, tuple(o["snrs"]))
    reference = test.subset(np.isin(test.snr, [s + d for s in o["snrs"] for d in (-1, 1)]))
    _write_json(root / "results" / "ood.json", ood_probe(model, suite, ds.train_set, reference))
    _write_json(root / "results" / "transfer.json", _transfer_matrix_a(cfg, ds, root, r))


# --- case study b: channel autoencoder -------------------------------------------

def _save_ae(autoencoder: ae.Autoencoder, root: Path, prefix: str = "") -> None:
    nn.save_weights(autoencoder.encoder, root / f"{prefix}encoder.bin")
    nn.save_weights(autoencoder.decoder, root / f"{prefix}decoder.bin")


def _load_ae(cfg, root: Path, prefix: str = "", seed: int | None = None) -> ae.Autoencoder:
    c = cfg.autoencoder_config(seed)
    enc = nn.load_weights(_require(root / f"{prefix}encoder.bin", "train"), ae.encoder_spec(c))
    dec = nn.load_weights(_require(root / f"{prefix}decoder.bin", "train"), ae.decoder_spec(c))
    return ae.Autoencoder(c, enc, dec)


def _train_b(cfg, root: Path) -> None:
    model = ae.train_autoencoder(cfg.autoencoder_config())
    _save_ae(model, root)
    _write_csv(root / "history.csv", ["step", "loss"], [[h["step"], h["loss"]] for h in model.history])


def _decisions(model: ae.Autoencoder, ebno: float, trials: int, seed, modifiers):
    rng = np.random.default_rng(seed)
    msgs = rng.integers(0, model.config.m, trials)
    y = ae.encode(model.encoder, msgs) + ae.noise_std(ebno, model.config.rate) * rng.standard_normal(
        (trials, model.config.n))
    side = np.random.default_rng([*np.atleast_1d(seed), 1])
    return msgs, [ae.decode(model.decoder, m.apply(y, model.config.n, side)) for m in modifiers]


def _transfer_matrix_b(cfg, r: float) -> dict:
    t = cfg["transfer"]
    if not t["seeds"]:
        return {"status": "skipped", "reason": "transfer.seeds is empty"}
    p, b = cfg["perturbation"], cfg["bler"]
    models = [ae.train_autoencoder(cfg.autoencoder_config(int(s))) for s in t["seeds"]]
    perts = [ae.craft_universal_perturbations(m.decoder, r, range(5), p["steps"], objective=p["objective"])
             for m in models]
    trials = min(b["trials"], 20_000)
    ebno = b["reference_ebno_db"]
    matrix = []
    for i in range(len(models)):
        row = []
        for target in models:
            clean = ae.bler_curve(target, [ebno], trials, seed=cfg.seed)[0].bler
            hits = [ae.bler_curve(target, [ebno], trials, ae.ChannelModifier.adversarial(u.delta),
                                  seed=cfg.seed)[0].bler > clean for u in perts[i]]
            row.append(float(np.mean(hits)))
        matrix.append(row)
    return {"status": "run", "attack": "universal-perturbation", "sources": list(t["seeds"]),
            "targets": list(t["seeds"]), "matrix": matrix, "perturbations_per_source": 5}


def _attack_b(cfg, root: Path) -> None:
    model = _load_ae(cfg, root)
    p, b = cfg["perturbation"], cfg["bler"]
    r = p["power_ratio"]
    pert = ae.craft_universal_perturbation(model.decoder, r, p["steps"], seed=cfg.seed, objective=p["objective"])
    ae.save_perturbation(pert, root / "perturbation.bin")
    adv_mod = ae.ChannelModifier.adversarial(pert.delta)
    jam_mod = ae.ChannelModifier.jam(pert.power_ratio)
    curves = [ae.bler_curve(model, b["grid"], b["trials"], m, seed=cfg.seed) for m in (None, jam_mod, adv_mod)]
    _write_csv(root / "bler.csv", ["ebno_db", "bler_clean", "bler_jam", "bler_adv", "trials"],
               [[c.ebno_db, c.bler, j.bler, a.bler, c.trials] for c, j, a in zip(*curves)])
    _write_csv(root / "crafting_trace.csv", ["step", "objective"], list(enumerate(pert.trace)))
    ebno = b["reference_ebno_db"]
    msgs, (clean, jam, adv) = _decisions(model, ebno, min(b["trials"], 20_000), [cfg.seed, 7],
                                         [ae.ChannelModifier(), jam_mod, adv_mod])
    k = model.config.m
    results = {
        "budget_power_ratio": pert.power_ratio,
        "seeds": {"base": cfg.seed, "autoencoder": cfg.seed, "crafting": cfg.seed, "bler": cfg.seed},
        "clean": metric_block(clean, msgs, k),
        "attacks": [attack_entry("universal-perturbation", "gradient-based", pert.power_ratio,
                                 metric_block(adv, msgs, k), layer_means=pert.layer_means),
                    attack_entry("jamming", "random-noise", pert.power_ratio, metric_block(jam, msgs, k))],
        "skipped": {"gradient-free": "no query-only attack is defined for a universal decoder perturbation"},
        "summary": {
            "reference_ebno_db": ebno,
            "adv_at_or_above_jam_fraction": float(np.mean([a.bler >= j.bler for j, a in zip(curves[1], curves[2])])),
            "low_confidence_points": [c.ebno_db for curve in curves for c in curve if c.low_confidence],
            "configured_power_ratio": r,
        },
    }
    _write_json(root / "results" / "families.json", results)
    _write_json(root / "results" / "transfer.json", _transfer_matrix_b(cfg, pert.power_ratio))


# --- case study c: feedback-trained autoencoder -----------------------------------

def _surrogate_seed(cfg) -> int:
    return cfg.seed + cfg["drl"]["surrogate_offset"]


def _train_c(cfg, root: Path) -> None:
    surrogate = ae.train_autoencoder(cfg.autoencoder_config(_surrogate_seed(cfg)))
    _save_ae(surrogate, root, "surrogate_")


def _attack_c(cfg, root: Path) -> None:
    d, p = cfg["drl"], cfg["perturbation"]
    surrogate = _load_ae(cfg, root, "surrogate_", _surrogate_seed(cfg))
    source = drl.craft_source_run(surrogate, d["candidates"], p["power_ratio"], p["steps"],
                                  seed=_surrogate_seed(cfg), objective=p["objective"])
    pool = drl.transfer_perturbations(source, d["pool"], d["channel_ebno_db"], seed=cfg.seed)
    n = surrogate.config.n
    nn.write_container(root / "pool.bin", [("UPERT", (n,), [m.delta]) for m in pool], _surrogate_seed(cfg))
    _write_csv(root / "pool.csv", ["rank", "crafting_seed", "surrogate_bler", "clean_bler"],
               [[i, m.perturbation.seed, m.surrogate_bler, m.clean_bler] for i, m in enumerate(pool)])


def _load_pool(root: Path) -> np.ndarray:
    records, _, _ = nn.read_container(_require(root / "pool.bin", "attack"))
    if not records or any(kind != "UPERT" for kind, _, _ in records):
        raise FormatError("pool.bin must hold UPERT records only")
    return np.stack([t[0] for _, _, t in records])


def _simulate_c(cfg, root: Path) -> None:
    d = cfg["drl"]
    pool = _load_pool(root)
    start, end = d["window"]
    jam_pool = jamming_noise(pool.shape, np.sum(pool**2, axis=1), np.random.default_rng([cfg.seed, 9]))
    ratio = float(np.mean(np.sum(pool**2, axis=1)) / pool.shape[1])
    traces, jam_traces, clean_traces, rates, summaries = [], [], [], [], []
    for s in d["seeds"]:
        s = int(s)
        dc = cfg.drl_config(seed=s)
        sched = drl.AttackSchedule(list(pool), start, end, d["policy"], seed=s)
        trace, (enc, dec) = drl.run_simulation(dc, sched, snapshot_at=start)
        trace.to_csv(root / f"trace_seed{s}.csv")
        jam_traces.append(drl.run_simulation(dc, drl.AttackSchedule(list(jam_pool), start, end, d["policy"], seed=s)))
        clean_traces.append(drl.run_simulation(dc))
        rate, _, _ = drl.transfer_rate(pool, enc, dec, d["channel_ebno_db"], seed=s)
        traces.append(trace)
        rates.append(rate)
        summaries.append(trace.summary(plateau=(max(0, start - 50), start), window=(start, end)))
    drl.write_aggregate_csv(traces, root / "trace_mean.csv")

    def window_acc(ts):
        return {"accuracy": float(np.mean([t.mean(start, end) for t in ts]))}

    results = {
        "budget_power_ratio": ratio,
        "seeds": {"base": cfg.seed, "simulations": list(d["seeds"]), "surrogate": _surrogate_seed(cfg),
                  "jamming": [cfg.seed, 9]},
        "clean": window_acc(clean_traces),
        "attacks": [attack_entry("transferred-pool", "gradient-based", ratio, window_acc(traces),
                                 note="crafted with gradients on an independent surrogate, applied black-box"),
                    attack_entry("jamming", "random-noise", ratio, window_acc(jam_traces))],
        "skipped": {"gradient-free": "the broadcast adversary has no query access to the live receiver"},
        "summary": {
            "plateau": float(np.mean([s["plateau"] for s in summaries])),
            "window": float(np.mean([s["window"] for s in summaries])),
            "tail": float(np.mean([s["tail"] for s in summaries])),
            "per_seed": summaries,
            "transfer_rates": rates,
        },
    }
    _write_json(root / "results" / "families.json", results)
    _write_json(root / "results" / "transfer.json",
                {"status": "run", "attack": "transferred-pool", "sources": ["surrogate"],
                 "targets": list(d["seeds"]), "matrix": [rates]})


# --- dispatch -------------------------------------------------------------------

_HANDLERS = {
    ("a", "train"): _train_a, ("a", "attack"): _attack_a,
    ("b", "train"): _train_b, ("b", "attack"): _attack_b,
    ("c", "train"): _train_c, ("c", "attack"): _attack_c, ("c", "simulate"): _simulate_c,
}


def run_stage(cfg: ExperimentConfig, stage: str, out) -> Path:
    if stage not in STAGES[cfg.case_study]:
        raise ConfigError(f"case study {cfg.case_study} has no {stage} stage (stages: {STAGES[cfg.case_study]})")
    root = _prepare(cfg, out)
    if stage == "generate-data":
        stage_generate_data(cfg, root)
    elif stage == "report":
        write_report(root)
    else:
        _HANDLERS[(cfg.case_study, stage)](cfg, root)
    write_manifest(root)
    log.info("stage %s done in %s", stage, root)
    return root


def run_experiment(cfg: ExperimentConfig, out) -> Path:
    """Run every stage of the config's case study into ``out``."""
    for stage in STAGES[cfg.case_study]:
        run_stage(cfg, stage, out)
    return Path(out)
