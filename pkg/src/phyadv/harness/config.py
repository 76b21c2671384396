"""Experiment configuration: a YAML tree with a fixed, documented schema.

Top level::

    case_study: a | b | c        # classifier / channel autoencoder / feedback-trained autoencoder
    seed: 0                      # every component seed is derived from this one
    threat_model:                # required before anything runs
      knowledge: white-box | grey-box | black-box
      assumptions: "..."
      success_metric: "..."
      phase: evasion             # optional
      goal: integrity            # optional
    <section>: {...}             # optional overrides of the defaults below

Unknown sections or keys are rejected, so a typo never silently falls back
to a default.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..autoenc import AutoencoderConfig
from ..drl import DrlConfig
from ..errors import ConfigError
from ..modclass import ClassifierConfig, CwAttackConfig, ThreatModel
from ..wireless import SNR_GRID

CASE_STUDIES = ("a", "b", "c")

THREAT_MODEL_GUIDELINE = ("threat-model guideline: a threat model must state the assumptions taken, "
                          "the type of adversary and the metrics used before any attack is run")

DEFAULTS = {
    "data": {"per_cell": 200, "test_fraction": 0.5, "snrs": list(SNR_GRID)},
    "classifier": {"epochs": 30, "batch_size": 128, "lr": 1e-3, "augment": None, "augment_power_ratio": 0.05,
                   "rotate": True},
    "attack": {"power_ratio": 0.1, "frames_per_snr": 16, "min_snr": -20,
               "cw": {"steps": 200, "lr": 0.01, "search_steps": 6, "confidence": 0.0, "c_min": 1e-3, "c_max": 1e2},
               "random_search": {"queries": 200}},
    "ood": {"per_cell": 20, "snrs": [5, 7, 9, 11, 13, 15, 17]},
    "transfer": {"seeds": [], "epochs": 5, "frames": 200},
    "autoencoder": {"k": 4, "n": 7, "steps": 4000, "batch_size": 512, "lr": 5e-3, "final_lr": 5e-4,
                    "train_ebno_db": 7.0},
    "perturbation": {"power_ratio": 0.25, "steps": 500, "objective": "hidden"},
    "bler": {"grid": [0, 2, 4, 6, 8, 10, 12], "trials": 100_000, "reference_ebno_db": 8.0},
    "drl": {"sigma_pi": 0.15, "sigma_f": 0.1, "batch_size": 256, "receiver_epochs": 5, "total_steps": 600,
            "channel_ebno_db": 4.0, "tx_lr": 5e-3, "rx_lr": 5e-3, "seeds": [0, 1, 2, 3, 4],
            "window": [200, 400], "policy": "uniform", "pool": 200, "candidates": 250, "surrogate_offset": 1000},
}

# sections that each case study consults
SECTIONS = {
    "a": ("data", "classifier", "attack", "ood", "transfer"),
    "b": ("autoencoder", "perturbation", "bler", "transfer"),
    "c": ("autoencoder", "perturbation", "drl"),
}


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {where}.{key}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key} must be a mapping")
            out[key] = _merge(defaults[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    case_study: str
    threat_model: ThreatModel
    seed: int = 0
    sections: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict, seed: int | None = None) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        raw = dict(raw)
        case = str(raw.pop("case_study", ""))
        if case not in CASE_STUDIES:
            raise ConfigError(f"case_study must be one of {CASE_STUDIES}")
        tm = raw.pop("threat_model", None)
        if not isinstance(tm, dict):
            raise ConfigError(f"missing threat_model ({THREAT_MODEL_GUIDELINE})")
        missing = [k for k in ("knowledge", "assumptions", "success_metric") if not tm.get(k)]
        if missing:
            raise ConfigError(f"threat_model lacks {', '.join(missing)} ({THREAT_MODEL_GUIDELINE})")
        try:
            threat = ThreatModel(**tm)
        except TypeError as exc:
            raise ConfigError(f"bad threat_model: {exc}") from None
        base_seed = raw.pop("seed", 0)
        if seed is not None:
            base_seed = seed
        if not isinstance(base_seed, int) or base_seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        sections = {}
        for name in SECTIONS[case]:
            sections[name] = _merge(DEFAULTS[name], raw.pop(name, None) or {}, name)
        if raw:
            raise ConfigError(f"sections not used by case study {case}: {sorted(raw)}")
        cfg = cls(case, threat, base_seed, sections)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        """Build every module config once so bad values fail before any compute."""
        builders = {"classifier": self.classifier_config, "attack": self.cw_config,
                    "autoencoder": self.autoencoder_config, "drl": self.drl_config}
        for name, build in builders.items():
            if name in self.sections:
                build()
        if "attack" in self.sections and not 0 < self.sections["attack"]["power_ratio"]:
            raise ConfigError("attack.power_ratio must be positive")
        if "drl" in self.sections:
            start, end = self.sections["drl"]["window"]
            if not 0 <= start < end <= self.sections["drl"]["total_steps"]:
                raise ConfigError("drl.window must satisfy 0 <= start < end <= total_steps")

    def to_dict(self) -> dict:
        return {"case_study": self.case_study, "seed": self.seed, "threat_model": self.threat_model.to_dict(),
                **copy.deepcopy(self.sections)}

    def __getitem__(self, name: str) -> dict:
        return self.sections[name]

    # --- module configs --------------------------------------------------------

    def classifier_config(self, seed: int | None = None) -> ClassifierConfig:
        c = self.sections["classifier"]
        return ClassifierConfig(epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"],
                                seed=self.seed if seed is None else seed, augment=c["augment"],
                                augment_power_ratio=c["augment_power_ratio"], rotate=c["rotate"])

    def cw_config(self) -> CwAttackConfig:
        a = self.sections["attack"]
        cw = a["cw"]
        return CwAttackConfig(confidence=cw["confidence"], steps=cw["steps"], lr=cw["lr"],
                              c_range=(cw["c_min"], cw["c_max"]), search_steps=cw["search_steps"],
                              max_power_ratio=a["power_ratio"])

    def autoencoder_config(self, seed: int | None = None) -> AutoencoderConfig:
        a = self.sections["autoencoder"]
        return AutoencoderConfig(k=a["k"], n=a["n"], train_ebno_db=a["train_ebno_db"], steps=a["steps"],
                                 batch_size=a["batch_size"], lr=a["lr"], final_lr=a["final_lr"],
                                 seed=self.seed if seed is None else seed)

    def drl_config(self, seed: int | None = None) -> DrlConfig:
        d = self.sections["drl"]
        return DrlConfig(base=self.autoencoder_config(), sigma_pi=d["sigma_pi"], sigma_f=d["sigma_f"],
                         batch_size=d["batch_size"], receiver_epochs=d["receiver_epochs"],
                         total_steps=d["total_steps"], channel_ebno_db=d["channel_ebno_db"], tx_lr=d["tx_lr"],
                         rx_lr=d["rx_lr"], seed=self.seed if seed is None else seed)


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return ExperimentConfig.from_dict(raw or {}, seed)
