"""Configuration, experiment runner, robustness report and CLI."""

from .attacks import Oracle, RandomSearchRecord, random_search_attack, random_search_frames
from .config import ExperimentConfig, load_config
from .experiment import run_experiment, run_stage, write_manifest
from .ood import OodSuite, build_ood_suite, ood_probe
from .report import SCHEMA, build_report, generate_report

__all__ = ["Oracle", "RandomSearchRecord", "random_search_attack", "random_search_frames", "ExperimentConfig",
           "load_config", "run_experiment", "run_stage", "write_manifest", "OodSuite", "build_ood_suite",
           "ood_probe", "SCHEMA", "build_report", "generate_report"]
