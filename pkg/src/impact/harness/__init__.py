"""Experiment config, staged pipeline, report and CLI."""

from impact.harness.config import ExperimentConfig, config_from_dict, load_config
from impact.harness.pipeline import STAGES, Pipeline, StageError, derive_seed, run_pipeline
from impact.harness.report import ReportError, emit_report

__all__ = [
    "STAGES",
    "ExperimentConfig",
    "Pipeline",
    "ReportError",
    "StageError",
    "config_from_dict",
    "derive_seed",
    "emit_report",
    "load_config",
    "run_pipeline",
]
