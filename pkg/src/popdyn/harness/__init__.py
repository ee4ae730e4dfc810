"""Experiment harness: configuration, orchestration, artifact export and CLI."""

from .config import load_config, parse_config
from .experiments import RunResult, SummaryRecord, run_mode

__all__ = ["load_config", "parse_config", "run_mode", "RunResult", "SummaryRecord"]
