"""Desk-scale testbed for site leakage in multi-site contrastive pretraining."""

from leakbench.config import ExperimentConfig, load_config
from leakbench.kernels import BACKEND
from leakbench.metrics import aggregate_seeds, roc_auc
from leakbench.protocol import RunRecord, run_cell, run_loso, run_transfer, run_wsite_sweep
from leakbench.report import emit_reports

__all__ = [
    "BACKEND",
    "ExperimentConfig",
    "RunRecord",
    "aggregate_seeds",
    "emit_reports",
    "load_config",
    "roc_auc",
    "run_cell",
    "run_loso",
    "run_transfer",
    "run_wsite_sweep",
]
__version__ = "0.1.0"
