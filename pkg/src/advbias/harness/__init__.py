"""Experiment grid, audit mode, reports and the command line."""

from .audit import AuditInput, AuditResult, InvalidAuditError, export_scores, run_audit
from .config import ConfigError, ExperimentConfig, ExternalCohort
from .grid import WORKERS_ENV, Cell, CellResult, GridContext, RunSummary, grid_cells, run_grid
from .report import EmptyResultsError, ResultsBundle, emit_report

__all__ = [
    "AuditInput", "AuditResult", "Cell", "CellResult", "ConfigError", "EmptyResultsError", "ExperimentConfig",
    "ExternalCohort", "GridContext", "InvalidAuditError", "ResultsBundle", "RunSummary", "WORKERS_ENV",
    "emit_report", "export_scores", "grid_cells", "run_audit", "run_grid",
]
