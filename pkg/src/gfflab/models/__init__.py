"""Database models for gfflab."""

from gfflab.models.experiment_run import ExperimentRun

__all__ = ["ExperimentRun"]
