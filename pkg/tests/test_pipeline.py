"""
Tests for the experiment pipeline: output files, exit codes and the run ledger.
"""

import json
from unittest.mock import patch

import numpy as np
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from gfflab.core.db import Base
from gfflab.core.errors import NumericalError, UsageError
from gfflab.models.experiment_run import ExperimentRun
from gfflab.schemas import ExperimentConfig
from gfflab.services import experiment_service
from gfflab.services.experiment_service import ExperimentOutput
from gfflab.services.pipeline_service import (
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    _clean,
    run_experiment,
    write_csv,
)


def _cfg(tmp_path, **overrides):
    base = {"d": 2, "model": "iid", "seed": 5, "replicates": 6, "R_grid": [2], "out": str(tmp_path)}
    base.update(overrides)
    return ExperimentConfig(**base)


def _memory_sessions():
    engine = create_engine("sqlite://", connect_args={"check_same_thread": False}, poolclass=StaticPool)
    Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


def test_run_writes_csv_and_json(tmp_path):
    result = run_experiment("cluster-count", _cfg(tmp_path), record=False)
    assert result.exit_code == EXIT_OK
    assert [s.name for s in result.steps] == ["Validate", "Run", "Write outputs", "Record run"]
    assert result.steps[-1].status == "skipped"
    assert result.csv_path == tmp_path / "cluster-count.csv"
    header = result.csv_path.read_text().splitlines()[0]
    assert header.startswith("level,R,replicate,n_plus,n_minus,n_total")
    report = json.loads(result.json_path.read_text())
    assert report["command"] == "cluster-count"
    assert report["csv_file"] == "cluster-count.csv"
    assert report["seed"] == 5
    assert "workers" not in report["config"]
    assert "out" not in report["config"]


def test_outputs_do_not_depend_on_worker_count(tmp_path):
    one = run_experiment("cluster-count", _cfg(tmp_path / "one", workers=1), record=False)
    two = run_experiment("cluster-count", _cfg(tmp_path / "two", workers=2), record=False)
    assert one.csv_path.read_bytes() == two.csv_path.read_bytes()
    assert one.json_path.read_bytes() == two.json_path.read_bytes()


def test_unknown_command_is_a_usage_error(tmp_path):
    result = run_experiment("no-such-command", _cfg(tmp_path), record=False)
    assert result.exit_code == EXIT_USAGE
    assert result.steps[0].status == "error"


def test_numerical_failure_exit_code(tmp_path):
    def failing(cfg):
        raise NumericalError("Cholesky failed")

    with patch.dict(experiment_service.COMMANDS, {"constants": failing}):
        result = run_experiment("constants", _cfg(tmp_path), record=False)
    assert result.exit_code == EXIT_NUMERICAL
    assert result.steps[1].status == "error"
    assert "Cholesky failed" in result.steps[1].message
    assert result.steps[2].status == "skipped"
    assert not (tmp_path / "constants.csv").exists()


def test_usage_failure_exit_code(tmp_path):
    def failing(cfg):
        raise UsageError("window too small")

    with patch.dict(experiment_service.COMMANDS, {"constants": failing}):
        result = run_experiment("constants", _cfg(tmp_path), record=False)
    assert result.exit_code == EXIT_USAGE


def test_run_is_recorded_in_ledger(tmp_path):
    sessions = _memory_sessions()
    result = run_experiment("sample-field", _cfg(tmp_path), record=True, session_factory=sessions)
    assert result.ok
    assert result.steps[-1].status == "success"
    db = sessions()
    try:
        run = db.get(ExperimentRun, result.run_id)
        assert run.command == "sample-field"
        assert run.seed == 5
        assert run.status == "success"
        assert run.sampler == "exact"
        assert json.loads(run.config_json)["model"] == "iid"
    finally:
        db.close()


def test_ledger_failure_is_a_warning(tmp_path):
    def broken():
        raise RuntimeError("database is locked")

    result = run_experiment("sample-field", _cfg(tmp_path), record=True, session_factory=broken)
    assert result.exit_code == EXIT_OK
    assert result.steps[-1].status == "warning"
    assert any("database is locked" in w for w in result.warnings)


def test_csv_cells_and_json_cleaning(tmp_path):
    path = tmp_path / "rows.csv"
    write_csv(path, [{"a": np.float64(0.1), "b": np.int64(3)}, {"a": 1.5, "c": "x"}])
    assert path.read_text() == "a,b,c\n0.1,3,\n1.5,,x\n"
    assert _clean({"x": np.array([1.0, np.nan]), "y": (np.float64(np.inf),)}) == {"x": [1.0, None], "y": [None]}


def test_report_summary_is_cleaned(tmp_path):
    def runner(cfg):
        return ExperimentOutput([{"v": 1.0}], {"nan": float("nan"), "arr": np.arange(2)}, "exact")

    with patch.dict(experiment_service.COMMANDS, {"constants": runner}):
        result = run_experiment("constants", _cfg(tmp_path), record=False)
    report = json.loads(result.json_path.read_text())
    assert report["summary"] == {"arr": [0, 1], "nan": None}
