"""
Pipeline service for running one experiment end to end.

Steps: Validate -> Run -> Write outputs -> Record run. Failures are captured
in the result object together with the exit code the CLI should use.
"""

import csv
import json
import logging
import math
from datetime import datetime
from pathlib import Path
from typing import Any

import numpy as np
from sqlalchemy.orm import Session, sessionmaker

from gfflab.core.config import get_settings
from gfflab.core.errors import GffLabError, NumericalError, UsageError
from gfflab.models.experiment_run import ExperimentRun
from gfflab.schemas import ExperimentConfig, ExperimentReport, StepRead
from gfflab.services.experiment_service import COMMANDS, ExperimentOutput, resolve_seed, resolve_workers

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class PipelineStepResult:
    """
    Result of a single pipeline step.

    Attributes:
        name: Step name (e.g. "Run", "Write outputs")
        status: One of "success", "warning", "error", "skipped"
        message: Human-readable outcome
        counts: Optional metrics (e.g. {"rows": 120})
    """

    def __init__(
        self,
        name: str,
        status: str,  # "success", "warning", "error", "skipped"
        message: str,
        counts: dict[str, float] | None = None,
    ):
        self.name = name
        self.status = status
        self.message = message
        self.counts = counts or {}

    def to_schema(self) -> StepRead:
        return StepRead(name=self.name, status=self.status, message=self.message, counts=self.counts)


class PipelineResult:
    """
    Complete run result.

    Attributes:
        steps: Results of the executed steps
        output: Rows and summary of the experiment, when it ran
        csv_path, json_path: Written files
        warnings: Warning messages
        exit_code: 0 on success, 1 for usage errors, 2 for numerical failures
        run_id: Ledger id when the run was recorded
    """

    def __init__(self, command: str):
        self.command = command
        self.steps: list[PipelineStepResult] = []
        self.output: ExperimentOutput | None = None
        self.csv_path: Path | None = None
        self.json_path: Path | None = None
        self.warnings: list[str] = []
        self.exit_code = EXIT_OK
        self.run_id: int | None = None

    @property
    def ok(self) -> bool:
        return self.exit_code == EXIT_OK

    def to_dict(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "steps": [
                {"name": s.name, "status": s.status, "message": s.message, "counts": s.counts}
                for s in self.steps
            ],
            "warnings": self.warnings,
            "exit_code": self.exit_code,
        }


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy values become Python ones, non-finite floats become None."""
    if isinstance(value, np.ndarray):
        value = value.tolist()
    elif isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def _cell(value: Any) -> Any:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(path: Path, rows: list[dict[str, Any]]) -> None:
    """Write rows with the union of their keys as header, in first-seen order."""
    fields: list[str] = []
    for row in rows:
        fields.extend(k for k in row if k not in fields)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})


def write_report(path: Path, report: ExperimentReport) -> None:
    payload = _clean(report.model_dump(mode="python"))
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _record(
    session_factory: sessionmaker | None,
    command: str,
    cfg: ExperimentConfig,
    result: PipelineResult,
    sampler: str,
    started_at: datetime,
) -> int:
    if session_factory is None:
        from gfflab.core.db import SessionLocal
        from gfflab.core.init_db import init_db

        init_db()
        session_factory = SessionLocal
    db: Session = session_factory()
    try:
        run = ExperimentRun(
            command=command,
            seed=resolve_seed(cfg),
            workers=resolve_workers(cfg),
            sampler=sampler,
            config_json=cfg.model_dump_json(),
            csv_path=str(result.csv_path) if result.csv_path else None,
            json_path=str(result.json_path) if result.json_path else None,
            status="success" if result.ok else "error",
            message=result.steps[-1].message if result.steps else None,
            started_at=started_at,
            finished_at=datetime.utcnow(),
        )
        db.add(run)
        db.commit()
        db.refresh(run)
        return run.id
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()


def run_experiment(
    command: str,
    cfg: ExperimentConfig,
    *,
    record: bool | None = None,
    session_factory: sessionmaker | None = None,
) -> PipelineResult:
    """
    Run ``command`` with ``cfg`` and write <out>/<command>.csv and .json.

    Args:
        command: CLI subcommand name
        cfg: Experiment configuration (seed and workers already resolved or None)
        record: Write a ledger row; defaults to Settings.record_runs
        session_factory: Ledger session factory (the configured one by default)

    Returns:
        PipelineResult; exceptions from the experiment are not raised but
        reflected in the step statuses and the exit code
    """
    result = PipelineResult(command)
    started_at = datetime.utcnow()
    record = get_settings().record_runs if record is None else record

    # Step 1: Validate
    runner = COMMANDS.get(command)
    if runner is None:
        result.steps.append(PipelineStepResult("Validate", "error", f"Unknown command '{command}'"))
        result.exit_code = EXIT_USAGE
        return result
    out_dir = Path(cfg.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        result.steps.append(PipelineStepResult("Validate", "error", f"Cannot create output directory: {e}"))
        result.exit_code = EXIT_USAGE
        return result
    result.steps.append(
        PipelineStepResult("Validate", "success", f"Configuration accepted (seed {resolve_seed(cfg)})")
    )

    # Step 2: Run
    output: ExperimentOutput | None = None
    try:
        output = runner(cfg)
        result.output = output
        result.steps.append(PipelineStepResult("Run", "success", f"{command} finished", {"rows": len(output.rows)}))
    except UsageError as e:
        result.steps.append(PipelineStepResult("Run", "error", f"Invalid request: {e}"))
        result.exit_code = EXIT_USAGE
    except NumericalError as e:
        result.steps.append(PipelineStepResult("Run", "error", f"Numerical failure: {e}"))
        result.exit_code = EXIT_NUMERICAL
    except GffLabError as e:
        result.steps.append(PipelineStepResult("Run", "error", str(e)))
        result.exit_code = EXIT_USAGE

    # Step 3: Write outputs
    if output is not None:
        try:
            result.csv_path = out_dir / f"{command}.csv"
            result.json_path = out_dir / f"{command}.json"
            write_csv(result.csv_path, output.rows)
            report = ExperimentReport(
                command=command,
                seed=resolve_seed(cfg),
                sampler=output.sampler,
                config=cfg.model_dump(exclude={"workers", "out"}),
                csv_file=result.csv_path.name,
                summary=output.summary,
                steps=[step.to_schema() for step in result.steps],
                warnings=result.warnings,
            )
            write_report(result.json_path, report)
            result.steps.append(
                PipelineStepResult("Write outputs", "success", f"Wrote {result.csv_path.name} and {result.json_path.name}")
            )
        except OSError as e:
            result.steps.append(PipelineStepResult("Write outputs", "error", f"Cannot write outputs: {e}"))
            result.exit_code = EXIT_USAGE
    else:
        result.steps.append(PipelineStepResult("Write outputs", "skipped", "Nothing to write"))

    # Step 4: Record run
    if record:
        try:
            result.run_id = _record(session_factory, command, cfg, result, output.sampler if output else "none", started_at)
            result.steps.append(PipelineStepResult("Record run", "success", f"Ledger run id {result.run_id}"))
        except Exception as e:
            logger.warning("Run ledger unavailable: %s", e)
            result.warnings.append(f"Run not recorded: {e}")
            result.steps.append(PipelineStepResult("Record run", "warning", "Run not recorded"))
    else:
        result.steps.append(PipelineStepResult("Record run", "skipped", "Recording disabled"))

    return result
