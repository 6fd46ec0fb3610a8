"""
ExperimentRun model for the run ledger.
"""

from datetime import datetime

from sqlalchemy import DateTime, Integer, String, Text
from sqlalchemy.orm import Mapped, mapped_column

from gfflab.core.db import Base


class ExperimentRun(Base):
    """
    One invocation of a CLI subcommand.

    Stores the configuration echo and where the outputs went so that any
    CSV/JSON pair can be traced back to the exact command and seed.
    """

    __tablename__ = "experiment_runs"

    id: Mapped[int] = mapped_column(primary_key=True, autoincrement=True)
    command: Mapped[str] = mapped_column(String(64), nullable=False)
    seed: Mapped[int] = mapped_column(Integer, nullable=False)
    workers: Mapped[int] = mapped_column(Integer, nullable=False, default=1)
    sampler: Mapped[str | None] = mapped_column(String(32), nullable=True)
    config_json: Mapped[str] = mapped_column(Text, nullable=False)
    csv_path: Mapped[str | None] = mapped_column(String(500), nullable=True)
    json_path: Mapped[str | None] = mapped_column(String(500), nullable=True)
    status: Mapped[str] = mapped_column(String(20), nullable=False, default="running")
    message: Mapped[str | None] = mapped_column(Text, nullable=True)
    started_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow, nullable=False)
    finished_at: Mapped[datetime | None] = mapped_column(DateTime, nullable=True)

    def __repr__(self) -> str:
        return f"<ExperimentRun(id={self.id}, command='{self.command}', status='{self.status}')>"
