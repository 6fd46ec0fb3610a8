"""
Database initialization helper.

Creates the run-ledger tables based on the SQLAlchemy models.
"""

from sqlalchemy.engine import Engine

from gfflab.core.db import Base, engine
from gfflab.models import ExperimentRun  # noqa: F401 - register the model


def init_db(bind: Engine | None = None) -> None:
    """
    Create all ledger tables (idempotent).

    Args:
        bind: Engine to use; defaults to the configured engine
    """
    Base.metadata.create_all(bind=bind or engine)


if __name__ == "__main__":
    init_db()
    print("Run ledger tables created successfully.")
