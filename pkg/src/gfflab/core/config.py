"""
Configuration settings for gfflab.

Uses Pydantic settings with support for environment variables and .env files.
"""

from functools import lru_cache

from pydantic import Field
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """
    Laboratory settings loaded from environment variables and .env file.

    This class uses Pydantic Settings to load configuration from:
    1. Environment variables (highest priority)
    2. .env file in project root
    3. Default values (lowest priority)

    Per-experiment parameters (levels, box sizes, replicate counts) live in
    ExperimentConfig; this class only holds machine-level knobs and budgets.

    Attributes:
        database_url: SQLAlchemy URL of the run ledger
        record_runs: Whether CLI runs are written to the run ledger
        workers: Default worker count for replicate fan-out
        seed: Default master seed
        log_level: Logging level name
        max_sites: Capacity of the dense site index
        exact_max_sites: Largest site set factorized densely
        torus_margin: Default torus side divided by window side
        hermite_order_cap: Largest |alpha| for symbolic Hermite polynomials
        table_max_sites: Largest domain with an exhaustive cluster-count table
        green_switch_radius: Sup-norm radius beyond which G uses its asymptotic
        batch_size: Number of masks labeled per vectorized batch
    """

    # Run ledger
    database_url: str = Field(
        default="sqlite:///gfflab_runs.db",
        alias="GFFLAB_DATABASE_URL",
        description="SQLAlchemy URL of the experiment run ledger",
    )
    record_runs: bool = Field(
        default=True,
        alias="GFFLAB_RECORD_RUNS",
        description="Record every CLI run in the ledger",
    )

    # Execution
    workers: int = Field(
        default=1,
        ge=1,
        alias="GFFLAB_WORKERS",
        description="Worker processes used for replicate fan-out",
    )
    seed: int = Field(
        default=20240607,
        ge=0,
        alias="GFFLAB_SEED",
        description="Default master seed for per-replicate streams",
    )
    log_level: str = Field(
        default="INFO",
        alias="GFFLAB_LOG_LEVEL",
        description="Logging level (DEBUG, INFO, WARNING, ...)",
    )

    # Numerical budgets
    max_sites: int = Field(
        default=2**31 - 1,
        alias="GFFLAB_MAX_SITES",
        description="Capacity of the dense lattice site index",
    )
    exact_max_sites: int = Field(
        default=20_000,
        alias="GFFLAB_EXACT_MAX_SITES",
        description="Largest site set sampled by dense Cholesky factorization",
    )
    torus_margin: int = Field(
        default=8,
        ge=4,
        alias="GFFLAB_TORUS_MARGIN",
        description="Torus side as a multiple of the window side",
    )
    hermite_order_cap: int = Field(
        default=8,
        alias="GFFLAB_HERMITE_ORDER_CAP",
        description="Largest total order of symbolic multivariate Hermite polynomials",
    )
    table_max_sites: int = Field(
        default=16,
        alias="GFFLAB_TABLE_MAX_SITES",
        description="Largest domain for which all 2^|D| cluster counts are tabulated",
    )
    green_switch_radius: int = Field(
        default=12,
        alias="GFFLAB_GREEN_SWITCH_RADIUS",
        description="Sup-norm radius up to which G is evaluated by quadrature",
    )
    batch_size: int = Field(
        default=256,
        ge=1,
        alias="GFFLAB_BATCH_SIZE",
        description="Masks labeled together in one vectorized union-find pass",
    )

    model_config = {
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "case_sensitive": False,
        "extra": "ignore",
        "populate_by_name": True,
    }


@lru_cache()
def get_settings() -> Settings:
    """
    Get cached settings instance.

    Returns:
        Settings: The laboratory settings instance.
    """
    return Settings()
