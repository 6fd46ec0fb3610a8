"""
Pydantic schemas for experiment configuration and summary documents.

Every JSON file written by the CLI is an ExperimentReport dump with sorted
keys, so the schemas double as the output contract.
"""

import json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

CRITICAL_LEVEL_NOTE = (
    "The critical level l_c is not estimated. Levels 0, 1.5 and 2 in d=3 are "
    "assumed to lie off criticality; this is an assumption, not a finding."
)


class ExperimentConfig(BaseModel):
    """
    Parameters of one experiment run.

    Loaded from a JSON or TOML file and overridden by CLI flags. Machine-level
    knobs (database, dense budgets) live in Settings instead.
    """

    model_config = ConfigDict(extra="forbid")

    d: int = Field(default=3, ge=1, le=6, description="Lattice dimension")
    model: Literal["gff", "iid"] = Field(default="gff", description="Covariance model")
    levels: list[float] = Field(default_factory=lambda: [0.0], min_length=1)
    R_grid: list[int] = Field(default_factory=lambda: [4], min_length=1)
    replicates: int = Field(default=200, ge=1)
    sampler: Literal["auto", "exact", "torus"] = "auto"
    torus_margin: int | None = Field(default=None, ge=4)
    seed: int | None = Field(default=None, ge=0)
    workers: int | None = Field(default=None, ge=1)
    out: str = "results"
    critical_level_note: str = CRITICAL_LEVEL_NOTE

    # cluster counts
    truncate: int | None = Field(default=None, ge=0, description="Also count clusters of diameter <= truncate")

    # arm decay
    arm_radii: list[int] = Field(default_factory=lambda: [1, 2, 4])
    arm_margin: int = Field(default=2, ge=1)
    pinned: bool = False

    # pivotal intensities
    target: Literal["finite", "stationary", "halfspace", "truncated"] = "stationary"
    points: list[list[int]] = Field(default_factory=lambda: [[0, 0, 0]])
    window_R: int = Field(default=4, ge=1)
    height: int = Field(default=0, ge=0)
    truncation: int = Field(default=2, ge=0)
    budget: int = Field(default=2000, ge=1)

    # chaos decomposition on a small box
    box_shape: list[int] = Field(default_factory=lambda: [2, 2, 2])
    order: int = Field(default=2, ge=1)
    nodes: int = Field(default=8, ge=1)

    # variance scaling
    predict_intercept: bool = False

    # distribution test
    min_replicates: int = Field(default=2000, ge=2)
    reference_samples: int = Field(default=20000, ge=100)

    # kernel constants
    kernel_k: list[int] = Field(default_factory=lambda: [1])
    kernel_alpha: list[float] = Field(default_factory=lambda: [1.0])
    kernel_R: list[int] = Field(default_factory=lambda: [4, 8, 12, 16])
    quadrature_nodes: int = Field(default=16, ge=2)
    green_radius: int = Field(default=5, ge=0, description="G is tabulated on the axis up to this lag")

    # Hermite-2 reference sampler
    hermite_alpha: float = Field(default=1.0, gt=0.0)
    grid_N: int = Field(default=64, ge=4)
    hermite_cutoff: float | None = Field(default=None, gt=0.0)
    hermite_samples: int = Field(default=10000, ge=1)
    hermite_grid_table: list[int] = Field(default_factory=lambda: [8, 16, 32, 64])
    hermite_method: Literal["auto", "spectral", "quadratic"] = "auto"
    hermite_rank: int = Field(default=64, ge=1, description="Leading eigenvalues kept on large grids")

    @model_validator(mode="after")
    def check_consistency(self) -> "ExperimentConfig":
        if any(R < 1 for R in self.R_grid):
            raise ValueError("box half-sides must be >= 1")
        if any(r < 1 for r in self.arm_radii):
            raise ValueError("arm radii must be >= 1")
        if self.points == [[0, 0, 0]] and self.d != 3:
            self.points = [[0] * self.d]
        if self.points and any(len(p) != self.d for p in self.points):
            raise ValueError(f"every point must have {self.d} coordinates")
        if self.model == "gff" and self.d < 3:
            raise ValueError("the GFF needs d >= 3")
        return self

    @classmethod
    def from_file(cls, path: str | Path, **overrides: Any) -> "ExperimentConfig":
        """Load a JSON or TOML config; keyword overrides that are not None win."""
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


class StatSummary(BaseModel):
    """Moments of a replicate sample with batch-means standard errors."""

    n: int
    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float
    mean_se: float
    variance_se: float
    skewness_se: float
    kurtosis_se: float
    batches: int
    ks_statistic: float | None = None
    ks_pvalue: float | None = None


class PivotalEstimateRead(BaseModel):
    """JSON form of a pivotal-intensity estimate."""

    target: str
    points: list[list[int]]
    level: float
    estimate: float
    stderr: float
    budget: int
    window: dict[str, Any]
    sampler: str
    diagnostics: dict[str, float] = Field(default_factory=dict)


class VarianceFit(BaseModel):
    """Weighted log-log fit of Var[N_R] against R at one level."""

    level: float
    slope: float
    slope_se: float
    intercept: float
    envelope_lower: float
    envelope_upper: float
    inside_envelope: bool
    beta_prediction: float | None = None


class DistributionVerdict(BaseModel):
    level: float
    R: int
    summary: StatSummary
    ks_normal_statistic: float
    ks_normal_pvalue: float
    ks_hermite2_statistic: float
    ks_hermite2_pvalue: float
    verdict: Literal["gaussian", "non-gaussian", "no-verdict"]


class StepRead(BaseModel):
    name: str
    status: Literal["success", "warning", "error", "skipped"]
    message: str
    counts: dict[str, float] = Field(default_factory=dict)


class ExperimentReport(BaseModel):
    """
    Summary document written next to every CSV.

    Holds nothing that depends on the worker count or the output directory.
    """

    command: str
    seed: int
    sampler: str
    config: dict[str, Any]
    csv_file: str | None = None
    summary: dict[str, Any] = Field(default_factory=dict)
    steps: list[StepRead] = Field(default_factory=list)
    warnings: list[str] = Field(default_factory=list)
