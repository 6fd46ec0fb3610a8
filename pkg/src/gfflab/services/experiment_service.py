"""
Experiment harness: density curves, variance scaling, distribution shape,
arm decay, and the thin runners behind the remaining CLI subcommands.

Every runner takes an ExperimentConfig and returns the CSV rows plus a JSON
summary. Replicate i of box size R draws from replicate_stream(seed, i, R),
and all reductions run in replicate order, so outputs do not depend on the
worker count.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import stats

from gfflab.core.config import get_settings
from gfflab.core.errors import NumericalError, UsageError
from gfflab.core.parallel import map_replicates
from gfflab.core.rng import replicate_stream
from gfflab.schemas import DistributionVerdict, ExperimentConfig, StatSummary, VarianceFit
from gfflab.services import chaos_service, kernel_service
from gfflab.services.cluster_service import (
    ExcursionSet,
    arm_event,
    count_clusters,
    count_truncated,
    density_estimator,
    label_clusters,
)
from gfflab.services.gaussian_service import make_sampler
from gfflab.services.green_service import CovarianceModel, asymptotic_constant, green_function
from gfflab.services.lattice_service import make_box, rectangle_domain
from gfflab.services.reference_sampler_service import hermite2_variance_table, sample_hermite2

logger = logging.getLogger(__name__)

BATCHES = 20
KS_LEVEL = 0.01


class ExperimentError(UsageError):
    """An experiment cannot run with the given configuration."""

    pass


class DegenerateVarianceError(NumericalError):
    """A replicate sample has zero variance where a spread is required."""

    pass


@dataclass
class ExperimentOutput:
    """CSV rows, JSON summary and the sampler label of one run."""

    rows: list[dict[str, Any]]
    summary: dict[str, Any] = field(default_factory=dict)
    sampler: str = "none"


def make_model(cfg: ExperimentConfig, d: int | None = None) -> CovarianceModel:
    d = cfg.d if d is None else d
    return CovarianceModel.gff(d) if cfg.model == "gff" else CovarianceModel.iid(d)


def resolve_seed(cfg: ExperimentConfig) -> int:
    return cfg.seed if cfg.seed is not None else get_settings().seed


def resolve_workers(cfg: ExperimentConfig) -> int:
    return cfg.workers if cfg.workers is not None else get_settings().workers


def _moments(x: np.ndarray) -> tuple[float, float, float, float]:
    """(mean, unbiased variance, skewness, excess kurtosis); summed with math.fsum."""
    n = x.size
    if np.all(x == x[0]):
        return float(x[0]), 0.0, 0.0, 0.0
    mean = math.fsum(x) / n
    c = x - mean
    m2 = math.fsum(c * c) / n
    m3 = math.fsum(c**3) / n
    m4 = math.fsum(c**4) / n
    variance = m2 * n / (n - 1)
    if m2 == 0.0:
        return mean, variance, 0.0, 0.0
    return mean, variance, m3 / m2**1.5, m4 / m2**2 - 3.0


def summarize(
    values: Sequence[float] | np.ndarray,
    reference: str | np.ndarray | None = None,
    batches: int = BATCHES,
) -> StatSummary:
    """
    Moments of a replicate sample with batch-means standard errors.

    The sample is cut into contiguous batches in input order; each statistic's
    standard error is the spread of its per-batch values over sqrt(batches).
    ``reference`` adds a KS test: "norm" tests the standardized sample against
    N(0, 1); an array runs a two-sample test against it.

    Raises:
        ExperimentError: With fewer than two values
    """
    x = np.asarray(values, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise ExperimentError("summaries need at least two values")
    mean, variance, skew, kurt = _moments(x)
    n_batches = min(batches, n // 2)
    if n_batches >= 2:
        per_batch = np.array([_moments(chunk) for chunk in np.array_split(x, n_batches)])
        errors = per_batch.std(axis=0, ddof=1) / math.sqrt(n_batches)
    else:
        errors = np.full(4, float("nan"))
    ks_stat = ks_p = None
    if reference is not None and variance > 0.0:
        z = (x - mean) / math.sqrt(variance)
        if isinstance(reference, str):
            result = stats.kstest(z, reference)
        else:
            result = stats.ks_2samp(z, np.asarray(reference, dtype=float))
        ks_stat, ks_p = float(result.statistic), float(result.pvalue)
    return StatSummary(
        n=n,
        mean=mean,
        variance=variance,
        skewness=skew,
        excess_kurtosis=kurt,
        mean_se=float(errors[0]),
        variance_se=float(errors[1]),
        skewness_se=float(errors[2]),
        kurtosis_se=float(errors[3]),
        batches=n_batches,
        ks_statistic=ks_stat,
        ks_pvalue=ks_p,
    )


def _sampler_for(cfg: ExperimentConfig, model: CovarianceModel, R: int):
    box = make_box(model.d, R)
    sampler = make_sampler(model, box, kind=cfg.sampler, margin=cfg.torus_margin)
    return box, sampler


def _count_job(index: int, payload: dict[str, Any]) -> np.ndarray:
    """Per level: N^+, N^-, N, count density, inverse-size density and N_{<=r} for one replicate."""
    rng = replicate_stream(payload["seed"], index, payload["R"])
    box = payload["box"]
    truncate = payload.get("truncate")
    values = payload["sampler"].sample_many(1, rng)[0]
    out = np.zeros((len(payload["levels"]), 6))
    for k, level in enumerate(payload["levels"]):
        lab = label_clusters(ExcursionSet.from_values(box, values, level))
        n_plus, n_minus, n = count_clusters(lab)
        small = count_truncated(lab, truncate)[0] if truncate is not None else 0
        out[k] = (n_plus, n_minus, n, density_estimator(lab, "count"), density_estimator(lab, "inverse-size"), small)
    return out


def _replicate_counts(cfg: ExperimentConfig, R: int, model: CovarianceModel | None = None) -> tuple[np.ndarray, str]:
    """Array (replicates, levels, 6) of per-replicate counts on Lambda_R."""
    model = model or make_model(cfg)
    box, sampler = _sampler_for(cfg, model, R)
    payload = {
        "seed": resolve_seed(cfg),
        "R": R,
        "box": box,
        "sampler": sampler,
        "levels": list(cfg.levels),
        "truncate": cfg.truncate,
    }
    results = map_replicates(_count_job, cfg.replicates, payload, workers=resolve_workers(cfg))
    logger.info("Counted clusters in %d replicates on Lambda_%d (%s sampler)", cfg.replicates, R, sampler.kind)
    return np.stack(results), sampler.kind


def _provenance(cfg: ExperimentConfig, sampler: str, window: str) -> dict[str, Any]:
    return {"seed": resolve_seed(cfg), "sampler": sampler, "window": window}


def run_sample_field(cfg: ExperimentConfig) -> ExperimentOutput:
    """One field sample on Lambda_R for the first R of the grid, flagged against the first level."""
    model = make_model(cfg)
    R = cfg.R_grid[0]
    level = cfg.levels[0]
    box, sampler = _sampler_for(cfg, model, R)
    values = sampler.sample_many(1, replicate_stream(resolve_seed(cfg), 0, R))[0]
    rows = []
    for coords, value in zip(box.coords.tolist(), values):
        row = {f"x{i + 1}": c for i, c in enumerate(coords)}
        row["value"] = float(value)
        row["above"] = int(value > level)
        rows.append(row)
    summary = {"R": R, "n_sites": box.n_sites, "level": level, "fraction_above": float(np.mean(values > level))}
    return ExperimentOutput(rows, summary, sampler.kind)


def run_cluster_count(cfg: ExperimentConfig) -> ExperimentOutput:
    """Per-replicate N^+, N^- and N for every level and box size."""
    rows = []
    sampler = "none"
    for R in cfg.R_grid:
        counts, sampler = _replicate_counts(cfg, R)
        for i in range(counts.shape[0]):
            for k, level in enumerate(cfg.levels):
                row = {
                    "level": level,
                    "R": R,
                    "replicate": i,
                    "n_plus": int(counts[i, k, 0]),
                    "n_minus": int(counts[i, k, 1]),
                    "n_total": int(counts[i, k, 2]),
                }
                if cfg.truncate is not None:
                    row["n_le_r"] = int(counts[i, k, 5])
                rows.append({**row, **_provenance(cfg, sampler, f"Lambda_{R}")})
    return ExperimentOutput(rows, {"rows": len(rows)}, sampler)


def run_density_curve(cfg: ExperimentConfig) -> ExperimentOutput:
    """
    Rows (level, R, mu_count, mu_invsize, ...) with batch-means standard errors.

    The summary reports the largest mirror-level discrepancy |mu(l) - mu(-l)|
    in units of the joint standard error.
    """
    rows = []
    sampler = "none"
    for R in cfg.R_grid:
        counts, sampler = _replicate_counts(cfg, R)
        for k, level in enumerate(cfg.levels):
            count_summary = summarize(counts[:, k, 3])
            inverse_summary = summarize(counts[:, k, 4])
            side = (2 * R + 1) ** cfg.d
            rows.append(
                {
                    "level": level,
                    "R": R,
                    "mu_count": count_summary.mean,
                    "mu_count_se": count_summary.mean_se,
                    "mu_invsize": inverse_summary.mean,
                    "mu_invsize_se": inverse_summary.mean_se,
                    "mu_plus": float(counts[:, k, 0].mean() / side),
                    "mu_minus": float(counts[:, k, 1].mean() / side),
                    "replicates": cfg.replicates,
                    **_provenance(cfg, sampler, f"Lambda_{R}"),
                }
            )
    asymmetry = 0.0
    by_key = {(row["level"], row["R"]): row for row in rows}
    for (level, R), row in by_key.items():
        mirror = by_key.get((-level, R))
        if mirror is not None and level > 0:
            se = math.hypot(row["mu_count_se"], mirror["mu_count_se"])
            if se > 0:
                asymmetry = max(asymmetry, abs(row["mu_count"] - mirror["mu_count"]) / se)
    return ExperimentOutput(
        rows, {"mirror_discrepancy_se": asymmetry, "critical_level_note": cfg.critical_level_note}, sampler
    )


def fit_log_log(R: Sequence[float], variance: Sequence[float], variance_se: Sequence[float]) -> tuple[float, float, float]:
    """
    Weighted least squares of log Var on log R; returns (slope, slope_se, intercept).

    Weights are Var / SE(Var), the inverse standard errors of log Var.
    """
    x = np.log(np.asarray(R, dtype=float))
    y = np.log(np.asarray(variance, dtype=float))
    se = np.asarray(variance_se, dtype=float) / np.asarray(variance, dtype=float)
    w = np.where(np.isfinite(se) & (se > 0), 1.0 / np.where(se > 0, se, 1.0), 1.0)
    design = np.stack([np.ones_like(x), x], axis=1) * w[:, None]
    coef, *_ = np.linalg.lstsq(design, y * w, rcond=None)
    covariance = np.linalg.pinv(design.T @ design)
    return float(coef[1]), float(math.sqrt(max(covariance[1, 1], 0.0))), float(coef[0])


def run_variance_scaling(cfg: ExperimentConfig) -> ExperimentOutput:
    """
    Var[N_R] per level and R, a log-log slope fit, and the growth envelope.

    The envelope constants c1 = Var/R^d and c2 = Var/R^{d+2} are fixed at the
    smallest R; later variances must lie in [c1 R^d, c2 R^{d+2}] up to three
    standard errors.

    Raises:
        ExperimentError: If fewer than two box sizes give a positive variance
    """
    d = cfg.d
    per_R = {}
    sampler = "none"
    for R in sorted(cfg.R_grid):
        per_R[R], sampler = _replicate_counts(cfg, R)
    rows = []
    fits = []
    for k, level in enumerate(cfg.levels):
        usable = []
        for R, counts in per_R.items():
            s = summarize(counts[:, k, 2])
            rows.append(
                {
                    "level": level,
                    "R": R,
                    "mean_N": s.mean,
                    "var_N": s.variance,
                    "var_se": s.variance_se,
                    "var_over_Rd": s.variance / R**d,
                    "var_over_Rd2": s.variance / R ** (d + 2),
                    "replicates": cfg.replicates,
                    **_provenance(cfg, sampler, f"Lambda_{R}"),
                }
            )
            if s.variance > 0:
                usable.append((R, s.variance, s.variance_se))
        if len(usable) < 2:
            raise ExperimentError(f"fewer than 2 usable box sizes at level {level}")
        Rs, variances, errors = zip(*usable)
        slope, slope_se, intercept = fit_log_log(Rs, variances, errors)
        R0, v0, e0 = usable[0]
        rel0 = e0 / v0 if np.isfinite(e0) else 0.0
        c1, c2 = v0 / R0**d, v0 / R0 ** (d + 2)
        inside = all(
            v + 3 * (e if np.isfinite(e) else 0.0) >= c1 * R**d * (1 - 3 * rel0)
            and v - 3 * (e if np.isfinite(e) else 0.0) <= c2 * R ** (d + 2) * (1 + 3 * rel0)
            for R, v, e in usable
        )
        prediction = _beta_prediction(cfg, level) if cfg.predict_intercept else None
        fits.append(
            VarianceFit(
                level=level,
                slope=slope,
                slope_se=slope_se,
                intercept=intercept,
                envelope_lower=c1,
                envelope_upper=c2,
                inside_envelope=inside,
                beta_prediction=prediction,
            )
        )
        logger.info("Level %.3g: variance slope %.3f +- %.3f", level, slope, slope_se)
    summary: dict[str, Any] = {"fits": [fit.model_dump() for fit in fits]}
    if cfg.predict_intercept and cfg.model == "gff":
        beta = kernel_service.beta_constant(d, 1, cfg.kernel_R).extrapolated
        summary["upper_bound_constant"] = d**2 * beta / green_function(d, (0,) * d)
    return ExperimentOutput(rows, summary, sampler)


def _beta_prediction(cfg: ExperimentConfig, level: float) -> float:
    """beta_{d,1} mu'(l)^2, the predicted Var[N_R] / R^{d+2}."""
    model = make_model(cfg)
    beta = kernel_service.beta_constant(cfg.d, 1, cfg.kernel_R, model).extrapolated
    rng = replicate_stream(resolve_seed(cfg), 0, 7)
    derivative = chaos_service.mu_derivative(model, level, 1, cfg.window_R, cfg.budget, rng, sampler=cfg.sampler)
    return beta * derivative.value**2


def run_distribution_test(cfg: ExperimentConfig, min_replicates: int | None = None) -> ExperimentOutput:
    """
    Shape of the standardized count at the largest R: moments, KS against the
    standard normal and KS against an order-2 Hermite reference sample.

    The sign-cluster count in d = 3 at level 0 gets no verdict.

    Raises:
        ExperimentError: If the replicate budget is below the minimum
        DegenerateVarianceError: If the counts do not vary
    """
    minimum = cfg.min_replicates if min_replicates is None else min_replicates
    if cfg.replicates < minimum:
        raise ExperimentError(f"distribution tests need at least {minimum} replicates, got {cfg.replicates}")
    R = max(cfg.R_grid)
    counts, sampler = _replicate_counts(cfg, R)
    reference = None
    if cfg.d == 3:
        reference = sample_hermite2(
            3, cfg.hermite_alpha, cfg.grid_N, cfg.hermite_cutoff, cfg.reference_samples,
            replicate_stream(resolve_seed(cfg), 0, 2), method=cfg.hermite_method, rank=cfg.hermite_rank,
        )
    rows = []
    verdicts = []
    for k, level in enumerate(cfg.levels):
        values = counts[:, k, 2]
        summary = summarize(values, reference="norm")
        if summary.variance <= 0.0:
            raise DegenerateVarianceError(f"cluster counts at level {level} have zero variance")
        z = (values - summary.mean) / math.sqrt(summary.variance)
        normal = stats.kstest(z, "norm")
        hermite = stats.ks_2samp(z, reference) if reference is not None else None
        if cfg.d == 3 and level == 0.0:
            verdict = "no-verdict"
        else:
            verdict = "gaussian" if normal.pvalue > KS_LEVEL else "non-gaussian"
        result = DistributionVerdict(
            level=level,
            R=R,
            summary=summary,
            ks_normal_statistic=float(normal.statistic),
            ks_normal_pvalue=float(normal.pvalue),
            ks_hermite2_statistic=float(hermite.statistic) if hermite else float("nan"),
            ks_hermite2_pvalue=float(hermite.pvalue) if hermite else float("nan"),
            verdict=verdict,
        )
        verdicts.append(result.model_dump())
        rows.append(
            {
                "level": level,
                "R": R,
                "n": summary.n,
                "skewness": summary.skewness,
                "skewness_se": summary.skewness_se,
                "excess_kurtosis": summary.excess_kurtosis,
                "kurtosis_se": summary.kurtosis_se,
                "ks_normal_p": result.ks_normal_pvalue,
                "ks_hermite2_p": result.ks_hermite2_pvalue,
                "verdict": verdict,
                **_provenance(cfg, sampler, f"Lambda_{R}"),
            }
        )
    return ExperimentOutput(rows, {"verdicts": verdicts}, sampler)


def _arm_job(index: int, payload: dict[str, Any]) -> np.ndarray:
    rng = replicate_stream(payload["seed"], index, payload["W"], 1)
    box = payload["box"]
    values = payload["sampler"].sample_many(1, rng)[0]
    origin = (0,) * box.d
    hits = np.zeros((len(payload["levels"]), len(payload["radii"])), dtype=bool)
    for a, level in enumerate(payload["levels"]):
        mask = values > level
        for b, r in enumerate(payload["radii"]):
            hits[a, b] = arm_event(box, mask, origin, r)
    return hits


def one_sided_upper(n: int, confidence: float = 0.95) -> float:
    """Upper confidence bound on p after zero hits in n trials."""
    return 1.0 - (1.0 - confidence) ** (1.0 / n)


def _monotone(rows: list[dict[str, Any]]) -> bool:
    return all(
        b["p_hat"] <= a["p_hat"] + 2.0 * math.hypot(a["stderr"], b["stderr"])
        for a, b in zip(rows, rows[1:])
    )


def run_arm_decay(cfg: ExperimentConfig) -> ExperimentOutput:
    """
    Truncated arm probabilities from the origin for every level and radius.

    The window is Lambda_W with W = max radius + margin. With ``pinned`` the
    pinned variant given f(0) = l is estimated too. Zero hits produce a
    one-sided 95% upper bound instead of a point estimate.
    """
    model = make_model(cfg)
    radii = sorted(cfg.arm_radii)
    W = max(radii) + cfg.arm_margin
    box, sampler = _sampler_for(cfg, model, W)
    seed = resolve_seed(cfg)
    payload = {"seed": seed, "W": W, "box": box, "sampler": sampler, "levels": list(cfg.levels), "radii": radii}
    hits = np.stack(map_replicates(_arm_job, cfg.replicates, payload, workers=resolve_workers(cfg)))
    n = cfg.replicates
    sensitivity = _torus_sensitivity(cfg, model, box, sampler, payload, hits)
    rows = []
    monotone = {}
    for a, level in enumerate(cfg.levels):
        level_rows = []
        for b, r in enumerate(radii):
            k = int(hits[:, a, b].sum())
            p = k / n
            level_rows.append(
                {
                    "level": level,
                    "r": r,
                    "p_hat": p if k else float("nan"),
                    "stderr": math.sqrt(p * (1 - p) / n),
                    "upper_bound": one_sided_upper(n) if k == 0 else float("nan"),
                    "hits": k,
                    "pinned": False,
                    **_provenance(cfg, sampler.kind, f"Lambda_{W}"),
                }
            )
        monotone[f"{level}:unpinned"] = _monotone([_filled(row) for row in level_rows])
        rows.extend(level_rows)
        if cfg.pinned:
            pinned_rows = []
            for b, r in enumerate(radii):
                estimate = chaos_service.pinned_arm_probability(
                    model, level, [(0,) * cfg.d], r, W, n, replicate_stream(seed, a, r, 3)
                )
                hits_pinned = int(round(estimate.estimate * n))
                pinned_rows.append(
                    {
                        "level": level,
                        "r": r,
                        "p_hat": estimate.estimate if hits_pinned else float("nan"),
                        "stderr": estimate.stderr,
                        "upper_bound": one_sided_upper(n) if hits_pinned == 0 else float("nan"),
                        "hits": hits_pinned,
                        "pinned": True,
                        **_provenance(cfg, "conditional", f"Lambda_{W}"),
                    }
                )
            monotone[f"{level}:pinned"] = _monotone([_filled(row) for row in pinned_rows])
            rows.extend(pinned_rows)
    summary: dict[str, Any] = {"monotone": monotone, "window_R": W}
    if sensitivity is not None:
        summary["torus_sensitivity"] = sensitivity
    return ExperimentOutput(rows, summary, sampler.kind)


def _torus_sensitivity(
    cfg: ExperimentConfig,
    model: CovarianceModel,
    box,
    sampler,
    payload: dict[str, Any],
    hits: np.ndarray,
) -> dict[str, Any] | None:
    """
    Unpinned arm estimates redrawn on a torus twice as large.

    Only torus runs are checked. Differences are reported per level and
    radius next to their joint standard error; nothing is asserted.
    """
    if sampler.kind != "torus":
        return None
    margin = cfg.torus_margin if cfg.torus_margin is not None else get_settings().torus_margin
    wide = make_sampler(model, box, kind="torus", margin=2 * margin)
    wide_hits = np.stack(
        map_replicates(_arm_job, cfg.replicates, {**payload, "sampler": wide}, workers=resolve_workers(cfg))
    )
    n = cfg.replicates
    out = {"margins": [margin, 2 * margin], "delta": {}}
    for a, level in enumerate(cfg.levels):
        for b, r in enumerate(payload["radii"]):
            p, q = hits[:, a, b].mean(), wide_hits[:, a, b].mean()
            se = math.sqrt((p * (1 - p) + q * (1 - q)) / n)
            out["delta"][f"{level}:{r}"] = {"p_narrow": float(p), "p_wide": float(q), "diff": float(q - p), "se": se}
    return out


def _filled(row: dict[str, Any]) -> dict[str, Any]:
    """Row with zero-hit estimates replaced by 0 for the monotonicity check."""
    if row["hits"] == 0:
        return {**row, "p_hat": 0.0, "stderr": 0.0}
    return row


def run_pivotal_intensity(cfg: ExperimentConfig) -> ExperimentOutput:
    """One pivotal-intensity estimate per level for the configured target."""
    model = make_model(cfg)
    seed = resolve_seed(cfg)
    rows = []
    estimates = []
    for k, level in enumerate(cfg.levels):
        rng = replicate_stream(seed, k, 5)
        if cfg.target == "stationary":
            est = chaos_service.stationary_pivotal_intensity(
                model, level, cfg.points, cfg.window_R, cfg.budget, rng, sampler=cfg.sampler
            )
        elif cfg.target == "halfspace":
            est = chaos_service.halfspace_pivotal_intensity(model, level, cfg.height, cfg.window_R, cfg.budget, rng)
        elif cfg.target == "truncated":
            est = chaos_service.truncated_pivotal_intensity(
                model, level, cfg.points, cfg.truncation, cfg.window_R, cfg.budget, rng, sampler=cfg.sampler
            )
        else:
            box = make_box(cfg.d, cfg.window_R)
            est = chaos_service.pivotal_intensity(model, box, level, cfg.points, cfg.budget, rng)
        estimates.append(est)
        rows.append(
            {
                "target": est.target,
                "level": level,
                "points": ";".join(",".join(str(c) for c in p) for p in est.points),
                "estimate": est.estimate,
                "stderr": est.stderr,
                "budget": est.budget,
                **_provenance(cfg, est.sampler, f"Lambda_{cfg.window_R}"),
            }
        )
    summary = {
        "estimates": [
            {
                "target": e.target,
                "points": [list(p) for p in e.points],
                "level": e.level,
                "estimate": e.estimate,
                "stderr": e.stderr,
                "budget": e.budget,
                "window": e.window,
                "sampler": e.sampler,
                "diagnostics": e.diagnostics,
            }
            for e in estimates
        ]
    }
    return ExperimentOutput(rows, summary, estimates[0].sampler if estimates else "none")


def run_chaos_decompose(cfg: ExperimentConfig) -> ExperimentOutput:
    """Var[Q_m] for m < order plus the tail, against the exact Var[Xi] on a small rectangle."""
    shape = list(cfg.box_shape)
    model = make_model(cfg, d=len(shape))
    domain = rectangle_domain([0] * len(shape), [s - 1 for s in shape])
    seed = resolve_seed(cfg)
    rows = []
    for k, level in enumerate(cfg.levels):
        result = chaos_service.variance_decomposition(
            model, domain, level, cfg.order, cfg.budget, replicate_stream(seed, k, 6), cfg.nodes
        )
        for m, variance in result.component_variances.items():
            rows.append({"level": level, "term": f"Q_{m}", "variance": variance, "stderr": 0.0})
        rows.append({"level": level, "term": f"tail_{cfg.order}", "variance": result.tail.value, "stderr": result.tail.stderr})
        rows.append({"level": level, "term": "total", "variance": result.total, "stderr": result.tail.stderr})
        rows.append({"level": level, "term": "direct", "variance": result.direct_variance, "stderr": 0.0})
    for row in rows:
        row.update(_provenance(cfg, "conditional", "x".join(str(s) for s in shape)))
    return ExperimentOutput(rows, {"n_sites": domain.n_sites}, "conditional")


def run_constants(cfg: ExperimentConfig) -> ExperimentOutput:
    """E_{d,alpha} (two schemes), boundary constants, beta_{d,k} sums and the log constant."""
    d = cfg.d
    n = cfg.quadrature_nodes
    rows = []

    def row(name: str, k_or_alpha: float, grid: Any, raw: float, normalized: float, extrapolated: float, residual: float) -> None:
        rows.append(
            {
                "name": name,
                "d": d,
                "k_or_alpha": k_or_alpha,
                "R_or_grid": grid,
                "raw": raw,
                "normalized": normalized,
                "extrapolated": extrapolated,
                "residual": residual,
            }
        )

    for alpha in cfg.kernel_alpha:
        if alpha >= d:
            logger.warning("Skipping E_(%d,%g): divergent", d, alpha)
            continue
        value = kernel_service.e_constant(d, alpha, n=n)
        other = kernel_service.e_constant(d, alpha, scheme="spherical") if d <= 3 else float("nan")
        row("E", alpha, n, value, value, value, abs(value - other))
        if alpha < d - 1:
            coarse = kernel_service.e_boundary_constant(d, alpha, n=max(2, n // 2))
            fine = kernel_service.e_boundary_constant(d, alpha, n=n)
            row("E_boundary", alpha, n, fine, fine, fine, abs(fine - coarse))
    summary: dict[str, Any] = {}
    if cfg.model == "gff":
        c_d, _ = asymptotic_constant(d)
        remainder = 0.0
        for r in range(cfg.green_radius + 1):
            x = (r,) + (0,) * (d - 1)
            g = green_function(d, x)
            rows.append({"name": "G", "d": d, **{f"x{i + 1}": c for i, c in enumerate(x)}, "G": g})
            if r >= 2:
                # |G(x) - c_d |x|^(2-d)| <= C |x|^(-d)
                remainder = max(remainder, abs(g - c_d * r ** (2 - d)) * r**d)
        summary["green_remainder_constant"] = remainder
        row("c_d", d, "", c_d, c_d, c_d, 0.0)
        for k in cfg.kernel_k:
            result = kernel_service.beta_constant(d, k, cfg.kernel_R)
            for R, raw, normalized in zip(result.R_list, result.raw, result.normalized):
                row("beta", k, R, raw, normalized, result.extrapolated, result.residual)
    log_constant = kernel_service.e_log_constant(d)
    row("E_log", d, "", log_constant, log_constant, log_constant, 0.0)
    summary["constants"] = len(rows)
    return ExperimentOutput(rows, summary, "none")


def run_hermite2_sample(cfg: ExperimentConfig) -> ExperimentOutput:
    """Unit-variance order-2 Hermite samples, their moments and the grid variance table."""
    rng = replicate_stream(resolve_seed(cfg), 0, 4)
    samples = sample_hermite2(
        cfg.d, cfg.hermite_alpha, cfg.grid_N, cfg.hermite_cutoff, cfg.hermite_samples, rng,
        method=cfg.hermite_method, rank=cfg.hermite_rank,
    )
    rows = [{"index": i, "value": float(v)} for i, v in enumerate(samples)]
    summary = {
        "moments": summarize(samples, reference="norm").model_dump(),
        "variance_table": hermite2_variance_table(
            cfg.hermite_grid_table, cfg.d, cfg.hermite_alpha, rank=cfg.hermite_rank
        ),
    }
    return ExperimentOutput(rows, summary, f"hermite2-N{cfg.grid_N}")


COMMANDS: dict[str, Callable[[ExperimentConfig], ExperimentOutput]] = {
    "sample-field": run_sample_field,
    "cluster-count": run_cluster_count,
    "density": run_density_curve,
    "variance-scaling": run_variance_scaling,
    "distribution-test": run_distribution_test,
    "arm-decay": run_arm_decay,
    "pivotal-intensity": run_pivotal_intensity,
    "chaos-decompose": run_chaos_decompose,
    "constants": run_constants,
    "hermite2-sample": run_hermite2_sample,
}
