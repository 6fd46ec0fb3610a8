"""
Tests for the experiment runners and their statistics helpers.

Runners are exercised on the iid model with tiny boxes and replicate counts;
only the bookkeeping is checked, not the physics.
"""

import math

import numpy as np
import pytest

from gfflab.schemas import ExperimentConfig
from gfflab.services.experiment_service import (
    COMMANDS,
    ExperimentError,
    fit_log_log,
    one_sided_upper,
    run_arm_decay,
    run_chaos_decompose,
    run_cluster_count,
    run_constants,
    run_density_curve,
    run_distribution_test,
    run_hermite2_sample,
    run_pivotal_intensity,
    run_sample_field,
    run_variance_scaling,
    summarize,
)


def _cfg(**overrides):
    base = {"d": 2, "model": "iid", "seed": 17, "workers": 1, "replicates": 20, "R_grid": [2]}
    base.update(overrides)
    return ExperimentConfig(**base)


class TestSummaries:
    def test_moments(self):
        s = summarize([1.0, 2.0, 3.0, 4.0])
        assert s.n == 4
        assert s.mean == pytest.approx(2.5)
        assert s.variance == pytest.approx(5.0 / 3.0)
        assert s.batches == 2

    def test_constant_sample_has_no_spread(self):
        s = summarize([3.0] * 10)
        assert s.variance == 0.0
        assert s.skewness == 0.0
        assert s.ks_statistic is None

    def test_symmetric_sample_has_zero_skew(self):
        assert summarize([-2.0, -1.0, 1.0, 2.0]).skewness == 0.0

    def test_needs_two_values(self):
        with pytest.raises(ExperimentError):
            summarize([1.0])

    def test_ks_against_normal(self):
        x = np.random.default_rng(0).standard_normal(2000)
        s = summarize(x, reference="norm")
        assert s.ks_pvalue > 1e-3
        assert abs(s.skewness) < 5 * s.skewness_se + 0.05


def test_fit_log_log_exact_power():
    R = [2, 4, 8, 16]
    variance = [3.0 * r**2.5 for r in R]
    slope, slope_se, intercept = fit_log_log(R, variance, [0.1 * v for v in variance])
    assert slope == pytest.approx(2.5)
    assert intercept == pytest.approx(math.log(3.0))
    assert slope_se > 0.0


def test_one_sided_upper_bound():
    assert one_sided_upper(100) == pytest.approx(1.0 - 0.05**0.01)
    assert one_sided_upper(100) < 3.0 / 100


def test_commands_cover_every_subcommand():
    assert set(COMMANDS) == {
        "sample-field",
        "cluster-count",
        "density",
        "variance-scaling",
        "distribution-test",
        "arm-decay",
        "pivotal-intensity",
        "chaos-decompose",
        "constants",
        "hermite2-sample",
    }


def test_sample_field_flags_sites_above_level():
    out = run_sample_field(_cfg(levels=[0.3]))
    assert len(out.rows) == 25
    assert all(row["above"] == int(row["value"] > 0.3) for row in out.rows)
    assert out.summary["fraction_above"] == pytest.approx(np.mean([row["above"] for row in out.rows]))
    assert out.sampler == "exact"


def test_cluster_count_rows():
    out = run_cluster_count(_cfg(levels=[0.0, 1.0], replicates=5, truncate=1))
    assert len(out.rows) == 10
    for row in out.rows:
        assert row["n_plus"] + row["n_minus"] == row["n_total"]
        assert 0 <= row["n_le_r"] <= row["n_total"]
        assert row["seed"] == 17
    assert "n_le_r" not in run_cluster_count(_cfg(replicates=2)).rows[0]


def test_cluster_count_is_reproducible():
    a = run_cluster_count(_cfg(replicates=4))
    b = run_cluster_count(_cfg(replicates=4))
    assert a.rows == b.rows


def test_density_curve_reports_mirror_discrepancy():
    out = run_density_curve(_cfg(levels=[-0.5, 0.5]))
    assert [row["level"] for row in out.rows] == [-0.5, 0.5]
    assert out.summary["mirror_discrepancy_se"] >= 0.0
    for row in out.rows:
        assert row["mu_count"] > 0.0


def test_variance_scaling_fit():
    out = run_variance_scaling(_cfg(R_grid=[1, 2, 3], replicates=40))
    assert len(out.rows) == 3
    (fit,) = out.summary["fits"]
    assert math.isfinite(fit["slope"])
    assert fit["beta_prediction"] is None


def test_distribution_test_needs_replicates():
    with pytest.raises(ExperimentError):
        run_distribution_test(_cfg(replicates=10, min_replicates=100))


def test_distribution_test_without_reference():
    out = run_distribution_test(_cfg(R_grid=[3], replicates=40), min_replicates=10)
    (row,) = out.rows
    assert row["verdict"] in {"gaussian", "non-gaussian"}
    assert math.isnan(row["ks_hermite2_p"])


def test_sign_clusters_in_three_dimensions_get_no_verdict():
    cfg = _cfg(d=3, R_grid=[1], replicates=40, levels=[0.0], grid_N=4, reference_samples=100)
    out = run_distribution_test(cfg, min_replicates=10)
    assert out.rows[0]["verdict"] == "no-verdict"
    assert 0.0 <= out.rows[0]["ks_hermite2_p"] <= 1.0


def test_arm_decay_rows():
    out = run_arm_decay(_cfg(arm_radii=[2, 1], arm_margin=1, replicates=30, pinned=True))
    assert out.summary["window_R"] == 3
    unpinned = [row for row in out.rows if not row["pinned"]]
    pinned = [row for row in out.rows if row["pinned"]]
    assert [row["r"] for row in unpinned] == [1, 2]
    assert len(pinned) == 2
    for row in out.rows:
        assert row["hits"] >= 0
        if row["hits"] == 0:
            assert row["upper_bound"] == pytest.approx(one_sided_upper(30))
    assert set(out.summary["monotone"]) == {"0.0:unpinned", "0.0:pinned"}



def test_arm_decay_reports_torus_sensitivity():
    cfg = _cfg(d=3, model="gff", sampler="torus", torus_margin=4, arm_radii=[1], arm_margin=1, replicates=10)
    out = run_arm_decay(cfg)
    sensitivity = out.summary["torus_sensitivity"]
    assert sensitivity["margins"] == [4, 8]
    (entry,) = sensitivity["delta"].values()
    assert entry["diff"] == pytest.approx(entry["p_wide"] - entry["p_narrow"])
    assert "torus_sensitivity" not in run_arm_decay(_cfg(arm_radii=[1], arm_margin=1)).summary

def test_pivotal_intensity_finite_target():
    out = run_pivotal_intensity(_cfg(target="finite", window_R=1, budget=200))
    (row,) = out.rows
    assert row["target"] == "finite"
    assert row["points"] == "0,0"
    assert out.summary["estimates"][0]["budget"] == 200


def test_chaos_decompose_rows():
    out = run_chaos_decompose(_cfg(box_shape=[2, 2], order=2, nodes=2, budget=100))
    terms = [row["term"] for row in out.rows]
    assert terms == ["Q_1", "tail_2", "total", "direct"]
    direct = out.rows[-1]["variance"]
    assert direct > 0.0
    assert out.rows[0]["variance"] <= direct + 1e-6


def test_constants_for_the_gff():
    cfg = _cfg(
        d=3, model="gff", kernel_alpha=[1.0], kernel_k=[1], kernel_R=[2, 3], quadrature_nodes=8, green_radius=2
    )
    out = run_constants(cfg)
    names = [row["name"] for row in out.rows]
    assert names.count("G") == 3
    assert names.count("beta") == 2
    assert {"E", "E_boundary", "c_d", "E_log"} <= set(names)
    origin = next(row for row in out.rows if row["name"] == "G")
    assert origin["G"] == pytest.approx(1.516386059, rel=1e-5)
    c_d = next(row for row in out.rows if row["name"] == "c_d")
    assert c_d["raw"] == pytest.approx(3.0 / (2.0 * math.pi))
    assert 0.0 < out.summary["green_remainder_constant"] < 1.0


def test_constants_skip_divergent_exponents():
    out = run_constants(_cfg(kernel_alpha=[2.5, 0.5], quadrature_nodes=8))
    assert [row["name"] for row in out.rows] == ["E", "E_boundary", "E_log"]


def test_hermite2_sample_output():
    out = run_hermite2_sample(_cfg(d=3, grid_N=4, hermite_samples=200, hermite_grid_table=[4]))
    assert len(out.rows) == 200
    assert out.sampler == "hermite2-N4"
    assert len(out.summary["variance_table"]) == 1
    assert out.summary["moments"]["n"] == 200
