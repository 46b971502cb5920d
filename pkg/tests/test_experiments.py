import numpy as np
import pandas as pd
import pytest

from bodyimage.config import EstimateSpec, PhaseSpec, ScheduleSpec, TensionSweepSpec
from bodyimage.experiments import run_estimate, run_grasp, run_init_train, run_online_learn, run_tension_sweep

SHORT_SCHEDULE = ScheduleSpec(phases=[
    PhaseSpec(kind="commands", targets=2, dwell=12, range_fraction=0.4),
    PhaseSpec(kind="loads", dwell=12, posture_deg=[-10.0, -20.0], loads_n=[(0.0, -10.0, 0.0)]),
])


@pytest.fixture
def quick_model(small_planar_model):
    return small_planar_model.model_copy(update={
        "estimate": EstimateSpec(loads_n=[(0.0, -20.0, 0.0)], dwell=12, seeds=2),
        "tension_sweep": TensionSweepSpec(postures=3, learn_targets=2, dwell=12),
    })


def test_run_init_train(quick_model):
    result = run_init_train(quick_model, seed=0)
    history = result["frames"]["training_history"]
    assert list(history.columns) == ["epoch", "ijmm_loss", "mrcm_loss"]
    assert history["epoch"].iloc[0] == 1
    assert result["summary"]["ijmm_holdout_rmse_mm"] < 3.0
    assert result["sbi"].n_muscles == 4


def test_run_online_learn(quick_model, sbi):
    result = run_online_learn(quick_model, sbi, seed=0, schedule=SHORT_SCHEDULE)
    summary = result["summary"]
    assert summary["steps"] == 2 * 12 + 2 * 12
    assert summary["updates_applied"] == summary["ijmm_updates"] + summary["mrcm_updates"]
    assert np.isfinite(summary["initial_rmse_deg"]) and np.isfinite(summary["final_rmse_deg"])
    assert summary["origin_max_abs_mm"] >= 0
    assert set(result["frames"]) == {"steps", "updates", "estimator"}
    assert len(result["frames"]["estimator"]) == summary["steps"]


def test_run_estimate_pairs_variants(quick_model, sbi):
    result = run_estimate(quick_model, sbi, seed=3)
    pairs = result["frames"]["estimate_pairs"]
    assert list(pairs["seed"]) == [3, 4]
    assert {"rmse_loaded_with_mrcm_deg", "rmse_loaded_without_mrcm_deg"} <= set(pairs.columns)
    assert 0 <= result["summary"]["ordered_seeds"] <= 2
    series = result["frames"]["estimate_series"]
    assert set(series["variant"]) == {"with_mrcm", "without_mrcm"}
    estimator = result["frames"]["estimator"]
    assert len(estimator) == len(series)
    assert {"seed", "variant", "innovation_norm_mm", "covariance_trace"} <= set(estimator.columns)


def test_run_estimate_unloaded_variants_agree(quick_model, sbi):
    result = run_estimate(quick_model, sbi, seed=3)
    series = result["frames"]["estimate_series"]
    unloaded = series[series["load_n"] == 0]
    with_mrcm = unloaded[unloaded["variant"] == "with_mrcm"]["rmse_true_deg"].to_numpy()
    without = unloaded[unloaded["variant"] == "without_mrcm"]["rmse_true_deg"].to_numpy()
    assert np.abs(with_mrcm[-1] - without[-1]) < 3.0


def test_run_estimate_without_mrcm_only(quick_model, sbi):
    result = run_estimate(quick_model, sbi, seed=3, disable_mrcm=True)
    assert "ordered_seeds" not in result["summary"]
    assert set(result["frames"]["estimate_series"]["variant"]) == {"without_mrcm"}


def test_run_estimate_is_deterministic(quick_model, sbi):
    first = run_estimate(quick_model, sbi, seed=1)
    second = run_estimate(quick_model, sbi, seed=1)
    pd.testing.assert_frame_equal(first["frames"]["estimate_series"], second["frames"]["estimate_series"])


def test_run_grasp_reports_droop_and_ablation(quick_model, sbi):
    result = run_grasp(quick_model, sbi, mass=1.4)
    summary = result["summary"]
    assert summary["mass_kg"] == 1.4
    assert summary["peak_droop_deg"] > 0
    assert summary["final_error_deg"] < summary["ablation_final_error_deg"]
    assert len(result["frames"]["grasp"]) == quick_model.grasp.cycles + 1


def test_run_tension_sweep(quick_model, sbi):
    before = sbi.to_bytes()
    result = run_tension_sweep(quick_model, sbi, seed=0)
    sweep = result["frames"]["tension_sweep"]
    assert list(sweep["stage"].unique()) == ["before", "after"]
    assert len(sweep) == 2 * 3
    assert sbi.to_bytes() == before
    assert isinstance(result["summary"]["reduced"], bool)
