"""
Experiments - recipes behind the CLI commands

Each recipe returns a result dict with a "summary" of report numbers and a
"frames" dict of pandas tables ready to be written as CSV logs.
"""
import logging
from typing import Dict, Optional

import numpy as np
import pandas as pd

from bodyimage.config import ModelFile, PhaseSpec, ScheduleSpec
from bodyimage.control import hold_posture, posture_preset
from bodyimage.journal import ExperimentJournal
from bodyimage.muscle_geometry import GeometricModel
from bodyimage.plant import ExternalLoad, PlantModel
from bodyimage.self_body_image import SelfBodyImage, build_initial_self_body_image
from bodyimage.session import OnlineSession

logger = logging.getLogger(__name__)


def _session(model: ModelFile, plant: PlantModel, sbi: SelfBodyImage, seed: int,
             journal: Optional[ExperimentJournal] = None, run_id: Optional[str] = None,
             initial_posture: Optional[np.ndarray] = None) -> OnlineSession:
    measurement = None
    if model.estimator.measurement_model == "geometry":
        chain = model.build_chain()
        measurement = GeometricModel(model.build_routing(chain), chain)
    return OnlineSession(plant, sbi, model.control_params(), model.estimator, model.minibatch_spec(),
                         model.updaters.train, model.make_gate(), seed, journal, run_id, initial_posture,
                         measurement)


def run_init_train(model: ModelFile, seed: Optional[int] = None) -> dict:
    """Train the initial self-body image from the model's geometry"""
    seed = model.seed if seed is None else seed
    chain = model.build_chain()
    routing = model.build_routing(chain)
    sbi, report = build_initial_self_body_image(chain, routing, model.learner, seed)
    epochs = max(len(report.ijmm.history), len(report.mrcm.history))
    history = pd.DataFrame({
        "epoch": np.arange(1, epochs + 1),
        "ijmm_loss": pd.Series(report.ijmm.history, dtype=float),
        "mrcm_loss": pd.Series(report.mrcm.history, dtype=float),
    })
    return {"sbi": sbi, "summary": report.as_dict(), "frames": {"training_history": history}}


def run_online_learn(model: ModelFile, sbi: SelfBodyImage, seed: Optional[int] = None,
                     schedule: Optional[ScheduleSpec] = None, journal: Optional[ExperimentJournal] = None,
                     run_id: Optional[str] = None) -> dict:
    """Run the phased online-learning schedule against the perturbed plant"""
    seed = model.seed if seed is None else seed
    schedule = schedule or model.schedule
    chain = model.build_chain()
    plant = model.build_plant(chain, model.build_routing(chain), perturbed=True)
    session = _session(model, plant, sbi, seed, journal, run_id)
    log = session.run(schedule.phases)

    steps = log.step_frame()
    updates = log.update_frame()
    origin = sbi.predict_lengths(np.zeros(sbi.n_joints), np.zeros(sbi.n_muscles))
    summary = {
        "steps": len(steps),
        "initial_rmse_deg": log.initial_rmse(),
        "final_rmse_deg": log.final_rmse(),
        "updates_applied": int(updates["applied"].sum()) if len(updates) else 0,
        "ijmm_updates": int(((updates["branch"] == "ijmm") & updates["applied"]).sum()) if len(updates) else 0,
        "mrcm_updates": int(((updates["branch"] == "mrcm") & updates["applied"]).sum()) if len(updates) else 0,
        "origin_max_abs_mm": float(np.max(np.abs(origin))),
        "aborted": log.aborted,
        "abort_reason": log.reason,
    }
    logger.info("online learning: RMSE %.2f -> %.2f deg over %d steps",
                summary["initial_rmse_deg"], summary["final_rmse_deg"], summary["steps"])
    frames = {"steps": steps, "updates": updates, "estimator": log.estimator_frame()}
    return {"sbi": sbi, "summary": summary, "frames": frames}


def _loaded_rmse(steps: pd.DataFrame, loaded: bool) -> float:
    mask = steps["load_n"] > 0 if loaded else steps["load_n"] == 0
    values = steps.loc[mask, "rmse_deg"]
    return float(np.sqrt(np.mean(values ** 2))) if len(values) else float("nan")


def run_estimate(model: ModelFile, sbi: SelfBodyImage, seed: Optional[int] = None,
                 disable_mrcm: bool = False) -> dict:
    """
    Joint-angle estimation under hand loads, with and without the MRCM, on paired seeds.

    With disable_mrcm only the baseline variant runs.
    """
    seed = model.seed if seed is None else seed
    spec = model.estimate
    chain = model.build_chain()
    plant = model.build_plant(chain, model.build_routing(chain), perturbed=spec.perturbed)
    variants = {"without_mrcm": sbi.without_mrcm()} if disable_mrcm else \
        {"with_mrcm": sbi, "without_mrcm": sbi.without_mrcm()}

    rows, series, estimates = [], [], []
    for offset in range(spec.seeds):
        run_seed = seed + offset
        rng = np.random.default_rng(run_seed)
        posture = rng.uniform(*chain.range_box(spec.range_fraction))
        phase = PhaseSpec(kind="loads", dwell=spec.dwell, antagonism=False, vision=False,
                          posture_deg=list(np.degrees(posture)), loads_n=spec.loads_n)
        row = {"seed": run_seed}
        for name, variant in variants.items():
            # updates are off, so the variant is never modified
            log = _session(model, plant, variant, run_seed, initial_posture=posture).run([phase])
            steps = log.step_frame()
            row[f"rmse_loaded_{name}_deg"] = _loaded_rmse(steps, loaded=True)
            row[f"rmse_unloaded_{name}_deg"] = _loaded_rmse(steps, loaded=False)
            series.append(steps[["step", "load_n", "rmse_deg", "rmse_true_deg"]].assign(seed=run_seed, variant=name))
            estimates.append(log.estimator_frame().assign(seed=run_seed, variant=name))
        rows.append(row)

    table = pd.DataFrame(rows)
    summary = {"seeds": spec.seeds}
    for name in variants:
        summary[f"rmse_loaded_{name}_deg"] = float(table[f"rmse_loaded_{name}_deg"].mean())
        summary[f"rmse_unloaded_{name}_deg"] = float(table[f"rmse_unloaded_{name}_deg"].mean())
    if not disable_mrcm:
        summary["ordered_seeds"] = int((table["rmse_loaded_with_mrcm_deg"] < table["rmse_loaded_without_mrcm_deg"]).sum())
    frames = {
        "estimate_pairs": table,
        "estimate_series": pd.concat(series),
        "estimator": pd.concat(estimates, ignore_index=True),
    }
    return {"summary": summary, "frames": frames}


def run_grasp(model: ModelFile, sbi: SelfBodyImage, mass: Optional[float] = None,
              disable_mrcm: bool = False) -> dict:
    """Hold the dumbbell posture with tension compensation, plus the uncompensated ablation"""
    spec = model.grasp
    mass = spec.mass if mass is None else mass
    chain = model.build_chain()
    plant = model.build_plant(chain, model.build_routing(chain), perturbed=spec.perturbed)
    params = model.control_params()
    theta_target = posture_preset(chain, "dumbbell", spec)
    load = ExternalLoad.dumbbell(mass)
    model_in_use = sbi.without_mrcm() if disable_mrcm else sbi

    compensated = hold_posture(model_in_use, plant, theta_target, load, spec.cycles, params)
    ablation = hold_posture(model_in_use, plant, theta_target, load, spec.cycles, params, compensate=False)
    loaded_peak = max(compensated.errors[1:], default=0.0)
    summary = {
        "mass_kg": mass,
        "peak_droop_deg": loaded_peak,
        "final_error_deg": compensated.final_error,
        "recovered": bool(compensated.final_error < 0.25 * loaded_peak) if loaded_peak > 0 else True,
        "ablation_peak_deg": max(ablation.errors[1:], default=0.0),
        "ablation_final_error_deg": ablation.final_error,
        "aborted": compensated.aborted or ablation.aborted,
    }
    frames = {
        "grasp": compensated.to_frame(),
        "grasp_ablation": ablation.to_frame(),
    }
    return {"summary": summary, "frames": frames}


def _tension_sweep(plant: PlantModel, sbi: SelfBodyImage, params, postures: np.ndarray) -> pd.DataFrame:
    rows = []
    bias = params.bias(plant.n_muscles)
    for index, theta in enumerate(postures):
        result = plant.settle(sbi.predict_lengths(theta, bias), ExternalLoad(), params, theta)
        rows.append({
            "posture": index,
            **{f"theta_target_{n}_deg": float(np.degrees(v)) for n, v in zip(plant.chain.names, theta)},
            "max_tension_n": float(np.max(result.tensions)),
            "settle_converged": result.converged,
        })
    return pd.DataFrame(rows)


def run_tension_sweep(model: ModelFile, sbi: SelfBodyImage, seed: Optional[int] = None) -> dict:
    """Peak settled tension over a posture sweep before and after antagonism-only learning"""
    seed = model.seed if seed is None else seed
    spec = model.tension_sweep
    chain = model.build_chain()
    plant = model.build_plant(chain, model.build_routing(chain), perturbed=True)
    params = model.control_params()
    rng = np.random.default_rng(seed)
    lower, upper = chain.range_box(spec.range_fraction)
    postures = rng.uniform(lower, upper, size=(spec.postures, chain.n_joints))

    before = _tension_sweep(plant, sbi, params, postures)
    learner = sbi.copy()
    phase = PhaseSpec(kind="commands", targets=spec.learn_targets, dwell=spec.dwell,
                      antagonism=True, vision=False, range_fraction=spec.range_fraction)
    log = _session(model, plant, learner, seed + 1).run([phase])
    after = _tension_sweep(plant, learner, params, postures)

    summary = {
        "peak_tension_before_n": float(before["max_tension_n"].max()),
        "peak_tension_after_n": float(after["max_tension_n"].max()),
        "antagonism_updates": int(log.update_frame()["applied"].sum()) if log.updates else 0,
    }
    summary["reduced"] = summary["peak_tension_after_n"] < summary["peak_tension_before_n"]
    frames: Dict[str, pd.DataFrame] = {
        "tension_sweep": pd.concat([before.assign(stage="before"), after.assign(stage="after")]),
    }
    return {"sbi": learner, "summary": summary, "frames": frames}
