"""
Online Session - runs the online learning loop against the simulated plant

Every step settles the plant under the current command, feeds the commanded
lengths and measured tensions to the estimator, recovers the actual posture
from a simulated vision observation, and offers the settled state to the
updaters.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional

import numpy as np
import pandas as pd

from bodyimage.approximator import TrainConfig
from bodyimage.config import PhaseSpec
from bodyimage.control import ControlParams
from bodyimage.estimator import EstimatorSettings, JointEstimator, MeasurementModel
from bodyimage.journal import ExperimentJournal
from bodyimage.kinematics import inverse_kinematics
from bodyimage.plant import ExternalLoad, PlantModel
from bodyimage.self_body_image import SelfBodyImage
from bodyimage.updaters import MinibatchSpec, UpdateGate, UpdateReport, antagonism_update, vision_update

logger = logging.getLogger(__name__)

UPDATE_COLUMNS = ["step", "phase", "updater", "branch", "applied", "reason", "loss"]


def rmse_deg(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.degrees(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2))))


@dataclass
class SessionLog:
    steps: List[dict] = field(default_factory=list)
    updates: List[dict] = field(default_factory=list)
    estimates: List[dict] = field(default_factory=list)
    sample_columns: List[str] = field(default_factory=list)
    aborted: bool = False
    reason: str = ""

    def step_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.steps)

    def update_frame(self) -> pd.DataFrame:
        """Update events; the sample columns hold theta_update and the training label (NaN when gated)."""
        return pd.DataFrame(self.updates, columns=UPDATE_COLUMNS + self.sample_columns)

    def estimator_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.estimates)

    def rmse_series(self) -> np.ndarray:
        return np.array([row["rmse_deg"] for row in self.steps])

    def final_rmse(self, window: int = 20) -> float:
        series = self.rmse_series()
        return float(np.mean(series[-window:])) if len(series) else float("nan")

    def initial_rmse(self, window: int = 20) -> float:
        series = self.rmse_series()
        return float(np.mean(series[:window])) if len(series) else float("nan")


class OnlineSession:
    """Online self-body-image learning against one plant"""

    def __init__(self, plant: PlantModel, sbi: SelfBodyImage, params: ControlParams,
                 estimator_settings: EstimatorSettings, spec: MinibatchSpec, train: TrainConfig,
                 gate: UpdateGate, seed: int = 0, journal: Optional[ExperimentJournal] = None,
                 run_id: Optional[str] = None, initial_posture: Optional[np.ndarray] = None,
                 measurement_model: Optional[MeasurementModel] = None):
        self.plant = plant
        self.sbi = sbi
        self.params = params
        self.spec = spec
        self.train = train
        self.seed = seed
        self.journal = journal
        self.run_id = run_id
        self.running = False
        self.callback: Optional[Callable[[dict], None]] = None
        start = np.zeros(plant.chain.n_joints) if initial_posture is None else plant.chain.clamp(initial_posture)
        self.estimator = JointEstimator(measurement_model or sbi, estimator_settings, mean=start,
                                        joint_names=plant.chain.names)
        self.antagonism_gate = UpdateGate(gate.window, gate.static_threshold, gate.movement_threshold)
        self.vision_gate = UpdateGate(gate.window, gate.static_threshold, gate.movement_threshold)
        self.rng = np.random.default_rng(seed)

        n = plant.n_muscles
        self.theta_true = start.copy()
        self.tensions = params.bias(n)
        self.theta_target = start.copy()
        self.l_target = sbi.predict_lengths(self.theta_target, self.tensions)
        self.load = ExternalLoad()
        self.command_id = 0
        self.vision_command_id: Optional[int] = None
        self.step_count = 0
        self.log = SessionLog(
            estimates=self.estimator.rows,
            sample_columns=[f"theta_update_{name}_deg" for name in plant.chain.names]
            + [f"label_{name}_mm" for name in plant.routing.names])

    def stop(self):
        """Stop after the current step"""
        self.running = False

    def command(self, theta_target: np.ndarray):
        """Send a new posture command; the command uses the latest measured tensions."""
        self.theta_target = self.plant.chain.clamp(theta_target)
        self.l_target = self.sbi.predict_lengths(self.theta_target, self.tensions)
        self.command_id += 1

    @property
    def command_changed(self) -> bool:
        """True until the estimate has been static for a full window under the current command."""
        return self.vision_command_id != self.command_id

    def run(self, phases: Iterable[PhaseSpec], callback: Optional[Callable[[dict], None]] = None) -> SessionLog:
        """Run the phases in order and return the step and update logs"""
        self.running = True
        if callback:
            self.callback = callback
        for index, phase in enumerate(phases):
            if not self.running:
                break
            logger.info("phase %d: %s", index, phase.kind)
            if phase.kind == "commands":
                self._run_commands(index, phase)
            else:
                self._run_loads(index, phase)
        self.running = False
        return self.log

    def _sample_target(self, phase: PhaseSpec) -> np.ndarray:
        return self.rng.uniform(*self.plant.chain.range_box(phase.range_fraction))

    def _run_commands(self, index: int, phase: PhaseSpec):
        self.load = ExternalLoad()
        for _ in range(phase.targets):
            self.command(self._sample_target(phase))
            for _ in range(phase.dwell):
                if not self._step(index, phase):
                    return

    def _run_loads(self, index: int, phase: PhaseSpec):
        if phase.posture_deg is not None:
            self.command(np.radians(phase.posture_deg))
        # an unloaded dwell first lets the new command settle before any contact
        forces = [(0.0, 0.0, 0.0)] + list(phase.loads_n)
        for force in forces:
            self.load = ExternalLoad.force(force)
            for _ in range(phase.dwell):
                if not self._step(index, phase):
                    return

    def _step(self, index: int, phase: PhaseSpec) -> bool:
        if not self.running:
            return False
        self.step_count += 1
        result = self.plant.settle(self.l_target, self.load, self.params, self.theta_true)
        self.theta_true, self.tensions = result.theta, result.tensions
        if result.over_tension:
            self.log.aborted = True
            self.log.reason = f"over-tension at step {self.step_count}"
            logger.warning("session aborted: %s", self.log.reason)
            self.running = False
            return False

        theta_est = self.estimator.step(self.l_target, result.tensions)
        pose = self.plant.observe_vision(result.theta, self.rng)
        ik = inverse_kinematics(self.plant.chain, theta_est, pose)
        theta_actual = ik.angles
        hand_contact = self.load.active

        if phase.vision:
            _, report = vision_update(
                self.sbi, theta_actual, self.l_target, result.tensions, self.command_changed, hand_contact,
                self.vision_gate, self.estimator.history, self.spec, self.train, self._update_seed(1))
            # the first full static window under a command settles it, whatever the gate decided
            if report.reason not in ("not static", "disabled"):
                self.vision_command_id = self.command_id
            self._record_update(index, report)
        if phase.antagonism:
            _, report = antagonism_update(
                self.sbi, theta_est, result.lengths, result.tensions, self.antagonism_gate,
                self.estimator.history, self.spec, self.train, self._update_seed(0))
            self._record_update(index, report)

        row = {"step": self.step_count, "phase": index, "kind": phase.kind, "command": self.command_id}
        for name, target, true, est, actual in zip(self.plant.chain.names, self.theta_target,
                                                   result.theta, theta_est, theta_actual):
            row[f"theta_target_{name}_deg"] = float(np.degrees(target))
            row[f"theta_true_{name}_deg"] = float(np.degrees(true))
            row[f"theta_est_{name}_deg"] = float(np.degrees(est))
            row[f"theta_actual_{name}_deg"] = float(np.degrees(actual))
        row["load_n"] = float(np.linalg.norm(self.load.wrench[:3]))
        row["max_tension_n"] = float(np.max(result.tensions))
        row["rmse_deg"] = rmse_deg(theta_actual, theta_est)
        row["rmse_true_deg"] = rmse_deg(result.theta, theta_est)
        row["settle_converged"] = result.converged
        row["ik_converged"] = ik.converged
        self.log.steps.append(row)
        if self.callback:
            self.callback(row)
        return True

    def _update_seed(self, stream: int) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.seed, self.step_count, stream])

    def _record_update(self, phase: int, report: UpdateReport):
        # rejections while moving are not logged
        if report.reason in ("not static", "disabled"):
            return
        theta_update = np.full(self.plant.chain.n_joints, np.nan) if report.theta_update is None \
            else np.degrees(report.theta_update)
        label = np.full(self.plant.n_muscles, np.nan) if report.label is None else np.asarray(report.label)
        row = {
            "step": self.step_count,
            "phase": phase,
            "updater": report.updater,
            "branch": report.branch,
            "applied": report.applied,
            "reason": report.reason,
            "loss": report.loss,
        }
        row.update(zip(self.log.sample_columns, np.concatenate([theta_update, label]).tolist()))
        self.log.updates.append(row)
        if self.journal and self.run_id:
            sample = {
                "theta_update_deg": None if report.theta_update is None else theta_update.tolist(),
                "label_mm": None if report.label is None else label.tolist(),
            }
            self.journal.log_update(self.run_id, self.step_count, report.updater, report.branch,
                                    report.applied, report.reason,
                                    None if np.isnan(report.loss) else report.loss, sample=sample)
