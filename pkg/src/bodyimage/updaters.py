"""
Updaters - online correction of the self-body image from antagonism and vision

Both updaters train on small anchored minibatches: the new sample plus
anchor rows that hold the rest of the model in place. Updates fire only
when the estimate is static and the update posture has moved since the
last accepted update.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from bodyimage.approximator import Minibatch, TrainConfig, train_minibatch
from bodyimage.errors import DimensionError, TrainingDivergedError
from bodyimage.estimator import is_static
from bodyimage.self_body_image import SelfBodyImage

logger = logging.getLogger(__name__)


class UpdaterSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_random: int = Field(default=16, ge=0)
    m_zero: int = Field(default=16, ge=0)
    around_std_deg: float = Field(default=2.0, ge=0)
    movement_threshold_deg: float = Field(default=3.0, ge=0)
    train: TrainConfig = TrainConfig(optimizer="momentum", learning_rate=0.02, momentum=0.9, epochs=30)

    @property
    def spec(self) -> "MinibatchSpec":
        return MinibatchSpec(self.n_random, self.m_zero, float(np.radians(self.around_std_deg)))


@dataclass(frozen=True, eq=False)
class IjmmSample:
    theta: np.ndarray  # theta_update [rad]
    lengths: np.ndarray  # l_update [mm]

    def __post_init__(self):
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.lengths))):
            raise DimensionError("IJMM sample must be finite")


@dataclass(frozen=True, eq=False)
class MrcmSample:
    theta: np.ndarray  # theta_update [rad]
    tensions: np.ndarray  # T_update [N]
    compensation: np.ndarray  # delta l_update [mm]

    def __post_init__(self):
        if not all(np.all(np.isfinite(v)) for v in (self.theta, self.tensions, self.compensation)):
            raise DimensionError("MRCM sample must be finite")
        if np.any(np.asarray(self.tensions) < 0):
            raise DimensionError("MRCM sample tensions must be non-negative")


@dataclass(frozen=True)
class MinibatchSpec:
    n_random: int = 16  # N
    m_zero: int = 16  # M
    around_std: float = float(np.radians(2.0))  # [rad]

    def __post_init__(self):
        if self.n_random < 0 or self.m_zero < 0 or self.around_std < 0:
            raise DimensionError("Minibatch counts and spread must be non-negative")


@dataclass
class UpdateGate:
    """Static-state and movement gate for one updater."""
    window: int = 10
    static_threshold: float = float(np.radians(0.5))  # [rad]
    movement_threshold: float = float(np.radians(3.0))  # [rad], infinity disables updates
    last_update: Optional[np.ndarray] = None

    def evaluate(self, history: Sequence[np.ndarray], theta_update: np.ndarray) -> Optional[str]:
        """None when an update may fire, otherwise the rejection reason."""
        if not np.isfinite(self.movement_threshold):
            return "disabled"
        if not is_static(history, self.window, self.static_threshold):
            return "not static"
        if self.last_update is not None and \
                np.max(np.abs(np.asarray(theta_update) - self.last_update)) <= self.movement_threshold:
            return "not moved"
        return None

    def accept(self, theta_update: np.ndarray) -> None:
        self.last_update = np.asarray(theta_update, dtype=float).copy()


@dataclass
class UpdateReport:
    updater: str  # "antagonism" or "vision"
    branch: str  # "ijmm", "mrcm" or "none"
    applied: bool
    reason: str = ""
    theta_update: Optional[np.ndarray] = None
    label: Optional[np.ndarray] = None
    loss: float = float("nan")


def _random_postures(sbi: SelfBodyImage, count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(sbi.lower, sbi.upper, size=(count, sbi.n_joints))


def assemble_ijmm_minibatch(sample: IjmmSample, sbi: SelfBodyImage, spec: MinibatchSpec, seed) -> Minibatch:
    """New sample, the (0, 0) anchor, and N random postures labelled by the current IJMM."""
    rng = np.random.default_rng(seed)
    theta_rand = _random_postures(sbi, spec.n_random, rng)
    inputs = np.vstack([sample.theta, np.zeros(sbi.n_joints), theta_rand])
    targets = np.vstack([sample.lengths, np.zeros(sbi.n_muscles),
                         sbi.ideal_lengths(theta_rand).reshape(spec.n_random, sbi.n_muscles)])
    return Minibatch(inputs, targets)


def assemble_mrcm_minibatch(sample: MrcmSample, sbi: SelfBodyImage, spec: MinibatchSpec, seed) -> Minibatch:
    """New sample, M zero-tension anchors and N copies of the sample at nearby postures."""
    rng = np.random.default_rng(seed)
    theta_rand = _random_postures(sbi, spec.m_zero, rng)
    theta_around = np.clip(sample.theta + rng.normal(0.0, spec.around_std, size=(spec.n_random, sbi.n_joints)),
                           sbi.lower, sbi.upper)
    thetas = np.vstack([sample.theta, theta_rand, theta_around])
    tensions = np.vstack([sample.tensions, np.zeros((spec.m_zero, sbi.n_muscles)),
                          np.tile(sample.tensions, (spec.n_random, 1))])
    targets = np.vstack([sample.compensation, np.zeros((spec.m_zero, sbi.n_muscles)),
                         np.tile(sample.compensation, (spec.n_random, 1))])
    return Minibatch(sbi.mrcm_input(thetas, tensions), targets)


def _train(net, batch: Minibatch, cfg: TrainConfig, report: UpdateReport) -> UpdateReport:
    try:
        report.loss = train_minibatch(net, batch, cfg)
        report.applied = True
    except TrainingDivergedError as exc:
        report.reason = "diverged"
        logger.warning("%s update on %s rolled back: %s", report.updater, report.branch, exc)
    return report


def antagonism_update(sbi: SelfBodyImage, theta_est, l_m, tensions, gate: UpdateGate,
                      history: Sequence[np.ndarray], spec: MinibatchSpec, cfg: TrainConfig,
                      seed) -> Tuple[SelfBodyImage, UpdateReport]:
    """Retrain the IJMM on (theta_est, l_m - g(theta_est, T_m)); the MRCM is never touched."""
    theta_est = np.asarray(theta_est, dtype=float)
    reason = gate.evaluate(history, theta_est)
    if reason is not None:
        return sbi, UpdateReport("antagonism", "none", False, reason, theta_est)

    label = np.asarray(l_m, dtype=float) - sbi.compensation(theta_est, tensions)
    batch = assemble_ijmm_minibatch(IjmmSample(theta_est, label), sbi, spec, seed)
    report = _train(sbi.ijmm, batch, cfg, UpdateReport("antagonism", "ijmm", False, "", theta_est, label))
    if report.applied:
        gate.accept(theta_est)
        logger.debug("antagonism update at %s deg, loss %.4g", np.round(np.degrees(theta_est), 2), report.loss)
    return sbi, report


def vision_update(sbi: SelfBodyImage, theta_actual, l_target, tensions, command_changed: bool,
                  hand_contact: bool, gate: UpdateGate, history: Sequence[np.ndarray],
                  spec: MinibatchSpec, cfg: TrainConfig, seed) -> Tuple[SelfBodyImage, UpdateReport]:
    """
    Retrain one network from the vision-recovered posture.

    A changed command with no hand contact trains the IJMM on
    (theta_actual, l_target - g(theta_actual, T_m)); an unchanged command
    trains the MRCM on (theta_actual, T_m, l_target - f_ideal(theta_actual)).
    """
    theta_actual = np.asarray(theta_actual, dtype=float)
    l_target = np.asarray(l_target, dtype=float)
    reason = gate.evaluate(history, theta_actual)
    if reason is None and command_changed and hand_contact:
        reason = "command changed under hand contact"
    if reason is not None:
        return sbi, UpdateReport("vision", "none", False, reason, theta_actual)

    if command_changed:
        label = l_target - sbi.compensation(theta_actual, tensions)
        batch = assemble_ijmm_minibatch(IjmmSample(theta_actual, label), sbi, spec, seed)
        report = _train(sbi.ijmm, batch, cfg, UpdateReport("vision", "ijmm", False, "", theta_actual, label))
    else:
        label = l_target - sbi.ideal_lengths(theta_actual)
        batch = assemble_mrcm_minibatch(
            MrcmSample(theta_actual, np.asarray(tensions, dtype=float), label), sbi, spec, seed)
        report = _train(sbi.mrcm, batch, cfg, UpdateReport("vision", "mrcm", False, "", theta_actual, label))
    if report.applied:
        gate.accept(theta_actual)
    return sbi, report
