"""
Self Body Image - learned joint-muscle model with tension-dependent route compensation

The target muscle length is the sum of two networks:

    l_target = ijmm(theta) + mrcm(theta, T / tension_scale)

The ideal joint-muscle model (IJMM) carries the tension-free geometry, the
muscle-route change model (MRCM) the length compensation caused by tension.
Both start from the man-made geometric model and are corrected online.
"""
import logging
import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from bodyimage.approximator import FeedforwardNet, FitReport, Minibatch, TrainConfig, fit
from bodyimage.errors import DimensionError, FormatError, VersionError
from bodyimage.kinematics import KinematicChain
from bodyimage.muscle_geometry import (
    DEFAULT_STEP,
    MuscleJacobian,
    MuscleRouting,
    absolute_lengths,
    finite_difference_jacobian,
    muscle_jacobian,
    relative_lengths,
)

logger = logging.getLogger(__name__)

MAGIC = b"SBIMG1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<6sHIId")
DEFAULT_TENSION_SCALE = 500.0  # [N]


@dataclass(frozen=True)
class SoftnessCoefficients:
    """Closed-form route-change coefficients used for the initial MRCM."""
    alpha: float = 10.0  # wire elongation [mm per normalized tension]
    beta: float = 0.05  # structure deformation [per normalized tension]

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise DimensionError("Softness coefficients must be non-negative")


class LearnerSettings(BaseModel):
    """Network sizes, dataset sizes and training settings for initial training."""
    model_config = ConfigDict(extra="forbid")

    hidden: int = Field(default=64, ge=1)
    alpha: float = Field(default=10.0, ge=0)
    beta: float = Field(default=0.05, ge=0)
    tension_scale: float = Field(default=DEFAULT_TENSION_SCALE, gt=0)
    max_tension: float = Field(default=500.0, gt=0)
    ijmm_samples: int = Field(default=2000, ge=2)
    mrcm_samples: int = Field(default=4000, ge=2)
    zero_tension_fraction: float = Field(default=0.1, ge=0, le=1)
    range_margin: float = Field(default=0.1, ge=0, le=0.5)  # training postures reach this far past the limits
    holdout_samples: int = Field(default=500, ge=1)
    train: TrainConfig = TrainConfig(
        optimizer="adam", learning_rate=0.01, batch_size=64, max_epochs=400,
        lr_decay=0.995, patience=40, plateau_tolerance=1e-4)

    @property
    def coefficients(self) -> SoftnessCoefficients:
        return SoftnessCoefficients(self.alpha, self.beta)


class SelfBodyImage:
    """The composite model: ideal lengths plus tension compensation."""

    def __init__(self, ijmm: FeedforwardNet, mrcm: FeedforwardNet,
                 lower, upper, tension_scale: float = DEFAULT_TENSION_SCALE):
        self.ijmm = ijmm
        self.mrcm = mrcm
        self.tension_scale = float(tension_scale)
        self._lower = np.asarray(lower, dtype=float)
        self._upper = np.asarray(upper, dtype=float)
        n_joints, _, n_muscles = ijmm.sizes
        if self.tension_scale <= 0:
            raise DimensionError("tension_scale must be positive")
        if mrcm.n_in != n_joints + n_muscles or mrcm.n_out != n_muscles:
            raise DimensionError(
                f"MRCM sizes {mrcm.sizes} do not match IJMM with {n_joints} joints / {n_muscles} muscles")
        if self._lower.shape != (n_joints,) or self._upper.shape != (n_joints,):
            raise DimensionError("Joint range must have one entry per joint")

    @classmethod
    def untrained(cls, n_joints: int, n_muscles: int, hidden: int, lower, upper,
                  tension_scale: float = DEFAULT_TENSION_SCALE, seed=0) -> "SelfBodyImage":
        ijmm_seed, mrcm_seed = np.random.SeedSequence(seed).spawn(2)
        return cls(FeedforwardNet(n_joints, hidden, n_muscles, ijmm_seed),
                   FeedforwardNet(n_joints + n_muscles, hidden, n_muscles, mrcm_seed),
                   lower, upper, tension_scale)

    @property
    def n_joints(self) -> int:
        return self.ijmm.n_in

    @property
    def n_muscles(self) -> int:
        return self.ijmm.n_out

    @property
    def lower(self) -> np.ndarray:
        return self._lower.copy()

    @property
    def upper(self) -> np.ndarray:
        return self._upper.copy()

    def _check(self, theta, tensions=None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1:] != (self.n_joints,):
            raise DimensionError(f"Expected {self.n_joints} joint angles, got shape {theta.shape}")
        if tensions is None:
            return theta, None
        tensions = np.asarray(tensions, dtype=float)
        if tensions.shape[-1:] != (self.n_muscles,):
            raise DimensionError(f"Expected {self.n_muscles} tensions, got shape {tensions.shape}")
        if np.any(tensions < 0):
            raise DimensionError("Muscle tensions must be non-negative")
        return theta, tensions

    def mrcm_input(self, theta, tensions) -> np.ndarray:
        theta, tensions = self._check(theta, tensions)
        return np.concatenate([theta, tensions / self.tension_scale], axis=-1)

    def ideal_lengths(self, theta) -> np.ndarray:
        theta, _ = self._check(theta)
        return self.ijmm.forward(theta)

    def compensation(self, theta, tensions) -> np.ndarray:
        return self.mrcm.forward(self.mrcm_input(theta, tensions))

    def predict_lengths(self, theta, tensions) -> np.ndarray:
        """l_target for one posture or a batch of postures."""
        return self.ideal_lengths(theta) + self.compensation(theta, tensions)

    def length_jacobian(self, theta, tensions, h: float = DEFAULT_STEP) -> MuscleJacobian:
        theta, tensions = self._check(theta, tensions)
        return finite_difference_jacobian(
            lambda q: self.predict_lengths(q, tensions), theta, self._lower, self._upper, h)

    def copy(self) -> "SelfBodyImage":
        return SelfBodyImage(self.ijmm.copy(), self.mrcm.copy(), self._lower, self._upper, self.tension_scale)

    def without_mrcm(self) -> "SelfBodyImage":
        """Copy with a zero MRCM, i.e. the tension-blind baseline."""
        return SelfBodyImage(self.ijmm.copy(), FeedforwardNet.zeros(*self.mrcm.sizes),
                             self._lower, self._upper, self.tension_scale)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, self.n_joints, self.n_muscles, self.tension_scale)
        limits = np.concatenate([self._lower, self._upper]).astype("<f8").tobytes()
        return header + limits + self.ijmm.to_bytes() + self.mrcm.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SelfBodyImage":
        if len(data) < _HEADER.size:
            raise FormatError("Self-body image stream truncated in header")
        magic, version, n_joints, n_muscles, scale = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError("Not a self-body image stream (bad magic)")
        if version != FORMAT_VERSION:
            raise VersionError(f"Self-body image stream version {version}, expected {FORMAT_VERSION}")
        offset = _HEADER.size + 16 * n_joints
        if len(data) < offset:
            raise FormatError("Self-body image stream truncated in joint range")
        limits = np.frombuffer(data[_HEADER.size:offset], dtype="<f8").astype(float)
        ijmm, offset = FeedforwardNet.read_from(data, offset)
        mrcm, offset = FeedforwardNet.read_from(data, offset)
        if offset != len(data):
            raise FormatError("Trailing bytes after self-body image stream")
        if ijmm.sizes[0] != n_joints or ijmm.sizes[2] != n_muscles:
            raise FormatError("Header sizes disagree with the IJMM stream")
        try:
            return cls(ijmm, mrcm, limits[:n_joints], limits[n_joints:], scale)
        except DimensionError as exc:
            raise FormatError(str(exc)) from exc


def predict_lengths(sbi: SelfBodyImage, theta, tensions) -> np.ndarray:
    return sbi.predict_lengths(theta, tensions)


def length_jacobian(sbi: SelfBodyImage, theta, tensions, h: float = DEFAULT_STEP) -> MuscleJacobian:
    return sbi.length_jacobian(theta, tensions, h)


# Initial training data


@dataclass(frozen=True)
class Sampler:
    """
    Uniform sampling of postures and of tensions in [0, max_tension].

    Postures cover the joint limits widened by `margin` on both sides.
    """
    count: int
    seed: int = 0
    max_tension: float = 500.0
    zero_tension_fraction: float = 0.0
    margin: float = 0.0  # fraction of each joint range added beyond both limits

    def generator(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])

    def joints(self, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
        lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
        pad = self.margin * (upper - lower)
        return self.generator(0).uniform(lower - pad, upper + pad, size=(self.count, len(lower)))

    def tensions(self, n_muscles: int) -> np.ndarray:
        tensions = self.generator(1).uniform(0.0, self.max_tension, size=(self.count, n_muscles))
        zero_rows = int(round(self.zero_tension_fraction * self.count))
        tensions[:zero_rows] = 0.0
        return tensions


@dataclass
class IjmmDataset:
    theta: np.ndarray  # (n, J) [rad]
    lengths: np.ndarray  # (n, M) [mm]

    def __len__(self) -> int:
        return len(self.theta)

    def pairs(self):
        return list(zip(self.theta, self.lengths))

    def as_minibatch(self) -> Minibatch:
        return Minibatch(self.theta, self.lengths)


@dataclass
class MrcmDataset:
    theta: np.ndarray  # (n, J) [rad]
    tensions: np.ndarray  # (n, M) [N]
    compensation: np.ndarray  # (n, M) [mm]

    def __len__(self) -> int:
        return len(self.theta)

    def as_minibatch(self, tension_scale: float) -> Minibatch:
        return Minibatch(np.hstack([self.theta, self.tensions / tension_scale]), self.compensation)


def _relative_lengths_batch(routing: MuscleRouting, chain: KinematicChain, theta: np.ndarray) -> np.ndarray:
    return np.array([relative_lengths(routing, chain, q) for q in theta]).reshape(len(theta), routing.n_muscles)


def generate_ijmm_dataset(routing: MuscleRouting, chain: KinematicChain, sampler: Sampler) -> IjmmDataset:
    """(theta, f_geo(theta)) pairs; row 0 is the initial posture."""
    theta = sampler.joints(chain.lower, chain.upper)
    theta[0] = 0.0
    return IjmmDataset(theta, _relative_lengths_batch(routing, chain, theta))


def closed_form_compensation(l_abs, tensions, coeffs: SoftnessCoefficients,
                             tension_scale: float = DEFAULT_TENSION_SCALE) -> np.ndarray:
    """-(alpha + beta * l_abs) * T / tension_scale, elementwise."""
    normalized = np.asarray(tensions, dtype=float) / tension_scale
    return -(coeffs.alpha * normalized + coeffs.beta * np.asarray(l_abs, dtype=float) * normalized)


def generate_mrcm_dataset(routing: MuscleRouting, chain: KinematicChain, coeffs: SoftnessCoefficients,
                          sampler: Sampler, tension_scale: float = DEFAULT_TENSION_SCALE) -> MrcmDataset:
    theta = sampler.joints(chain.lower, chain.upper)
    tensions = sampler.tensions(routing.n_muscles)
    l_abs = np.array([absolute_lengths(routing, chain, q) for q in theta])
    return MrcmDataset(theta, tensions, closed_form_compensation(l_abs, tensions, coeffs, tension_scale))


# Initial training


@dataclass
class TrainingReport:
    ijmm: FitReport
    mrcm: FitReport
    ijmm_holdout_rmse: float = float("nan")  # [mm]
    mrcm_holdout_rmse: float = float("nan")  # [mm]
    zero_tension_residual: float = float("nan")  # max |g(theta, 0)| [mm]
    anchor_residual: float = float("nan")  # max |l_target(0, 0)| [mm]
    jacobian_max_error: float = float("nan")  # max |dl/dtheta - G_geo| at T = 0 [mm/rad]

    def as_dict(self) -> dict:
        return {
            "ijmm_final_loss": self.ijmm.final_loss,
            "ijmm_epochs": self.ijmm.epochs,
            "ijmm_stopped": self.ijmm.stopped,
            "mrcm_final_loss": self.mrcm.final_loss,
            "mrcm_epochs": self.mrcm.epochs,
            "mrcm_stopped": self.mrcm.stopped,
            "ijmm_holdout_rmse_mm": self.ijmm_holdout_rmse,
            "mrcm_holdout_rmse_mm": self.mrcm_holdout_rmse,
            "zero_tension_residual_mm": self.zero_tension_residual,
            "anchor_residual_mm": self.anchor_residual,
            "jacobian_max_error_mm_per_rad": self.jacobian_max_error,
        }


def initial_train(sbi: SelfBodyImage, ijmm_data: IjmmDataset, mrcm_data: MrcmDataset,
                  cfg: TrainConfig) -> Tuple[SelfBodyImage, TrainingReport]:
    """Fit both networks in place; TrainingDivergedError propagates with its partial report."""
    if len(ijmm_data) == 0 or len(mrcm_data) == 0:
        raise DimensionError("Initial training datasets must not be empty")
    ijmm_batch = ijmm_data.as_minibatch()
    sbi.ijmm.fit_scaling(ijmm_batch.inputs)
    ijmm_report = fit(sbi.ijmm, ijmm_batch.inputs, ijmm_batch.targets, cfg)
    logger.info("IJMM trained: loss %.4g after %d epochs (%s)",
                ijmm_report.final_loss, ijmm_report.epochs, ijmm_report.stopped)

    mrcm_batch = mrcm_data.as_minibatch(sbi.tension_scale)
    sbi.mrcm.fit_scaling(mrcm_batch.inputs)
    mrcm_report = fit(sbi.mrcm, mrcm_batch.inputs, mrcm_batch.targets, cfg.model_copy(update={"seed": cfg.seed + 1}))
    logger.info("MRCM trained: loss %.4g after %d epochs (%s)",
                mrcm_report.final_loss, mrcm_report.epochs, mrcm_report.stopped)
    return sbi, TrainingReport(ijmm_report, mrcm_report)


def _rmse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def evaluate_against_geometry(sbi: SelfBodyImage, routing: MuscleRouting, chain: KinematicChain,
                              settings: LearnerSettings, seed: int) -> dict:
    """Held-out errors of both networks against the data they were initialized from."""
    holdout = Sampler(settings.holdout_samples, seed, settings.max_tension)
    ijmm_set = generate_ijmm_dataset(routing, chain, holdout)
    mrcm_set = generate_mrcm_dataset(routing, chain, settings.coefficients, holdout, sbi.tension_scale)
    zero = np.zeros((len(mrcm_set), sbi.n_muscles))
    slack = np.zeros(sbi.n_muscles)
    jacobian_error = max(
        float(np.max(np.abs(sbi.length_jacobian(q, slack).matrix - muscle_jacobian(routing, chain, q).matrix)))
        for q in ijmm_set.theta)
    return {
        "ijmm_holdout_rmse": _rmse(sbi.ideal_lengths(ijmm_set.theta), ijmm_set.lengths),
        "mrcm_holdout_rmse": _rmse(sbi.compensation(mrcm_set.theta, mrcm_set.tensions), mrcm_set.compensation),
        "zero_tension_residual": float(np.max(np.abs(sbi.compensation(mrcm_set.theta, zero)))),
        "anchor_residual": float(np.max(np.abs(
            sbi.predict_lengths(np.zeros(sbi.n_joints), np.zeros(sbi.n_muscles))))),
        "jacobian_max_error": jacobian_error,
    }


def build_initial_self_body_image(chain: KinematicChain, routing: MuscleRouting,
                                  settings: Optional[LearnerSettings] = None,
                                  seed: int = 0) -> Tuple[SelfBodyImage, TrainingReport]:
    """Generate both datasets from the geometric model, train, and score on held-out samples."""
    settings = settings or LearnerSettings()
    init_seed, ijmm_seed, mrcm_seed, holdout_seed = (
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(4))
    sbi = SelfBodyImage.untrained(chain.n_joints, routing.n_muscles, settings.hidden,
                                  chain.lower, chain.upper, settings.tension_scale, init_seed)
    ijmm_data = generate_ijmm_dataset(
        routing, chain, Sampler(settings.ijmm_samples, ijmm_seed, margin=settings.range_margin))
    mrcm_data = generate_mrcm_dataset(
        routing, chain, settings.coefficients,
        Sampler(settings.mrcm_samples, mrcm_seed, settings.max_tension, settings.zero_tension_fraction,
                settings.range_margin),
        settings.tension_scale)
    sbi, report = initial_train(sbi, ijmm_data, mrcm_data, settings.train.model_copy(update={"seed": seed}))
    scores = evaluate_against_geometry(sbi, routing, chain, settings, holdout_seed)
    report.ijmm_holdout_rmse = scores["ijmm_holdout_rmse"]
    report.mrcm_holdout_rmse = scores["mrcm_holdout_rmse"]
    report.zero_tension_residual = scores["zero_tension_residual"]
    report.anchor_residual = scores["anchor_residual"]
    report.jacobian_max_error = scores["jacobian_max_error"]
    logger.info("initial self-body image: IJMM held-out RMSE %.3f mm, MRCM held-out RMSE %.3f mm, "
                "Jacobian error %.3f mm/rad", report.ijmm_holdout_rmse, report.mrcm_holdout_rmse,
                report.jacobian_max_error)
    return sbi, report


def save(sbi: SelfBodyImage) -> bytes:
    return sbi.to_bytes()


def load(data: bytes) -> SelfBodyImage:
    return SelfBodyImage.from_bytes(data)
