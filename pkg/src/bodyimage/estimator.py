"""
Estimator - extended Kalman filter over joint angles driven by commanded muscle lengths
"""
import logging
from dataclasses import dataclass, replace
from typing import List, Literal, Optional, Protocol, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from bodyimage.errors import DimensionError
from bodyimage.muscle_geometry import DEFAULT_STEP, MuscleJacobian

logger = logging.getLogger(__name__)

SYMMETRY_TOLERANCE = 1e-9


class MeasurementModel(Protocol):
    """Anything that maps (theta, T) to muscle lengths: a SelfBodyImage or a GeometricModel."""
    n_joints: int
    n_muscles: int
    lower: np.ndarray
    upper: np.ndarray

    def predict_lengths(self, theta, tensions) -> np.ndarray: ...

    def length_jacobian(self, theta, tensions, h: float = DEFAULT_STEP) -> MuscleJacobian: ...


class EstimatorSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    process_std_deg: float = Field(default=0.5, gt=0)
    measurement_std_mm: float = Field(default=1.0, gt=0)
    initial_std_deg: float = Field(default=5.0, gt=0)
    static_window: int = Field(default=10, ge=2)
    static_threshold_deg: float = Field(default=0.5, gt=0)
    jacobian_step: float = Field(default=DEFAULT_STEP, gt=0)
    # "geometry" runs the filter on the nominal routing instead of the self-body image
    measurement_model: Literal["sbi", "geometry"] = "sbi"

    @property
    def static_threshold(self) -> float:
        return float(np.radians(self.static_threshold_deg))


@dataclass(frozen=True, eq=False)
class EkfState:
    mean: np.ndarray  # theta_est [rad]
    covariance: np.ndarray  # [rad^2]
    process_noise: np.ndarray  # Q
    measurement_noise: np.ndarray  # R [mm^2]
    innovation_norm: float = 0.0
    skipped: bool = False

    def __post_init__(self):
        n = len(self.mean)
        if self.covariance.shape != (n, n) or self.process_noise.shape != (n, n):
            raise DimensionError("Covariance and process noise must be J x J")
        if np.max(np.abs(self.covariance - self.covariance.T)) >= SYMMETRY_TOLERANCE:
            raise DimensionError("Covariance must be symmetric")

    @property
    def trace(self) -> float:
        return float(np.trace(self.covariance))


def initial_state(n_joints: int, n_muscles: int, settings: Optional[EstimatorSettings] = None,
                  mean=None) -> EkfState:
    settings = settings or EstimatorSettings()
    mean = np.zeros(n_joints) if mean is None else np.asarray(mean, dtype=float).copy()
    if mean.shape != (n_joints,):
        raise DimensionError(f"Expected {n_joints} initial joint angles")
    return EkfState(
        mean=mean,
        covariance=np.eye(n_joints) * np.radians(settings.initial_std_deg) ** 2,
        process_noise=np.eye(n_joints) * np.radians(settings.process_std_deg) ** 2,
        measurement_noise=np.eye(n_muscles) * settings.measurement_std_mm ** 2,
    )


def ekf_step(state: EkfState, model: MeasurementModel, l_obs, tensions,
             h: float = DEFAULT_STEP) -> EkfState:
    """
    One predict/update cycle with an identity motion model.

    The observation is the commanded length vector. When the innovation
    covariance is not positive-definite the update is skipped: the returned
    state carries the predicted covariance (P + Q) and `skipped=True`.
    """
    l_obs = np.asarray(l_obs, dtype=float)
    if l_obs.shape != (model.n_muscles,) or len(state.mean) != model.n_joints:
        raise DimensionError("Observation or state size does not match the measurement model")

    mean = state.mean
    predicted = state.covariance + state.process_noise

    innovation = l_obs - model.predict_lengths(mean, tensions)
    jac = model.length_jacobian(mean, tensions, h).matrix
    s = jac @ predicted @ jac.T + state.measurement_noise
    try:
        factor = cho_factor(s)
    except LinAlgError:
        logger.warning("innovation covariance not positive-definite; update skipped")
        return replace(state, covariance=predicted, innovation_norm=float(np.linalg.norm(innovation)),
                       skipped=True)

    gain = cho_solve(factor, jac @ predicted).T
    mean = np.clip(mean + gain @ innovation, model.lower, model.upper)
    a = np.eye(len(mean)) - gain @ jac
    covariance = a @ predicted @ a.T + gain @ state.measurement_noise @ gain.T
    covariance = 0.5 * (covariance + covariance.T)
    return replace(state, mean=mean, covariance=covariance,
                   innovation_norm=float(np.linalg.norm(innovation)), skipped=False)


def is_static(history: Sequence[np.ndarray], window: int, threshold: float) -> bool:
    """True iff every joint moved less than `threshold` [rad] over the last `window` samples."""
    if window < 2 or len(history) < window:
        return False
    recent = np.asarray(history[-window:], dtype=float)
    return bool(np.max(np.ptp(recent, axis=0)) < threshold)


class JointEstimator:
    """Running EKF with its theta_est history and per-step log rows."""

    def __init__(self, model: MeasurementModel, settings: Optional[EstimatorSettings] = None,
                 mean=None, joint_names: Optional[List[str]] = None):
        self.model = model
        self.settings = settings or EstimatorSettings()
        self.state = initial_state(model.n_joints, model.n_muscles, self.settings, mean)
        self.joint_names = joint_names or [f"j{i}" for i in range(model.n_joints)]
        self.history: List[np.ndarray] = [self.state.mean.copy()]
        self.rows: List[dict] = []
        self.steps = 0

    @property
    def theta(self) -> np.ndarray:
        return self.state.mean.copy()

    def step(self, l_obs, tensions) -> np.ndarray:
        self.state = ekf_step(self.state, self.model, l_obs, tensions, self.settings.jacobian_step)
        self.steps += 1
        self.history.append(self.state.mean.copy())
        # the gate only ever looks at the last window
        del self.history[:-self.settings.static_window]
        row = {"step": self.steps}
        row.update({f"theta_est_{name}_deg": float(np.degrees(v))
                    for name, v in zip(self.joint_names, self.state.mean)})
        row["innovation_norm_mm"] = self.state.innovation_norm
        row["covariance_trace"] = self.state.trace
        row["update_skipped"] = self.state.skipped
        self.rows.append(row)
        return self.theta

    def is_static(self) -> bool:
        return is_static(self.history, self.settings.static_window, self.settings.static_threshold)
