"""
Control - muscle stiffness control and tension-compensated posture holding
"""
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from bodyimage.errors import DimensionError
from bodyimage.kinematics import KinematicChain

if TYPE_CHECKING:
    from bodyimage.plant import ExternalLoad, PlantModel
    from bodyimage.self_body_image import SelfBodyImage

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ControlParams:
    """T_target = T_bias + max(0, K_stiff (l - l_target)); scalars broadcast over muscles."""
    t_bias: np.ndarray  # [N]
    k_stiff: np.ndarray  # [N/mm]

    def __post_init__(self):
        t_bias = np.atleast_1d(np.asarray(self.t_bias, dtype=float))
        k_stiff = np.atleast_1d(np.asarray(self.k_stiff, dtype=float))
        if np.any(t_bias <= 0) or np.any(k_stiff <= 0):
            raise DimensionError("T_bias and K_stiff must be positive")
        object.__setattr__(self, "t_bias", t_bias)
        object.__setattr__(self, "k_stiff", k_stiff)

    def bias(self, n_muscles: int) -> np.ndarray:
        return np.broadcast_to(self.t_bias, (n_muscles,)).astype(float)

    def stiffness(self, n_muscles: int) -> np.ndarray:
        return np.broadcast_to(self.k_stiff, (n_muscles,)).astype(float)


def stiffness_targets(lengths, l_target, params: ControlParams) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=float)
    l_target = np.asarray(l_target, dtype=float)
    if lengths.shape != l_target.shape or lengths.ndim != 1:
        raise DimensionError(f"Length vectors differ in shape: {lengths.shape} vs {l_target.shape}")
    try:
        bias = params.bias(len(lengths))
        stiffness = params.stiffness(len(lengths))
    except ValueError as exc:
        raise DimensionError(f"Control parameters do not match {len(lengths)} muscles") from exc
    return bias + np.maximum(0.0, stiffness * (lengths - l_target))


class HoldSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cycles: int = Field(default=8, ge=1)
    shoulder_deg: float = -30.0
    elbow_deg: float = -60.0
    mass: float = Field(default=1.4, ge=0)  # [kg]


@dataclass
class HoldTrajectory:
    """Per-cycle log of a posture-holding run."""
    theta_target: np.ndarray
    joint_names: List[str]
    muscle_names: List[str]
    rows: List[dict] = field(default_factory=list)
    errors: List[float] = field(default_factory=list)  # max |theta_true - theta_target| [deg]
    aborted: bool = False
    reason: str = ""

    def record(self, cycle: int, theta_true: np.ndarray, l_target: np.ndarray, tensions: np.ndarray,
               converged: bool) -> None:
        error = float(np.degrees(np.max(np.abs(theta_true - self.theta_target))))
        self.errors.append(error)
        row = {"cycle": cycle}
        for name, target, actual in zip(self.joint_names, self.theta_target, theta_true):
            row[f"theta_target_{name}_deg"] = float(np.degrees(target))
            row[f"theta_true_{name}_deg"] = float(np.degrees(actual))
        for name, length, tension in zip(self.muscle_names, l_target, tensions):
            row[f"l_target_{name}_mm"] = float(length)
            row[f"tension_{name}_N"] = float(tension)
        row["error_deg"] = error
        row["converged"] = bool(converged)
        self.rows.append(row)

    @property
    def peak_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def final_error(self) -> float:
        return self.errors[-1] if self.errors else 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)


def hold_posture(sbi: "SelfBodyImage", plant: "PlantModel", theta_target, load: "ExternalLoad",
                 cycles: int, params: ControlParams, compensate: bool = True,
                 initial_load: Optional["ExternalLoad"] = None) -> HoldTrajectory:
    """
    Hold theta_target while the load acts on the hand.

    Cycle 0 settles under `initial_load` (no load by default) with the command
    computed from bias tensions; each later cycle applies `load` and commands
    ijmm(theta_target) + mrcm(theta_target, T_m) with T_m from the previous
    settle. With compensate=False the cycle-0 command is held throughout.
    """
    from bodyimage.plant import ExternalLoad

    theta_target = plant.chain.validate(theta_target)
    if np.any(theta_target < plant.chain.lower) or np.any(theta_target > plant.chain.upper):
        raise DimensionError("Target posture lies outside the joint limits")
    trajectory = HoldTrajectory(theta_target, plant.chain.names, plant.routing.names)

    tensions = params.bias(plant.routing.n_muscles)
    l_target = sbi.predict_lengths(theta_target, tensions)
    result = plant.settle(l_target, initial_load or ExternalLoad(), params, theta_target)
    trajectory.record(0, result.theta, l_target, result.tensions, result.converged)

    for cycle in range(1, cycles + 1):
        if result.over_tension:
            trajectory.aborted = True
            trajectory.reason = f"over-tension at cycle {cycle - 1}"
            logger.warning("hold_posture aborted: %s", trajectory.reason)
            break
        if compensate:
            l_target = sbi.predict_lengths(theta_target, result.tensions)
        result = plant.settle(l_target, load, params, result.theta)
        trajectory.record(cycle, result.theta, l_target, result.tensions, result.converged)
    return trajectory


def posture_preset(chain: KinematicChain, name: str = "dumbbell",
                   settings: Optional[HoldSettings] = None) -> np.ndarray:
    """Named postures; "dumbbell" sets shoulder pitch and elbow by joint name, other joints 0."""
    if name != "dumbbell":
        raise KeyError(f"Unknown posture preset '{name}'")
    settings = settings or HoldSettings()
    theta = np.zeros(chain.n_joints)
    shoulder = "shoulder_pitch" if "shoulder_pitch" in chain.names else "shoulder"
    theta[chain.joint_index(shoulder)] = np.radians(settings.shoulder_deg)
    theta[chain.joint_index("elbow")] = np.radians(settings.elbow_deg)
    return theta
