"""
Plant - simulated tendon-driven arm: true routing, softness, static equilibrium and vision

The plant is the ground truth the learner never sees. Its routing is the
nominal routing with displaced waypoints, and each muscle's motor-side
length differs from its geometric length by a tension-dependent softness
displacement. Generalized forces are in N*mm, lengths in mm.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from bodyimage.control import ControlParams, stiffness_targets
from bodyimage.errors import DimensionError
from bodyimage.kinematics import KinematicChain, Pose, forward_kinematics, hand_jacobian, link_frames, point_jacobian
from bodyimage.muscle_geometry import Muscle, MuscleRouting, Waypoint, absolute_lengths, muscle_jacobian, relative_lengths

logger = logging.getLogger(__name__)

STANDARD_GRAVITY = 9.81  # [m/s^2] == [N/kg]


@dataclass(frozen=True, eq=False)
class SoftnessParams:
    """
    Tension-dependent route change, as a displacement delta = -D(theta) T.

    Diagonal of D: wire strain l_abs / k plus structure and foam terms per
    normalized tension. Off-diagonal: interference between muscles.
    """
    wire_stiffness: float = 12000.0  # k [N per unit strain]
    structure: float = 6.0  # [mm per normalized tension]
    foam: float = 3.0  # [mm per normalized tension]
    foam_gain: float = 0.5  # posture modulation of the foam term, |gain| < 1
    interference: Optional[np.ndarray] = None  # (M, M), zero diagonal [mm per normalized tension]
    tension_scale: float = 500.0

    def __post_init__(self):
        if self.wire_stiffness <= 0:
            raise DimensionError("Wire spring constant must be positive")
        if self.structure < 0 or self.foam < 0 or abs(self.foam_gain) >= 1:
            raise DimensionError("Structure and foam coefficients must be non-negative, |foam_gain| < 1")
        if self.interference is not None:
            matrix = np.array(self.interference, dtype=float)
            if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or np.any(matrix < 0):
                raise DimensionError("Interference must be a square non-negative matrix")
            np.fill_diagonal(matrix, 0.0)
            object.__setattr__(self, "interference", matrix)

    @classmethod
    def rigid(cls) -> "SoftnessParams":
        return cls(wire_stiffness=np.inf, structure=0.0, foam=0.0, foam_gain=0.0)

    def foam_profile(self, theta: np.ndarray) -> float:
        return self.foam * (1.0 + self.foam_gain * np.sin(np.sum(theta)))


@dataclass(frozen=True, eq=False)
class ExternalLoad:
    """Hand wrench (force [N], torque [N*mm]) plus an optional point mass held in the hand."""
    wrench: np.ndarray = field(default_factory=lambda: np.zeros(6))
    mass: float = 0.0  # [kg]

    def __post_init__(self):
        wrench = np.asarray(self.wrench, dtype=float)
        if wrench.shape != (6,) or not np.all(np.isfinite(wrench)) or not np.isfinite(self.mass):
            raise DimensionError("Load needs a finite 6-vector wrench and a finite mass")
        if self.mass < 0:
            raise DimensionError("Load mass must be non-negative")
        object.__setattr__(self, "wrench", wrench)

    @classmethod
    def dumbbell(cls, mass: float) -> "ExternalLoad":
        return cls(mass=mass)

    @classmethod
    def force(cls, force) -> "ExternalLoad":
        return cls(wrench=np.concatenate([np.asarray(force, dtype=float), np.zeros(3)]))

    @property
    def active(self) -> bool:
        return self.mass > 0 or bool(np.any(self.wrench != 0))

    def hand_wrench(self, gravity: np.ndarray) -> np.ndarray:
        wrench = self.wrench.copy()
        wrench[:3] += self.mass * gravity
        return wrench


@dataclass
class SettleSettings:
    tolerance: float = 1e-3  # [N*mm] per joint
    max_iterations: int = 60
    fd_step: float = 1e-6  # [rad]
    line_search_steps: int = 12
    relaxation_steps: int = 200


@dataclass
class SettleResult:
    theta: np.ndarray  # theta_true [rad]
    lengths: np.ndarray  # l_m [mm]
    tensions: np.ndarray  # T_m [N]
    residual: np.ndarray  # [N*mm]
    converged: bool
    over_tension: bool
    iterations: int
    method: str


@dataclass(frozen=True, eq=False)
class PlantModel:
    chain: KinematicChain
    routing: MuscleRouting  # true routing
    softness: SoftnessParams = field(default_factory=SoftnessParams)
    masses: Optional[np.ndarray] = None  # [kg] per link
    centers: Optional[np.ndarray] = None  # (J, 3) centres of mass in link frames [mm]
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -STANDARD_GRAVITY]))
    vision_position_std: float = 0.0  # [mm]
    vision_orientation_std: float = 0.0  # [rad]
    tension_cap: float = 2000.0  # [N]
    perturbation_magnitude: float = 0.0  # [mm], recorded only
    perturbation_seed: Optional[int] = None
    settle_settings: SettleSettings = field(default_factory=SettleSettings)

    def __post_init__(self):
        n = self.chain.n_joints
        masses = np.zeros(n) if self.masses is None else np.asarray(self.masses, dtype=float)
        centers = np.zeros((n, 3)) if self.centers is None else np.asarray(self.centers, dtype=float)
        if masses.shape != (n,) or np.any(masses < 0):
            raise DimensionError("Masses must be one non-negative value per link")
        if centers.shape != (n, 3):
            raise DimensionError("Centres of mass must be a (J, 3) array")
        if self.softness.interference is not None and self.softness.interference.shape[0] != self.routing.n_muscles:
            raise DimensionError("Interference matrix does not match the muscle count")
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))

    @property
    def n_muscles(self) -> int:
        return self.routing.n_muscles

    def settle(self, l_target, load: ExternalLoad, params: ControlParams, theta_guess) -> SettleResult:
        return settle(self, l_target, load, params, theta_guess)

    def observe_vision(self, theta_true, seed) -> Pose:
        return observe_vision(self, theta_true, seed)


# Softness and tensions


def softness_matrix(plant: PlantModel, theta) -> np.ndarray:
    """D(theta) with delta = -D T [mm/N]."""
    soft = plant.softness
    l_abs = absolute_lengths(plant.routing, plant.chain, theta)
    diagonal = l_abs / soft.wire_stiffness + (soft.structure + soft.foam_profile(theta)) / soft.tension_scale
    matrix = np.diag(diagonal)
    if soft.interference is not None:
        matrix += soft.interference / soft.tension_scale
    return matrix


def softness_displacement(plant: PlantModel, theta, tensions) -> np.ndarray:
    """Motor-side minus geometric length for the given tensions; never positive."""
    tensions = np.asarray(tensions, dtype=float)
    if tensions.shape != (plant.n_muscles,) or np.any(tensions < 0):
        raise DimensionError("Tensions must be a non-negative vector with one entry per muscle")
    return -softness_matrix(plant, theta) @ tensions


def equilibrium_tensions(plant: PlantModel, theta, l_target, params: ControlParams,
                         max_rounds: int = 50) -> Tuple[np.ndarray, np.ndarray]:
    """
    Tensions and motor-side lengths consistent with stiffness control at fixed theta.

    Solves T = T_bias + max(0, K (l_geo - D T - l_target)) by iterating on the
    set of stretched muscles; each round is a linear solve on that set.
    """
    theta = plant.chain.validate(theta)
    l_target = np.asarray(l_target, dtype=float)
    n = plant.n_muscles
    if l_target.shape != (n,):
        raise DimensionError(f"Expected {n} target lengths, got shape {l_target.shape}")
    geometric = relative_lengths(plant.routing, plant.chain, theta)
    matrix = softness_matrix(plant, theta)
    bias = params.bias(n)
    stiffness = params.stiffness(n)

    tensions = bias.copy()
    active = geometric - matrix @ tensions - l_target > 0
    seen = set()
    for _ in range(max_rounds):
        key = active.tobytes()
        if key in seen:
            break
        seen.add(key)
        tensions = bias.copy()
        if np.any(active):
            idx = np.flatnonzero(active)
            rest = np.flatnonzero(~active)
            k = stiffness[idx]
            system = np.eye(len(idx)) + k[:, None] * matrix[np.ix_(idx, idx)]
            rhs = bias[idx] + k * (geometric[idx] - l_target[idx] - matrix[np.ix_(idx, rest)] @ bias[rest])
            tensions[idx] = np.linalg.solve(system, rhs)
        stretch = geometric - matrix @ tensions - l_target
        updated = stretch > 0
        if np.array_equal(updated, active):
            break
        active = updated

    tensions = np.maximum(tensions, 0.0)
    lengths = geometric - matrix @ tensions
    return stiffness_targets(lengths, l_target, params), lengths


def external_torques(plant: PlantModel, theta, load: Optional[ExternalLoad] = None) -> np.ndarray:
    """Generalized forces of gravity on the links and of the hand load [N*mm]."""
    frames = link_frames(plant.chain, theta)
    torques = np.zeros(plant.chain.n_joints)
    for i in range(plant.chain.n_joints):
        if plant.masses[i] == 0:
            continue
        point = (frames[i + 1] @ np.append(plant.centers[i], 1.0))[:3]
        torques += point_jacobian(plant.chain, frames, i + 1, point).T @ (plant.masses[i] * plant.gravity)
    if load is not None and load.active:
        torques += hand_jacobian(plant.chain, theta).T @ load.hand_wrench(plant.gravity)
    return torques


def _evaluate(plant: PlantModel, theta, l_target, load: ExternalLoad,
              params: ControlParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    tensions, lengths = equilibrium_tensions(plant, theta, l_target, params)
    jac = muscle_jacobian(plant.routing, plant.chain, theta).matrix
    residual = -jac.T @ tensions + external_torques(plant, theta, load)
    return residual, tensions, lengths


def _project(plant: PlantModel, theta: np.ndarray, residual: np.ndarray) -> np.ndarray:
    """Drop residual components pushing into a joint stop; the stop supplies them."""
    projected = residual.copy()
    at_lower = (theta <= plant.chain.lower) & (residual < 0)
    at_upper = (theta >= plant.chain.upper) & (residual > 0)
    projected[at_lower | at_upper] = 0.0
    return projected


def joint_residual(plant: PlantModel, theta, l_target, load: ExternalLoad, params: ControlParams) -> np.ndarray:
    """Net generalized force on every joint; zero at a static equilibrium."""
    return _evaluate(plant, theta, l_target, load, params)[0]


def _residual_jacobian(plant, theta, l_target, load, params, h) -> np.ndarray:
    columns = []
    for j in range(len(theta)):
        step = np.zeros(len(theta))
        step[j] = h
        plus = joint_residual(plant, theta + step, l_target, load, params)
        minus = joint_residual(plant, theta - step, l_target, load, params)
        columns.append((plus - minus) / (2.0 * h))
    return np.column_stack(columns)


def settle(plant: PlantModel, l_target, load: ExternalLoad, params: ControlParams, theta_guess) -> SettleResult:
    """
    Static equilibrium reached from theta_guess.

    Damped Newton on the joint residual with a backtracking line search;
    when the line search stalls a block of relaxation steps along the
    residual (descent on the potential energy) follows before Newton resumes.
    """
    settings = plant.settle_settings
    chain = plant.chain
    theta = chain.clamp(theta_guess)
    residual, tensions, lengths = _evaluate(plant, theta, l_target, load, params)
    projected = _project(plant, theta, residual)
    method = "newton"
    iterations = 0

    while iterations < settings.max_iterations and np.max(np.abs(projected)) >= settings.tolerance:
        iterations += 1
        jac = _residual_jacobian(plant, theta, l_target, load, params, settings.fd_step)
        step = -np.linalg.pinv(jac) @ projected

        alpha = 1.0
        improved = False
        for _ in range(settings.line_search_steps):
            trial = chain.clamp(theta + alpha * step)
            trial_residual, trial_tensions, trial_lengths = _evaluate(plant, trial, l_target, load, params)
            trial_projected = _project(plant, trial, trial_residual)
            if np.linalg.norm(trial_projected) < np.linalg.norm(projected):
                theta, residual, tensions, lengths = trial, trial_residual, trial_tensions, trial_lengths
                projected = trial_projected
                improved = True
                break
            alpha *= 0.5
        if improved:
            continue

        method = "newton+relaxation"
        rate = 0.5 / max(np.max(np.abs(np.diag(jac))), 1e-9)
        for _ in range(settings.relaxation_steps):
            trial = chain.clamp(theta + rate * projected)
            trial_residual, trial_tensions, trial_lengths = _evaluate(plant, trial, l_target, load, params)
            trial_projected = _project(plant, trial, trial_residual)
            if np.linalg.norm(trial_projected) < np.linalg.norm(projected):
                theta, residual, tensions, lengths = trial, trial_residual, trial_tensions, trial_lengths
                projected = trial_projected
            else:
                rate *= 0.5
            if np.max(np.abs(projected)) < settings.tolerance:
                break

    converged = bool(np.max(np.abs(projected)) < settings.tolerance)
    over_tension = bool(np.max(tensions) > plant.tension_cap)
    if not converged:
        logger.debug("settle unconverged after %d iterations, residual %.3g N*mm",
                     iterations, np.max(np.abs(projected)))
    if over_tension:
        logger.warning("settle: tension %.1f N exceeds cap %.1f N", np.max(tensions), plant.tension_cap)
    return SettleResult(theta, lengths, tensions, projected, converged, over_tension, iterations, method)


# Vision and perturbation


def observe_vision(plant: PlantModel, theta_true, seed: Union[int, np.random.Generator, None]) -> Pose:
    """Hand pose from forward kinematics with Gaussian position and rotation-vector noise."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pose = forward_kinematics(plant.chain, theta_true)
    position = pose.position
    if plant.vision_position_std > 0:
        position = position + rng.normal(0.0, plant.vision_position_std, 3)
    if plant.vision_orientation_std > 0:
        noise = Rotation.from_rotvec(rng.normal(0.0, plant.vision_orientation_std, 3))
        quat = (noise * pose.rotation).as_quat()
        return Pose(position, quat / np.linalg.norm(quat))
    return Pose(position, pose.orientation)


def perturb_routing(nominal: MuscleRouting, chain: KinematicChain, magnitude: float, seed) -> MuscleRouting:
    """Displace every waypoint by a seeded vector drawn uniformly from the ball of radius `magnitude`."""
    if magnitude < 0:
        raise DimensionError("Perturbation magnitude must be non-negative")
    if magnitude == 0:
        return nominal
    rng = np.random.default_rng(seed)
    muscles = []
    for muscle in nominal.muscles:
        waypoints = []
        for waypoint in muscle.waypoints:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            radius = magnitude * rng.uniform() ** (1.0 / 3.0)
            waypoints.append(Waypoint(waypoint.link, waypoint.offset + radius * direction))
        muscles.append(Muscle(muscle.name, tuple(waypoints)))
    return MuscleRouting.build(muscles, chain)
