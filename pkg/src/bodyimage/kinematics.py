"""
Kinematics - serial-chain forward kinematics, hand poses and damped least-squares IK

Lengths are millimetres, angles radians. Quaternions are scalar-last (x, y, z, w),
the convention used by scipy's Rotation.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from bodyimage.errors import DimensionError

logger = logging.getLogger(__name__)

# A joint vector is a plain float64 array of joint angles [rad].
JointVector = np.ndarray

UNIT_TOLERANCE = 1e-9


def homogeneous(rotation: np.ndarray, translation: Sequence[float]) -> np.ndarray:
    """Build a 4x4 transform from a rotation matrix and a translation."""
    transform = np.eye(4)
    transform[:3, :3] = rotation
    transform[:3, 3] = translation
    return transform


def axis_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix about a unit axis (Rodrigues formula)."""
    x, y, z = axis
    skew = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * skew + (1.0 - np.cos(angle)) * (skew @ skew)


@dataclass(frozen=True, eq=False)
class Link:
    """One revolute joint and the link it drives."""
    name: str
    origin: np.ndarray  # 4x4 transform, parent frame -> joint frame at zero angle
    axis: np.ndarray
    lower: float
    upper: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) >= UNIT_TOLERANCE:
            raise DimensionError(f"Link '{self.name}': joint axis must be a unit 3-vector, got {self.axis}")
        if not self.lower < self.upper:
            raise DimensionError(f"Link '{self.name}': joint limits must satisfy lower < upper")
        origin = np.asarray(self.origin, dtype=float)
        if origin.shape != (4, 4):
            raise DimensionError(f"Link '{self.name}': origin must be a 4x4 transform")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "origin", origin)


@dataclass(frozen=True, eq=False)
class KinematicChain:
    """A single open chain of revolute joints ending in the hand frame."""
    links: Tuple[Link, ...]
    hand_offset: np.ndarray = field(default_factory=lambda: np.eye(4))
    frozen: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.links) == 0:
            raise DimensionError("Kinematic chain needs at least one joint")
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "hand_offset", np.asarray(self.hand_offset, dtype=float))
        frozen = np.zeros(len(self.links), dtype=bool) if self.frozen is None else np.asarray(self.frozen, dtype=bool)
        if frozen.shape != (len(self.links),):
            raise DimensionError("Frozen mask must have one entry per joint")
        object.__setattr__(self, "frozen", frozen)
        object.__setattr__(self, "_lower", np.array([link.lower for link in self.links]))
        object.__setattr__(self, "_upper", np.array([link.upper for link in self.links]))

    @property
    def n_joints(self) -> int:
        return len(self.links)

    @property
    def names(self) -> list:
        return [link.name for link in self.links]

    @property
    def lower(self) -> np.ndarray:
        return self._lower.copy()

    @property
    def upper(self) -> np.ndarray:
        return self._upper.copy()

    def joint_index(self, name: str) -> int:
        for index, link in enumerate(self.links):
            if link.name == name:
                return index
        raise KeyError(f"No joint named '{name}'")

    def validate(self, theta) -> np.ndarray:
        """Return theta as a float array, raising DimensionError on bad input."""
        values = np.asarray(theta, dtype=float)
        if values.shape != (self.n_joints,):
            raise DimensionError(f"Expected {self.n_joints} joint angles, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DimensionError("Joint angles must be finite")
        return values

    def clamp(self, theta) -> np.ndarray:
        return np.clip(self.validate(theta), self._lower, self._upper)

    def range_box(self, fraction: float) -> Tuple[np.ndarray, np.ndarray]:
        """Box of postures centred on the middle of the joint ranges, spanning `fraction` of each range."""
        middle = 0.5 * (self._lower + self._upper)
        half = 0.5 * fraction * (self._upper - self._lower)
        return middle - half, middle + half

    def with_frozen(self, frozen) -> "KinematicChain":
        return KinematicChain(self.links, self.hand_offset, np.asarray(frozen, dtype=bool))


@dataclass(frozen=True, eq=False)
class Pose:
    """Hand pose in the base frame: position [mm] and unit quaternion."""
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        position = np.asarray(self.position, dtype=float)
        orientation = np.asarray(self.orientation, dtype=float)
        if position.shape != (3,) or orientation.shape != (4,):
            raise DimensionError("Pose needs a 3-vector position and a 4-vector quaternion")
        if not (np.all(np.isfinite(position)) and np.all(np.isfinite(orientation))):
            raise DimensionError("Pose entries must be finite")
        if abs(np.linalg.norm(orientation) - 1.0) >= UNIT_TOLERANCE:
            raise DimensionError("Pose orientation must be a unit quaternion")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "orientation", orientation)

    @classmethod
    def from_matrix(cls, transform: np.ndarray) -> "Pose":
        quat = Rotation.from_matrix(transform[:3, :3]).as_quat()
        return cls(transform[:3, 3].copy(), quat / np.linalg.norm(quat))

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.orientation)

    def as_matrix(self) -> np.ndarray:
        return homogeneous(self.rotation.as_matrix(), self.position)


@dataclass
class IKSettings:
    damping: float = 1e-3
    orientation_weight: float = 100.0  # mm per rad
    max_iterations: int = 200
    position_tolerance: float = 1e-3  # mm
    orientation_tolerance: float = 1e-5  # rad
    line_search_steps: int = 6


@dataclass
class IKResult:
    angles: np.ndarray
    converged: bool
    position_error: float
    orientation_error: float
    iterations: int


def link_frames(chain: KinematicChain, theta) -> np.ndarray:
    """
    World transforms of every link frame.

    Index 0 is the base, index i the frame after joint i. The hand frame is
    frames[-1] @ chain.hand_offset.
    """
    theta = chain.validate(theta)
    frames = np.empty((chain.n_joints + 1, 4, 4))
    frames[0] = np.eye(4)
    current = frames[0]
    for i, link in enumerate(chain.links):
        joint = np.eye(4)
        joint[:3, :3] = axis_rotation(link.axis, theta[i])
        current = current @ link.origin @ joint
        frames[i + 1] = current
    return frames


def forward_kinematics(chain: KinematicChain, theta) -> Pose:
    frames = link_frames(chain, theta)
    return Pose.from_matrix(frames[-1] @ chain.hand_offset)


def _joint_axes(chain: KinematicChain, frames: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    axes = np.array([frames[i + 1][:3, :3] @ link.axis for i, link in enumerate(chain.links)])
    origins = frames[1:, :3, 3]
    return axes, origins


def point_jacobian(chain: KinematicChain, frames: np.ndarray, link: int, point: np.ndarray) -> np.ndarray:
    """3 x J Jacobian of a world point rigidly attached to `link` (0 = base)."""
    axes, origins = _joint_axes(chain, frames)
    jac = np.zeros((3, chain.n_joints))
    for j in range(min(link, chain.n_joints)):
        jac[:, j] = np.cross(axes[j], point - origins[j])
    return jac


def hand_jacobian(chain: KinematicChain, theta) -> np.ndarray:
    """6 x J geometric Jacobian of the hand: linear rows [mm/rad], angular rows [rad/rad]."""
    frames = link_frames(chain, theta)
    hand = (frames[-1] @ chain.hand_offset)[:3, 3]
    axes, _ = _joint_axes(chain, frames)
    jac = np.vstack([point_jacobian(chain, frames, chain.n_joints, hand), axes.T])
    jac[:, chain.frozen] = 0.0
    return jac


def pose_error(current: Pose, target: Pose) -> np.ndarray:
    """Position difference [mm] and rotation vector of target * current^-1 [rad]."""
    rotation = (target.rotation * current.rotation.inv()).as_rotvec()
    return np.concatenate([target.position - current.position, rotation])


def inverse_kinematics(chain: KinematicChain, theta_initial, target: Pose,
                       settings: Optional[IKSettings] = None) -> IKResult:
    """
    Damped least-squares IK seeded at theta_initial.

    Returns the best iterate with `converged=False` when the tolerance is not
    reached within the iteration cap; the caller decides what to do with it.
    """
    settings = settings or IKSettings()
    theta = chain.clamp(theta_initial)
    weights = np.array([1.0, 1.0, 1.0] + [settings.orientation_weight] * 3)

    def evaluate(q):
        err = pose_error(forward_kinematics(chain, q), target)
        return err, weights * err

    def done(err):
        return (np.linalg.norm(err[:3]) < settings.position_tolerance
                and np.linalg.norm(err[3:]) < settings.orientation_tolerance)

    err, weighted = evaluate(theta)
    damping = settings.damping
    iterations = 0
    while iterations < settings.max_iterations and not done(err):
        iterations += 1
        jac = weights[:, None] * hand_jacobian(chain, theta)
        normal = jac.T @ jac + damping ** 2 * np.eye(chain.n_joints)
        step = np.linalg.solve(normal, jac.T @ weighted)
        step[chain.frozen] = 0.0

        alpha = 1.0
        improved = False
        for _ in range(settings.line_search_steps):
            trial = chain.clamp(theta + alpha * step)
            trial_err, trial_weighted = evaluate(trial)
            if np.linalg.norm(trial_weighted) < np.linalg.norm(weighted):
                theta, err, weighted = trial, trial_err, trial_weighted
                improved = True
                break
            alpha *= 0.5
        if not improved:
            damping *= 2.0
            if damping > 1e6:
                break

    converged = done(err)
    if not converged:
        logger.debug("IK unconverged after %d iterations (position error %.3g mm)",
                     iterations, np.linalg.norm(err[:3]))
    return IKResult(
        angles=theta,
        converged=converged,
        position_error=float(np.linalg.norm(err[:3])),
        orientation_error=float(np.linalg.norm(err[3:])),
        iterations=iterations,
    )
