"""
Muscle Geometry - waypoint muscle routing, muscle lengths and the muscle Jacobian

Muscles run in straight segments between waypoints fixed to links. Relative
lengths are measured from the initial posture (all joint angles zero).
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from bodyimage.errors import DimensionError
from bodyimage.kinematics import KinematicChain, link_frames

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-4


@dataclass(frozen=True, eq=False)
class Waypoint:
    link: int  # 0 = base, i = link driven by joint i
    offset: np.ndarray  # [mm] in the link frame

    def __post_init__(self):
        offset = np.asarray(self.offset, dtype=float)
        if offset.shape != (3,) or not np.all(np.isfinite(offset)):
            raise DimensionError("Waypoint offset must be a finite 3-vector")
        object.__setattr__(self, "offset", offset)


@dataclass(frozen=True, eq=False)
class Muscle:
    name: str
    waypoints: Tuple[Waypoint, ...]


@dataclass(frozen=True, eq=False)
class MuscleRouting:
    """Muscle routes plus absolute lengths at the initial posture."""
    muscles: Tuple[Muscle, ...]
    rest_lengths: np.ndarray

    def __post_init__(self):
        muscles = tuple(self.muscles)
        if not muscles:
            raise DimensionError("Routing needs at least one muscle")
        links, offsets, owners = [], [], []
        for index, muscle in enumerate(muscles):
            if len(muscle.waypoints) < 2:
                raise DimensionError(f"Muscle '{muscle.name}' needs at least two waypoints")
            for waypoint in muscle.waypoints:
                links.append(waypoint.link)
                offsets.append(waypoint.offset)
                owners.append(index)
            # the segment leaving a muscle's last waypoint bridges to the next muscle
            owners[-1] = -1
        object.__setattr__(self, "muscles", muscles)
        object.__setattr__(self, "rest_lengths", np.asarray(self.rest_lengths, dtype=float))
        object.__setattr__(self, "_links", np.array(links))
        object.__setattr__(self, "_offsets", np.hstack([np.array(offsets), np.ones((len(offsets), 1))]))
        object.__setattr__(self, "_segment_owner", np.array(owners[:-1]))

    @classmethod
    def build(cls, muscles: Sequence[Muscle], chain: KinematicChain) -> "MuscleRouting":
        """Validate against the chain and cache lengths at the initial posture."""
        for muscle in muscles:
            for waypoint in muscle.waypoints:
                if not 0 <= waypoint.link <= chain.n_joints:
                    raise DimensionError(f"Muscle '{muscle.name}' references missing link {waypoint.link}")
        routing = cls(tuple(muscles), np.zeros(len(muscles)))
        rest = absolute_lengths(routing, chain, np.zeros(chain.n_joints))
        object.__setattr__(routing, "rest_lengths", rest)
        return routing

    @property
    def n_muscles(self) -> int:
        return len(self.muscles)

    @property
    def names(self) -> list:
        return [muscle.name for muscle in self.muscles]


@dataclass(frozen=True, eq=False)
class MuscleJacobian:
    """Muscle Jacobian [mm/rad]; `one_sided` flags columns computed at a joint limit."""
    matrix: np.ndarray
    one_sided: np.ndarray

    @property
    def flagged(self) -> bool:
        return bool(np.any(self.one_sided))


def waypoint_positions(routing: MuscleRouting, chain: KinematicChain, theta) -> np.ndarray:
    frames = link_frames(chain, theta)
    placed = np.einsum("nij,nj->ni", frames[routing._links], routing._offsets)
    return placed[:, :3]


def absolute_lengths(routing: MuscleRouting, chain: KinematicChain, theta) -> np.ndarray:
    """Path length of every muscle [mm] at joint angles theta."""
    positions = waypoint_positions(routing, chain, theta)
    segments = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    owned = routing._segment_owner >= 0
    return np.bincount(routing._segment_owner[owned], weights=segments[owned],
                       minlength=routing.n_muscles)


def relative_lengths(routing: MuscleRouting, chain: KinematicChain, theta) -> np.ndarray:
    """Change of muscle length from the initial posture [mm]."""
    return absolute_lengths(routing, chain, theta) - routing.rest_lengths


def finite_difference_jacobian(fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray,
                               lower: np.ndarray, upper: np.ndarray,
                               h: float = DEFAULT_STEP) -> MuscleJacobian:
    """
    Central differences of fn over theta.

    Columns whose central stencil leaves [lower, upper] fall back to a
    one-sided difference and are flagged.
    """
    if h <= 0:
        raise DimensionError("Finite-difference step must be positive")
    theta = np.asarray(theta, dtype=float)
    base: Optional[np.ndarray] = None
    columns = []
    one_sided = np.zeros(theta.size, dtype=bool)
    for j in range(theta.size):
        step = np.zeros(theta.size)
        step[j] = h
        above = theta[j] + h <= upper[j]
        below = theta[j] - h >= lower[j]
        if above and below:
            columns.append((fn(theta + step) - fn(theta - step)) / (2.0 * h))
            continue
        one_sided[j] = True
        if base is None:
            base = fn(theta)
        if above:
            columns.append((fn(theta + step) - base) / h)
        else:
            columns.append((base - fn(theta - step)) / h)
    return MuscleJacobian(np.column_stack(columns), one_sided)


def muscle_jacobian(routing: MuscleRouting, chain: KinematicChain, theta,
                    h: float = DEFAULT_STEP) -> MuscleJacobian:
    theta = chain.validate(theta)
    return finite_difference_jacobian(
        lambda q: relative_lengths(routing, chain, q), theta, chain.lower, chain.upper, h)


class GeometricModel:
    """
    The man-made geometric model as a measurement model.

    Tension is ignored: lengths come straight from the routing.
    """

    def __init__(self, routing: MuscleRouting, chain: KinematicChain):
        self.routing = routing
        self.chain = chain

    @property
    def n_joints(self) -> int:
        return self.chain.n_joints

    @property
    def n_muscles(self) -> int:
        return self.routing.n_muscles

    @property
    def lower(self) -> np.ndarray:
        return self.chain.lower

    @property
    def upper(self) -> np.ndarray:
        return self.chain.upper

    def predict_lengths(self, theta, tensions=None) -> np.ndarray:
        return relative_lengths(self.routing, self.chain, theta)

    def length_jacobian(self, theta, tensions=None, h: float = DEFAULT_STEP) -> MuscleJacobian:
        return muscle_jacobian(self.routing, self.chain, theta, h)
