"""
Config - model file schema and builders for chains, routings, plants and run settings

A model file is JSON. Angles are given in degrees, lengths in mm, forces in N.
"""
import json
import logging
import os
from importlib import resources
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.spatial.transform import Rotation

from bodyimage.control import ControlParams, HoldSettings
from bodyimage.errors import ModelFileError
from bodyimage.estimator import EstimatorSettings
from bodyimage.kinematics import KinematicChain, Link, homogeneous
from bodyimage.muscle_geometry import Muscle, MuscleRouting, Waypoint
from bodyimage.plant import PlantModel, SoftnessParams, perturb_routing
from bodyimage.self_body_image import LearnerSettings
from bodyimage.updaters import MinibatchSpec, UpdateGate, UpdaterSettings

logger = logging.getLogger(__name__)

FIXTURES = ("planar_2dof", "arm_4dof")
LOG_DIR_ENV = "BODYIMAGE_LOG_DIR"
DEFAULT_LOG_DIR = Path.home() / ".bodyimage" / "runs"

Vector3 = Tuple[float, float, float]


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LinkSpec(_Block):
    name: str
    origin_mm: Vector3 = (0.0, 0.0, 0.0)
    rpy_deg: Vector3 = (0.0, 0.0, 0.0)
    axis: Vector3
    lower_deg: float
    upper_deg: float
    mass_kg: float = Field(default=0.0, ge=0)
    com_mm: Vector3 = (0.0, 0.0, 0.0)
    frozen: bool = False  # inverse kinematics keeps this joint at its seed angle


class ChainSpec(_Block):
    links: List[LinkSpec] = Field(min_length=1)
    hand_offset_mm: Vector3 = (0.0, 0.0, 0.0)


class WaypointSpec(_Block):
    link: int = Field(ge=0)
    offset_mm: Vector3


class MuscleSpec(_Block):
    name: str
    waypoints: List[WaypointSpec] = Field(min_length=2)


class RoutingSpec(_Block):
    muscles: List[MuscleSpec] = Field(min_length=1)


class PlantSpec(_Block):
    wire_stiffness: float = Field(default=12000.0, gt=0)
    structure_mm: float = Field(default=6.0, ge=0)
    foam_mm: float = Field(default=3.0, ge=0)
    foam_gain: float = Field(default=0.5, gt=-1, lt=1)
    interference_mm: float = Field(default=0.5, ge=0)
    perturbation_mm: float = Field(default=10.0, ge=0)
    perturbation_seed: int = 7
    gravity: Vector3 = (0.0, 0.0, -9.81)
    vision_position_std_mm: float = Field(default=1.0, ge=0)
    vision_orientation_std_deg: float = Field(default=0.5, ge=0)
    tension_cap_n: float = Field(default=2000.0, gt=0)


class ControlSpec(_Block):
    t_bias_n: float = Field(default=20.0, gt=0)
    k_stiff_n_per_mm: float = Field(default=100.0, gt=0)


class PhaseSpec(_Block):
    """One block of the online-learning schedule."""
    kind: Literal["commands", "loads"]
    targets: int = Field(default=10, ge=1)
    dwell: int = Field(default=20, ge=1)
    antagonism: bool = True
    vision: bool = True
    range_fraction: float = Field(default=0.6, gt=0, le=1)
    posture_deg: Optional[List[float]] = None
    loads_n: List[Vector3] = Field(default_factory=list)

    @model_validator(mode="after")
    def _loads_need_forces(self):
        if self.kind == "loads" and not self.loads_n:
            raise ValueError("a loads phase needs at least one hand force in loads_n")
        return self


class ScheduleSpec(_Block):
    phases: List[PhaseSpec] = Field(default_factory=list)

    def without_updates(self) -> "ScheduleSpec":
        """The same phases with both updaters switched off."""
        return ScheduleSpec(phases=[p.model_copy(update={"antagonism": False, "vision": False})
                                    for p in self.phases])


class EstimateSpec(_Block):
    loads_n: List[Vector3] = Field(default_factory=lambda: [(0.0, 0.0, 0.0)])
    dwell: int = Field(default=30, ge=1)
    seeds: int = Field(default=10, ge=1)
    range_fraction: float = Field(default=0.4, gt=0, le=1)
    perturbed: bool = False


class GraspSpec(HoldSettings):
    perturbed: bool = False


class TensionSweepSpec(_Block):
    postures: int = Field(default=12, ge=1)
    range_fraction: float = Field(default=0.6, gt=0, le=1)
    learn_targets: int = Field(default=20, ge=1)
    dwell: int = Field(default=20, ge=1)


class ModelFile(_Block):
    """The whole model file; every block but chain and routing has defaults."""
    name: str = "model"
    seed: int = 0
    chain: ChainSpec
    routing: RoutingSpec
    plant: PlantSpec = Field(default_factory=PlantSpec)
    control: ControlSpec = Field(default_factory=ControlSpec)
    learner: LearnerSettings = Field(default_factory=LearnerSettings)
    estimator: EstimatorSettings = Field(default_factory=EstimatorSettings)
    updaters: UpdaterSettings = Field(default_factory=UpdaterSettings)
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    estimate: EstimateSpec = Field(default_factory=EstimateSpec)
    grasp: GraspSpec = Field(default_factory=GraspSpec)
    tension_sweep: TensionSweepSpec = Field(default_factory=TensionSweepSpec)

    def build_chain(self) -> KinematicChain:
        links = []
        for spec in self.chain.links:
            rotation = Rotation.from_euler("xyz", spec.rpy_deg, degrees=True).as_matrix()
            axis = np.asarray(spec.axis, dtype=float)
            links.append(Link(
                name=spec.name,
                origin=homogeneous(rotation, spec.origin_mm),
                axis=axis / np.linalg.norm(axis),
                lower=float(np.radians(spec.lower_deg)),
                upper=float(np.radians(spec.upper_deg)),
            ))
        frozen = np.array([spec.frozen for spec in self.chain.links], dtype=bool)
        return KinematicChain(tuple(links), homogeneous(np.eye(3), self.chain.hand_offset_mm), frozen)

    def build_routing(self, chain: KinematicChain) -> MuscleRouting:
        """The nominal (man-made) routing."""
        muscles = [Muscle(m.name, tuple(Waypoint(w.link, np.asarray(w.offset_mm)) for w in m.waypoints))
                   for m in self.routing.muscles]
        return MuscleRouting.build(muscles, chain)

    def softness(self, n_muscles: int) -> SoftnessParams:
        interference = None
        if self.plant.interference_mm > 0 and n_muscles > 1:
            interference = self.plant.interference_mm * (np.ones((n_muscles, n_muscles)) - np.eye(n_muscles)) \
                / (n_muscles - 1)
        return SoftnessParams(
            wire_stiffness=self.plant.wire_stiffness,
            structure=self.plant.structure_mm,
            foam=self.plant.foam_mm,
            foam_gain=self.plant.foam_gain,
            interference=interference,
            tension_scale=self.learner.tension_scale,
        )

    def build_plant(self, chain: KinematicChain, nominal: MuscleRouting, perturbed: bool = True) -> PlantModel:
        magnitude = self.plant.perturbation_mm if perturbed else 0.0
        routing = perturb_routing(nominal, chain, magnitude, self.plant.perturbation_seed)
        return PlantModel(
            chain=chain,
            routing=routing,
            softness=self.softness(routing.n_muscles),
            masses=np.array([link.mass_kg for link in self.chain.links]),
            centers=np.array([link.com_mm for link in self.chain.links], dtype=float),
            gravity=np.asarray(self.plant.gravity, dtype=float),
            vision_position_std=self.plant.vision_position_std_mm,
            vision_orientation_std=float(np.radians(self.plant.vision_orientation_std_deg)),
            tension_cap=self.plant.tension_cap_n,
            perturbation_magnitude=magnitude,
            perturbation_seed=self.plant.perturbation_seed,
        )

    def control_params(self) -> ControlParams:
        return ControlParams(np.array(self.control.t_bias_n), np.array(self.control.k_stiff_n_per_mm))

    def minibatch_spec(self) -> MinibatchSpec:
        return self.updaters.spec

    def make_gate(self) -> UpdateGate:
        return UpdateGate(
            window=self.estimator.static_window,
            static_threshold=self.estimator.static_threshold,
            movement_threshold=float(np.radians(self.updaters.movement_threshold_deg)),
        )


def _read_source(source: Union[str, Path]) -> Tuple[str, str]:
    path = Path(source)
    if path.is_file():
        return path.read_text(encoding="utf-8"), str(path)
    if str(source) in FIXTURES:
        fixture = resources.files("bodyimage.fixtures").joinpath(f"{source}.json")
        return fixture.read_text(encoding="utf-8"), f"fixture:{source}"
    raise ModelFileError(f"{source}: no such model file or built-in fixture ({', '.join(FIXTURES)})")


def parse_model_file(text: str, origin: str = "<string>") -> ModelFile:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{origin}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return ModelFile.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}"
                             for err in exc.errors())
        raise ModelFileError(f"{origin}: {problems}") from exc


def load_model_file(source: Union[str, Path]) -> ModelFile:
    """Load a model file from a path or a built-in fixture name."""
    text, origin = _read_source(source)
    model = parse_model_file(text, origin)
    logger.debug("loaded model '%s' from %s", model.name, origin)
    return model


def resolve_log_dir(explicit: Optional[Union[str, Path]] = None) -> Path:
    """Explicit directory, else $BODYIMAGE_LOG_DIR (also read from .env), else ~/.bodyimage/runs."""
    load_dotenv(find_dotenv(usecwd=True))
    if explicit:
        log_dir = Path(explicit)
    elif os.environ.get(LOG_DIR_ENV):
        log_dir = Path(os.environ[LOG_DIR_ENV])
    else:
        log_dir = DEFAULT_LOG_DIR
    log_dir.mkdir(parents=True, exist_ok=True)
    return log_dir
