import numpy as np
import pytest

from bodyimage.control import ControlParams, stiffness_targets
from bodyimage.errors import DimensionError
from bodyimage.kinematics import forward_kinematics
from bodyimage.muscle_geometry import relative_lengths, waypoint_positions
from bodyimage.plant import (
    ExternalLoad,
    PlantModel,
    SoftnessParams,
    equilibrium_tensions,
    external_torques,
    joint_residual,
    observe_vision,
    perturb_routing,
    settle,
    softness_displacement,
    softness_matrix,
)

PARAMS = ControlParams(np.array(20.0), np.array(100.0))


@pytest.fixture
def weightless(chain, routing):
    return PlantModel(chain, routing, gravity=np.zeros(3))


@pytest.fixture
def loaded_plant(planar_model, chain, routing):
    return planar_model.build_plant(chain, routing, perturbed=False)


def test_softness_displacement_is_never_positive(weightless, rng):
    for _ in range(20):
        theta = rng.uniform(weightless.chain.lower, weightless.chain.upper)
        delta = softness_displacement(weightless, theta, rng.uniform(0, 500, 4))
        assert np.all(delta <= 0)
    np.testing.assert_array_equal(softness_displacement(weightless, np.zeros(2), np.zeros(4)), 0.0)


def test_softness_matrix_diagonal_terms(chain, routing):
    soft = SoftnessParams(wire_stiffness=10000.0, structure=5.0, foam=0.0, foam_gain=0.0)
    plant = PlantModel(chain, routing, softness=soft)
    matrix = softness_matrix(plant, np.zeros(2))
    expected = routing.rest_lengths / 10000.0 + 5.0 / 500.0
    np.testing.assert_allclose(np.diag(matrix), expected)
    np.testing.assert_allclose(matrix - np.diag(np.diag(matrix)), 0.0)


def test_rigid_plant_has_no_displacement(chain, routing):
    plant = PlantModel(chain, routing, softness=SoftnessParams.rigid())
    np.testing.assert_array_equal(softness_displacement(plant, np.radians([10.0, 5.0]), np.full(4, 300.0)), 0.0)


def test_softness_rejects_bad_parameters():
    with pytest.raises(DimensionError):
        SoftnessParams(wire_stiffness=0.0)
    with pytest.raises(DimensionError):
        SoftnessParams(foam_gain=1.5)
    with pytest.raises(DimensionError):
        SoftnessParams(interference=-np.ones((2, 2)))


def test_equilibrium_tensions_satisfy_stiffness_law(weightless, rng):
    for _ in range(10):
        theta = rng.uniform(weightless.chain.lower, weightless.chain.upper)
        l_target = relative_lengths(weightless.routing, weightless.chain, theta) - rng.uniform(0, 4, 4)
        tensions, lengths = equilibrium_tensions(weightless, theta, l_target, PARAMS)
        np.testing.assert_allclose(tensions, stiffness_targets(lengths, l_target, PARAMS), rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(
            lengths, relative_lengths(weightless.routing, weightless.chain, theta)
            + softness_displacement(weightless, theta, tensions), atol=1e-9)
        assert np.all(tensions >= 20.0 - 1e-9)


def test_slack_muscles_stay_at_bias(weightless):
    l_target = relative_lengths(weightless.routing, weightless.chain, np.zeros(2)) + 5.0
    tensions, _ = equilibrium_tensions(weightless, np.zeros(2), l_target, PARAMS)
    np.testing.assert_allclose(tensions, 20.0)


def test_hand_force_torques(chain, routing):
    plant = PlantModel(chain, routing)
    torques = external_torques(plant, np.zeros(2), ExternalLoad.force((10.0, 0.0, 0.0)))
    np.testing.assert_allclose(torques, [5000.0, 2500.0], atol=1e-6)


def test_gravity_vanishes_when_arm_hangs(loaded_plant):
    np.testing.assert_allclose(external_torques(loaded_plant, np.zeros(2)), 0.0, atol=1e-9)
    torques = external_torques(loaded_plant, np.radians([45.0, 0.0]))
    assert torques[0] < 0


def test_dumbbell_adds_hand_weight(loaded_plant):
    theta = np.radians([-30.0, -60.0])
    bare = external_torques(loaded_plant, theta)
    held = external_torques(loaded_plant, theta, ExternalLoad.dumbbell(1.4))
    assert not np.allclose(bare, held)


def test_settle_at_symmetric_posture_stays_put(weightless):
    l_target = relative_lengths(weightless.routing, weightless.chain, np.zeros(2))
    result = settle(weightless, l_target, ExternalLoad(), PARAMS, np.zeros(2))
    assert result.converged
    assert not result.over_tension
    np.testing.assert_allclose(result.theta, 0.0, atol=1e-6)


@pytest.mark.parametrize("target_deg", [(25.0, -40.0), (-40.0, 20.0)])
def test_settle_reaches_static_equilibrium(loaded_plant, target_deg):
    target = np.radians(target_deg)
    l_target = relative_lengths(loaded_plant.routing, loaded_plant.chain, target) - 2.0
    result = loaded_plant.settle(l_target, ExternalLoad(), PARAMS, np.zeros(2))
    assert result.converged
    residual = joint_residual(loaded_plant, result.theta, l_target, ExternalLoad(), PARAMS)
    assert np.max(np.abs(residual)) < 1e-3
    assert np.max(np.abs(np.degrees(result.theta - target))) < 10.0
    np.testing.assert_allclose(result.tensions, stiffness_targets(result.lengths, l_target, PARAMS), atol=1e-9)


def test_settle_under_hand_load_moves_the_arm(loaded_plant):
    target = np.radians([20.0, -40.0])
    l_target = relative_lengths(loaded_plant.routing, loaded_plant.chain, target) - 2.0
    free = loaded_plant.settle(l_target, ExternalLoad(), PARAMS, target)
    pushed = loaded_plant.settle(l_target, ExternalLoad.force((-20.0, 0.0, 0.0)), PARAMS, free.theta)
    assert pushed.converged
    assert pushed.theta[0] < free.theta[0]
    assert np.max(pushed.tensions) > np.max(free.tensions)


def test_settle_flags_over_tension(chain, routing):
    plant = PlantModel(chain, routing, gravity=np.zeros(3), tension_cap=10.0)
    result = settle(plant, np.zeros(4), ExternalLoad(), PARAMS, np.zeros(2))
    assert result.over_tension


def test_vision_without_noise_is_forward_kinematics(weightless):
    theta = np.radians([10.0, -20.0])
    pose = observe_vision(weightless, theta, seed=0)
    expected = forward_kinematics(weightless.chain, theta)
    np.testing.assert_allclose(pose.position, expected.position)
    np.testing.assert_allclose(pose.orientation, expected.orientation)


def test_vision_noise_is_seeded(loaded_plant):
    theta = np.radians([10.0, -20.0])
    first = loaded_plant.observe_vision(theta, 3)
    second = loaded_plant.observe_vision(theta, 3)
    np.testing.assert_array_equal(first.position, second.position)
    error = np.linalg.norm(first.position - forward_kinematics(loaded_plant.chain, theta).position)
    assert 0 < error < 10.0


def test_vision_position_noise_has_configured_spread(loaded_plant, rng):
    theta = np.radians([10.0, -20.0])
    expected = forward_kinematics(loaded_plant.chain, theta).position
    errors = np.array([loaded_plant.observe_vision(theta, rng).position - expected for _ in range(1000)])
    assert loaded_plant.vision_position_std == 1.0
    spread = errors.std(axis=0, ddof=1)
    assert np.all((spread >= 0.9) & (spread <= 1.1))
    assert np.all(np.abs(errors.mean(axis=0)) < 0.15)


def test_perturb_routing_stays_within_magnitude(chain, routing):
    perturbed = perturb_routing(routing, chain, 10.0, seed=7)
    shift = waypoint_positions(perturbed, chain, np.zeros(2)) - waypoint_positions(routing, chain, np.zeros(2))
    assert np.all(np.linalg.norm(shift, axis=1) <= 10.0 + 1e-9)
    assert np.any(np.linalg.norm(shift, axis=1) > 0.5)
    again = perturb_routing(routing, chain, 10.0, seed=7)
    np.testing.assert_array_equal(again.rest_lengths, perturbed.rest_lengths)
    assert perturb_routing(routing, chain, 0.0, seed=7) is routing


def test_perturb_routing_seeds_give_different_plants(chain, routing):
    first = perturb_routing(routing, chain, 10.0, seed=7)
    second = perturb_routing(routing, chain, 10.0, seed=8)
    assert not np.allclose(first.rest_lengths, second.rest_lengths)


def test_perturbed_plant_differs_from_nominal(planar_model, chain, routing):
    plant = planar_model.build_plant(chain, routing, perturbed=True)
    theta = np.radians([30.0, -30.0])
    difference = relative_lengths(plant.routing, chain, theta) - relative_lengths(routing, chain, theta)
    assert np.max(np.abs(difference)) > 0.1
    assert plant.perturbation_magnitude == 10.0


def test_load_validation():
    with pytest.raises(DimensionError):
        ExternalLoad(wrench=np.zeros(5))
    with pytest.raises(DimensionError):
        ExternalLoad(mass=-1.0)
    assert not ExternalLoad().active
    assert ExternalLoad.dumbbell(1.0).active
