import numpy as np
import pytest

from bodyimage.errors import DimensionError
from bodyimage.muscle_geometry import (
    GeometricModel,
    Muscle,
    MuscleRouting,
    Waypoint,
    absolute_lengths,
    finite_difference_jacobian,
    muscle_jacobian,
    relative_lengths,
    waypoint_positions,
)


def _pin_joint_arm(angle: float, side: float) -> float:
    """d(length)/d(angle) of a segment from (side*30, 30) on the base to R(angle)(side*30, -30)."""
    fixed = np.array([side * 30.0, 30.0])
    c, s = np.cos(angle), np.sin(angle)
    moving = np.array([side * 30.0 * c + 30.0 * s, side * 30.0 * s - 30.0 * c])
    velocity = np.array([-moving[1], moving[0]])
    segment = moving - fixed
    return float(segment @ velocity / np.linalg.norm(segment))


def test_relative_lengths_are_zero_at_initial_posture(chain, routing):
    np.testing.assert_allclose(relative_lengths(routing, chain, np.zeros(2)), 0.0, atol=1e-12)


def test_rest_lengths_sum_segments(chain, routing):
    # 90 mm inside the base plus 60 mm across the joint
    np.testing.assert_allclose(routing.rest_lengths, [150.0, 150.0, 180.0, 180.0], atol=1e-9)
    np.testing.assert_allclose(absolute_lengths(routing, chain, np.zeros(2)), routing.rest_lengths)


def test_waypoint_positions_in_world(chain, routing):
    positions = waypoint_positions(routing, chain, np.zeros(2))
    assert positions.shape == (12, 3)
    np.testing.assert_allclose(positions[2], [30.0, -30.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(positions[8], [30.0, -280.0, 0.0], atol=1e-9)


def test_flexor_shortens_when_joint_flexes(chain, routing):
    lengths = relative_lengths(routing, chain, np.radians([20.0, 20.0]))
    assert lengths[0] < 0 < lengths[1]
    assert lengths[2] < 0 < lengths[3]


@pytest.mark.parametrize("shoulder_deg", [-60.0, -20.0, 0.0, 35.0, 70.0])
def test_muscle_jacobian_matches_analytic_moment_arm(chain, routing, shoulder_deg):
    angle = np.radians(shoulder_deg)
    jac = muscle_jacobian(routing, chain, np.array([angle, 0.0])).matrix
    for row, side in ((0, 1.0), (1, -1.0)):
        analytic = _pin_joint_arm(angle, side)
        assert abs(jac[row, 0] - analytic) <= 1e-3 * abs(analytic)
    np.testing.assert_allclose(jac[:2, 1], 0.0, atol=1e-9)


def test_muscle_jacobian_at_zero(chain, routing):
    jac = muscle_jacobian(routing, chain, np.zeros(2))
    np.testing.assert_allclose(jac.matrix, [[-30, 0], [30, 0], [0, -30], [0, 30]], rtol=1e-6, atol=1e-6)
    assert not jac.flagged


def test_muscle_jacobian_is_one_sided_at_limit(chain, routing):
    theta = np.array([chain.upper[0], 0.0])
    jac = muscle_jacobian(routing, chain, theta)
    assert jac.flagged
    np.testing.assert_array_equal(jac.one_sided, [True, False])
    assert np.all(np.isfinite(jac.matrix))


def test_finite_difference_jacobian_rejects_bad_step():
    with pytest.raises(DimensionError):
        finite_difference_jacobian(lambda q: q, np.zeros(2), -np.ones(2), np.ones(2), h=0.0)


def test_routing_rejects_missing_link(chain):
    muscle = Muscle("m", (Waypoint(0, np.zeros(3)), Waypoint(5, np.ones(3))))
    with pytest.raises(DimensionError):
        MuscleRouting.build([muscle], chain)


def test_routing_rejects_single_waypoint(chain):
    with pytest.raises(DimensionError):
        MuscleRouting.build([Muscle("m", (Waypoint(0, np.zeros(3)),))], chain)


def test_geometric_model_ignores_tension(chain, routing):
    model = GeometricModel(routing, chain)
    theta = np.radians([10.0, -25.0])
    np.testing.assert_array_equal(model.predict_lengths(theta, np.full(4, 300.0)),
                                  relative_lengths(routing, chain, theta))
    assert model.length_jacobian(theta).matrix.shape == (4, 2)


def test_lengths_do_not_depend_on_waypoint_order(chain, routing, rng):
    reversed_routing = MuscleRouting.build(
        [Muscle(m.name, tuple(reversed(m.waypoints))) for m in routing.muscles], chain)
    for theta in rng.uniform(chain.lower, chain.upper, size=(20, 2)):
        np.testing.assert_allclose(absolute_lengths(reversed_routing, chain, theta),
                                   absolute_lengths(routing, chain, theta), atol=1e-9)
