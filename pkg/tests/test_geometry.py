import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from avgaze.errors import DegenerateVectorError, InvalidInputError
from avgaze.geometry import (
    FRONTAL_AXIS,
    HeadPose6D,
    angular_error_deg,
    canonical_rotvec,
    cosine_similarity,
    frontal_mask,
    gaze_loss,
    gaze_loss_grad,
    head_direction,
    headpose_loss,
    headpose_loss_grad,
    pitchyaw_to_vector,
    read_pitchyaw_csv,
    rotvec_from_angles,
    total_loss,
    vector_to_pitchyaw,
)

import oracles

coord = st.floats(-10, 10, allow_nan=False)
vec3 = st.tuples(coord, coord, coord).map(np.array).filter(lambda v: np.linalg.norm(v) > 1e-3)
# a 1e-3 grid keeps squared differences far from underflow
grid = st.integers(-10_000, 10_000).map(lambda i: i / 1000)
vec6 = st.tuples(*[grid] * 6).map(np.array)


def test_cosine_examples():
    assert cosine_similarity([0, 0, 1], [0, 0, 1]) == 1
    assert cosine_similarity([1, 0, 0], [0, 1, 0]) == 0
    assert cosine_similarity([1, 0, 0], [-2, 0, 0]) == -1


def test_degenerate_vector():
    with pytest.raises(DegenerateVectorError):
        cosine_similarity([0, 0, 0], [1, 0, 0])
    with pytest.raises(DegenerateVectorError):
        angular_error_deg([1, 0, 0], [0, 0, 1e-13])


@pytest.mark.parametrize("b,expected", [([1, 0, 0], 0.0), ([0, 1, 0], 1.0), ([-1, 0, 0], 2.0)])
def test_gaze_loss_values(b, expected):
    assert gaze_loss([1, 0, 0], b) == pytest.approx(expected, abs=1e-15)


def test_headpose_loss_examples():
    t = np.arange(6.0)
    assert headpose_loss(t, t) == 0
    assert headpose_loss(t + np.eye(6)[0], t) == pytest.approx(1 / 6)
    assert headpose_loss(t + 1, t) == pytest.approx(1.0)


@given(vec6, vec6)
def test_headpose_loss_zero_iff_equal(a, b):
    assert headpose_loss(a, b) >= 0
    assert (headpose_loss(a, b) == 0) == bool(np.all(a == b))


def test_total_loss_examples():
    assert total_loss(0, 0) == 0
    assert total_loss(1 / 6, 1) == pytest.approx(7 / 6)
    assert total_loss(0.3, 0.7) == total_loss(0.7, 0.3)
    assert total_loss(None, 0.5) == 0.5
    assert total_loss(0.5, 0.5, weights=(2.0, 0.0)) == 1.0
    with pytest.raises(InvalidInputError):
        total_loss(-1, 0)


@pytest.mark.parametrize("b,expected", [([1, 0, 0], 0.0), ([1, 1, 0], 45.0), ([0, 1, 0], 90.0)])
def test_angular_error_examples(b, expected):
    assert angular_error_deg([1, 0, 0], b) == pytest.approx(expected, abs=1e-6)


@given(vec3, vec3, st.floats(0.01, 100), st.floats(0.01, 100))
def test_gaze_loss_scale_invariant(g, h, a, b):
    assert gaze_loss(a * g, b * h) == pytest.approx(gaze_loss(g, h), abs=1e-9)


@given(vec3, vec3)
def test_metric_symmetry_and_consistency(a, b):
    e = angular_error_deg(a, b)
    assert e == angular_error_deg(b, a)
    assert 0 <= e <= 180
    assert gaze_loss(a, b) == pytest.approx(1 - math.cos(math.radians(e)), abs=1e-9)
    # arccos is ill-conditioned near 1: float64 cosines resolve angles to about 1e-6 deg
    assert e == pytest.approx(oracles.angle_deg(a, b), abs=1e-5)


def _central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        d = np.zeros_like(x)
        d[i] = h
        g[i] = (f(x + d) - f(x - d)) / (2 * h)
    return g


@given(vec3, vec3)
def test_gaze_loss_gradient(p, t):
    assume(abs(cosine_similarity(p, t)) < 0.999)
    analytic = gaze_loss_grad(p, t)
    numeric = _central_diff(lambda x: gaze_loss(x, t), p)
    scale = max(np.linalg.norm(analytic), 1e-6)
    assert np.linalg.norm(analytic - numeric) / scale < 1e-5


@given(vec6, vec6)
def test_headpose_loss_gradient(p, t):
    analytic = headpose_loss_grad(p, t)
    numeric = _central_diff(lambda x: headpose_loss(x, t), p)
    scale = max(np.linalg.norm(analytic), 1e-3)
    assert np.linalg.norm(analytic - numeric) / scale < 1e-5


def test_pitchyaw_examples():
    np.testing.assert_allclose(pitchyaw_to_vector(0, 0), [0, 0, -1], atol=1e-15)
    np.testing.assert_allclose(pitchyaw_to_vector(0, np.pi / 2), [-1, 0, 0], atol=1e-15)


def test_pitchyaw_round_trip_sweep():
    rng = np.random.default_rng(0)
    pitch = rng.uniform(-np.pi / 2 + 1e-3, np.pi / 2 - 1e-3, 1000)
    yaw = rng.uniform(-np.pi + 1e-6, np.pi, 1000)
    v = pitchyaw_to_vector(pitch, yaw)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1, atol=1e-12)
    p2, y2 = vector_to_pitchyaw(v)
    assert np.max(np.abs(p2 - pitch)) < 1e-9
    assert np.max(np.abs(np.angle(np.exp(1j * (y2 - yaw))))) < 1e-9


def test_frontal_mask_examples():
    assert frontal_mask([[0, 0, -1]], 20)[0]
    assert not frontal_mask([[0, 0, 1]], 90)[0]
    assert frontal_mask([[1, 0, 0]], 90)[0]
    assert frontal_mask(np.zeros((0, 3)), 90).shape == (0,)
    with pytest.raises(InvalidInputError):
        frontal_mask([[0, 0, -1]], 0)


@given(st.lists(vec3, min_size=1, max_size=20))
def test_frontal_subsets_nest(gs):
    g = np.array(gs)
    ff, f180 = frontal_mask(g, 20), frontal_mask(g, 90)
    assert np.all(f180[ff])


def test_rotvec_from_angles_points_head():
    for yaw, pitch in [(0.3, 0.0), (0.0, 0.2), (-0.5, 0.3)]:
        d = head_direction(rotvec_from_angles(yaw, pitch, roll=0.25))
        p, y = vector_to_pitchyaw(d)
        assert p == pytest.approx(pitch, abs=1e-12)
        assert y == pytest.approx(yaw, abs=1e-12)
    np.testing.assert_allclose(head_direction(np.zeros(3)), FRONTAL_AXIS)


def test_headpose_canonicalization():
    r = np.array([0.0, 0.0, 1.5 * np.pi])
    h = HeadPose6D(r, [0, 0, 1])
    assert np.linalg.norm(h.rotation) <= np.pi + 1e-12
    np.testing.assert_allclose(h.direction(), head_direction(r), atol=1e-12)
    np.testing.assert_array_equal(canonical_rotvec([0.1, 0.2, 0.3]), [0.1, 0.2, 0.3])
    with pytest.raises(InvalidInputError):
        HeadPose6D([np.inf, 0, 0], [0, 0, 0])
    v = np.arange(6.0) / 10
    np.testing.assert_allclose(HeadPose6D.from_vector(v).as_vector(), v)


def test_pitchyaw_csv(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("frame_id,pitch_rad,yaw_rad\nf0,0,0\nf1,0,1.5707963267948966\n")
    out = read_pitchyaw_csv(p)
    np.testing.assert_allclose(out["f0"], [0, 0, -1], atol=1e-12)
    np.testing.assert_allclose(out["f1"], [-1, 0, 0], atol=1e-12)
