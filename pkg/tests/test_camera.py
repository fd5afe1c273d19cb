import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svpc.camera import (
    EPS_FRONT,
    BehindCameraError,
    BoundingBox,
    ImageBound,
    PinholeIntrinsics,
    in_bound,
    range_from_bbox,
    to_image_normalized,
    to_sphere,
)

IDENTITY_K = PinholeIntrinsics(fx=1, fy=1, cx=0, cy=0, width=2, height=2)
SIM_K = PinholeIntrinsics(fx=600, fy=600, cx=376, cy=240, width=752, height=480)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        PinholeIntrinsics(fx=0, fy=1, cx=0, cy=0, width=10, height=10)
    with pytest.raises(ValueError):
        PinholeIntrinsics(fx=1, fy=1, cx=0, cy=0, width=0, height=10)


def test_to_sphere_identity_axis():
    np.testing.assert_allclose(to_sphere([0, 0, 1], IDENTITY_K), [0, 0, 1], atol=1e-15)


def test_to_sphere_normalizes():
    np.testing.assert_allclose(
        to_sphere([1, 0, 1], IDENTITY_K), np.array([1, 0, 1]) / np.sqrt(2), atol=1e-15
    )


def test_to_sphere_principal_point_maps_to_axis():
    np.testing.assert_allclose(to_sphere([376, 240, 1], SIM_K), [0, 0, 1], atol=1e-12)


def test_to_image_normalized_cases():
    np.testing.assert_allclose(to_image_normalized([0, 0, 1]), [0, 0], atol=1e-15)
    np.testing.assert_allclose(
        to_image_normalized(np.array([1, 0, 1]) / np.sqrt(2)), [1, 0], atol=1e-12
    )
    with pytest.raises(BehindCameraError):
        to_image_normalized([0, 0, -1])


def test_projection_roundtrip(rng):
    for _ in range(200):
        rho = rng.standard_normal(3)
        rho[2] = abs(rho[2]) + 0.1
        rho /= np.linalg.norm(rho)
        xn, yn = to_image_normalized(rho)
        s = SIM_K.matrix @ np.array([xn, yn, 1.0])
        np.testing.assert_allclose(to_sphere(s, SIM_K), rho, atol=1e-9)


def test_in_bound_margins():
    b = ImageBound(0.5, 0.3)
    inside, margins = in_bound([0, 0, 1], b)
    assert inside
    np.testing.assert_allclose(margins, [0.5, 0.3], atol=1e-15)

    # boundary counts as inside
    rho = np.array([0.5, 0.0, 1.0])
    rho /= np.linalg.norm(rho)
    inside, margins = in_bound(rho, b)
    assert inside and abs(margins[0]) < 1e-12

    rho = np.array([0.6, 0.0, 1.0])
    rho /= np.linalg.norm(rho)
    inside, margins = in_bound(rho, b)
    assert not inside and margins[0] == pytest.approx(-0.1)


def test_in_bound_behind_camera_not_visible():
    inside, margins = in_bound([0, 0, -1], ImageBound(0.5, 0.3))
    assert not inside and np.all(margins == -np.inf)


@given(
    st.floats(-0.9, 0.9),
    st.floats(-0.6, 0.6),
    st.floats(0.05, 1.0),
    st.floats(0.05, 1.0),
    st.floats(0.1, 0.9),
)
def test_in_bound_monotone_under_shrinking(xn, yn, hw, hh, shrink):
    # shrinking the bound never turns an outside point inside
    rho = np.array([xn, yn, 1.0])
    rho /= np.linalg.norm(rho)
    big, small = ImageBound(hw, hh), ImageBound(hw * shrink, hh * shrink)
    if not in_bound(rho, big)[0]:
        assert not in_bound(rho, small)[0]


def test_bound_from_pixels_and_frame_check():
    b = ImageBound.from_pixels(557, 336, SIM_K)
    assert b.half_width_n == pytest.approx(0.5 * 557 / 600)
    assert b.half_height_n == pytest.approx(0.5 * 336 / 600)
    with pytest.raises(ValueError):
        ImageBound.from_pixels(800, 336, SIM_K)


def test_bbox_validation():
    with pytest.raises(ValueError):
        BoundingBox(10, 10, 0, 5)


def test_range_from_bbox_centered_value():
    # 0.75 m target, f=600 px, centered 225 px box -> exactly 2 m
    box = BoundingBox(center_u=376, center_v=240, w_box=225, h_box=225)
    assert range_from_bbox(box, SIM_K, 0.75) == pytest.approx(2.0, abs=1e-12)


def test_range_from_bbox_inverse_in_size_linear_in_diameter():
    box = BoundingBox(376, 240, 225, 225)
    double = BoundingBox(376, 240, 450, 450)
    r1 = range_from_bbox(box, SIM_K, 0.75)
    assert range_from_bbox(double, SIM_K, 0.75) == pytest.approx(r1 / 2)
    assert range_from_bbox(box, SIM_K, 1.5) == pytest.approx(2 * r1)


def test_range_from_bbox_offcenter_not_smaller():
    centered = BoundingBox(376, 240, 225, 225)
    corner = BoundingBox(700, 50, 225, 225)
    r_c = range_from_bbox(centered, SIM_K, 0.75)
    r_o = range_from_bbox(corner, SIM_K, 0.75)
    assert r_o >= r_c
    # off-center range exceeds depth by the back-projection length
    assert r_o > r_c * 1.05


def test_range_from_bbox_rejects_bad_diameter():
    with pytest.raises(ValueError):
        range_from_bbox(BoundingBox(376, 240, 10, 10), SIM_K, 0.0)
