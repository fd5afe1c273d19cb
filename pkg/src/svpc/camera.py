"""Pinhole camera geometry: sphere/image projections, bounds, bbox range.

Normalized image coordinates are (x/z, y/z) of a camera-frame unit
bearing; pixel coordinates follow u = fx*x_n + cx, v = fy*y_n + cy
with u rightward and v downward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Bearings with a z-component at or below this are treated as outside
# the front hemisphere: perspective division is refused rather than
# producing huge values that would destabilize downstream residuals.
EPS_FRONT = 1e-3


class BehindCameraError(ValueError):
    """Perspective division requested for a direction that does not
    point into the front hemisphere."""


@dataclass(frozen=True)
class PinholeIntrinsics:
    """Focal lengths / principal point in pixels plus frame size."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def pixel_of_normalized(self, xn: float, yn: float) -> tuple[float, float]:
        return self.fx * xn + self.cx, self.fy * yn + self.cy


@dataclass(frozen=True)
class ImageBound:
    """Symmetric visibility bound in normalized image coordinates.

    Half extents per axis; must be kept strictly inside the physical
    frame so the soft visibility constraint retains a safety margin to
    the true field-of-view edge.
    """

    half_width_n: float
    half_height_n: float

    def __post_init__(self):
        if self.half_width_n <= 0 or self.half_height_n <= 0:
            raise ValueError("image bound half-extents must be positive")

    @classmethod
    def from_pixels(
        cls, bound_w_px: float, bound_h_px: float, intr: PinholeIntrinsics
    ) -> "ImageBound":
        """Centered pixel rectangle -> normalized bound, validated
        against the frame."""
        if bound_w_px >= intr.width or bound_h_px >= intr.height:
            raise ValueError(
                f"bound {bound_w_px:.0f}x{bound_h_px:.0f} px must be strictly "
                f"inside the {intr.width}x{intr.height} px frame"
            )
        return cls(0.5 * bound_w_px / intr.fx, 0.5 * bound_h_px / intr.fy)

    @property
    def half_extents(self) -> np.ndarray:
        return np.array([self.half_width_n, self.half_height_n])


@dataclass(frozen=True)
class BoundingBox:
    """Detector output: box center and size, pixels."""

    center_u: float
    center_v: float
    w_box: float
    h_box: float

    def __post_init__(self):
        if self.w_box <= 0 or self.h_box <= 0:
            raise ValueError("bounding box must have positive size")


def to_sphere(s, intr: PinholeIntrinsics) -> np.ndarray:
    """Project a homogeneous image point (u, v, 1) onto the unit sphere."""
    s = np.asarray(s, dtype=float)
    v = np.linalg.solve(intr.matrix, s)
    return v / np.linalg.norm(v)


def to_image_normalized(rho) -> np.ndarray:
    """Perspective division of a camera-frame direction: (x/z, y/z).

    Raises BehindCameraError when the direction does not point into the
    front hemisphere (z <= EPS_FRONT).
    """
    rho = np.asarray(rho, dtype=float)
    if rho[2] <= EPS_FRONT:
        raise BehindCameraError(f"direction z={rho[2]:.4g} is not in front of the camera")
    return rho[:2] / rho[2]


def in_bound(rho, bound: ImageBound) -> tuple[bool, np.ndarray]:
    """Whether a direction projects inside the bound, plus signed margins.

    Margins are ``half_extent - |coordinate|`` per axis (negative =
    outside); the closed boundary counts as inside.  Directions behind
    the camera are reported as not visible with -inf margins.
    """
    try:
        xy = to_image_normalized(rho)
    except BehindCameraError:
        return False, np.array([-np.inf, -np.inf])
    margins = bound.half_extents - np.abs(xy)
    return bool(np.all(margins >= 0.0)), margins


def range_from_bbox(box: BoundingBox, intr: PinholeIntrinsics, d_gate: float) -> float:
    """Range to a target of known physical diameter from its detected box.

    The apparent box size gives the target depth d_gate / max(w/fx,
    h/fy); scaling by the length of the unnormalized back-projection of
    the box center converts depth along the optical axis into range
    along the line of sight (off-center boxes are farther than their
    depth).
    """
    if d_gate <= 0:
        raise ValueError("target diameter must be positive")
    v = np.linalg.solve(intr.matrix, np.array([box.center_u, box.center_v, 1.0]))
    depth = d_gate / max(box.w_box / intr.fx, box.h_box / intr.fy)
    return float(depth * np.linalg.norm(v))
