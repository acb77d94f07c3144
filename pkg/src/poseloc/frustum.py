"""Depth-frame reprojection and bilateral frustum overlap.

Conventions:
  * poses are camera-to-world, P_world = R @ P_cam + t
  * pixel (u, v) is taken at integer grid coordinates (no +0.5 shift)
  * a reprojected pixel is inside when z' > 0 and it lands in the half-open
    box [0, width) x [0, height); coordinates within BOUNDARY_EPS of an edge
    are snapped so that identity transforms are not lost to rounding
  * occlusion is ignored
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pose_core import Pose

BOUNDARY_EPS = 1e-6


class NonPositiveDepth(ValueError):
    pass


class NoValidPixels(ValueError):
    pass


BEHIND = None  # returned by reproject_pixel when the point is behind camera b


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(eq=False)
class DepthFrame:
    intrinsics: CameraIntrinsics
    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.depth.shape != shape or self.valid.shape != shape:
            raise ValueError(f"depth grid must be {shape}, got {self.depth.shape}")
        d = self.depth[self.valid]
        if not np.all(np.isfinite(d) & (d > 0)):
            raise ValueError("valid depth values must be finite and positive")

    @classmethod
    def from_depth(cls, intrinsics, depth):
        """Build a frame marking every finite positive depth as valid."""
        depth = np.asarray(depth, dtype=np.float64)
        valid = np.isfinite(depth) & (depth > 0)
        return cls(intrinsics, np.where(valid, depth, 0.0), valid)


def _inside(u, v, z, width, height):
    return (z > 0) & (u > -BOUNDARY_EPS) & (u < width - BOUNDARY_EPS) & (v > -BOUNDARY_EPS) & (v < height - BOUNDARY_EPS)


def _transform_points(x, y, z, pose_a: Pose, pose_b: Pose):
    """Camera-a coordinates -> camera-b coordinates, elementwise (no BLAS)."""
    Ra, Rb = pose_a.R, pose_b.R
    wx = Ra[0, 0] * x + Ra[0, 1] * y + Ra[0, 2] * z + (pose_a.t[0] - pose_b.t[0])
    wy = Ra[1, 0] * x + Ra[1, 1] * y + Ra[1, 2] * z + (pose_a.t[1] - pose_b.t[1])
    wz = Ra[2, 0] * x + Ra[2, 1] * y + Ra[2, 2] * z + (pose_a.t[2] - pose_b.t[2])
    bx = Rb[0, 0] * wx + Rb[1, 0] * wy + Rb[2, 0] * wz
    by = Rb[0, 1] * wx + Rb[1, 1] * wy + Rb[2, 1] * wz
    bz = Rb[0, 2] * wx + Rb[1, 2] * wy + Rb[2, 2] * wz
    return bx, by, bz


def reproject_pixel(pixel, depth_value, pose_a: Pose, pose_b: Pose, K: CameraIntrinsics):
    """Map pixel (u, v) with depth in frame a to (u', v', z') in frame b.

    Returns ``BEHIND`` (None) when the point has z' <= 0 in camera b.
    """
    if not depth_value > 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth_value}")
    u, v = float(pixel[0]), float(pixel[1])
    x = (u - K.cx) / K.fx * depth_value
    y = (v - K.cy) / K.fy * depth_value
    bx, by, bz = _transform_points(x, y, float(depth_value), pose_a, pose_b)
    if bz <= 0:
        return BEHIND
    return K.fx * bx / bz + K.cx, K.fy * by / bz + K.cy, float(bz)


def sample_points(frame: DepthFrame, stride=4):
    """Valid pixels of ``frame`` on a stride grid, back-projected to camera coords."""
    K = frame.intrinsics
    vs, us = np.mgrid[0:K.height:stride, 0:K.width:stride]
    d = frame.depth[vs, us]
    keep = frame.valid[vs, us]
    us, vs, d = us[keep].astype(np.float64), vs[keep].astype(np.float64), d[keep]
    if d.size == 0:
        raise NoValidPixels("frame has no valid depth pixels at this stride")
    return (us - K.cx) / K.fx * d, (vs - K.cy) / K.fy * d, d


def count_inside(points, pose_a: Pose, pose_b: Pose, K: CameraIntrinsics):
    x, y, z = points
    bx, by, bz = _transform_points(x, y, z, pose_a, pose_b)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * bx / bz + K.cx
        v = K.fy * by / bz + K.cy
    return int(np.count_nonzero(_inside(u, v, bz, K.width, K.height)))


def frustum_overlap(a: DepthFrame, pose_a: Pose, pose_b: Pose, stride=4, K_b=None):
    """Fraction of a's valid pixels that reproject inside frame b.

    ``K_b`` defaults to a's intrinsics (single-camera datasets).
    """
    pts = sample_points(a, stride)
    return count_inside(pts, pose_a, pose_b, K_b or a.intrinsics) / pts[0].size


def overlap_to_many(a: DepthFrame, pose_a: Pose, poses_b, stride=4, K_b=None):
    """Vectorized frustum_overlap of one frame against many target poses."""
    pts = sample_points(a, stride)
    if not len(poses_b):
        return np.zeros(0)
    Rb = np.stack([p.R for p in poses_b])
    tb = np.stack([p.t for p in poses_b])
    return overlap_counts(pts, pose_a.R, pose_a.t, Rb, tb, K_b or a.intrinsics) / pts[0].size


def overlap_counts(points, Ra, ta, Rb, tb, K: CameraIntrinsics):
    """Inside-counts of camera-a points against N target cameras (Rb: (N,3,3), tb: (N,3))."""
    x, y, z = points
    # same elementwise arithmetic as _transform_points, broadcast over targets
    dtx = (ta[0] - tb[:, 0])[:, None]
    dty = (ta[1] - tb[:, 1])[:, None]
    dtz = (ta[2] - tb[:, 2])[:, None]
    wx = Ra[0, 0] * x + Ra[0, 1] * y + Ra[0, 2] * z + dtx
    wy = Ra[1, 0] * x + Ra[1, 1] * y + Ra[1, 2] * z + dty
    wz = Ra[2, 0] * x + Ra[2, 1] * y + Ra[2, 2] * z + dtz

    def r(i, j):
        return Rb[:, i, j][:, None]

    bx = r(0, 0) * wx + r(1, 0) * wy + r(2, 0) * wz
    by = r(0, 1) * wx + r(1, 1) * wy + r(2, 1) * wz
    bz = r(0, 2) * wx + r(1, 2) * wy + r(2, 2) * wz
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * bx / bz + K.cx
        v = K.fy * by / bz + K.cy
    return np.count_nonzero(_inside(u, v, bz, K.width, K.height), axis=1)


@dataclass(frozen=True)
class FrustumDistances:
    d1: float
    d2: float


def bilateral_frustum_distances(a: DepthFrame, pose_a: Pose, b: DepthFrame, pose_b: Pose, stride=4):
    theta1 = frustum_overlap(a, pose_a, pose_b, stride, K_b=b.intrinsics)
    theta2 = frustum_overlap(b, pose_b, pose_a, stride, K_b=a.intrinsics)
    return FrustumDistances(1.0 - theta1, 1.0 - theta2)
