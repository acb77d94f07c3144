import math

import numpy as np
import pytest
from shapely.geometry import Polygon

import oracles
from poseloc.dataset_io import SyntheticSceneConfig, camera_orientation, render_plane_depth
from poseloc.frustum import (
    BEHIND,
    CameraIntrinsics,
    DepthFrame,
    NonPositiveDepth,
    NoValidPixels,
    bilateral_frustum_distances,
    frustum_overlap,
    overlap_to_many,
    reproject_pixel,
)
from poseloc.pose_core import IDENTITY_QUAT, Pose, quat_from_axis_angle, quat_multiply

K100 = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
K8 = CameraIntrinsics(8.0, 8.0, 4.0, 4.0, 8, 8)
K64 = CameraIntrinsics(40.0, 40.0, 32.0, 24.0, 64, 48)


def flat(K, depth=2.0):
    return DepthFrame.from_depth(K, np.full((K.height, K.width), depth))


def test_reproject_identity_is_fixed_point():
    p = Pose([0.3, -1, 2], quat_from_axis_angle([1, 2, 3], 0.4))
    u, v, z = reproject_pixel((17, 83), 3.25, p, p, K100)
    assert u == pytest.approx(17, abs=1e-9) and v == pytest.approx(83, abs=1e-9)
    assert z == pytest.approx(3.25, abs=1e-12)


def test_reproject_closed_form_forward_translation():
    # (60, 50) at 2 m back-projects to (0.2, 0, 2); moving b 1 m forward leaves (0.2, 0, 1)
    out = reproject_pixel((60, 50), 2.0, Pose.identity(), Pose([0, 0, 1], IDENTITY_QUAT), K100)
    assert out == pytest.approx((70.0, 50.0, 1.0), abs=1e-9)


def test_reproject_behind_after_half_turn():
    b = Pose.identity().__class__([0, 0, 0], quat_from_axis_angle([0, 1, 0], math.pi))
    for u, v in [(0, 0), (50, 50), (99, 99), (10, 80)]:
        assert reproject_pixel((u, v), 2.0, Pose.identity(), b, K100) is BEHIND


def test_reproject_rejects_non_positive_depth():
    with pytest.raises(NonPositiveDepth):
        reproject_pixel((1, 1), 0.0, Pose.identity(), Pose.identity(), K100)


def test_reproject_matches_oracle(rng):
    for _ in range(200):
        a = Pose(rng.normal(size=3), rng.normal(size=4))
        b = Pose(a.t + rng.normal(scale=0.3, size=3), quat_multiply(a.q, quat_from_axis_angle(rng.normal(size=3), 0.3)))
        u, v, d = rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(0.5, 5)
        got, want = reproject_pixel((u, v), d, a, b, K100), oracles.reproject(u, v, d, a, b, K100)
        if want is None:
            assert got is None
        else:
            assert got == pytest.approx(want, abs=1e-9)


def test_overlap_identity_and_half_turn():
    f = flat(K64)
    p = Pose([0.1, 0.2, 0.3], quat_from_axis_angle([0, 0, 1], 1.0))
    assert frustum_overlap(f, p, p, stride=1) == 1.0
    away = Pose(p.t, quat_multiply(p.q, quat_from_axis_angle([0, 1, 0], math.pi)))
    assert frustum_overlap(f, p, away, stride=1) == 0.0


def test_overlap_half_frustum_lateral_shift():
    # frustum at 2 m spans x in [-1, 1); shifting b by 1 m keeps columns 4..7
    f = flat(K8)
    b = Pose([1.0, 0, 0], IDENTITY_QUAT)
    inside, total = oracles.overlap_count(f, Pose.identity(), b)
    assert (inside, total) == (32, 64)
    assert frustum_overlap(f, Pose.identity(), b, stride=1) == 0.5


def test_overlap_requires_valid_pixels():
    f = DepthFrame(K8, np.zeros((8, 8)), np.zeros((8, 8), bool))
    with pytest.raises(NoValidPixels):
        frustum_overlap(f, Pose.identity(), Pose.identity())


def test_invalid_pixels_are_excluded():
    depth = np.full((8, 8), 2.0)
    valid = np.ones((8, 8), bool)
    valid[:, :4] = False
    f = DepthFrame(K8, depth, valid)
    # only the right half is valid, and all of it stays inside b
    b = Pose([1.0, 0, 0], IDENTITY_QUAT)
    assert frustum_overlap(f, Pose.identity(), b, stride=1) == 1.0


def random_pair(rng, K=K64, plane=3.0):
    a = Pose(rng.uniform([-1, -1, 0], [1, 1, 1]), camera_orientation(*rng.uniform(-0.3, 0.3, 2), rng.uniform(-3, 3)))
    b = Pose(rng.uniform([-1, -1, 0], [1, 1, 1]), camera_orientation(*rng.uniform(-0.3, 0.3, 2), rng.uniform(-3, 3)))
    return render_plane_depth(a, K, plane), a, render_plane_depth(b, K, plane), b


def test_overlap_equals_oracle_on_random_pairs(rng):
    for _ in range(10):
        fa, a, fb, b = random_pair(rng)
        inside, total = oracles.overlap_count(fa, a, b)
        assert frustum_overlap(fa, a, b, stride=1) == inside / total


def test_overlap_invariant_to_common_rigid_motion(rng):
    for _ in range(10):
        fa, a, _, b = random_pair(rng)
        g = Pose(rng.normal(size=3), rng.normal(size=4))

        def move(p):
            return Pose(g.R @ p.t + g.t, quat_multiply(g.q, p.q))

        assert abs(frustum_overlap(fa, a, b, 1) - frustum_overlap(fa, move(a), move(b), 1)) < 1e-9


def test_subsampled_overlap_close_to_full(rng):
    for _ in range(10):
        fa, a, _, b = random_pair(rng)
        full, coarse = frustum_overlap(fa, a, b, 1), frustum_overlap(fa, a, b, 4)
        assert abs(full - coarse) <= 4 * 4 * (1 / 64 + 1 / 48)


def test_overlap_to_many_matches_single(rng):
    fa, a, _, _ = random_pair(rng)
    targets = [random_pair(rng)[1] for _ in range(20)]
    many = overlap_to_many(fa, a, targets, stride=2)
    assert list(many) == [frustum_overlap(fa, a, t, 2) for t in targets]


def test_bilateral_trivial_cases():
    f = flat(K64)
    p = Pose.identity()
    d = bilateral_frustum_distances(f, p, f, p, stride=1)
    assert (d.d1, d.d2) == (0.0, 0.0)
    far = Pose([100.0, 0, 0], IDENTITY_QUAT)
    d = bilateral_frustum_distances(f, p, flat(K64), far, stride=1)
    assert (d.d1, d.d2) == (1.0, 1.0)


def test_bilateral_asymmetric_zoom():
    # a sits closer to the plane than b, so a's view is a sub-region of b's
    a, b = Pose([0, 0, 1.5], IDENTITY_QUAT), Pose.identity()
    fa, fb = render_plane_depth(a, K64, 3.0), render_plane_depth(b, K64, 3.0)
    d = bilateral_frustum_distances(fa, a, fb, b, stride=1)
    ia, na = oracles.overlap_count(fa, a, b)
    ib, nb = oracles.overlap_count(fb, b, a)
    assert (d.d1, d.d2) == (1 - ia / na, 1 - ib / nb)
    assert d.d1 < d.d2


def footprint(pose, K, plane_z, lo, hi_u, hi_v):
    corners = []
    for u, v in [(lo, lo), (hi_u, lo), (hi_u, hi_v), (lo, hi_v)]:
        ray = pose.R @ np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
        lam = (plane_z - pose.t[2]) / ray[2]
        p = pose.t + lam * ray
        corners.append((p[0], p[1]))
    return Polygon(corners)


def test_synthetic_overlap_matches_polygon_intersection(rng):
    """Fronto-parallel cameras: pixel fraction ~ area fraction of footprints on the plane."""
    cfg = SyntheticSceneConfig(tilt_deg=0.0)
    K = cfg.intrinsics
    checked = 0
    for _ in range(30):
        a = Pose(rng.uniform([-1, -1, 0], [1, 1, 1]), camera_orientation(0, 0, rng.uniform(-3, 3)))
        b = Pose(rng.uniform([-1, -1, 0], [1, 1, 1]), camera_orientation(0, 0, rng.uniform(-3, 3)))
        fa = render_plane_depth(a, K, cfg.plane_z)
        sampled = footprint(a, K, cfg.plane_z, -0.5, K.width - 0.5, K.height - 0.5)
        region_b = footprint(b, K, cfg.plane_z, 0.0, K.width, K.height)
        analytic = sampled.intersection(region_b).area / sampled.area
        assert frustum_overlap(fa, a, b, stride=1) == pytest.approx(analytic, abs=0.03)
        checked += analytic > 0
    assert checked > 5
