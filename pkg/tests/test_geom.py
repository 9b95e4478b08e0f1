import math

import numpy as np
import pytest
from hypothesis import given, settings

from robocore import geom
from robocore.geom import Aabb, ExitStage, Obb, Ray, Sphere
from robocore.workloads import random_pairs

from conftest import aabbs, obbs


def unit_box(center=(0.0, 0.0, 0.0)):
    return Aabb(center, (1.0, 1.0, 1.0))


# --- hand-checked pairs --------------------------------------------------------------------------


def test_separated_on_x_exits_at_first_axis():
    obb = Obb((3.0, 0.0, 0.0), (1.0, 1.0, 1.0), np.eye(3))
    r = geom.sat_staged(obb, unit_box(), enable_spheres=False)
    assert r == (False, ExitStage.BOX_NORMAL_0, 1)


def test_touching_faces_collide():
    obb = Obb((2.0, 0.0, 0.0), (1.0, 1.0, 1.0), np.eye(3))
    assert geom.sat_full(obb, unit_box())


def test_separated_on_x_spheres_enabled_is_bounding_miss():
    obb = Obb((10.0, 0.0, 0.0), (1.0, 1.0, 1.0), np.eye(3))
    assert geom.sat_staged(obb, unit_box(), enable_spheres=True) == (False, ExitStage.BOUNDING_SPHERE_MISS, 0)


def test_concentric_boxes_inscribing_hit():
    obb = Obb((0.0, 0.0, 0.0), (0.5, 0.5, 0.5), np.eye(3))
    assert geom.sat_staged(obb, unit_box(), enable_spheres=True) == (True, ExitStage.INSCRIBING_SPHERE_HIT, 0)


def test_edge_axis_separates_rotated_boxes():
    # Two unit cubes rotated 45 degrees about different axes: face axes overlap,
    # only an edge-edge axis separates them.
    c, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
    rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    rx = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    obb = Obb((1.2, 1.2, 0.0), (0.5, 0.5, 0.5), rz @ rx)
    box = Aabb((0.0, 0.0, 0.0), (0.5, 0.5, 0.5))
    r = geom.sat_staged(obb, box, enable_spheres=False)
    assert r.collides == geom.sat_full(obb, box)
    assert r.exit in {ExitStage.edge_edge(k) for k in range(9)} | {ExitStage.box_normal(k) for k in range(6)}


def test_exit_stage_labels_and_counts():
    assert ExitStage.BOX_NORMAL_0.label == "BoxNormalAxis(0)"
    assert ExitStage.EDGE_EDGE_8.label == "EdgeEdgeAxis(8)"
    assert ExitStage.FULL_OVERLAP.axes_tested == 15
    assert ExitStage.EDGE_EDGE_1.axes_tested == 8
    assert ExitStage.BOUNDING_SPHERE_MISS.axes_tested == 0
    assert [s.collides for s in (ExitStage.INSCRIBING_SPHERE_HIT, ExitStage.FULL_OVERLAP)] == [True, True]
    assert not ExitStage.EDGE_EDGE_0.collides


def test_invalid_primitives_rejected():
    with pytest.raises(ValueError):
        Aabb((0, 0, 0), (-1, 1, 1))
    with pytest.raises(ValueError):
        Obb((0, 0, 0), (1, 1, 1), np.ones((3, 3)))
    with pytest.raises(ValueError):
        Sphere((0, 0, 0), -1.0)
    with pytest.raises(ValueError):
        Ray((0, 0, 0), (2.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        Aabb((np.nan, 0, 0), (1, 1, 1))


# --- spheres ----------------------------------------------------------------------------------------


def test_bounding_sphere_contains_corners(rng):
    for _ in range(50):
        obbs_, _, _ = random_pairs(rng, 1)
        o = obbs_[0]
        s = geom.bounding_sphere(o)
        assert np.all(np.linalg.norm(o.corners() - s.center, axis=1) <= s.radius + 1e-9)


def test_inscribing_sphere_inside_obb(rng):
    for _ in range(50):
        o = random_pairs(rng, 1)[0][0]
        s = geom.inscribing_sphere(o)
        d = rng.normal(size=(200, 3))
        p = s.center + s.radius * d / np.linalg.norm(d, axis=1, keepdims=True)
        local = (p - o.center) @ o.axes
        assert np.all(np.abs(local) <= o.half_extents + 1e-9)


def test_sphere_aabb_intersect_basic():
    assert geom.sphere_aabb_intersect(Sphere((0, 0, 0), 0.0), unit_box())
    assert not geom.sphere_aabb_intersect(Sphere((3, 0, 0), 1.0), unit_box())
    assert geom.sphere_aabb_intersect(Sphere((2, 0, 0), 1.0), unit_box())


def test_culling_soundness_on_random_pairs():
    rng = np.random.default_rng(7)
    o, c, h = random_pairs(rng, 10000)
    for obb, ac, ah in zip(o, c, h):
        box = Aabb(ac, ah)
        full = geom.sat_full(obb, box)
        if not geom.sphere_aabb_intersect(geom.bounding_sphere(obb), box):
            assert not full
        if geom.sphere_aabb_intersect(geom.inscribing_sphere(obb), box):
            assert full


# --- properties ----------------------------------------------------------------------------------


@settings(max_examples=300, deadline=None)
@given(obbs, aabbs)
def test_staged_agrees_with_full(obb, box):
    full = geom.sat_full(obb, box)
    for spheres in (False, True):
        r = geom.sat_staged(obb, box, enable_spheres=spheres)
        assert r.collides == full
        assert 0 <= r.axes_tested <= 15
        assert (r.axes_tested == 0) == r.exit.is_sphere


@settings(max_examples=200, deadline=None)
@given(obbs, aabbs)
def test_symmetric_under_swapping_aabb_and_obb_when_axis_aligned(obb, box):
    # an axis-aligned OBB against an AABB is the plain interval test
    a = Obb.from_aabb(Aabb(obb.center, obb.half_extents))
    expected = bool(np.all(np.abs(a.center - box.center) <= a.half_extents + box.half_extents))
    m = geom.signed_margin(a, box)
    if abs(m) > 1e-9:
        assert geom.sat_full(a, box) == expected


@settings(max_examples=200, deadline=None)
@given(obbs, aabbs)
def test_translation_far_away_separates(obb, box):
    far = obb.translated((100.0, 0.0, 0.0))
    assert not geom.sat_full(far, box)
    assert geom.sat_staged(far, box, True).exit == ExitStage.BOUNDING_SPHERE_MISS


def test_batch_matches_scalar(rng):
    o = random_pairs(rng, 1)[0][0]
    centers = rng.uniform(-1, 1, size=(500, 3))
    halves = rng.uniform(0.05, 0.5, size=(500, 3))
    batch = geom.sat_full_batch(o, centers, halves)
    scalar = [geom.sat_full(o, Aabb(c, h)) for c, h in zip(centers, halves)]
    assert batch.tolist() == scalar


def test_staged_exit_batch_matches_scalar(rng):
    o, c, h = random_pairs(rng, 400)
    for obb, ac, ah in zip(o[:50], c[:50], h[:50]):
        codes = geom.staged_exit_batch(obb.center, ac[None], ah[None], obb.half_extents, obb.axes, True)
        assert ExitStage(int(codes[0])) == geom.sat_staged(obb, Aabb(ac, ah), True).exit


def _surface_samples(center, half, axes, step):
    """Grid samples over the six faces plus the center, spacing ``step``."""
    pts = [np.zeros((1, 3))]
    for ax in range(3):
        u, v = [k for k in range(3) if k != ax]
        nu = int(np.ceil(2 * half[u] / step)) + 1
        nv = int(np.ceil(2 * half[v] / step)) + 1
        gu, gv = np.meshgrid(np.linspace(-half[u], half[u], nu), np.linspace(-half[v], half[v], nv), indexing="ij")
        for sign in (-1.0, 1.0):
            face = np.zeros((gu.size, 3))
            face[:, u], face[:, v], face[:, ax] = gu.ravel(), gv.ravel(), sign * half[ax]
            pts.append(face)
    return center + np.concatenate(pts) @ axes.T


def test_sampling_oracle_agreement():
    """Sampled boundary containment agrees with the axis test on random pairs away from the margin band.

    Two convex boxes overlap iff one holds a boundary point (or the center)
    of the other, so dense boundary samples decide every pair whose margin
    exceeds the sample spacing.
    """
    rng = np.random.default_rng(11)
    o, c, h = random_pairs(rng, 3000, extent=0.5)
    checked = 0
    for obb, ac, ah in zip(o, c, h):
        box = Aabb(ac, ah)
        step_a = 0.02 * 2 * obb.half_extents.min()
        step_b = 0.02 * 2 * ah.min()
        if abs(geom.signed_margin(obb, box)) <= 2 * max(step_a, step_b):
            continue  # closer than the sampling resolution can resolve
        a_pts = _surface_samples(obb.center, obb.half_extents, obb.axes, step_a)
        b_pts = _surface_samples(ac, ah, np.eye(3), step_b)
        a_in_b = np.all(np.abs(a_pts - ac) <= ah, axis=1).any()
        b_in_a = np.all(np.abs((b_pts - obb.center) @ obb.axes) <= obb.half_extents, axis=1).any()
        assert geom.sat_full(obb, box) == bool(a_in_b or b_in_a)
        checked += 1
    assert checked > 2500


# --- rays --------------------------------------------------------------------------------------------


def test_ray_aabb_entry():
    r = Ray((-5.0, 0.0, 0.0), (1.0, 0.0, 0.0))
    assert geom.ray_aabb(r, unit_box()) == pytest.approx(4.0)
    assert geom.ray_aabb(Ray((-5.0, 3.0, 0.0), (1.0, 0.0, 0.0)), unit_box()) is None
    short = Ray((-5.0, 0.0, 0.0), (1.0, 0.0, 0.0), 0.0, 3.0)
    assert geom.ray_aabb(short, unit_box()) is None


def test_degenerate_ray_sphere_is_point_in_sphere():
    s = Sphere((0.0, 0.0, 0.0), 1.0)
    assert geom.ray_sphere(Ray.point((0.5, 0.5, 0.5)), s)
    assert not geom.ray_sphere(Ray.point((1.0, 1.0, 0.0)), s)
    assert geom.ray_sphere(Ray.point((1.0, 0.0, 0.0)), s)  # boundary counts


def test_ray_sphere_segment():
    s = Sphere((5.0, 0.0, 0.0), 1.0)
    assert geom.ray_sphere(Ray((0.0, 0.0, 0.0), (1.0, 0.0, 0.0)), s)
    assert not geom.ray_sphere(Ray((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 0.0, 3.0), s)
    assert not geom.ray_sphere(Ray((0.0, 2.0, 0.0), (1.0, 0.0, 0.0)), s)
