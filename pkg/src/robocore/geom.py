"""Exact geometric predicates used by the collision and ball-query workloads.

The separating-axis arithmetic here is written in the same operation order as
the μop programs in :mod:`robocore.isa`, so that a 64-bit interpretation of a
program reproduces these results bit for bit.  The accelerator datapath runs
the same expressions in 32-bit floats.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Slack added to |R_ij| in the edge x edge axes (unitless, R is a rotation).
EPSILON = 1e-6

_ORTHO_TOL = 1e-6


def _vec(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Aabb:
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center, "center"))
        object.__setattr__(self, "half_extents", _vec(self.half_extents, "half_extents"))
        if np.any(self.half_extents < 0):
            raise ValueError("half_extents must be non-negative")

    @classmethod
    def from_bounds(cls, lo, hi) -> Aabb:
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        return cls((lo + hi) * 0.5, (hi - lo) * 0.5)

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.half_extents

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.half_extents

    def contains_point(self, p) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(np.abs(p - self.center) <= self.half_extents))

    def __eq__(self, other):
        if not isinstance(other, Aabb):
            return NotImplemented
        return np.array_equal(self.center, other.center) and np.array_equal(
            self.half_extents, other.half_extents
        )

    def __repr__(self):
        return f"Aabb(center={self.center.tolist()}, half_extents={self.half_extents.tolist()})"


@dataclass(frozen=True, eq=False)
class Obb:
    """Oriented box; ``axes`` holds the local axes u0, u1, u2 as columns."""

    center: np.ndarray
    half_extents: np.ndarray
    axes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center, "center"))
        object.__setattr__(self, "half_extents", _vec(self.half_extents, "half_extents"))
        axes = np.asarray(self.axes, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(axes)):
            raise ValueError("axes must be finite")
        if np.max(np.abs(axes.T @ axes - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("axes must be orthonormal")
        axes.setflags(write=False)
        object.__setattr__(self, "axes", axes)
        if np.any(self.half_extents < 0):
            raise ValueError("half_extents must be non-negative")

    @classmethod
    def from_aabb(cls, box: Aabb) -> Obb:
        return cls(box.center, box.half_extents, np.eye(3))

    def corners(self) -> np.ndarray:
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64
        )
        return self.center + (signs * self.half_extents) @ self.axes.T

    def world_aabb(self) -> Aabb:
        return Aabb(self.center, np.abs(self.axes) @ self.half_extents)

    def translated(self, offset) -> Obb:
        return Obb(self.center + np.asarray(offset, dtype=np.float64), self.half_extents, self.axes)

    def __eq__(self, other):
        if not isinstance(other, Obb):
            return NotImplemented
        return (
            np.array_equal(self.center, other.center)
            and np.array_equal(self.half_extents, other.half_extents)
            and np.array_equal(self.axes, other.axes)
        )

    def __repr__(self):
        return (
            f"Obb(center={self.center.tolist()}, half_extents={self.half_extents.tolist()}, "
            f"axes={self.axes.tolist()})"
        )


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center, "center"))
        r = float(self.radius)
        if not (r >= 0 and math.isfinite(r)):
            raise ValueError("radius must be finite and non-negative")
        object.__setattr__(self, "radius", r)

    def __eq__(self, other):
        if not isinstance(other, Sphere):
            return NotImplemented
        return np.array_equal(self.center, other.center) and self.radius == other.radius


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec(self.origin, "origin"))
        object.__setattr__(self, "direction", _vec(self.direction, "direction"))
        if abs(float(np.linalg.norm(self.direction)) - 1.0) > 1e-6:
            raise ValueError("direction must be unit length")
        if not self.t_min <= self.t_max:
            raise ValueError("t_min must not exceed t_max")

    @classmethod
    def point(cls, p) -> Ray:
        """Degenerate ray used for ball query: zero-length segment at ``p``."""
        return cls(p, (1.0, 0.0, 0.0), 0.0, 0.0)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


class ExitStage(enum.IntEnum):
    """Decisive stage of a staged OBB-AABB test, in evaluation order."""

    BOUNDING_SPHERE_MISS = 0
    INSCRIBING_SPHERE_HIT = 1
    BOX_NORMAL_0 = 2
    BOX_NORMAL_1 = 3
    BOX_NORMAL_2 = 4
    BOX_NORMAL_3 = 5
    BOX_NORMAL_4 = 6
    BOX_NORMAL_5 = 7
    EDGE_EDGE_0 = 8
    EDGE_EDGE_1 = 9
    EDGE_EDGE_2 = 10
    EDGE_EDGE_3 = 11
    EDGE_EDGE_4 = 12
    EDGE_EDGE_5 = 13
    EDGE_EDGE_6 = 14
    EDGE_EDGE_7 = 15
    EDGE_EDGE_8 = 16
    FULL_OVERLAP = 17

    @classmethod
    def box_normal(cls, k: int) -> ExitStage:
        if not 0 <= k < 6:
            raise ValueError(f"box-normal axis index out of range: {k}")
        return cls(cls.BOX_NORMAL_0 + k)

    @classmethod
    def edge_edge(cls, k: int) -> ExitStage:
        if not 0 <= k < 9:
            raise ValueError(f"edge axis index out of range: {k}")
        return cls(cls.EDGE_EDGE_0 + k)

    @classmethod
    def from_axis(cls, axis: int) -> ExitStage:
        """Stage for a separating axis numbered 0..14 in test order."""
        return cls(cls.BOX_NORMAL_0 + axis)

    @property
    def is_sphere(self) -> bool:
        return self <= ExitStage.INSCRIBING_SPHERE_HIT

    @property
    def axes_tested(self) -> int:
        if self.is_sphere:
            return 0
        return int(self) - int(ExitStage.BOX_NORMAL_0) + 1 if self != ExitStage.FULL_OVERLAP else 15

    @property
    def collides(self) -> bool:
        return self in (ExitStage.INSCRIBING_SPHERE_HIT, ExitStage.FULL_OVERLAP)

    @property
    def label(self) -> str:
        if self == ExitStage.BOUNDING_SPHERE_MISS:
            return "BoundingSphereMiss"
        if self == ExitStage.INSCRIBING_SPHERE_HIT:
            return "InscribingSphereHit"
        if self == ExitStage.FULL_OVERLAP:
            return "FullOverlap"
        if self <= ExitStage.BOX_NORMAL_5:
            return f"BoxNormalAxis({int(self) - int(ExitStage.BOX_NORMAL_0)})"
        return f"EdgeEdgeAxis({int(self) - int(ExitStage.EDGE_EDGE_0)})"


class StagedResult(NamedTuple):
    collides: bool
    exit: ExitStage
    axes_tested: int


# --- separating-axis margins -------------------------------------------------
#
# Each margin is |projection of center offset| - (sum of projected radii); a
# strictly positive margin separates the boxes, so touching boxes collide.


def _dot(x0, x1, x2, y0, y1, y2):
    return (x0 * y0 + x1 * y1) + x2 * y2


def sat_margins(T, a, b, R, eps: float = EPSILON) -> np.ndarray:
    """Margins of all 15 axes, vectorised over leading dimensions.

    ``T`` is the OBB center minus the AABB center, ``a`` / ``b`` the AABB /
    OBB half extents and ``R[..., i, j]`` the i-th world component of OBB
    axis j.  Axis order: AABB normals x, y, z; OBB normals u0, u1, u2; then
    ``e_i x u_j`` row-major.
    """
    T = np.asarray(T)
    a = np.asarray(a)
    b = np.asarray(b)
    R = np.asarray(R)
    shape = np.broadcast_shapes(T.shape[:-1], a.shape[:-1], b.shape[:-1], R.shape[:-2])
    out = np.empty(shape + (15,), dtype=np.result_type(T, a, b, R))
    absR = np.abs(R)
    # T expressed in the OBB frame (RXFORM)
    t_obb = [_dot(T[..., 0], T[..., 1], T[..., 2], R[..., 0, j], R[..., 1, j], R[..., 2, j]) for j in range(3)]
    for i in range(3):
        rad = _dot(absR[..., i, 0], absR[..., i, 1], absR[..., i, 2], b[..., 0], b[..., 1], b[..., 2]) + a[..., i]
        out[..., i] = np.abs(T[..., i]) - rad
    for j in range(3):
        rad = _dot(a[..., 0], a[..., 1], a[..., 2], absR[..., 0, j], absR[..., 1, j], absR[..., 2, j]) + b[..., j]
        out[..., 3 + j] = np.abs(t_obb[j]) - rad
    E = absR + eps
    for i in range(3):
        i1, i2 = (i + 1) % 3, (i + 2) % 3
        for j in range(3):
            j1, j2 = (j + 1) % 3, (j + 2) % 3
            proj = R[..., i1, j] * T[..., i2] - R[..., i2, j] * T[..., i1]
            rad = (
                (a[..., i1] * E[..., i2, j] + a[..., i2] * E[..., i1, j]) + b[..., j1] * E[..., i, j2]
            ) + b[..., j2] * E[..., i, j1]
            out[..., 6 + 3 * i + j] = np.abs(proj) - rad
    return out


def _pair_arrays(obb: Obb, aabb: Aabb):
    return obb.center - aabb.center, aabb.half_extents, obb.half_extents, obb.axes


def axis_lengths(R) -> np.ndarray:
    """Lengths of the 15 (unnormalised) test axes, for converting margins to distances."""
    R = np.asarray(R)
    out = np.ones(R.shape[:-2] + (15,), dtype=np.float64)
    for i in range(3):
        i1, i2 = (i + 1) % 3, (i + 2) % 3
        for j in range(3):
            # |e_i x u_j| = sqrt(R_i1j^2 + R_i2j^2)
            out[..., 6 + 3 * i + j] = np.hypot(R[..., i1, j], R[..., i2, j])
    return out


def sat_full(obb: Obb, aabb: Aabb) -> bool:
    """All 15 axes, no early exit."""
    return bool(np.all(sat_margins(*_pair_arrays(obb, aabb)) <= 0.0))


def sat_full_batch(obb: Obb, centers, half_extents) -> np.ndarray:
    """``sat_full`` of one OBB against many AABBs given as (N, 3) arrays."""
    centers = np.asarray(centers, dtype=np.float64)
    half_extents = np.asarray(half_extents, dtype=np.float64)
    m = sat_margins(obb.center - centers, half_extents, obb.half_extents, obb.axes)
    return np.all(m <= 0.0, axis=-1)


def signed_margin(obb: Obb, aabb: Aabb) -> float:
    """Largest separation distance over the 15 axes (negative when overlapping)."""
    T, a, b, R = _pair_arrays(obb, aabb)
    m = sat_margins(T, a, b, R, eps=0.0)
    lengths = axis_lengths(R)
    valid = lengths > 1e-9
    return float(np.max(m[valid] / lengths[valid]))


# --- sphere culling ---------------------------------------------------------


def bounding_sphere(obb: Obb) -> Sphere:
    return Sphere(obb.center, float(np.linalg.norm(obb.half_extents)))


def inscribing_sphere(obb: Obb) -> Sphere:
    return Sphere(obb.center, float(np.min(obb.half_extents)))


def _clamp_dist2(p, c_a, a):
    """Squared distance from ``p`` to the box, via the lo/hi clamp."""
    lo = c_a - a
    hi = c_a - (-a)
    dlo = lo - p
    dhi = p - hi
    e = dlo * (dlo > 0) - (-(dhi * (dhi > 0)))
    return (e[..., 0] * e[..., 0] + e[..., 1] * e[..., 1]) + e[..., 2] * e[..., 2]


def _bounding_r2(b):
    return (b[..., 0] * b[..., 0] + b[..., 1] * b[..., 1]) + b[..., 2] * b[..., 2]


def _inscribing_r2(b):
    r = np.minimum(np.minimum(b[..., 0], b[..., 1]), b[..., 2])
    return r * r


def sphere_aabb_intersect(s: Sphere, b: Aabb) -> bool:
    d2 = _clamp_dist2(s.center, b.center, b.half_extents)
    return bool(d2 <= s.radius * s.radius)


def sat_staged(obb: Obb, aabb: Aabb, enable_spheres: bool = True) -> StagedResult:
    """Staged test that stops at the first decisive stage."""
    if enable_spheres:
        d2 = _clamp_dist2(obb.center, aabb.center, aabb.half_extents)
        if d2 - _bounding_r2(obb.half_extents) > 0:
            return StagedResult(False, ExitStage.BOUNDING_SPHERE_MISS, 0)
        if d2 - _inscribing_r2(obb.half_extents) <= 0:
            return StagedResult(True, ExitStage.INSCRIBING_SPHERE_HIT, 0)
    m = sat_margins(*_pair_arrays(obb, aabb))
    sep = np.flatnonzero(m > 0.0)
    if sep.size:
        k = int(sep[0])
        return StagedResult(False, ExitStage.from_axis(k), k + 1)
    return StagedResult(True, ExitStage.FULL_OVERLAP, 15)


def staged_exit_batch(obb_center, aabb_center, a, b, R, enable_spheres: bool, dtype=np.float64) -> np.ndarray:
    """Vectorised ``sat_staged`` returning ExitStage codes (int array).

    With ``dtype=np.float32`` every input is rounded first and all arithmetic
    happens in 32 bits, which reproduces the simulated datapath bit for bit.
    """
    obb_center = np.asarray(obb_center, dtype=dtype)
    aabb_center = np.asarray(aabb_center, dtype=dtype)
    a = np.asarray(a, dtype=dtype)
    b = np.asarray(b, dtype=dtype)
    R = np.asarray(R, dtype=dtype)
    m = sat_margins(obb_center - aabb_center, a, b, R)
    shape = m.shape[:-1]
    sep = m > 0.0
    any_sep = sep.any(axis=-1)
    first = np.argmax(sep, axis=-1)
    codes = np.where(any_sep, int(ExitStage.BOX_NORMAL_0) + first, int(ExitStage.FULL_OVERLAP))
    if enable_spheres:
        b = np.broadcast_to(b, shape + (3,))
        d2 = _clamp_dist2(obb_center, aabb_center, a)
        codes = np.where(d2 - _inscribing_r2(b) <= 0, int(ExitStage.INSCRIBING_SPHERE_HIT), codes)
        codes = np.where(d2 - _bounding_r2(b) > 0, int(ExitStage.BOUNDING_SPHERE_MISS), codes)
    return np.asarray(codes, dtype=np.int64)


# --- rays -------------------------------------------------------------------


def ray_aabb(r: Ray, b: Aabb) -> float | None:
    """Slab test; returns the entry parameter in [t_min, t_max] or None."""
    t0, t1 = r.t_min, r.t_max
    lo, hi = b.lo, b.hi
    for k in range(3):
        o, d = r.origin[k], r.direction[k]
        if d == 0.0:
            if o < lo[k] or o > hi[k]:
                return None
            continue
        inv = 1.0 / d
        ta, tb = (lo[k] - o) * inv, (hi[k] - o) * inv
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 > t1:
            return None
    return float(t0)


def ray_sphere(r: Ray, s: Sphere) -> bool:
    """Does the segment [t_min, t_max] pass within ``s.radius`` of the center?"""
    oc = s.center - r.origin
    t = float(np.dot(oc, r.direction))
    t = min(max(t, r.t_min), r.t_max)
    d = r.at(t) - s.center
    return bool(np.dot(d, d) <= s.radius * s.radius)
