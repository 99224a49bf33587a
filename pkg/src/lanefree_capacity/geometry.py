"""Convex polygons in half-space form, an exact distance oracle, and the
dual-form distance expressions used by the collision constraints.

A polytope is stored as ``A @ X <= b`` with unit-length rows, so every dual
multiplier carries metres and dual distances compare directly against
safety margins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.optimize import linprog, nnls

__all__ = [
    "DegeneratePolytopeError",
    "DualPair",
    "Polytope",
    "Pose",
    "VehicleShape",
    "distance_oracle",
    "closest_points",
    "dual_distance_value",
    "dual_residuals",
    "optimal_dual_pair",
    "rectangle_halfspaces",
    "rectangle_vertices",
    "road_boundaries",
    "vehicle_polytope",
    "wrap_angle",
]

_EPS = 1e-12


class DegeneratePolytopeError(ValueError):
    """Raised when a polytope is empty, has no interior, or is unbounded."""


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))


@dataclass(frozen=True)
class VehicleShape:
    length: float = 4.5
    width: float = 2.0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(f"vehicle dimensions must be positive, got {self.length} x {self.width}")


@dataclass(frozen=True, eq=False)
class Polytope:
    """Bounded convex polygon ``{X : A @ X <= b}`` with unit-norm rows."""

    A: np.ndarray
    b: np.ndarray
    _vertices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = np.array(self.A, dtype=float).reshape(-1, 2)
        b = np.array(self.b, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise ValueError(f"A has {A.shape[0]} rows but b has {b.shape[0]} entries")
        norms = np.linalg.norm(A, axis=1)
        if np.any(norms < _EPS):
            raise DegeneratePolytopeError("zero row in A")
        A = A / norms[:, None]
        b = b / norms
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "_vertices", _enumerate_vertices(A, b))

    @classmethod
    def _known(cls, A, b, vertices) -> "Polytope":
        # Skips the interior probe when unit rows and CCW vertices are known.
        obj = object.__new__(cls)
        for name, val in (("A", A), ("b", b), ("_vertices", vertices)):
            val = np.array(val, dtype=float)
            val.setflags(write=False)
            object.__setattr__(obj, name, val)
        return obj

    @property
    def n_faces(self) -> int:
        return self.A.shape[0]

    @property
    def vertices(self) -> np.ndarray:
        """Vertices in counter-clockwise order, shape (m, 2)."""
        return self._vertices

    def contains(self, point, tol: float = 1e-9) -> bool:
        return bool(np.all(self.A @ np.asarray(point, dtype=float) <= self.b + tol))

    def transformed(self, rotation: float, translation) -> "Polytope":
        """Rigidly rotate by ``rotation`` about the origin, then translate."""
        c, s = math.cos(rotation), math.sin(rotation)
        R = np.array([[c, -s], [s, c]])
        t = np.asarray(translation, dtype=float)
        A_new = self.A @ R.T
        return Polytope(A_new, self.b + A_new @ t)

    def __eq__(self, other):
        if not isinstance(other, Polytope):
            return NotImplemented
        return self.A.shape == other.A.shape and np.allclose(self.A, other.A) and np.allclose(self.b, other.b)

    __hash__ = None


def _enumerate_vertices(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Interior probe: Chebyshev centre must have positive radius.
    m = A.shape[0]
    res = linprog(
        c=[0.0, 0.0, -1.0],
        A_ub=np.hstack([A, np.ones((m, 1))]),
        b_ub=b,
        bounds=[(None, None), (None, None), (0.0, None)],
        method="highs",
    )
    if res.status == 3:
        raise DegeneratePolytopeError("polytope is unbounded")
    if res.status != 0 or res.x[2] <= 1e-9:
        raise DegeneratePolytopeError("polytope has empty interior")

    pts = []
    scale = 1.0 + float(np.max(np.abs(b)))
    for i, j in combinations(range(m), 2):
        M = A[[i, j]]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        v = np.linalg.solve(M, b[[i, j]])
        if np.all(A @ v <= b + 1e-9 * scale):
            pts.append(v)
    pts = np.array(pts)
    # Merge duplicates from redundant rows meeting at one corner.
    uniq = []
    for p in pts:
        if not any(np.linalg.norm(p - q) < 1e-9 * scale for q in uniq):
            uniq.append(p)
    pts = np.array(uniq)
    centre = pts.mean(axis=0)
    order = np.argsort(np.arctan2(pts[:, 1] - centre[1], pts[:, 0] - centre[0]))
    verts = pts[order]
    verts.setflags(write=False)
    return verts


def rectangle_halfspaces(cx, cy, theta, length, width, cos=math.cos, sin=math.sin):
    """Rows of ``A`` and ``b`` for a rectangle centred at (cx, cy) with heading ``theta``.

    ``cos``/``sin`` may be swapped for symbolic versions; the return value is
    then a pair of nested lists of expressions.
    """
    c, s = cos(theta), sin(theta)
    hl, hw = 0.5 * length, 0.5 * width
    # Outward normals: front, left, rear, right.
    A = [[c, s], [-s, c], [-c, -s], [s, -c]]
    along = c * cx + s * cy
    across = -s * cx + c * cy
    b = [along + hl, across + hw, -along + hl, -across + hw]
    return A, b


def rectangle_vertices(cx, cy, theta, length, width) -> np.ndarray:
    """Corners in counter-clockwise order starting at front-right."""
    c, s = math.cos(theta), math.sin(theta)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
    R = np.array([[c, -s], [s, c]])
    return local @ R.T + np.array([cx, cy])


def vehicle_polytope(pose: Pose, shape: VehicleShape) -> Polytope:
    A, b = rectangle_halfspaces(pose.x, pose.y, pose.theta, shape.length, shape.width)
    verts = rectangle_vertices(pose.x, pose.y, pose.theta, shape.length, shape.width)
    return Polytope._known(np.array(A), np.array(b), verts)


def _box(xmin, xmax, ymin, ymax) -> Polytope:
    A = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    return Polytope(A, np.array([xmax, ymax, -xmin, -ymin]))


def road_boundaries(lane_length: float, lane_width: float, lanes_per_approach: int = 2) -> list[Polytope]:
    """The four corner blocks of a plus-shaped four-legged intersection.

    The junction box is centred at the origin. Each road carries
    ``lanes_per_approach`` lanes in total (incoming plus outgoing), so its
    width is ``lanes_per_approach * lane_width``. Blocks are listed NE, NW,
    SW, SE.
    """
    if not (lane_length > 0 and lane_width > 0 and lanes_per_approach >= 1):
        raise ValueError("lane_length, lane_width and lanes_per_approach must be positive")
    h = 0.5 * lanes_per_approach * lane_width
    L = lane_length
    return [
        _box(h, h + L, h, h + L),
        _box(-h - L, -h, h, h + L),
        _box(-h - L, -h, -h - L, -h),
        _box(h, h + L, -h - L, -h),
    ]


def _point_segment(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom < _EPS else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    q = a + t * ab
    return float(np.linalg.norm(p - q)), q


def _overlap(P: Polytope, Q: Polytope) -> bool:
    # Separating-axis test over both polygons' face normals.
    for A in (P.A, Q.A):
        for n in A:
            pp = P.vertices @ n
            qq = Q.vertices @ n
            if pp.max() < qq.min() or qq.max() < pp.min():
                return False
    return True


def closest_points(P: Polytope, Q: Polytope):
    """Return ``(distance, p, q)`` with ``p`` in P and ``q`` in Q closest.

    Candidates are every vertex of one polygon against every edge of the
    other; for disjoint convex polygons the minimum is always attained at
    such a pair. Intersecting polygons give distance 0 and ``p == q`` at
    some common point.
    """
    if _overlap(P, Q):
        common = _common_point(P, Q)
        return 0.0, common, common
    best = (math.inf, None, None)
    Pv, Qv = P.vertices, Q.vertices
    for verts_a, verts_b, swap in ((Pv, Qv, False), (Qv, Pv, True)):
        m = len(verts_b)
        for v in verts_a:
            for k in range(m):
                d, q = _point_segment(v, verts_b[k], verts_b[(k + 1) % m])
                if d < best[0]:
                    best = (d, q, v) if swap else (d, v, q)
    return best


def _common_point(P: Polytope, Q: Polytope):
    A = np.vstack([P.A, Q.A])
    b = np.concatenate([P.b, Q.b])
    res = linprog(np.zeros(2), A_ub=A, b_ub=b + 1e-12, bounds=[(None, None)] * 2, method="highs")
    if res.status == 0:
        return res.x
    return 0.5 * (P.vertices.mean(axis=0) + Q.vertices.mean(axis=0))


def distance_oracle(P: Polytope, Q: Polytope) -> float:
    """Exact Euclidean distance between two convex polygons (0 if they meet)."""
    return closest_points(P, Q)[0]


@dataclass(frozen=True, eq=False)
class DualPair:
    """Dual certificate ``(lambda_pq, lambda_qp, s)`` for the separation of P and Q."""

    lam_pq: np.ndarray
    lam_qp: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        for name in ("lam_pq", "lam_qp", "s"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float).reshape(-1))
        if self.s.shape != (2,):
            raise ValueError("s must be a 2-vector")

    @classmethod
    def zeros(cls, n_p: int = 4, n_q: int = 4) -> "DualPair":
        return cls(np.zeros(n_p), np.zeros(n_q), np.zeros(2))

    def is_admissible(self, tol: float = 1e-9) -> bool:
        """Sign and norm conditions: lambdas non-negative, ``||s|| <= 1``."""
        return bool(
            np.all(self.lam_pq >= -tol) and np.all(self.lam_qp >= -tol) and np.linalg.norm(self.s) <= 1 + tol
        )


def _check_dims(P: Polytope, Q: Polytope, d: DualPair):
    if d.lam_pq.shape[0] != P.n_faces or d.lam_qp.shape[0] != Q.n_faces:
        raise ValueError(
            f"dual sizes ({d.lam_pq.shape[0]}, {d.lam_qp.shape[0]}) do not match "
            f"polytope faces ({P.n_faces}, {Q.n_faces})"
        )


def dual_distance_value(P: Polytope, Q: Polytope, d: DualPair) -> float:
    """``-b_P . lam_pq - b_Q . lam_qp``; a lower bound on the distance only
    when the residuals vanish and ``d`` is admissible."""
    _check_dims(P, Q, d)
    return float(-P.b @ d.lam_pq - Q.b @ d.lam_qp)


def dual_residuals(P: Polytope, Q: Polytope, d: DualPair):
    """Return ``(A_P^T lam_pq + s, A_Q^T lam_qp - s)``."""
    _check_dims(P, Q, d)
    return P.A.T @ d.lam_pq + d.s, Q.A.T @ d.lam_qp - d.s


def _face_multipliers(A: np.ndarray, b: np.ndarray, point, direction, active_tol: float):
    """Non-negative ``lam`` on faces active at ``point`` with ``A^T lam = direction``."""
    slack = b - A @ point
    active = np.flatnonzero(slack <= active_tol)
    lam = np.zeros(A.shape[0])
    if active.size:
        sol, _ = nnls(A[active].T, direction)
        lam[active] = sol
    return lam


def optimal_dual_pair(P: Polytope, Q: Polytope, active_tol: float = 1e-7) -> DualPair:
    """Dual certificate built from the oracle's closest points.

    For separated polygons the separating direction ``s`` is the unit vector
    from Q's closest point to P's, and the multipliers sit on the faces
    active at each closest point; the resulting dual value equals the
    distance. For touching or overlapping polygons the centroid direction is
    used instead and the value is at most 0.
    """
    dist, p, q = closest_points(P, Q)
    if dist > 1e-12:
        s = (p - q) / dist
    else:
        diff = P.vertices.mean(axis=0) - Q.vertices.mean(axis=0)
        nrm = np.linalg.norm(diff)
        s = diff / nrm if nrm > _EPS else np.array([1.0, 0.0])
        p = P.vertices[np.argmin(P.vertices @ s)]
        q = Q.vertices[np.argmax(Q.vertices @ s)]
    tol_p = active_tol * (1.0 + np.max(np.abs(P.b)))
    tol_q = active_tol * (1.0 + np.max(np.abs(Q.b)))
    lam_pq = _face_multipliers(P.A, P.b, p, -s, tol_p)
    lam_qp = _face_multipliers(Q.A, Q.b, q, s, tol_q)
    return DualPair(lam_pq, lam_qp, s)
