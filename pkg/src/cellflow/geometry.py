"""Parametric geometry: rational cubic Bezier curves, canonical frames,
plane fitting, point-set distances, and small polygon utilities.

Everything here is pure numpy and thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


# ---------------------------------------------------------------------------
# rational cubic Bezier curves
# ---------------------------------------------------------------------------

def bernstein3(t: np.ndarray) -> np.ndarray:
    """Cubic Bernstein basis, shape (len(t), 4)."""
    t = np.asarray(t, dtype=np.float64)
    u = 1.0 - t
    return np.stack([u ** 3, 3.0 * t * u ** 2, 3.0 * t ** 2 * u, t ** 3], axis=-1)


@dataclass
class RationalCubicBezier:
    """Degree-3 rational curve; weights must be strictly positive.

    C(0) and C(1) reproduce the end control points exactly for any
    weights, and the curve is invariant under a common scaling of all
    weights.
    """

    ctrl: np.ndarray  # (4, 3)
    weights: np.ndarray  # (4,)

    def __post_init__(self):
        self.ctrl = np.asarray(self.ctrl, dtype=np.float64).reshape(4, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(4)
        if np.any(self.weights <= 0.0):
            raise ValueError(f"bezier weights must be positive, got {self.weights}")

    def evaluate(self, t) -> np.ndarray:
        scalar = np.isscalar(t)
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        basis = bernstein3(t) * self.weights  # (T, 4)
        pts = basis @ self.ctrl / basis.sum(axis=-1, keepdims=True)
        return pts[0] if scalar else pts

    def sample(self, count: int) -> np.ndarray:
        return self.evaluate(np.linspace(0.0, 1.0, count))

    def midpoint(self) -> np.ndarray:
        return self.evaluate(0.5)

    def max_chord_deviation(self, count: int = 32) -> float:
        """Max distance of curve samples from the end-to-end segment."""
        pts = self.sample(count)
        a, b = self.ctrl[0], self.ctrl[3]
        d = b - a
        denom = float(d @ d)
        if denom < 1e-30:
            return float(np.max(np.linalg.norm(pts - a, axis=-1)))
        s = np.clip((pts - a) @ d / denom, 0.0, 1.0)
        closest = a + s[:, None] * d
        return float(np.max(np.linalg.norm(pts - closest, axis=-1)))


def line_bezier(p0, p1) -> RationalCubicBezier:
    """Straight segment expressed as a rational cubic (unit weights)."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    ctrl = np.stack([p0, p0 + (p1 - p0) / 3.0, p0 + 2.0 * (p1 - p0) / 3.0, p1])
    return RationalCubicBezier(ctrl, np.ones(4))


def softplus_weight(raw: np.ndarray) -> np.ndarray:
    """Internal-control-point weight map: softplus(raw) + floor, always > 0."""
    return np.logaddexp(0.0, np.asarray(raw, dtype=np.float64)) + 1e-3


def bezier_from_relative_params(x_u, x_v, delta1, delta2, raw_weights) -> RationalCubicBezier:
    """Build a curve anchored exactly at two endpoint positions.

    Internal control points are offsets from the endpoints, internal
    weights come from a softplus with a small positive floor, and the
    end weights are 1, so the endpoints coincide with the anchors by
    construction.
    """
    x_u = np.asarray(x_u, dtype=np.float64)
    x_v = np.asarray(x_v, dtype=np.float64)
    ctrl = np.stack([x_u, x_u + np.asarray(delta1, dtype=np.float64),
                     x_v + np.asarray(delta2, dtype=np.float64), x_v])
    w_mid = softplus_weight(np.asarray(raw_weights).reshape(2))
    return RationalCubicBezier(ctrl, np.array([1.0, w_mid[0], w_mid[1], 1.0]))


# ---------------------------------------------------------------------------
# point-set distances
# ---------------------------------------------------------------------------

def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbor distance between point sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer_distance: point sets must be non-empty")
    if a.shape[0] * b.shape[0] <= 4096:
        d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
        return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())
    d_ab = cKDTree(b).query(a, k=1)[0]
    d_ba = cKDTree(a).query(b, k=1)[0]
    return float(np.mean(d_ab ** 2) + np.mean(d_ba ** 2))


def pairwise_chamfer(clouds_a, clouds_b, workers: int = 1) -> np.ndarray:
    """Chamfer distance matrix between two lists of clouds, trees cached."""
    arrs_a = [np.asarray(a, dtype=np.float64) for a in clouds_a]
    arrs_b = [np.asarray(b, dtype=np.float64) for b in clouds_b]
    trees_a = [cKDTree(a) for a in arrs_a]
    trees_b = [cKDTree(b) for b in arrs_b]
    out = np.zeros((len(arrs_a), len(arrs_b)))
    for i, a in enumerate(arrs_a):
        for j, b in enumerate(arrs_b):
            d_ab = trees_b[j].query(a, k=1, workers=workers)[0]
            d_ba = trees_a[i].query(b, k=1, workers=workers)[0]
            out[i, j] = np.mean(d_ab ** 2) + np.mean(d_ba ** 2)
    return out


# ---------------------------------------------------------------------------
# frames and planes
# ---------------------------------------------------------------------------

@dataclass
class CanonicalFrame:
    """Rigid transform: columns of R are the frame axes, t the origin."""

    R: np.ndarray  # (3, 3), orthonormal, det +1
    t: np.ndarray  # (3,)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def validate(self, tol: float = 1e-6) -> None:
        err = np.max(np.abs(self.R.T @ self.R - np.eye(3)))
        if err > tol:
            raise ValueError(f"frame not orthonormal, |R^T R - I| = {err:.3e}")
        if np.linalg.det(self.R) <= 0:
            raise ValueError("frame is left-handed")

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.t) @ self.R

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t


def _fix_sign_first_nonzero(v: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Flip a vector so its first non-negligible component is positive."""
    for comp in v:
        if abs(comp) > tol:
            return v if comp > 0 else -v
    return v


def canonical_frame_from_face(samples: np.ndarray, normal_hint: np.ndarray) -> CanonicalFrame:
    """Deterministic frame for a sampled face patch.

    Origin is the sample centroid. The third axis is the best-fit plane
    normal aligned with the hint; the first axis is the largest-variance
    in-plane direction with its first nonzero component made positive;
    the second completes the right-handed frame.
    """
    pts = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise ValueError("frame needs at least 3 samples")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / pts.shape[0]
    evals, evecs = np.linalg.eigh(cov)  # ascending
    if evals[1] <= max(evals[2], 1e-300) * 1e-10:
        raise ValueError("degenerate (collinear) samples, no unique plane")
    normal = evecs[:, 0]
    hint = np.asarray(normal_hint, dtype=np.float64)
    if normal @ hint < 0:
        normal = -normal
    e1 = evecs[:, 2]
    e1 = e1 - (e1 @ normal) * normal
    e1 /= np.linalg.norm(e1)
    e1 = _fix_sign_first_nonzero(e1)
    e2 = np.cross(normal, e1)
    return CanonicalFrame(np.stack([e1, e2, normal], axis=1), centroid)


def edge_frame(p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Deterministic rotation for an edge: first axis along the chord."""
    d = np.asarray(p1, dtype=np.float64) - np.asarray(p0, dtype=np.float64)
    n = np.linalg.norm(d)
    if n < 1e-12:
        return np.eye(3)
    e1 = d / n
    ref = np.array([0.0, 0.0, 1.0]) if abs(e1[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e2 = np.cross(ref, e1)
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(e1, e2)
    return np.stack([e1, e2, e3], axis=1)


def fit_plane_least_squares(points: np.ndarray):
    """Total-least-squares plane: returns (normal, offset, rms residual).

    The plane is {x : normal . x = offset}. Raises on rank-deficient
    (collinear or fewer than 3) input.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise ValueError("plane fit needs at least 3 points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / pts.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= max(evals[2], 1e-300) * 1e-10:
        raise ValueError("degenerate rank: points are collinear")
    normal = _fix_sign_first_nonzero(evecs[:, 0])
    residuals = centered @ normal
    rms = float(np.sqrt(np.mean(residuals ** 2)))
    return normal, float(normal @ centroid), rms


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix via a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ---------------------------------------------------------------------------
# point-to-triangle-mesh distance (for curve-on-surface checks)
# ---------------------------------------------------------------------------

def _points_to_segments_sqdist(p, a, b):
    """Squared distance from points (n,1,3) to segments (1,m,3)-(1,m,3)."""
    d = b - a
    denom = np.sum(d * d, axis=-1)
    s = np.sum((p - a) * d, axis=-1) / np.where(denom < 1e-30, 1.0, denom)
    s = np.clip(np.where(denom < 1e-30, 0.0, s), 0.0, 1.0)
    closest = a + s[..., None] * d
    return np.sum((p - closest) ** 2, axis=-1)


def points_to_triangles_distance(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Min Euclidean distance from each point to a triangle soup.

    points: (n, 3); tris: (m, 3, 3). Returns (n,). The closest point on a
    triangle is either the plane projection (when its barycentric
    coordinates are non-negative) or a point on one of the clamped
    edges, so taking the min over those candidates is exact.
    """
    p = np.asarray(points, dtype=np.float64)[:, None, :]  # (n, 1, 3)
    tris = np.asarray(tris, dtype=np.float64)
    a = tris[None, :, 0, :]
    b = tris[None, :, 1, :]
    c = tris[None, :, 2, :]

    sq = _points_to_segments_sqdist(p, a, b)
    sq = np.minimum(sq, _points_to_segments_sqdist(p, b, c))
    sq = np.minimum(sq, _points_to_segments_sqdist(p, c, a))

    ab = b - a
    ac = c - a
    n = np.cross(ab, ac)
    nn = np.sum(n * n, axis=-1)
    ap = p - a
    dist_plane = np.sum(ap * n, axis=-1)
    # barycentric coords of the plane projection
    proj = ap - dist_plane[..., None] * n / np.where(nn < 1e-30, 1.0, nn)[..., None]
    d00 = np.sum(ab * ab, axis=-1)
    d01 = np.sum(ab * ac, axis=-1)
    d11 = np.sum(ac * ac, axis=-1)
    d20 = np.sum(proj * ab, axis=-1)
    d21 = np.sum(proj * ac, axis=-1)
    denom = d00 * d11 - d01 * d01
    denom = np.where(np.abs(denom) < 1e-30, 1.0, denom)
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    inside = (v >= 0) & (w >= 0) & (v + w <= 1) & (nn >= 1e-30)
    sq_plane = dist_plane ** 2 / np.where(nn < 1e-30, 1.0, nn)
    sq = np.where(inside, np.minimum(sq, sq_plane), sq)
    return np.sqrt(sq.min(axis=1))


def grid_triangles(grid: np.ndarray) -> np.ndarray:
    """Triangulate a (G, G, 3) sample grid into 2*(G-1)^2 triangles."""
    g = np.asarray(grid, dtype=np.float64)
    a = g[:-1, :-1]
    b = g[1:, :-1]
    c = g[1:, 1:]
    d = g[:-1, 1:]
    t1 = np.stack([a, b, c], axis=2).reshape(-1, 3, 3)
    t2 = np.stack([a, c, d], axis=2).reshape(-1, 3, 3)
    return np.concatenate([t1, t2], axis=0)


# ---------------------------------------------------------------------------
# 2-D polygon helpers (used for trimmed-face sampling and loop areas)
# ---------------------------------------------------------------------------

def shoelace_area(poly: np.ndarray) -> float:
    """Signed area of a closed 2-D polygon (positive = counter-clockwise)."""
    p = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def points_in_loops_evenodd(points: np.ndarray, loops) -> np.ndarray:
    """Even-odd containment of 2-D points w.r.t. a set of closed loops.

    Holes fall out automatically: a point inside both an outer loop and
    a hole loop has even crossing parity and is excluded.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    inside = np.zeros(len(pts), dtype=bool)
    for loop in loops:
        v = np.asarray(loop, dtype=np.float64).reshape(-1, 2)
        x0, y0 = v[:, 0], v[:, 1]
        x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
        px = pts[:, 0][:, None]
        py = pts[:, 1][:, None]
        crosses = ((y0 > py) != (y1 > py)) & (
            px < (x1 - x0) * (py - y0) / (y1 - y0 + 1e-300) + x0)
        inside ^= (crosses.sum(axis=1) % 2).astype(bool)
    return inside
