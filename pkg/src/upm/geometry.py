"""Coordinate-frame and point-set machinery.

Pointmaps store one world-frame 3D coordinate per pixel, pixel-aligned
with the RGB image they came from.  Everything here is a pure function
over immutable numpy inputs; nothing touches the autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, ShapeError

DEFAULT_MIN_POINTS = 16
DEFAULT_CHAMFER_SUBSAMPLE = 512
DEFAULT_CHAMFER_SEED = 0


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform: x_world = R @ x_cam + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.ascontiguousarray(np.asarray(self.rotation, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.translation, dtype=np.float64))
        if r.shape != (3, 3) or t.shape != (3,):
            raise ShapeError(f"pose expects 3x3 rotation and 3-vector, got {r.shape}, {t.shape}")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
            raise ContractError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ContractError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)


@dataclass
class Pointmap:
    """Per-pixel world coordinates with a validity mask."""

    points: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        self.points = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        self.validity = np.ascontiguousarray(np.asarray(self.validity, dtype=bool))
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ShapeError(f"points must be HxWx3, got {self.points.shape}")
        if self.validity.shape != self.points.shape[:2]:
            raise ShapeError("validity mask does not match points")
        if not np.isfinite(self.points[self.validity]).all():
            raise ContractError("valid pixels must hold finite coordinates")

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    def valid_points(self) -> np.ndarray:
        """Valid world points as an (n, 3) array, raster order."""
        return self.points[self.validity]


@dataclass
class ObjectAnnotation:
    """A referred object, its world AABB, and its referring text."""

    object_id: int
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    referring_text: str
    category: str

    def __post_init__(self):
        self.aabb_min = np.asarray(self.aabb_min, dtype=np.float64)
        self.aabb_max = np.asarray(self.aabb_max, dtype=np.float64)
        if self.aabb_min.shape != (3,) or self.aabb_max.shape != (3,):
            raise ShapeError("AABB corners must be 3-vectors")
        if np.any(self.aabb_min > self.aabb_max):
            raise ContractError("AABB min corner exceeds max corner")


# ---------------------------------------------------------------------------
# back-projection


def back_project(depth: np.ndarray, intr: CameraIntrinsics, pose: CameraPose) -> Pointmap:
    """Lift a depth map to a world-frame pointmap. Zero depth marks invalid pixels."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ShapeError(f"depth must be HxW, got {depth.shape}")
    if np.any(depth < 0):
        raise ContractError("depth values must be nonnegative")
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    x_cam = (u - intr.cx) * depth / intr.fx
    y_cam = (v - intr.cy) * depth / intr.fy
    cam = np.stack([x_cam, y_cam, depth], axis=-1)
    world = cam @ pose.rotation.T + pose.translation
    validity = depth > 0
    world[~validity] = 0.0
    return Pointmap(points=world, validity=validity)


def project(points_world: np.ndarray, intr: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """Forward-project world points to (u, v, z) through the same camera."""
    pts = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    cam = (pts - pose.translation) @ pose.rotation
    z = cam[:, 2]
    u = cam[:, 0] * intr.fx / z + intr.cx
    v = cam[:, 1] * intr.fy / z + intr.cy
    return np.stack([u, v, z], axis=-1)


# ---------------------------------------------------------------------------
# Chamfer distance


def _min_sq_dists_brute(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - targets[None, :, :]
    return (diff * diff).sum(axis=2).min(axis=1)


class _UniformGrid:
    """Hash grid over a point set for exact nearest-neighbor queries.

    Per-pair squared distances use the same elementwise expression as the
    brute-force path, so the minima agree bitwise.
    """

    def __init__(self, points: np.ndarray, cell: float):
        self.points = points
        self.cell = cell
        self.origin = points.min(axis=0)
        coords = np.floor((points - self.origin) / cell).astype(np.int64)
        self.max_coord = coords.max(axis=0)
        self.cells: dict[tuple[int, int, int], list[int]] = {}
        for i, key in enumerate(map(tuple, coords)):
            self.cells.setdefault(key, []).append(i)

    def _ring_candidates(self, center: np.ndarray, radius: int) -> list[int]:
        out: list[int] = []
        lo = center - radius
        hi = center + radius
        for a in range(lo[0], hi[0] + 1):
            for b in range(lo[1], hi[1] + 1):
                for c in range(lo[2], hi[2] + 1):
                    if max(abs(a - center[0]), abs(b - center[1]), abs(c - center[2])) != radius:
                        continue
                    bucket = self.cells.get((a, b, c))
                    if bucket:
                        out.extend(bucket)
        return out

    def min_sq_dist(self, query: np.ndarray) -> float:
        center = np.floor((query - self.origin) / self.cell).astype(np.int64)
        # Any point in a ring at Chebyshev cell-distance r is farther than
        # (r - 1) * cell, so once best <= (r * cell)^2 no later ring can win.
        max_radius = int(
            max(np.maximum(center - 0, 0).max(), np.maximum(self.max_coord - center, 0).max())
        )
        best = np.inf
        radius = 0
        while radius <= max_radius or not np.isfinite(best):
            cand = self._ring_candidates(center, radius)
            if cand:
                pts = self.points[cand]
                diff = query[None, :] - pts
                d2 = (diff * diff).sum(axis=1).min()
                if d2 < best:
                    best = d2
            if np.isfinite(best) and best <= (radius * self.cell) ** 2:
                break
            radius += 1
        return float(best)


def _min_sq_dists_grid(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    extent = targets.max(axis=0) - targets.min(axis=0)
    cell = float(extent.max()) / max(round(len(targets) ** (1.0 / 3.0)), 1)
    if cell <= 0:
        cell = 1.0
    grid = _UniformGrid(targets, cell)
    return np.array([grid.min_sq_dist(q) for q in queries])


def _subsample(points: np.ndarray, count: int | None, seed: int) -> np.ndarray:
    if count is None or len(points) <= count:
        return points
    rng = np.random.default_rng((seed, len(points)))
    idx = np.sort(rng.choice(len(points), size=count, replace=False))
    return points[idx]


def chamfer_distance(
    map_a: Pointmap,
    map_b: Pointmap,
    subsample: int | None = None,
    seed: int = DEFAULT_CHAMFER_SEED,
    method: str = "brute",
) -> float:
    """Symmetric Chamfer distance between the valid points of two pointmaps.

    Each direction averages the squared distance from every (optionally
    subsampled) valid point to its nearest neighbor on the other side, and
    the two directional means are added.  ``method`` selects the reference
    O(n^2) scan ("brute") or the uniform-grid accelerator ("grid"); the
    two agree bitwise.
    """
    pts_a = _subsample(map_a.valid_points(), subsample, seed)
    pts_b = _subsample(map_b.valid_points(), subsample, seed)
    return chamfer_distance_points(pts_a, pts_b, method=method)


def chamfer_distance_points(pts_a: np.ndarray, pts_b: np.ndarray, method: str = "brute") -> float:
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 3)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 3)
    if len(pts_a) == 0 or len(pts_b) == 0:
        raise DegenerateInputError("Chamfer distance needs at least one valid point per set")
    if method == "brute":
        min_ab = _min_sq_dists_brute(pts_a, pts_b)
        min_ba = _min_sq_dists_brute(pts_b, pts_a)
    elif method == "grid":
        min_ab = _min_sq_dists_grid(pts_a, pts_b)
        min_ba = _min_sq_dists_grid(pts_b, pts_a)
    else:
        raise ContractError(f"unknown Chamfer method {method!r}")
    return float(np.mean(min_ab) + np.mean(min_ba))


# ---------------------------------------------------------------------------
# proximity ranks, visibility, coverage


def proximity_ranks(
    pointmaps: Sequence[Pointmap],
    anchor: int,
    subsample: int | None = DEFAULT_CHAMFER_SUBSAMPLE,
    seed: int = DEFAULT_CHAMFER_SEED,
) -> dict[int, int]:
    """Rank all other views by ascending Chamfer distance to the anchor.

    Returns a map from view index to 0-based rank; ties break toward the
    lower view index.
    """
    n_views = len(pointmaps)
    if n_views < 2:
        raise DegenerateInputError("proximity ranks need at least two views")
    if not (0 <= anchor < n_views):
        raise ContractError(f"anchor {anchor} out of range for {n_views} views")
    distances = []
    for u in range(n_views):
        if u == anchor:
            continue
        cd = chamfer_distance(pointmaps[anchor], pointmaps[u], subsample=subsample, seed=seed)
        distances.append((cd, u))
    distances.sort()
    return {u: rank for rank, (_, u) in enumerate(distances)}


def points_in_aabb(points: np.ndarray, obj: ObjectAnnotation) -> int:
    """Count points inside the object's AABB, bounds inclusive."""
    if len(points) == 0:
        return 0
    inside = np.logical_and(points >= obj.aabb_min, points <= obj.aabb_max).all(axis=1)
    return int(inside.sum())


def visible_area(pointmap: Pointmap, obj: ObjectAnnotation) -> int:
    """Number of valid pixels whose world point falls inside the object box."""
    return points_in_aabb(pointmap.valid_points(), obj)


def visibility_pairs(
    pointmaps: Sequence[Pointmap],
    objects: Sequence[ObjectAnnotation],
    min_points: int = DEFAULT_MIN_POINTS,
) -> set[tuple[int, int]]:
    """All (view index, object index) pairs where the view observes the object."""
    if min_points < 1:
        raise ContractError("min_points must be at least 1")
    pairs = set()
    for v, pm in enumerate(pointmaps):
        pts = pm.valid_points()
        for o, obj in enumerate(objects):
            if points_in_aabb(pts, obj) >= min_points:
                pairs.add((v, o))
    return pairs


def _voxel_set(pointmap: Pointmap, voxel_size: float) -> set[tuple[int, int, int]]:
    pts = pointmap.valid_points()
    if len(pts) == 0:
        return set()
    coords = np.floor(pts / voxel_size).astype(np.int64)
    return set(map(tuple, coords))


def max_coverage_sample(
    pointmaps: Sequence[Pointmap], budget: int, voxel_size: float
) -> list[int]:
    """Greedy view selection maximizing newly covered voxels.

    Ties break toward the lower view index; once no view adds coverage,
    the remaining budget is filled by ascending index.
    """
    n_views = len(pointmaps)
    if not (1 <= budget <= n_views):
        raise ContractError(f"budget {budget} outside [1, {n_views}]")
    if voxel_size <= 0:
        raise ContractError("voxel_size must be positive")
    voxels = [_voxel_set(pm, voxel_size) for pm in pointmaps]
    covered: set[tuple[int, int, int]] = set()
    chosen: list[int] = []
    remaining = list(range(n_views))
    while len(chosen) < budget:
        best_gain = -1
        best_view = None
        for v in remaining:
            gain = len(voxels[v] - covered)
            if gain > best_gain:
                best_gain = gain
                best_view = v
        if best_gain <= 0:
            break
        chosen.append(best_view)
        covered |= voxels[best_view]
        remaining.remove(best_view)
    for v in remaining:
        if len(chosen) >= budget:
            break
        chosen.append(v)
    return chosen


def coverage_of(pointmaps: Sequence[Pointmap], views: Iterable[int], voxel_size: float) -> int:
    """Voxel count covered by a specific view subset (exhaustive baseline)."""
    covered: set[tuple[int, int, int]] = set()
    for v in views:
        covered |= _voxel_set(pointmaps[v], voxel_size)
    return len(covered)
