"""Procedural synthetic scenes: colored boxes on a floor, ring cameras.

Each scene is a set of posed RGB + depth views of axis-aligned colored
boxes standing on a square floor, plus object annotations (world AABB,
referring text, category) and template-generated view/scene captions.
Generation is a pure function of (spec, seed); every object is guaranteed
to be visible from at least one view, by regeneration if needed.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError, GenerationError
from .geometry import (
    DEFAULT_MIN_POINTS,
    CameraIntrinsics,
    CameraPose,
    ObjectAnnotation,
    Pointmap,
    back_project,
    chamfer_distance,
    visible_area,
)

logger = logging.getLogger(__name__)

RASTER_MAGIC = b"UPMV"
FLOOR_COLOR = (0.52, 0.48, 0.42)

COLOR_TABLE = {
    "red": (0.82, 0.18, 0.14),
    "green": (0.18, 0.65, 0.25),
    "blue": (0.16, 0.32, 0.78),
    "yellow": (0.88, 0.80, 0.18),
    "purple": (0.55, 0.22, 0.68),
    "orange": (0.90, 0.52, 0.12),
    "teal": (0.12, 0.62, 0.60),
    "white": (0.92, 0.92, 0.90),
}


@dataclass(frozen=True)
class CatalogEntry:
    category: str
    color_name: str
    size_min: tuple[float, float, float]
    size_max: tuple[float, float, float]

    @property
    def rgb(self) -> tuple[float, float, float]:
        return COLOR_TABLE[self.color_name]


def _entries(category, colors, size_min, size_max):
    return [CatalogEntry(category, c, size_min, size_max) for c in colors]


SCENE_TYPE_CATALOGS: dict[str, tuple[CatalogEntry, ...]] = {
    "bedroom": tuple(
        _entries("bed", ["red", "blue", "white"], (1.4, 1.0, 0.45), (2.0, 1.6, 0.6))
        + _entries("wardrobe", ["purple", "teal"], (0.8, 0.5, 0.9), (1.2, 0.7, 1.2))
        + _entries("nightstand", ["yellow", "green"], (0.4, 0.4, 0.45), (0.6, 0.6, 0.6))
        + _entries("lamp", ["orange"], (0.35, 0.35, 0.4), (0.5, 0.5, 0.55))
    ),
    "office": tuple(
        _entries("desk", ["white", "teal", "blue"], (1.1, 0.6, 0.65), (1.6, 0.9, 0.8))
        + _entries("chair", ["red", "green"], (0.45, 0.45, 0.45), (0.6, 0.6, 0.55))
        + _entries("cabinet", ["purple", "yellow"], (0.5, 0.4, 0.9), (0.8, 0.6, 1.2))
        + _entries("printer", ["orange"], (0.45, 0.45, 0.4), (0.6, 0.6, 0.5))
    ),
    "kitchen": tuple(
        _entries("table", ["yellow", "white", "green"], (0.9, 0.9, 0.7), (1.4, 1.4, 0.8))
        + _entries("stool", ["red", "blue"], (0.35, 0.35, 0.45), (0.5, 0.5, 0.6))
        + _entries("counter", ["teal", "purple"], (1.2, 0.6, 0.85), (1.8, 0.8, 0.95))
        + _entries("cart", ["orange"], (0.5, 0.4, 0.7), (0.7, 0.6, 0.9))
    ),
    "library": tuple(
        _entries("bookshelf", ["green", "purple", "red"], (0.9, 0.35, 1.0), (1.4, 0.5, 1.2))
        + _entries("armchair", ["blue", "orange"], (0.7, 0.7, 0.6), (0.9, 0.9, 0.75))
        + _entries("bench", ["white", "teal"], (1.2, 0.45, 0.4), (1.6, 0.6, 0.5))
        + _entries("globe", ["yellow"], (0.35, 0.35, 0.5), (0.5, 0.5, 0.65))
    ),
}

SCENE_TYPES = tuple(SCENE_TYPE_CATALOGS)


@dataclass(frozen=True)
class SceneSpec:
    """Everything that parameterizes procedural generation of one scene."""

    scene_type: str = "bedroom"
    seed: int = 0
    room_extent: float = 6.0
    object_count: tuple[int, int] = (2, 5)
    catalog: tuple[CatalogEntry, ...] = ()
    view_count: int = 16
    image_size: int = 32
    camera_radius: tuple[float, float] = (1.7, 2.5)
    camera_height: tuple[float, float] = (1.5, 2.4)
    min_points: int = DEFAULT_MIN_POINTS

    def __post_init__(self):
        if self.room_extent <= 0:
            raise ConfigError("room extent must be positive")
        if self.view_count < 2:
            raise ConfigError("a scene needs at least two views")
        if self.object_count[0] < 0 or self.object_count[0] > self.object_count[1]:
            raise ConfigError("invalid object count range")
        if not self.catalog:
            if self.scene_type not in SCENE_TYPE_CATALOGS:
                raise ConfigError(f"unknown scene type {self.scene_type!r}")
            object.__setattr__(self, "catalog", SCENE_TYPE_CATALOGS[self.scene_type])
        if self.object_count[1] > len(self.catalog):
            raise ConfigError("object count range exceeds catalog size")


@dataclass
class View:
    """One posed RGB + depth observation."""

    image: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    pose: CameraPose

    def __post_init__(self):
        self.image = np.ascontiguousarray(np.asarray(self.image, dtype=np.float64))
        self.depth = np.ascontiguousarray(np.asarray(self.depth, dtype=np.float64))
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ContractError(f"image must be HxWx3, got {self.image.shape}")
        if self.depth.shape != self.image.shape[:2]:
            raise ContractError("depth is not pixel-aligned with the image")
        if np.any(self.depth < 0):
            raise ContractError("depth must be nonnegative")

    def pointmap(self) -> Pointmap:
        return back_project(self.depth, self.intrinsics, self.pose)


@dataclass
class Scene:
    scene_id: str
    views: list[View]
    objects: list[ObjectAnnotation]
    scene_type: str
    scene_caption: str
    view_captions: list[str]

    def __post_init__(self):
        if len(self.views) < 2:
            raise ContractError("a scene needs at least two views")
        if len(self.view_captions) != len(self.views):
            raise ContractError("one caption per view required")

    def pointmaps(self) -> list[Pointmap]:
        return [v.pointmap() for v in self.views]


# ---------------------------------------------------------------------------
# generation


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def _noun(entry_color: str, category: str) -> str:
    return f"{entry_color} {category}"


def _look_at_pose(eye: np.ndarray, target: np.ndarray) -> CameraPose:
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        raise GenerationError("camera eye coincides with its target")
    z_axis = forward / norm
    up = np.array([0.0, 0.0, 1.0])
    x_axis = np.cross(z_axis, up)
    x_norm = np.linalg.norm(x_axis)
    if x_norm < 1e-9:
        raise GenerationError("camera looks straight along the world up axis")
    x_axis /= x_norm
    y_axis = np.cross(z_axis, x_axis)
    rotation = np.stack([x_axis, y_axis, z_axis], axis=1)
    return CameraPose(rotation=rotation, translation=eye)


def _place_objects(spec: SceneSpec, rng, seed: int):
    count = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    order = rng.permutation(len(spec.catalog))[:count]
    placed: list[tuple[CatalogEntry, np.ndarray, np.ndarray]] = []
    half = spec.room_extent / 2.0
    margin = 0.1
    for idx in order:
        entry = spec.catalog[idx]
        size = rng.uniform(entry.size_min, entry.size_max)
        for _ in range(1000):
            cx = rng.uniform(-half + size[0] / 2, half - size[0] / 2)
            cy = rng.uniform(-half + size[1] / 2, half - size[1] / 2)
            lo = np.array([cx - size[0] / 2, cy - size[1] / 2, 0.0])
            hi = np.array([cx + size[0] / 2, cy + size[1] / 2, size[2]])
            if _clear_of(placed, lo, hi, margin):
                placed.append((entry, lo, hi))
                break
        else:
            raise GenerationError(
                f"could not place a {entry.category} after 1000 attempts (seed {seed})"
            )
    return placed


def _clear_of(placed, lo, hi, margin) -> bool:
    for _, plo, phi in placed:
        overlap_x = lo[0] - margin < phi[0] and plo[0] < hi[0] + margin
        overlap_y = lo[1] - margin < phi[1] and plo[1] < hi[1] + margin
        if overlap_x and overlap_y:
            return False
    return True


def _render_view(
    eye: np.ndarray,
    pose: CameraPose,
    intr: CameraIntrinsics,
    image_size: int,
    boxes: list[tuple[np.ndarray, np.ndarray]],
    colors: list[tuple[float, float, float]],
    room_half: float,
):
    """Nearest-hit ray cast of the boxes and the floor, flat shading."""
    n = image_size
    u = np.arange(n, dtype=np.float64)[None, :].repeat(n, axis=0)
    v = np.arange(n, dtype=np.float64)[:, None].repeat(n, axis=1)
    dirs_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones((n, n))], axis=-1)
    dirs = dirs_cam.reshape(-1, 3) @ pose.rotation.T
    safe_dirs = np.where(dirs == 0.0, 1e-300, dirs)

    depth = np.full(n * n, np.inf)
    color = np.zeros((n * n, 3))

    # Floor: z = 0 inside the room square.
    s_floor = -eye[2] / safe_dirs[:, 2]
    fx = eye[0] + s_floor * dirs[:, 0]
    fy = eye[1] + s_floor * dirs[:, 1]
    floor_hit = (s_floor > 1e-9) & (np.abs(fx) <= room_half) & (np.abs(fy) <= room_half)
    update = floor_hit & (s_floor < depth)
    depth[update] = s_floor[update]
    color[update] = FLOOR_COLOR

    for (lo, hi), rgb in zip(boxes, colors):
        t1 = (lo - eye) / safe_dirs
        t2 = (hi - eye) / safe_dirs
        t_near = np.minimum(t1, t2).max(axis=1)
        t_far = np.maximum(t1, t2).min(axis=1)
        hit = (t_far >= t_near) & (t_near > 1e-9)
        update = hit & (t_near < depth)
        depth[update] = t_near[update]
        color[update] = rgb

    invalid = ~np.isfinite(depth)
    depth[invalid] = 0.0
    return color.reshape(n, n, 3), depth.reshape(n, n)


def _referring_texts(placed) -> list[str]:
    centers = [((lo + hi) / 2.0) for _, lo, hi in placed]
    texts = []
    for i, (entry, _, _) in enumerate(placed):
        if len(placed) == 1:
            texts.append(f"the {_noun(entry.color_name, entry.category)}")
            continue
        others = [(np.linalg.norm(centers[i] - centers[j]), j) for j in range(len(placed)) if j != i]
        _, nearest = min(others)
        anchor = placed[nearest][0]
        texts.append(
            f"the {_noun(entry.color_name, entry.category)} near "
            f"the {_noun(anchor.color_name, anchor.category)}"
        )
    return texts


def _view_caption(scene_type: str, visible: list[CatalogEntry]) -> str:
    if not visible:
        return f"a view of an empty part of {_article(scene_type)} {scene_type}"
    nouns = [f"{_article(e.color_name)} {_noun(e.color_name, e.category)}" for e in visible]
    return f"a view of {_article(scene_type)} {scene_type} showing " + _join(nouns)


def _scene_caption(scene_type: str, entries: list[CatalogEntry]) -> str:
    if not entries:
        return f"an empty {scene_type}"
    nouns = [f"{_article(e.color_name)} {_noun(e.color_name, e.category)}" for e in entries]
    return f"{_article(scene_type)} {scene_type} containing " + _join(nouns)


def _join(parts: list[str]) -> str:
    if len(parts) == 1:
        return parts[0]
    return ", ".join(parts[:-1]) + " and " + parts[-1]


def generate_scene(spec: SceneSpec, seed: int, max_regenerations: int = 25) -> Scene:
    """Generate one scene; regenerate until every object is observable."""
    for attempt in range(max_regenerations):
        scene = _generate_once(spec, seed, attempt)
        if scene is not None:
            return scene
    raise GenerationError(
        f"no layout with all objects visible after {max_regenerations} attempts (seed {seed})"
    )


def _generate_once(spec: SceneSpec, seed: int, attempt: int) -> Scene | None:
    rng = np.random.default_rng((spec.seed, seed, attempt))
    placed = _place_objects(spec, rng, seed)
    boxes = [(lo, hi) for _, lo, hi in placed]
    colors = [entry.rgb for entry, _, _ in placed]
    half = spec.room_extent / 2.0

    n = spec.image_size
    intr = CameraIntrinsics(fx=0.8 * n, fy=0.8 * n, cx=(n - 1) / 2.0, cy=(n - 1) / 2.0)
    views: list[View] = []
    for i in range(spec.view_count):
        angle = 2.0 * np.pi * i / spec.view_count + rng.uniform(-0.4, 0.4) * 2.0 * np.pi / spec.view_count
        radius = rng.uniform(*spec.camera_radius)
        height = rng.uniform(*spec.camera_height)
        eye = np.array([radius * np.cos(angle), radius * np.sin(angle), height])
        target = np.array([rng.uniform(-0.3, 0.3) * half, rng.uniform(-0.3, 0.3) * half, 0.0])
        pose = _look_at_pose(eye, target)
        image, depth = _render_view(eye, pose, intr, n, boxes, colors, half)
        views.append(View(image=image, depth=depth, intrinsics=intr, pose=pose))

    texts = _referring_texts(placed)
    objects = [
        ObjectAnnotation(object_id=i, aabb_min=lo, aabb_max=hi, referring_text=texts[i],
                         category=entry.category)
        for i, (entry, lo, hi) in enumerate(placed)
    ]

    pointmaps = [v.pointmap() for v in views]
    areas = np.array([[visible_area(pm, ob) for ob in objects] for pm in pointmaps])
    if objects and not np.all(areas.max(axis=0) >= spec.min_points):
        return None

    view_captions = []
    for vi in range(spec.view_count):
        visible = [
            placed[oi][0]
            for oi in np.argsort(-areas[vi])
            if objects and areas[vi][oi] >= spec.min_points
        ] if objects else []
        view_captions.append(_view_caption(spec.scene_type, visible))

    return Scene(
        scene_id=f"scene_{seed:05d}",
        views=views,
        objects=objects,
        scene_type=spec.scene_type,
        scene_caption=_scene_caption(spec.scene_type, [e for e, _, _ in placed]),
        view_captions=view_captions,
    )


# ---------------------------------------------------------------------------
# consistency check


def _aabb_surface_distance(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    below = np.maximum(lo - points, 0.0)
    above = np.maximum(points - hi, 0.0)
    outside = np.sqrt((below * below + above * above).sum(axis=1))
    inside_margin = np.minimum(points - lo, hi - points).min(axis=1)
    return np.where(outside > 0.0, outside, inside_margin)


def render_depth_consistency_check(scene: Scene, room_half: float | None = None) -> float:
    """Max distance from any back-projected point to a rendered surface.

    Every valid pixel must land on the floor plane or on some object's
    AABB surface; returns the worst offender in meters.
    """
    worst = 0.0
    for view in scene.views:
        pts = view.pointmap().valid_points()
        if len(pts) == 0:
            continue
        best = np.abs(pts[:, 2])  # floor plane z=0
        for obj in scene.objects:
            best = np.minimum(best, _aabb_surface_distance(pts, obj.aabb_min, obj.aabb_max))
        worst = max(worst, float(best.max()))
    return worst


def cross_view_surface_chamfer(scene: Scene, obj: ObjectAnnotation, view_a: int, view_b: int) -> float:
    """Chamfer distance between two views' points inside one object box."""
    maps = [scene.views[view_a].pointmap(), scene.views[view_b].pointmap()]
    clipped = []
    for pm in maps:
        pts = pm.valid_points()
        inside = np.logical_and(pts >= obj.aabb_min, pts <= obj.aabb_max).all(axis=1)
        kept = pts[inside]
        clipped.append(Pointmap(points=kept.reshape(-1, 1, 3), validity=np.ones((len(kept), 1), bool)))
    return chamfer_distance(clipped[0], clipped[1])


# ---------------------------------------------------------------------------
# on-disk format


def _write_raster(path: Path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(struct.pack("<B", array.ndim))
        for dim in array.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(array.astype("<f8").tobytes())


def _read_raster(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 5 or blob[:4] != RASTER_MAGIC:
        raise FormatError(f"bad raster magic in {path}")
    rank = blob[4]
    header_end = 5 + 4 * rank
    if len(blob) < header_end:
        raise FormatError(f"truncated raster header in {path}")
    dims = struct.unpack(f"<{rank}I", blob[5:header_end])
    count = int(np.prod(dims)) if dims else 1
    payload = blob[header_end:]
    if len(payload) != count * 8:
        raise FormatError(f"truncated raster payload in {path}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def _floats(values) -> str:
    return " ".join(repr(float(x)) for x in np.asarray(values).ravel())


def save_scene(scene: Scene, directory) -> None:
    """Write one scene directory: meta.txt plus per-view binary rasters."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        f"scene_id={scene.scene_id}",
        f"scene_type={scene.scene_type}",
        f"scene_caption={scene.scene_caption}",
        f"num_views={len(scene.views)}",
        f"num_objects={len(scene.objects)}",
    ]
    for i, view in enumerate(scene.views):
        intr = view.intrinsics
        cam = _floats([intr.fx, intr.fy, intr.cx, intr.cy])
        pose = _floats(view.pose.rotation) + " " + _floats(view.pose.translation)
        lines.append(f"view={i}\t{cam}\t{pose}")
        lines.append(f"view_caption={i}\t{scene.view_captions[i]}")
    for obj in scene.objects:
        box = _floats(obj.aabb_min) + " " + _floats(obj.aabb_max)
        lines.append(f"object={obj.object_id}\t{obj.category}\t{box}\t{obj.referring_text}")
    (directory / "meta.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for i, view in enumerate(scene.views):
        _write_raster(directory / f"view_{i:03d}_image.upmv", view.image)
        _write_raster(directory / f"view_{i:03d}_depth.upmv", view.depth)


def load_scene(directory) -> Scene:
    """Read a scene directory written by :func:`save_scene`."""
    directory = Path(directory)
    meta_path = directory / "meta.txt"
    if not meta_path.exists():
        raise FormatError(f"missing metadata file {meta_path}")

    scalars: dict[str, str] = {}
    cameras: dict[int, tuple[CameraIntrinsics, CameraPose]] = {}
    captions: dict[int, str] = {}
    objects: list[ObjectAnnotation] = []
    for raw in meta_path.read_text(encoding="utf-8").splitlines():
        if not raw.strip():
            continue
        key, _, value = raw.partition("=")
        if key == "view":
            idx_str, cam_str, pose_str = value.split("\t")
            cam = [float(x) for x in cam_str.split()]
            pose_vals = [float(x) for x in pose_str.split()]
            intr = CameraIntrinsics(*cam)
            pose = CameraPose(
                rotation=np.array(pose_vals[:9]).reshape(3, 3),
                translation=np.array(pose_vals[9:12]),
            )
            cameras[int(idx_str)] = (intr, pose)
        elif key == "view_caption":
            idx_str, text = value.split("\t", 1)
            captions[int(idx_str)] = text
        elif key == "object":
            obj_id, category, box_str, text = value.split("\t")
            box = [float(x) for x in box_str.split()]
            objects.append(
                ObjectAnnotation(
                    object_id=int(obj_id),
                    aabb_min=np.array(box[:3]),
                    aabb_max=np.array(box[3:6]),
                    referring_text=text,
                    category=category,
                )
            )
        elif key in ("scene_id", "scene_type", "scene_caption", "num_views", "num_objects"):
            scalars[key] = value
        else:
            logger.warning("ignoring unknown metadata key %r in %s", key, meta_path)

    try:
        n_views = int(scalars["num_views"])
    except KeyError as exc:
        raise FormatError(f"metadata missing required key {exc} in {meta_path}") from exc

    views = []
    for i in range(n_views):
        if i not in cameras:
            raise FormatError(f"metadata missing camera record for view {i} in {meta_path}")
        image = _read_raster(directory / f"view_{i:03d}_image.upmv")
        depth = _read_raster(directory / f"view_{i:03d}_depth.upmv")
        intr, pose = cameras[i]
        views.append(View(image=image, depth=depth, intrinsics=intr, pose=pose))

    return Scene(
        scene_id=scalars.get("scene_id", directory.name),
        views=views,
        objects=objects,
        scene_type=scalars.get("scene_type", ""),
        scene_caption=scalars.get("scene_caption", ""),
        view_captions=[captions[i] for i in range(n_views)],
    )


# ---------------------------------------------------------------------------
# dataset manifest


def split_dataset(scene_ids: list[str], seed: int) -> list[tuple[str, str]]:
    """Assign 80/10/10 train/val/test tags by seeded shuffle.

    Both holdout splits take floor(0.1 * n); the remainder trains.
    """
    n = len(scene_ids)
    n_val = n // 10
    n_test = n // 10
    order = np.random.default_rng(seed).permutation(n)
    tags = {}
    for pos, idx in enumerate(order):
        if pos < n - n_val - n_test:
            tags[idx] = "train"
        elif pos < n - n_test:
            tags[idx] = "val"
        else:
            tags[idx] = "test"
    return [(tags[i], scene_ids[i]) for i in range(n)]


def write_manifest(path, entries: list[tuple[str, str]]) -> None:
    lines = [f"{split}\t{scene_dir}" for split, scene_dir in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> dict[str, list[str]]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing manifest {path}")
    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            split, scene_dir = raw.split("\t")
        except ValueError as exc:
            raise FormatError(f"malformed manifest line {lineno} in {path}") from exc
        if split not in splits:
            raise FormatError(f"unknown split {split!r} on manifest line {lineno} in {path}")
        splits[split].append(scene_dir)
    return splits


def load_split_scenes(manifest_path, split: str) -> list[Scene]:
    manifest_path = Path(manifest_path)
    splits = load_manifest(manifest_path)
    base = manifest_path.parent
    return [load_scene(base / name) for name in splits[split]]
