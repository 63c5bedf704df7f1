"""Synthetic LiDAR-like scenes: cuboid objects seen from one sensor, plus clutter."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import rotation_z

DEFAULT_SIZES = {
    # (length, width, height) ranges in meters
    "vehicle": ((3.6, 5.0), (1.6, 2.0), (1.4, 1.8)),
    "pedestrian": ((0.5, 0.9), (0.5, 0.9), (1.5, 1.9)),
    "cyclist": ((1.5, 1.9), (0.5, 0.8), (1.5, 1.8)),
}
DEFAULT_MIX = {"vehicle": 0.7, "pedestrian": 0.15, "cyclist": 0.15}
COORD_DECIMALS = 4


@dataclass
class SceneSpec:
    n_objects: int = 4
    category_mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    size_ranges: dict = field(default_factory=lambda: dict(DEFAULT_SIZES))
    density: float = 20.0  # points per m^2 of visible surface at reference range
    range_falloff: bool = True  # density scales with (reference_range / distance)^2 beyond it
    reference_range: float = 20.0
    noise_sigma: float = 0.02  # meters, along the surface normal, truncated at 3 sigma
    clutter_ratio: float = 0.3  # clutter points per object point
    x_range: tuple = (4.0, 70.0)
    y_range: tuple = (-35.0, 35.0)
    sensor: tuple = (0.0, 0.0, 1.9)
    seed: int = 0

    def __post_init__(self):
        if self.density <= 0:
            raise ValueError("density must be positive")
        if self.noise_sigma < 0 or self.clutter_ratio < 0 or self.n_objects < 0:
            raise ValueError("noise_sigma, clutter_ratio and n_objects must be non-negative")
        for cat, ranges in self.size_ranges.items():
            if any(lo <= 0 or hi < lo for lo, hi in ranges):
                raise ValueError(f"invalid size range for {cat}: {ranges}")
        unknown = set(self.category_mix) - set(self.size_ranges)
        if unknown:
            raise ValueError(f"categories without size ranges: {sorted(unknown)}")


@dataclass
class Scene:
    points: np.ndarray  # (P, 4): x, y, z, reflectance; object points first, clutter last
    owner: np.ndarray  # (P,) object index, -1 for clutter
    gt_boxes: np.ndarray  # (K, 7)
    categories: list

    def object_points(self, k: int) -> np.ndarray:
        return self.points[self.owner == k]


def _faces(box: np.ndarray):
    """Yield ``(center, normal, axis_u, axis_v, half_u, half_v)`` for the six faces."""
    cx, cy, cz, l, w, h, yaw = box
    rot = rotation_z(yaw)
    ex, ey, ez = rot[:, 0], rot[:, 1], rot[:, 2]
    c = np.array([cx, cy, cz])
    half = (l / 2, w / 2, h / 2)
    axes = (ex, ey, ez)
    for i in range(3):
        j, k = [a for a in range(3) if a != i]
        for sign in (1.0, -1.0):
            n = sign * axes[i]
            yield c + n * half[i], n, axes[j], axes[k], half[j], half[k]


def visible_area(box: np.ndarray, sensor) -> float:
    s = np.asarray(sensor, dtype=np.float64)
    return float(sum(4 * hu * hv for fc, n, _, _, hu, hv in _faces(box) if np.dot(n, fc - s) < 0))


def surface_points(box: np.ndarray, density: float, sensor, noise_sigma: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Poisson-many points per visible face, displaced along the face normal."""
    s = np.asarray(sensor, dtype=np.float64)
    out = []
    for fc, n, au, av, hu, hv in _faces(box):
        if np.dot(n, fc - s) >= 0:
            continue
        count = rng.poisson(density * 4 * hu * hv)
        if count == 0:
            continue
        u = rng.uniform(-hu, hu, count)
        v = rng.uniform(-hv, hv, count)
        d = np.clip(rng.normal(0.0, noise_sigma, count), -3 * noise_sigma, 3 * noise_sigma) if noise_sigma else 0.0
        out.append(fc + u[:, None] * au + v[:, None] * av + np.asarray(d)[..., None] * n)
    return np.concatenate(out) if out else np.zeros((0, 3))


def _place_objects(spec: SceneSpec, rng: np.random.Generator):
    cats = list(spec.category_mix)
    probs = np.array([spec.category_mix[c] for c in cats], dtype=np.float64)
    probs /= probs.sum()
    boxes, labels = [], []
    for _ in range(spec.n_objects):
        for _attempt in range(50):
            cat = cats[rng.choice(len(cats), p=probs)]
            (l0, l1), (w0, w1), (h0, h1) = spec.size_ranges[cat]
            l, w, h = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
            x = rng.uniform(*spec.x_range)
            y = rng.uniform(*spec.y_range)
            yaw = rng.uniform(-np.pi, np.pi)
            r = 0.5 * np.hypot(l, w)
            if all(np.hypot(x - b[0], y - b[1]) > r + 0.5 * np.hypot(b[3], b[4]) + 1.0 for b in boxes):
                boxes.append(np.array([x, y, h / 2, l, w, h, yaw]))
                labels.append(cat)
                break
    return (np.array(boxes) if boxes else np.zeros((0, 7))), labels


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    boxes, labels = _place_objects(spec, rng)
    # keep stored boxes at the precision the point coordinates are written with
    boxes = np.round(boxes, 6)
    sensor = np.asarray(spec.sensor, dtype=np.float64)
    pts, owner = [], []
    for k, box in enumerate(boxes):
        density = spec.density
        if spec.range_falloff:
            dist = np.hypot(box[0] - sensor[0], box[1] - sensor[1])
            density *= min(1.0, (spec.reference_range / max(dist, 1e-6)) ** 2)
        xyz = surface_points(box, density, sensor, spec.noise_sigma, rng)
        base = rng.uniform(0.3, 0.9)
        refl = np.clip(base + rng.normal(0, 0.05, len(xyz)), 0.0, 1.0)
        pts.append(np.column_stack([xyz, refl]))
        owner.append(np.full(len(xyz), k))
    n_obj = sum(len(p) for p in pts)
    n_clutter = int(round(spec.clutter_ratio * n_obj))
    clutter = np.column_stack([
        rng.uniform(*spec.x_range, n_clutter),
        rng.uniform(*spec.y_range, n_clutter),
        rng.uniform(0.0, 2.5, n_clutter),
        rng.uniform(0.0, 0.3, n_clutter),
    ])
    pts.append(clutter)
    owner.append(np.full(n_clutter, -1))
    points = np.round(np.concatenate(pts), COORD_DECIMALS)
    return Scene(points=points, owner=np.concatenate(owner).astype(np.int64), gt_boxes=boxes, categories=labels)


# -- scene files ---------------------------------------------------------

def scene_to_jsonl(scene: Scene) -> str:
    """One record per object (plus one ``clutter`` record with ``gt_box: null``)."""
    lines = []
    for k, (box, cat) in enumerate(zip(scene.gt_boxes, scene.categories)):
        rec = {"points": scene.object_points(k).tolist(), "gt_box": box.tolist(), "category": cat}
        lines.append(json.dumps(rec, separators=(",", ":")))
    clutter = scene.points[scene.owner < 0]
    lines.append(json.dumps({"points": clutter.tolist(), "gt_box": None, "category": "clutter"},
                            separators=(",", ":")))
    return "\n".join(lines) + "\n"


def write_scene(path, scene: Scene):
    Path(path).write_text(scene_to_jsonl(scene))


def read_scene(path) -> Scene:
    pts, owner, boxes, cats = [], [], [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        p = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 4)
        if rec["gt_box"] is None:
            owner.append(np.full(len(p), -1))
        else:
            owner.append(np.full(len(p), len(boxes)))
            boxes.append(rec["gt_box"])
            cats.append(rec["category"])
        pts.append(p)
    return Scene(points=np.concatenate(pts) if pts else np.zeros((0, 4)),
                 owner=np.concatenate(owner).astype(np.int64) if owner else np.zeros(0, np.int64),
                 gt_boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 7), categories=cats)
