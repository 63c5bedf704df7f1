"""Stand-in for a first-stage detector: jittered proposals and a hand-made BEV map."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..embedding import BevGrid
from ..geometry import wrap_angle
from .scene import DEFAULT_MIX, DEFAULT_SIZES, Scene, SceneSpec

BEV_CHANNELS = ("density", "mean_height", "max_height")


@dataclass
class ProposalNoise:
    sigma_center: float = 0.3  # meters, per axis
    sigma_size: float = 0.05  # log-scale
    sigma_yaw: float = 0.05  # radians
    fp_rate: float = 0.25  # expected false positives per ground truth

    def __post_init__(self):
        if min(self.sigma_center, self.sigma_size, self.sigma_yaw, self.fp_rate) < 0:
            raise ValueError("proposal noise parameters must be non-negative")


@dataclass
class BevConfig:
    cell_size: float = 0.4
    x_range: tuple = (0.0, 74.0)
    y_range: tuple = (-38.0, 38.0)

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")


@dataclass
class RpnOutput:
    boxes: np.ndarray  # (M, 7)
    scores: np.ndarray  # (M,)
    categories: list
    gt_index: np.ndarray  # (M,), -1 for false positives
    grid: BevGrid


def rasterize_bev(points: np.ndarray, cfg: BevConfig) -> BevGrid:
    """Per-cell point count, mean height and max height (empty cells are zero)."""
    w = int(round((cfg.x_range[1] - cfg.x_range[0]) / cfg.cell_size))
    h = int(round((cfg.y_range[1] - cfg.y_range[0]) / cfg.cell_size))
    ix = np.floor((points[:, 0] - cfg.x_range[0]) / cfg.cell_size).astype(np.int64)
    iy = np.floor((points[:, 1] - cfg.y_range[0]) / cfg.cell_size).astype(np.int64)
    ix = np.clip(ix, 0, w - 1)
    iy = np.clip(iy, 0, h - 1)
    flat = iy * w + ix
    count = np.bincount(flat, minlength=h * w).astype(np.float64)
    zsum = np.bincount(flat, weights=points[:, 2], minlength=h * w)
    zmax = np.full(h * w, -np.inf)
    np.maximum.at(zmax, flat, points[:, 2])
    mean_z = np.divide(zsum, count, out=np.zeros_like(zsum), where=count > 0)
    zmax = np.where(count > 0, zmax, 0.0)
    values = np.stack([count, mean_z, zmax], axis=-1).reshape(h, w, 3)
    return BevGrid((cfg.x_range[0], cfg.y_range[0]), cfg.cell_size, values)


def bev_feature_transform(grid: BevGrid) -> BevGrid:
    """Compress the count channel with log1p so all channels are O(1)."""
    vals = grid.values.astype(np.float64).copy()
    vals[..., 0] = np.log1p(vals[..., 0])
    return BevGrid(grid.origin_xy, grid.cell_size, vals)


def proposal_score(center_err, log_size_err, yaw_err):
    """First-stage confidence, decreasing in the perturbation magnitude."""
    m = np.linalg.norm(center_err, axis=-1) + np.abs(log_size_err).sum(axis=-1) + np.abs(yaw_err)
    return np.exp(-m)


def simulate_rpn(scene: Scene, noise: ProposalNoise, bev_cfg: BevConfig | None = None, seed=0,
                 spec: SceneSpec | None = None) -> RpnOutput:
    bev_cfg = bev_cfg or BevConfig()
    rng = np.random.default_rng(seed)
    gt = scene.gt_boxes
    k = len(gt)
    dc = rng.normal(0.0, noise.sigma_center, (k, 3))
    ds = rng.normal(0.0, noise.sigma_size, (k, 3))
    dyaw = rng.normal(0.0, noise.sigma_yaw, k)
    boxes = gt.copy()
    boxes[:, 0:3] += dc
    boxes[:, 3:6] *= np.exp(ds)
    yaw = gt[:, 6] + dyaw
    # re-wrapping an in-range angle can move it by an ulp; zero noise must reproduce the ground truth
    boxes[:, 6] = np.where((yaw >= -np.pi) & (yaw < np.pi), yaw, wrap_angle(yaw))
    scores = proposal_score(dc, ds, dyaw)
    cats = list(scene.categories)
    gt_index = np.arange(k)

    n_fp = rng.poisson(noise.fp_rate * k) if k else 0
    if n_fp:
        mix = spec.category_mix if spec else DEFAULT_MIX
        sizes = spec.size_ranges if spec else DEFAULT_SIZES
        xr = spec.x_range if spec else (4.0, 70.0)
        yr = spec.y_range if spec else (-35.0, 35.0)
        names = list(mix)
        p = np.array([mix[c] for c in names], dtype=np.float64)
        fp_boxes = []
        for _ in range(n_fp):
            cat = names[rng.choice(len(names), p=p / p.sum())]
            (l0, l1), (w0, w1), (h0, h1) = sizes[cat]
            hh = rng.uniform(h0, h1)
            fp_boxes.append([rng.uniform(*xr), rng.uniform(*yr), hh / 2, rng.uniform(l0, l1),
                             rng.uniform(w0, w1), hh, rng.uniform(-np.pi, np.pi)])
            cats.append(cat)
        boxes = np.vstack([boxes, np.array(fp_boxes)])
        scores = np.concatenate([scores, rng.uniform(0.05, 0.5, n_fp)])
        gt_index = np.concatenate([gt_index, np.full(n_fp, -1)])
    grid = rasterize_bev(scene.points, bev_cfg)
    return RpnOutput(boxes=boxes.reshape(-1, 7), scores=scores, categories=cats,
                     gt_index=gt_index.astype(np.int64), grid=grid)


def write_proposals(path, out: RpnOutput):
    lines = [json.dumps({"box": b.tolist(), "score": float(s), "category": c, "gt_index": int(g)},
                        separators=(",", ":"))
             for b, s, c, g in zip(out.boxes, out.scores, out.categories, out.gt_index)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_proposals(path, grid: BevGrid) -> RpnOutput:
    recs = [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]
    return RpnOutput(boxes=np.array([r["box"] for r in recs], dtype=np.float64).reshape(-1, 7),
                     scores=np.array([r["score"] for r in recs], dtype=np.float64),
                     categories=[r["category"] for r in recs],
                     gt_index=np.array([r["gt_index"] for r in recs], dtype=np.int64), grid=grid)
