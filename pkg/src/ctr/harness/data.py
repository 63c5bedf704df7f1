"""Turn scenes plus simulated proposals into fixed-size training/eval arrays."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ..embedding import (RAW_DIM, EmptyRoiError, ball_query, bev_bilinear, draw_indices, keypoint_offsets,
                         keypoint_self_raw, points_in_radius)
from ..geometry import encode_residual_array, iou_matrix, keypoints_array, roi_radius
from .rpn import BevConfig, ProposalNoise, RpnOutput, bev_feature_transform, simulate_rpn
from .scene import Scene, SceneSpec, generate_scene, read_scene

SPLITS = {"train": 1, "eval": 2}


@dataclass
class SamplingConfig:
    strategy: str = "category"  # "category" | "object"
    n_points: int = 64
    alpha: float = 1.2
    radius_table: dict = field(default_factory=dict)
    canonical: bool = False


@dataclass
class ProposalDataset:
    point_raw: np.ndarray  # (M, N, 28 + C) float32
    key_raw: np.ndarray  # (M, 9, 28 + C) float32
    proposals: np.ndarray  # (M, 7)
    rpn_scores: np.ndarray  # (M,)
    categories: list
    iou: np.ndarray  # (M,) best IoU with any ground truth in the scene
    match: np.ndarray  # (M,) global ground-truth index of that best match, -1 if none
    reg_target: np.ndarray  # (M, 7)
    is_true: np.ndarray  # (M,) proposal was generated from a ground truth
    valid: np.ndarray  # (M,) sampling cylinder held at least one point
    scene_id: np.ndarray  # (M,)
    gt_boxes: np.ndarray  # (G, 7)
    gt_scene: np.ndarray  # (G,)
    gt_categories: list
    sampling_seconds: float = 0.0

    def __len__(self):
        return len(self.proposals)

    def inputs(self, idx, variant: str, use_bev: bool = True):
        """Model inputs for the given rows: ct3d sees 28 dims, ct3dpp 28 + C."""
        pr, kr = self.point_raw[idx], self.key_raw[idx]
        if variant == "ct3d":
            return pr[..., :RAW_DIM], None
        if not use_bev:
            pr, kr = pr.copy(), kr.copy()
            pr[..., RAW_DIM:] = 0
            kr[..., RAW_DIM:] = 0
        return pr, kr


def scene_seed(seed: int, split: str, i: int) -> int:
    return int(np.random.SeedSequence([seed, SPLITS[split], i]).generate_state(1)[0])


def rpn_seed(seed: int, split: str, i: int, repeat: int = 0) -> int:
    return int(np.random.SeedSequence([seed, SPLITS[split], i, 1000 + repeat]).generate_state(1)[0])


def sample_indices(scene_points: np.ndarray, boxes: np.ndarray, categories: list,
                   cfg: SamplingConfig, seeds: list) -> list:
    """Per proposal, the ``N`` sampled scene indices (``None`` for an empty cylinder).

    Object-based radii depend on each box, so every proposal is queried alone.
    Category-based radii come from a lookup table rather than box geometry, so
    all proposals of a scene are answered by one batched ball query.
    """
    m = len(boxes)
    cands: list = [None] * m
    if cfg.strategy == "object":
        for j, box in enumerate(boxes):
            cands[j] = points_in_radius(scene_points, box[:2], roi_radius(box, cfg.alpha))
    elif m:
        missing = [c for c in dict.fromkeys(categories) if c not in cfg.radius_table]
        if missing:
            raise KeyError(f"no sampling radius configured for category {missing[0]!r}")
        radii = np.array([float(cfg.radius_table[c]) for c in categories])
        cands = ball_query(scene_points, boxes[:, :2], radii)
    out = []
    for cand, s in zip(cands, seeds):
        try:
            out.append(draw_indices(cand, cfg.n_points, s)[0])
        except EmptyRoiError:
            out.append(None)
    return out


def build_dataset(items: Iterable[tuple[Scene, RpnOutput]], cfg: SamplingConfig, seed: int = 0) -> ProposalDataset:
    pr_all, kr_all, boxes_all, scores_all, cats_all = [], [], [], [], []
    iou_all, match_all, reg_all, true_all, valid_all, sid_all = [], [], [], [], [], []
    gt_all, gt_scene, gt_cats = [], [], []
    sampling_s = 0.0
    for si, (scene, rpn) in enumerate(items):
        g0 = len(gt_all)
        gt_all.extend(scene.gt_boxes)
        gt_scene.extend([si] * len(scene.gt_boxes))
        gt_cats.extend(scene.categories)
        m = len(rpn.boxes)
        if m == 0:
            continue
        grid = bev_feature_transform(rpn.grid)
        seeds = [[seed, si, j] for j in range(m)]
        t0 = time.perf_counter()
        picked = sample_indices(scene.points, rpn.boxes, rpn.categories, cfg, seeds)
        sampling_s += time.perf_counter() - t0
        n, c = cfg.n_points, grid.channels
        pr = np.zeros((m, n, RAW_DIM + c), np.float32)
        valid = np.array([p is not None for p in picked])
        for j, idx in enumerate(picked):
            if idx is None:
                continue
            pts = scene.points[idx]
            off = keypoint_offsets(pts[:, :3], rpn.boxes[j], cfg.canonical)
            pr[j, :, :27] = off
            pr[j, :, 27] = pts[:, 3]
            pr[j, :, 28:] = bev_bilinear(grid, pts[:, :2])
        kr = np.zeros((m, 9, RAW_DIM + c), np.float32)
        kr[:, :, :RAW_DIM] = keypoint_self_raw(rpn.boxes, cfg.canonical)
        kr[:, :, RAW_DIM:] = bev_bilinear(grid, keypoints_array(rpn.boxes)[..., :2])
        if len(scene.gt_boxes):
            ious = iou_matrix(rpn.boxes, scene.gt_boxes)
            best = ious.argmax(axis=1)
            iou = ious[np.arange(m), best]
            match = np.where(iou > 0, best + g0, -1)
            reg = np.where((iou > 0)[:, None], encode_residual_array(rpn.boxes, scene.gt_boxes[best]), 0.0)
        else:
            iou, match, reg = np.zeros(m), np.full(m, -1), np.zeros((m, 7))
        pr_all.append(pr)
        kr_all.append(kr)
        boxes_all.append(rpn.boxes)
        scores_all.append(rpn.scores)
        cats_all.extend(rpn.categories)
        iou_all.append(iou)
        match_all.append(match)
        reg_all.append(reg)
        true_all.append(rpn.gt_index >= 0)
        valid_all.append(valid)
        sid_all.append(np.full(m, si))

    def cat(xs, shape, dtype=np.float64):
        return np.concatenate(xs) if xs else np.zeros(shape, dtype)

    c = 3
    return ProposalDataset(
        point_raw=cat(pr_all, (0, cfg.n_points, RAW_DIM + c), np.float32),
        key_raw=cat(kr_all, (0, 9, RAW_DIM + c), np.float32),
        proposals=cat(boxes_all, (0, 7)),
        rpn_scores=cat(scores_all, (0,)),
        categories=cats_all,
        iou=cat(iou_all, (0,)),
        match=cat(match_all, (0,), np.int64).astype(np.int64),
        reg_target=cat(reg_all, (0, 7)),
        is_true=cat(true_all, (0,), bool).astype(bool),
        valid=cat(valid_all, (0,), bool).astype(bool),
        scene_id=cat(sid_all, (0,), np.int64).astype(np.int64),
        gt_boxes=np.asarray(gt_all, dtype=np.float64).reshape(-1, 7),
        gt_scene=np.asarray(gt_scene, dtype=np.int64),
        gt_categories=gt_cats,
        sampling_seconds=sampling_s,
    )


# -- scene sources -------------------------------------------------------

def scene_spec(run, seed: int) -> SceneSpec:
    s = run.scene
    return SceneSpec(n_objects=s.n_objects, density=s.density, range_falloff=s.range_falloff,
                     reference_range=s.reference_range, noise_sigma=s.noise_sigma,
                     clutter_ratio=s.clutter_ratio, seed=seed)


def rpn_settings(run) -> tuple[ProposalNoise, BevConfig]:
    r = run.rpn
    return ProposalNoise(r.sigma_center, r.sigma_size, r.sigma_yaw, r.fp_rate), BevConfig(cell_size=r.bev_cell_size)


def synthetic_items(run, split: str):
    """Yield ``(scene, rpn_output)`` for a split, generated in memory from the run seed."""
    n = run.scene.n_train if split == "train" else run.scene.n_eval
    repeats = run.rpn.train_repeats if split == "train" else 1
    noise, bev = rpn_settings(run)
    for i in range(n):
        spec = scene_spec(run, scene_seed(run.seed, split, i))
        scene = generate_scene(spec)
        for rep in range(repeats):
            yield scene, simulate_rpn(scene, noise, bev, rpn_seed(run.seed, split, i, rep), spec)


def file_items(run, split: str):
    """Yield ``(scene, rpn_output)`` from a directory written by ``ctr gen``."""
    from ..embedding import load_bev
    from .rpn import read_proposals

    root = Path(run.scenes_dir) / split
    if not root.is_dir():
        raise FileNotFoundError(f"scene directory not found: {root}")
    for path in sorted(root.glob("*.jsonl")):
        if path.name.endswith(".proposals.jsonl"):
            continue
        stem = path.name[: -len(".jsonl")]
        scene = read_scene(path)
        reps = sorted(root.glob(f"{stem}.r*.proposals.jsonl"))
        for rp in reps:
            tag = rp.name[len(stem) + 1:].split(".")[0]
            grid = load_bev(root / f"{stem}.{tag}.bev")
            yield scene, read_proposals(rp, grid)


def sampling_config(run) -> SamplingConfig:
    return SamplingConfig(strategy=run.sampling_strategy, n_points=run.sampling.n_points,
                          alpha=run.sampling.alpha, radius_table=dict(run.sampling.radius_table),
                          canonical=run.model.canonical)


def _write_one(args):
    from ..embedding import save_bev
    from .rpn import write_proposals
    from .scene import write_scene

    run, split, i, root = args
    repeats = run.rpn.train_repeats if split == "train" else 1
    noise, bev = rpn_settings(run)
    spec = scene_spec(run, scene_seed(run.seed, split, i))
    scene = generate_scene(spec)
    stem = f"scene_{i:05d}"
    write_scene(root / f"{stem}.jsonl", scene)
    for rep in range(repeats):
        out = simulate_rpn(scene, noise, bev, rpn_seed(run.seed, split, i, rep), spec)
        write_proposals(root / f"{stem}.r{rep}.proposals.jsonl", out)
        save_bev(root / f"{stem}.r{rep}.bev", out.grid)
    return stem


def write_split(run, split: str, out_root, workers: int = 1) -> list[str]:
    """Write a split in the layout ``file_items`` reads; reading it back reproduces ``synthetic_items``."""
    root = Path(out_root) / split
    root.mkdir(parents=True, exist_ok=True)
    n = run.scene.n_train if split == "train" else run.scene.n_eval
    jobs = [(run, split, i, root) for i in range(n)]
    if workers <= 1:
        return [_write_one(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_write_one, jobs, chunksize=16))
