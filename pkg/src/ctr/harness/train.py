"""Training loop, evaluation report and checkpoint handling for the harness."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..geometry import decode_residual_array, iou_matrix, rotated_iou3d
from ..head import TrainingTarget, conf_target_from_iou, fuse_scores, refine_loss, sample_training_set
from ..model import ModelConfig, RefineModel
from ..nn import load_checkpoint, save_checkpoint
from .data import ProposalDataset

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "loss", "mean_iou_before", "mean_iou_after", "recall07_before", "recall07_after")
DISTANCE_BUCKETS = ((0.0, 30.0), (30.0, 50.0), (50.0, math.inf))


class NaNLossError(RuntimeError):
    def __init__(self, step: int, dump: str | None):
        self.step = step
        self.dump = dump
        super().__init__(f"non-finite loss at step {step}" + (f"; batch dumped to {dump}" if dump else ""))


class VariantMismatchError(ValueError):
    pass


@dataclass
class EvalReport:
    mean_iou_before: float
    mean_iou_after: float
    recall07_before: float
    recall07_after: float
    recall07_after_rpn_score: float
    recall07_after_second_score: float
    ranking_changes: int  # proposals whose rank differs between fused and second-stage-only scores
    n_proposals: int
    n_ground_truth: int
    calibration: list = field(default_factory=list)  # [lo, hi, count, mean_score, mean_target]
    distance_buckets: list = field(default_factory=list)  # [lo, hi, count, iou_before, iou_after]

    def to_dict(self) -> dict:
        return asdict(self)


def _recall(ds: ProposalDataset, boxes: np.ndarray, scores: np.ndarray, thresh: float) -> float:
    if len(ds.gt_boxes) == 0:
        return 0.0
    hit = np.zeros(len(ds.gt_boxes), bool)
    keep = scores >= thresh
    for s in np.unique(ds.gt_scene):
        gi = np.flatnonzero(ds.gt_scene == s)
        pi = np.flatnonzero((ds.scene_id == s) & keep)
        if len(pi) == 0:
            continue
        hit[gi] = (iou_matrix(boxes[pi], ds.gt_boxes[gi]) > 0.7).any(axis=0)
    return float(hit.mean())


def _ranks(x: np.ndarray) -> np.ndarray:
    r = np.empty(len(x), np.int64)
    r[np.argsort(-x, kind="stable")] = np.arange(len(x))
    return r


def evaluate_predictions(ds: ProposalDataset, logits: np.ndarray, residuals: np.ndarray,
                         score_threshold: float = 0.1) -> EvalReport:
    """Score refined boxes. ``logits``/``residuals`` are aligned with ``ds.valid`` rows."""
    refined = ds.proposals.copy()
    second = ds.rpn_scores.copy()
    v = np.flatnonzero(ds.valid)
    if len(v):
        refined[v] = decode_residual_array(ds.proposals[v], residuals.astype(np.float64))
        second[v] = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    fused = np.where(ds.valid, fuse_scores(ds.rpn_scores, second), ds.rpn_scores)

    t = np.flatnonzero(ds.is_true & (ds.match >= 0))
    before = np.array([rotated_iou3d(ds.proposals[i], ds.gt_boxes[ds.match[i]]) for i in t])
    after = np.array([rotated_iou3d(refined[i], ds.gt_boxes[ds.match[i]]) for i in t])

    buckets = []
    if len(t):
        dist = np.hypot(ds.gt_boxes[ds.match[t], 0], ds.gt_boxes[ds.match[t], 1])
        for lo, hi in DISTANCE_BUCKETS:
            sel = (dist >= lo) & (dist < hi)
            n = int(sel.sum())
            buckets.append([lo, hi, n, float(before[sel].mean()) if n else 0.0,
                            float(after[sel].mean()) if n else 0.0])

    target_after = np.zeros(len(ds))
    for i in np.flatnonzero(ds.match >= 0):
        target_after[i] = rotated_iou3d(refined[i], ds.gt_boxes[ds.match[i]])
    target_after = conf_target_from_iou(target_after)
    calib = []
    edges = np.linspace(0.0, 1.0, 11)
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (fused >= lo) & ((fused < hi) | (hi == 1.0))
        n = int(sel.sum())
        calib.append([float(lo), float(hi), n, float(fused[sel].mean()) if n else 0.0,
                      float(target_after[sel].mean()) if n else 0.0])

    return EvalReport(
        mean_iou_before=float(before.mean()) if len(t) else 0.0,
        mean_iou_after=float(after.mean()) if len(t) else 0.0,
        recall07_before=_recall(ds, ds.proposals, ds.rpn_scores, score_threshold),
        recall07_after=_recall(ds, refined, fused, score_threshold),
        recall07_after_rpn_score=_recall(ds, refined, ds.rpn_scores, score_threshold),
        recall07_after_second_score=_recall(ds, refined, second, score_threshold),
        ranking_changes=int((_ranks(fused) != _ranks(second)).sum()),
        n_proposals=len(ds),
        n_ground_truth=len(ds.gt_boxes),
        calibration=calib,
        distance_buckets=buckets,
    )


def evaluate_model(model: RefineModel, ds: ProposalDataset, score_threshold: float = 0.1) -> EvalReport:
    v = np.flatnonzero(ds.valid)
    pr, kr = ds.inputs(v, model.cfg.variant, model.cfg.use_bev)
    logits, res = model.predict(pr, kr)
    return evaluate_predictions(ds, logits, res, score_threshold)


@dataclass
class TrainResult:
    model: RefineModel
    rows: list
    report: EvalReport

    def metrics_csv(self) -> str:
        return format_metrics(self.rows)


def format_metrics(rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(METRIC_COLUMNS) + "\n")
    for r in rows:
        buf.write(f"{r[0]:d}," + ",".join(f"{x:.6f}" for x in r[1:]) + "\n")
    return buf.getvalue()


def train(model_cfg: ModelConfig, train_ds: ProposalDataset, eval_ds: ProposalDataset, *,
          steps: int, batch: int, lr: float, eval_every: int, seed: int = 0, grad_clip: float = 5.0,
          reg_weight: float = 1.0, cosine: bool = True, score_threshold: float = 0.1,
          dump_dir: str | Path | None = None) -> TrainResult:
    model = RefineModel(model_cfg, seed=int(np.random.SeedSequence([seed, 11]).generate_state(1)[0]))
    opt = ad.Adam(model.params, lr=lr, grad_clip=grad_clip or None)
    rng = np.random.default_rng([seed, 13])
    pool = np.flatnonzero(train_ds.valid)
    if len(pool) == 0:
        raise ValueError("training set has no proposal with points inside its sampling region")
    rows, window = [], []
    for step in range(1, steps + 1):
        if cosine:
            opt.lr = lr * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / steps))
        pick = pool[sample_training_set(train_ds.iou[pool], batch, rng).indices]
        pr, kr = train_ds.inputs(pick, model_cfg.variant, model_cfg.use_bev)
        target = TrainingTarget.build(train_ds.iou[pick], train_ds.reg_target[pick])
        loss = refine_loss(model(pr, kr), target, reg_weight)
        value = loss.item()
        if not math.isfinite(value):
            dump = None
            if dump_dir is not None:
                dump = str(Path(dump_dir) / f"nan_batch_step{step}.npz")
                np.savez(dump, indices=pick, point_raw=pr, keypoint_raw=kr if kr is not None else np.zeros(0),
                         iou=train_ds.iou[pick], reg_target=train_ds.reg_target[pick])
            raise NaNLossError(step, dump)
        loss.backward()
        opt.step()
        window.append(value)
        if step % eval_every == 0 or step == steps:
            rep = evaluate_model(model, eval_ds, score_threshold)
            rows.append((step, float(np.mean(window)), rep.mean_iou_before, rep.mean_iou_after,
                         rep.recall07_before, rep.recall07_after))
            log.info("step %d loss %.4f iou %.4f -> %.4f recall07 %.4f -> %.4f", *rows[-1])
            window = []
    return TrainResult(model=model, rows=rows, report=rep)


# -- checkpoints ---------------------------------------------------------

def save_model(path, model: RefineModel):
    save_checkpoint(path, model.params)
    meta = {"variant": model.cfg.variant, "model": _cfg_dict(model.cfg)}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _cfg_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    return d


def load_model(path, expect_variant: str | None = None) -> RefineModel:
    from ..attention import AttentionConfig

    meta = json.loads(Path(str(path) + ".json").read_text())
    if expect_variant and meta["variant"] != expect_variant:
        raise VariantMismatchError(f"checkpoint holds a {meta['variant']} model, config asks for {expect_variant}")
    m = dict(meta["model"])
    m["attn"] = AttentionConfig(**m["attn"])
    model = RefineModel(ModelConfig(**m))
    model.params.load_state(load_checkpoint(path))
    return model


# -- config-driven entry points -----------------------------------------

def load_datasets(run, sampling=None) -> tuple[ProposalDataset, ProposalDataset]:
    """Train and eval datasets from ``run.scenes_dir`` if set, else generated in memory."""
    from .data import build_dataset, file_items, sampling_config, synthetic_items

    source = file_items if run.scenes_dir else synthetic_items
    cfg = sampling or sampling_config(run)
    return (build_dataset(source(run, "train"), cfg, run.seed),
            build_dataset(source(run, "eval"), cfg, run.seed))


def fit(run, train_ds: ProposalDataset, eval_ds: ProposalDataset, dump_dir=None) -> TrainResult:
    t = run.train
    return train(run.model_config(), train_ds, eval_ds, steps=t.steps, batch=t.batch,
                 lr=run.learning_rate, eval_every=t.eval_every, seed=run.seed, grad_clip=t.grad_clip,
                 reg_weight=t.reg_weight, cosine=t.cosine, score_threshold=run.eval.score_threshold,
                 dump_dir=dump_dir)
