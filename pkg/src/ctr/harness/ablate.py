"""Ablation suites: matched runs that differ along exactly one axis."""

from __future__ import annotations

import copy
import io
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import file_items, sampling_config, synthetic_items
from .train import fit, load_datasets

log = logging.getLogger(__name__)

# axis value -> dotted config overrides
SUITES: dict[str, dict[str, dict]] = {
    "decoder_scheme": {
        "standard": {"model.decoder": "standard"},
        "channelwise": {"model.decoder": "channelwise"},
        "extended": {"model.decoder": "extended"},
    },
    "encoder_scheme": {
        "mlp": {"model.encoder": "mlp"},
        "self_attention": {"model.encoder": "self_attention"},
        "pbc": {"model.encoder": "pbc"},
    },
    "sampling": {
        "object": {"sampling.strategy": "object"},
        "category": {"sampling.strategy": "category"},
    },
    "embedding_inputs": {
        "geometry": {"model.use_bev": False},
        "geometry_bev": {"model.use_bev": True},
    },
}

ABLATION_COLUMNS = ("config_id", "axis_value", "seed", "final_loss", "mean_iou_before", "mean_iou_after",
                    "iou_lift", "recall07_before", "recall07_after")
TIMING_COLUMNS = ("axis_value", "seed", "n_proposals", "sampling_seconds", "us_per_proposal")


@dataclass
class AblationRow:
    config_id: str
    axis_value: str
    seed: int
    final_loss: float
    mean_iou_before: float
    mean_iou_after: float
    recall07_before: float
    recall07_after: float

    @property
    def iou_lift(self) -> float:
        return self.mean_iou_after - self.mean_iou_before

    def csv(self) -> str:
        nums = (self.final_loss, self.mean_iou_before, self.mean_iou_after, self.iou_lift,
                self.recall07_before, self.recall07_after)
        return f"{self.config_id},{self.axis_value},{self.seed}," + ",".join(f"{x:.6f}" for x in nums)


@dataclass
class SuiteResult:
    suite: str
    rows: list
    timing: list  # (axis_value, seed, n_proposals, seconds); sampling suite only

    def csv(self) -> str:
        return ",".join(ABLATION_COLUMNS) + "\n" + "".join(r.csv() + "\n" for r in self.rows)

    def timing_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(TIMING_COLUMNS) + "\n")
        for value, seed, n, sec in self.timing:
            buf.write(f"{value},{seed},{n},{sec:.6f},{1e6 * sec / max(n, 1):.3f}\n")
        return buf.getvalue()

    def metric(self, axis_value: str, name: str = "mean_iou_after") -> dict[int, float]:
        return {r.seed: getattr(r, name) for r in self.rows if r.axis_value == axis_value}


def variant_run(run, overrides: dict):
    from ..config import set_key

    r = copy.deepcopy(run)
    for key, value in overrides.items():
        set_key(r, key, value)
    return r.validate()


def config_id(suite: str, value: str, seed: int) -> str:
    return f"{suite}-{value}-s{seed}"


def _train_one(args):
    run, train_ds, eval_ds, suite, value = args
    res = fit(run, train_ds, eval_ds)
    rep = res.report
    return AblationRow(config_id(suite, value, run.seed), value, run.seed, res.rows[-1][1],
                       rep.mean_iou_before, rep.mean_iou_after, rep.recall07_before, rep.recall07_after)


def worker_count() -> int:
    raw = os.environ.get("CTR_THREADS", "")
    try:
        n = int(raw) if raw else 1
    except ValueError:
        raise ValueError(f"CTR_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _map(fn, jobs):
    n = min(worker_count(), len(jobs))
    if n <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


def ablate(suite: str, run, seeds=None) -> SuiteResult:
    """Train every axis value of ``suite`` for each seed; shared data per (seed, sampling)."""
    if suite not in SUITES:
        raise ValueError(f"unknown ablation suite {suite!r}; expected one of {sorted(SUITES)}")
    seeds = list(seeds) if seeds is not None else [run.seed]
    rows, timing = [], []
    for seed in seeds:
        base = variant_run(run, {"seed": seed})
        jobs, cache = [], {}
        for value, overrides in SUITES[suite].items():
            r = variant_run(base, overrides)
            key = (r.sampling_strategy, r.sampling.n_points, r.model.canonical)
            if key not in cache:
                cache[key] = load_datasets(r)
                if suite == "sampling":
                    tr = cache[key][0]
                    timing.append((value, seed, len(tr), tr.sampling_seconds))
            jobs.append((r, *cache[key], suite, value))
        for row in _map(_train_one, jobs):
            log.info("%s %s seed %d: iou %.4f -> %.4f", suite, row.axis_value, seed,
                     row.mean_iou_before, row.mean_iou_after)
            rows.append(row)
    return SuiteResult(suite, rows, timing)


def time_sampling(run, n_proposals: int = 10_000, reps: int = 5) -> dict[str, float]:
    """Best-of-``reps`` wall-clock of each sampling strategy over the first ``n_proposals``
    training proposals (same scenes, same proposals, same draws)."""
    from .data import sample_indices

    source = file_items if run.scenes_dir else synthetic_items
    items, total = [], 0
    for scene, rpn in source(run, "train"):
        items.append((scene, rpn))
        total += len(rpn.boxes)
        if total >= n_proposals:
            break
    cfgs = {k: sampling_config(variant_run(run, {"sampling.strategy": k})) for k in ("object", "category")}
    out = {k: np.inf for k in cfgs}
    for _ in range(reps):
        # interleave strategies so background load hits both alike
        for strategy, cfg in cfgs.items():
            left = n_proposals
            t0 = time.perf_counter()
            for si, (scene, rpn) in enumerate(items):
                m = min(left, len(rpn.boxes))
                sample_indices(scene.points, rpn.boxes[:m], rpn.categories[:m], cfg,
                               [[run.seed, si, j] for j in range(m)])
                left -= m
            out[strategy] = min(out[strategy], time.perf_counter() - t0)
    out["n_proposals"] = min(total, n_proposals)
    return out

