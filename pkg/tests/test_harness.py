import math

import numpy as np
import pytest

from ctr import autodiff as ad
from ctr.config import RunConfig
from ctr.geometry import rotated_iou3d, rotation_z
from ctr.harness.ablate import SUITES, ablate
from ctr.harness.data import build_dataset, file_items, sampling_config, synthetic_items, write_split
from ctr.harness.rpn import BevConfig, ProposalNoise, rasterize_bev, simulate_rpn
from ctr.harness.scene import SceneSpec, generate_scene, scene_to_jsonl, surface_points, visible_area
from ctr.harness.train import (NaNLossError, VariantMismatchError, evaluate_model, fit, load_datasets, load_model,
                               save_model, train)
from ctr.head import RefineOutput, TrainingTarget, refine_loss
from ctr.model import RefineModel

SMALL = ["scene.n_train=40", "scene.n_eval=20", "attn.d_model=16", "sampling.n_points=32",
         "train.steps=60", "train.eval_every=30", "train.batch=16"]


def small_run(*extra):
    return RunConfig.load(None, SMALL + list(extra))


@pytest.fixture(scope="module")
def data():
    run = small_run()
    return run, *load_datasets(run)


@pytest.fixture(scope="module")
def trained(data):
    run, tr, ev = data
    return fit(run, tr, ev)


# -- scenes --------------------------------------------------------------

def test_poisson_point_count():
    box = np.array([20.0, 0.0, 0.5, 4.0, 2.0, 1.0, 0.0])
    sensor = (0.0, 0.0, 1.9)
    assert visible_area(box, sensor) == pytest.approx(10.0)
    rng = np.random.default_rng(0)
    counts = [len(surface_points(box, 100.0, sensor, 0.02, rng)) for _ in range(100)]
    assert abs(np.mean(counts) - 1000) / 1000 < 0.02


def surface_distance(p, box):
    local = (p[:, :3] - box[:3]) @ rotation_z(box[6])
    half = box[3:6] / 2
    q = np.abs(local) - half
    outside = np.linalg.norm(np.maximum(q, 0), axis=1)
    inside = np.minimum(q.max(axis=1), 0)
    return np.abs(outside + inside)


def test_object_points_within_three_sigma_of_surface():
    for seed in range(20):
        spec = SceneSpec(noise_sigma=0.05, seed=seed)
        sc = generate_scene(spec)
        for k, box in enumerate(sc.gt_boxes):
            d = surface_distance(sc.object_points(k), box)
            assert d.max() <= 3 * spec.noise_sigma + 1e-4  # stored coordinates are rounded to 1e-4 m


def test_scene_bytes_deterministic():
    a = scene_to_jsonl(generate_scene(SceneSpec(seed=5)))
    assert a == scene_to_jsonl(generate_scene(SceneSpec(seed=5)))
    assert a != scene_to_jsonl(generate_scene(SceneSpec(seed=6)))


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(density=0)
    with pytest.raises(ValueError):
        SceneSpec(size_ranges={"vehicle": ((1, 2), (0, 1), (1, 2))}, category_mix={"vehicle": 1.0})


# -- proposals and BEV ---------------------------------------------------

def test_zero_noise_proposals_are_ground_truth():
    sc = generate_scene(SceneSpec(seed=1))
    out = simulate_rpn(sc, ProposalNoise(0, 0, 0, 0), seed=0)
    np.testing.assert_array_equal(out.boxes, sc.gt_boxes)
    for p, g in zip(out.boxes, sc.gt_boxes):
        assert rotated_iou3d(p, g) == pytest.approx(1.0)


def shifted_iou(size, d):
    """Identical axis-aligned boxes offset by ``d`` (box frame)."""
    inter = np.prod(np.maximum(size - np.abs(d), 0), axis=-1)
    return inter / (2 * np.prod(size) - inter)


def test_center_noise_iou_matches_monte_carlo():
    noise = ProposalNoise(sigma_center=0.3, sigma_size=0, sigma_yaw=0, fp_rate=0)
    empirical, predicted = [], []
    mc = np.random.default_rng(99).normal(0, 0.3, (100_000, 3))  # isotropic, so the box frame is irrelevant
    for seed in range(60):
        sc = generate_scene(SceneSpec(seed=seed))
        out = simulate_rpn(sc, noise, seed=1000 + seed)
        for p, g in zip(out.boxes, sc.gt_boxes):
            empirical.append(rotated_iou3d(p, g))
            predicted.append(shifted_iou(g[3:6], mc).mean())
    assert abs(np.mean(empirical) - np.mean(predicted)) < 0.02


def test_bev_density_conserves_points():
    sc = generate_scene(SceneSpec(seed=3))
    grid = rasterize_bev(sc.points[:, :3], BevConfig())
    assert grid.values[..., 0].sum() == len(sc.points)
    assert grid.channels == 3


def test_false_positive_rate():
    sc = generate_scene(SceneSpec(n_objects=10, seed=0))
    n = sum(int((simulate_rpn(sc, ProposalNoise(fp_rate=0.5), seed=s).gt_index < 0).sum()) for s in range(200))
    assert n / (200 * len(sc.gt_boxes)) == pytest.approx(0.5, rel=0.1)


# -- datasets ------------------------------------------------------------

def test_file_dataset_equals_memory_dataset(tmp_path):
    run = small_run("scene.n_train=6", "scene.n_eval=3")
    for split in ("train", "eval"):
        write_split(run, split, tmp_path)
    from_files = RunConfig.load(None, SMALL + ["scene.n_train=6", "scene.n_eval=3", f"scenes_dir={tmp_path}"])
    cfg = sampling_config(run)
    for split in ("train", "eval"):
        a = build_dataset(synthetic_items(run, split), cfg, run.seed)
        b = build_dataset(file_items(from_files, split), cfg, run.seed)
        for name in ("point_raw", "key_raw", "proposals", "rpn_scores", "iou", "reg_target", "valid"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes(), name


def test_dataset_shapes(data):
    run, tr, ev = data
    assert tr.point_raw.shape[1:] == (32, 31) and tr.key_raw.shape[1:] == (9, 31)
    assert len(tr) == len(tr.iou) == len(tr.reg_target)
    assert 0.0 <= tr.iou.min() and tr.iou.max() <= 1.0


# -- training ------------------------------------------------------------

def test_one_batch_overfit(data):
    run, tr, _ = data
    # confidence targets of exactly 0 or 1 so the loss floor is zero
    pick = np.r_[np.flatnonzero(tr.valid & (tr.iou >= 0.75))[:4], np.flatnonzero(tr.valid & (tr.iou <= 0.25))[:4]]
    assert len(pick) == 8
    model = RefineModel(run.model_config(), seed=0)
    opt = ad.Adam(model.params, lr=3e-3)
    pr, kr = tr.inputs(pick, "ct3dpp")
    target = TrainingTarget.build(tr.iou[pick], tr.reg_target[pick])
    losses = []
    for _ in range(500):
        loss = refine_loss(model(pr, kr), target)
        losses.append(loss.item())
        loss.backward()
        opt.step()
    assert losses[-1] < 0.1 * losses[0]
    tail = np.array(losses[100:])
    assert np.mean(tail[-50:]) < np.mean(tail[:50])


def test_untrained_model_barely_moves_proposals(data):
    run, _, ev = data
    rep = evaluate_model(RefineModel(run.model_config(), seed=0), ev)
    assert abs(rep.mean_iou_after - rep.mean_iou_before) <= 0.05


def test_default_learning_rates():
    assert small_run("model.variant=ct3d").learning_rate == 1e-3
    assert small_run().learning_rate == 5e-4


def test_training_deterministic(data, trained):
    run, tr, ev = data
    again = fit(run, tr, ev)
    assert again.metrics_csv() == trained.metrics_csv()
    assert trained.metrics_csv().splitlines()[0] == "step,loss,mean_iou_before,mean_iou_after,recall07_before," \
                                                    "recall07_after"


def test_checkpoint_reload_bit_identical(tmp_path, data, trained):
    _, _, ev = data
    save_model(tmp_path / "m.ckpt", trained.model)
    back = load_model(tmp_path / "m.ckpt", expect_variant="ct3dpp")
    assert evaluate_model(back, ev).to_dict() == evaluate_model(trained.model, ev).to_dict()
    with pytest.raises(VariantMismatchError):
        load_model(tmp_path / "m.ckpt", expect_variant="ct3d")


def test_report_fields(trained):
    rep = trained.report
    for name in ("mean_iou_before", "mean_iou_after", "recall07_before", "recall07_after"):
        assert 0.0 <= getattr(rep, name) <= 1.0
    assert len(rep.calibration) == 10 and len(rep.distance_buckets) == 3
    assert sum(b[2] for b in rep.calibration) > 0


def test_fusion_does_not_lose_recall(trained):
    rep = trained.report
    assert rep.recall07_after >= max(rep.recall07_after_rpn_score, rep.recall07_after_second_score) - 0.02


def test_nan_loss_aborts_with_dump(tmp_path, data):
    run, tr, ev = data
    import copy

    bad = copy.copy(tr)
    bad.reg_target = np.full_like(tr.reg_target, np.nan)
    with pytest.raises(NaNLossError) as exc:
        train(run.model_config(), bad, ev, steps=3, batch=8, lr=1e-3, eval_every=3, dump_dir=tmp_path)
    assert exc.value.step == 1
    dumped = np.load(next(tmp_path.glob("nan_batch_step1.npz")))
    assert dumped["point_raw"].shape[0] == 8


def test_noiseless_training_drives_residuals_to_zero():
    run = small_run("rpn.sigma_center=0", "rpn.sigma_size=0", "rpn.sigma_yaw=0", "rpn.fp_rate=0",
                    "train.steps=300", "train.eval_every=300", "scene.n_train=20", "scene.n_eval=10")
    tr, ev = load_datasets(run)
    res = fit(run, tr, ev)
    v = np.flatnonzero(ev.valid)
    _, resid = res.model.predict(*ev.inputs(v, "ct3dpp"))
    assert np.linalg.norm(resid, axis=1).mean() < 0.05


# -- ablations -----------------------------------------------------------

@pytest.mark.parametrize("suite", sorted(SUITES))
def test_suites_emit_one_row_per_axis_value(suite):
    run = small_run("scene.n_train=8", "scene.n_eval=4", "train.steps=4", "train.eval_every=4")
    res = ablate(suite, run, seeds=[0])
    assert [r.axis_value for r in res.rows] == list(SUITES[suite])
    lines = res.csv().splitlines()
    assert lines[0].startswith("config_id,axis_value,")
    assert len(lines) == 1 + len(SUITES[suite])
    if suite == "sampling":
        assert [t[0] for t in res.timing] == ["object", "category"]
        assert res.timing_csv().splitlines()[0].startswith("axis_value,seed,n_proposals,sampling_seconds")
