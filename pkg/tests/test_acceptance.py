"""Acceptance criteria 1-10, one PASS/FAIL line each.

    pytest -v tests/test_acceptance.py     # lines repeated in the terminal summary
    python3 tests/test_acceptance.py       # same checks, plain output

Criteria 7-10 train at the default desk-scale budget (2000 scenes, 2000 steps)
and take about half an hour on one core.
"""

from __future__ import annotations

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from test_attention import extended_oracle, pbc_oracle, randomize  # noqa: E402
from test_geometry import homogeneous_corners  # noqa: E402

from ctr import autodiff as ad  # noqa: E402
from ctr.attention import AttentionConfig, Decoder, PBCEncoder, PBCLayer, SelfAttentionEncoder  # noqa: E402
from ctr.autodiff import Tensor  # noqa: E402
from ctr.bench import bench_csv, fit_exponent, sweep, time_encoder  # noqa: E402
from ctr.config import RunConfig  # noqa: E402
from ctr.geometry import (corners_array, decode_residual_array, encode_residual_array, rotated_iou3d,  # noqa: E402
                          rotation_z, wrap_angle)
from ctr.gradcheck import MODEL_TOL, OP_TOL, check_blocks, check_models, check_ops  # noqa: E402
from ctr.harness.ablate import ABLATION_COLUMNS, AblationRow, config_id, time_sampling, variant_run  # noqa: E402
from ctr.harness.train import fit, load_datasets  # noqa: E402
from ctr.nn import ParameterSet  # noqa: E402

LINES: list[str] = []
SEEDS = (0, 1, 2)
MARGIN = -0.005


def record(cid: int, title: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {cid:>2}: {title} | {detail}"
    LINES.append(line)
    print(line, flush=True)
    return ok


# -- 1 gradients ---------------------------------------------------------

def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    ops = check_ops(0)
    composed = check_blocks(0) + check_models(0, n=10, d=8)
    dt = time.perf_counter() - t0
    ops_ok = all(r.rel_error < OP_TOL for r in ops)
    comp_ok = all(r.ok and r.tol <= MODEL_TOL for r in composed)
    models = {r.name: r.rel_error for r in composed if r.name.startswith("model.")}
    ok = ops_ok and comp_ok and set(models) == {"model.ct3d", "model.ct3dpp"} and dt < 120
    detail = (f"{len(ops)} ops max rel {max(r.rel_error for r in ops):.1e} (<{OP_TOL:g}); "
              f"{len(composed)} composed max rel {max(r.rel_error for r in composed):.1e} (<{MODEL_TOL:g}); "
              f"ct3d {models.get('model.ct3d', math.nan):.1e} ct3dpp {models.get('model.ct3dpp', math.nan):.1e}; "
              f"{dt:.0f} s")
    assert record(1, "finite-difference gradients", ok, detail)


# -- 2 normalization -----------------------------------------------------

def test_c02_attention_normalization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    d, worst, total = 8, 0.0, 0
    with ad.no_grad():
        for n, count in ((1, 1000), (5, 3000), (17, 3000), (64, 3000)):
            x = rng.standard_normal((count, n, d)) * rng.choice([0.01, 1.0, 30.0], (count, 1, 1))
            k = rng.standard_normal((count, 9, d)) * rng.choice([0.01, 1.0, 30.0], (count, 1, 1))
            total += count
            for scheme in ("standard", "channelwise", "extended"):
                ps = ParameterSet(np.random.default_rng(n))
                dec = Decoder(ps, d, scheme, n_heads=2)
                randomize(ps, rng)
                w, rows = dec.weights(Tensor(x))
                for m in (w, rows):
                    worst = max(worst, np.abs(m.data.astype(np.float64).sum(-1) - 1).max())
            weights = []
            PBCEncoder(ParameterSet(np.random.default_rng(n)), AttentionConfig(d, 2, 2, 2))(Tensor(x), Tensor(k),
                                                                                           weights)
            for a, ak in weights:
                worst = max(worst, np.abs(a.data.astype(np.float64).sum(-1) - 1).max(),
                            np.abs(ak.data.astype(np.float64).sum(-1) - 1).max())
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and dt < 60 and total == 10_000
    assert record(2, "softmax rows sum to 1", ok,
                  f"{total} inputs, 3 decoders + PBC both directions, max |sum-1| {worst:.1e} (<=1e-6); {dt:.0f} s")


# -- 3 loop oracles ------------------------------------------------------

def test_c03_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_pbc = worst_ext = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 17))
        ps = ParameterSet(rng)
        layer = PBCLayer(ps, "p", AttentionConfig(8, 2, 1, 2))
        randomize(ps, rng)
        f, fk = rng.standard_normal((n, 8)), rng.standard_normal((9, 8))
        gf, gk = layer(Tensor(f), Tensor(fk))
        wf, wk = pbc_oracle(f.tolist(), fk.tolist(), layer)
        worst_pbc = max(worst_pbc, np.abs(gf.data - wf).max(), np.abs(gk.data - wk).max())
        ps = ParameterSet(rng)
        dec = Decoder(ps, 8, "extended")
        randomize(ps, rng)
        x = rng.standard_normal((n, 8))
        worst_ext = max(worst_ext, np.abs(dec(Tensor(x)).data[0] - extended_oracle(x.tolist(), dec)).max())
    dt = time.perf_counter() - t0
    ok = worst_pbc < 1e-5 and worst_ext < 1e-5 and dt < 60
    assert record(3, "loop-oracle equivalence", ok,
                  f"100 instances: pbc_layer max |d| {worst_pbc:.1e}, extended decode {worst_ext:.1e} (<1e-5); "
                  f"{dt:.0f} s")


# -- 4 geometry ----------------------------------------------------------

def mc_iou(a, b, rng, samples=1_000_000):
    """Volume Monte-Carlo: uniform samples in ``a``, fraction inside ``b``."""
    u = rng.uniform(-0.5, 0.5, (samples, 3)) * a[3:6]
    p = u @ rotation_z(a[6]).T + a[:3]
    local = (p - b[:3]) @ rotation_z(b[6])
    inside = np.all(np.abs(local) <= b[3:6] / 2, axis=1).mean()
    va, vb = np.prod(a[3:6]), np.prod(b[3:6])
    inter = inside * va
    return inter / (va + vb - inter)


def test_c04_geometry_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_iou = 0.0
    for _ in range(200):
        a = np.array([*rng.uniform(-20, 20, 2), rng.uniform(-1, 1), *rng.uniform(0.5, 5, 3), rng.uniform(-3.2, 3.2)])
        b = a.copy()
        b[:3] += rng.normal(0, 0.3, 3) * a[3:6]
        b[3:6] *= np.exp(rng.normal(0, 0.2, 3))
        b[6] = wrap_angle(a[6] + rng.normal(0, 0.6))
        worst_iou = max(worst_iou, abs(rotated_iou3d(a, b) - mc_iou(a, b, rng)))
    boxes = np.column_stack([rng.uniform(-50, 50, (1000, 3)), rng.uniform(0.2, 8, (1000, 3)),
                             rng.uniform(-math.pi, math.pi, 1000)])
    worst_corner = max(np.abs(corners_array(b) - homogeneous_corners(b)).max() for b in boxes)
    gt = np.column_stack([boxes[:, :3] + rng.normal(0, 1, (1000, 3)), boxes[:, 3:6] * np.exp(rng.normal(0, .3, (1000, 3))),
                          rng.uniform(-math.pi, math.pi, 1000)])
    back = decode_residual_array(boxes, encode_residual_array(boxes, gt))
    worst_rt = max(np.abs(back[:, :6] - gt[:, :6]).max(), np.abs(wrap_angle(back[:, 6] - gt[:, 6])).max())
    dt = time.perf_counter() - t0
    ok = worst_iou < 0.01 and worst_corner < 1e-9 and worst_rt < 1e-6 and dt < 300
    assert record(4, "geometry oracles", ok,
                  f"IoU vs 1e6-sample MC max |d| {worst_iou:.4f} (<0.01) on 200 pairs; corners {worst_corner:.1e} "
                  f"(<1e-9); residual round trip {worst_rt:.1e} (<1e-6); {dt:.0f} s")


# -- 5 complexity --------------------------------------------------------

def test_c05_complexity():
    t0 = time.perf_counter()
    b = RunConfig().bench
    timings = sweep(b.n_values, b.d_model, b.n_layers, b.batch, b.reps, b.warmup)
    e_pbc, e_sa = fit_exponent(timings, "pbc"), fit_exponent(timings, "self_attention")
    full = {s: time_encoder(s, 255, 256, 3, b.batch, b.reps, b.warmup) for s in ("self_attention", "pbc")}
    dt = time.perf_counter() - t0
    saving = 1 - full["pbc"].mean_ms / full["self_attention"].mean_ms
    ok = e_pbc <= 1.2 and e_sa >= 1.7 and full["pbc"].mean_ms < full["self_attention"].mean_ms and dt < 300
    print(bench_csv(timings + list(full.values())))
    assert record(5, "encoder scaling", ok,
                  f"exponent pbc {e_pbc:.2f} (<=1.2), self-attention {e_sa:.2f} (>=1.7) over N={b.n_values}; "
                  f"N=255 D=256: pbc {full['pbc'].mean_ms:.1f} ms vs {full['self_attention'].mean_ms:.1f} ms "
                  f"({100 * saving:.0f}% less); {dt:.0f} s")


# -- 6 footprint ---------------------------------------------------------

def test_c06_parameter_footprint():
    def nbytes(scheme):
        ps = ParameterSet(np.random.default_rng(0))
        Decoder(ps, 256, scheme)
        return ps.nbytes()

    extra = nbytes("extended") - nbytes("channelwise")
    assert record(6, "extended decoder footprint", 0 < extra <= 2048,
                  f"extended - channelwise = {extra} bytes at D=256 (<=2048)")


# -- 7-10 training -------------------------------------------------------

CONFIGS = {
    "default": {},  # ct3dpp: extended decoder, pbc encoder, category sampling
    "standard": {"model.decoder": "standard"},
    "self_attention": {"model.encoder": "self_attention"},
}


def _row(suite, value, seed, res) -> AblationRow:
    rep = res.report
    return AblationRow(config_id(suite, value, seed), value, seed, res.rows[-1][1], rep.mean_iou_before,
                       rep.mean_iou_after, rep.recall07_before, rep.recall07_after)


def ablation_csvs(seed_results: dict) -> dict[str, str]:
    """Ablation tables in the layout ``ctr ablate`` writes, restricted to the compared axis values."""
    tables = {"decoder_scheme": [("standard", "standard"), ("extended", "default")],
              "encoder_scheme": [("self_attention", "self_attention"), ("pbc", "default")],
              "sampling": [("object", "object"), ("category", "default")]}
    out = {}
    for suite, pairs in tables.items():
        lines = [",".join(ABLATION_COLUMNS)]
        for seed, runs in sorted(seed_results.items()):
            lines += [_row(suite, value, seed, runs[name][0]).csv() for value, name in pairs if name in runs]
        out[suite] = "\n".join(lines) + "\n"
    return out


def run_seed(seed: int, with_object: bool) -> dict:
    base = variant_run(RunConfig(), {"seed": seed})
    t0 = time.perf_counter()
    tr, ev = load_datasets(base)
    data_s = time.perf_counter() - t0
    out = {}
    for name, overrides in CONFIGS.items():
        run = variant_run(base, overrides)
        t0 = time.perf_counter()
        res = fit(run, tr, ev)
        out[name] = (res, time.perf_counter() - t0 + data_s)
    if with_object:
        run = variant_run(base, {"sampling.strategy": "object"})
        t0 = time.perf_counter()
        tr_o, ev_o = load_datasets(run)
        res = fit(run, tr_o, ev_o)
        out["object"] = (res, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="module")
def experiments():
    return {seed: run_seed(seed, with_object=(seed == 0)) for seed in SEEDS}


def test_c07_refinement_efficacy(experiments):
    parts, ok = [], True
    for seed, runs in sorted(experiments.items()):
        res, secs = runs["default"]
        r = res.report
        d_iou, d_rec = r.mean_iou_after - r.mean_iou_before, r.recall07_after - r.recall07_before
        ok &= d_iou >= 0.05 and d_rec >= 0.05 and secs <= 1800
        parts.append(f"s{seed}: iou {r.mean_iou_before:.3f}->{r.mean_iou_after:.3f} (+{d_iou:.3f}), "
                     f"recall07 {r.recall07_before:.3f}->{r.recall07_after:.3f} (+{d_rec:.3f}), {secs:.0f} s")
    assert record(7, "ct3dpp refinement lift >= 0.05 (3 seeds)", ok, "; ".join(parts))


def ordering(experiments, better: str, worse: str) -> tuple[bool, list[float]]:
    diffs = [runs[better][0].report.mean_iou_after - runs[worse][0].report.mean_iou_after
             for _, runs in sorted(experiments.items())]
    return all(d >= MARGIN for d in diffs) and any(d > 0 for d in diffs), diffs


def test_c08_ablation_ordering(experiments):
    dec_ok, dec = ordering(experiments, "default", "standard")
    enc_ok, enc = ordering(experiments, "default", "self_attention")
    fmt = ", ".join
    detail = (f"extended - standard mean-IoU-after per seed [{fmt(f'{d:+.4f}' for d in dec)}]; "
              f"pbc - self-attention [{fmt(f'{d:+.4f}' for d in enc)}]; non-inferiority margin {MARGIN}")
    assert record(8, "ablation ordering", dec_ok and enc_ok, detail)


def test_c09_sampling_speed(experiments):
    run = variant_run(RunConfig(), {"seed": 0})
    t = time_sampling(run, 10_000, reps=5)
    iou_cat = experiments[0]["default"][0].report.mean_iou_after
    iou_obj = experiments[0]["object"][0].report.mean_iou_after
    ok = t["category"] <= t["object"] and abs(iou_cat - iou_obj) <= 0.02 and t["n_proposals"] == 10_000
    assert record(9, "category sampling speed", ok,
                  f"{t['n_proposals']} proposals best of 5: category {t['category']:.3f} s vs object "
                  f"{t['object']:.3f} s; mean-IoU-after category {iou_cat:.4f} vs object {iou_obj:.4f} "
                  f"(|d| {abs(iou_cat - iou_obj):.4f} <= 0.02)")


def test_c10_determinism(experiments):
    again = {0: run_seed(0, with_object=True)}
    first = {0: experiments[0]}
    same_metrics = all(first[0][k][0].metrics_csv() == again[0][k][0].metrics_csv() for k in again[0])
    a, b = ablation_csvs(first), ablation_csvs(again)
    same_tables = all(a[k].encode() == b[k].encode() for k in a)
    full = ablation_csvs(experiments)
    out_dir = Path(__file__).resolve().parent.parent / "acceptance_out"
    out_dir.mkdir(exist_ok=True)
    for suite, text in full.items():
        (out_dir / f"ablation_{suite}.csv").write_text(text)
    for seed, runs in experiments.items():
        for name, (res, _) in runs.items():
            (out_dir / f"metrics_{name}_s{seed}.csv").write_text(res.metrics_csv())
    assert record(10, "byte-identical reruns", same_metrics and same_tables,
                  f"seed 0 rerun of {len(again[0])} trainings: metrics CSVs identical={same_metrics}, "
                  f"ablation CSVs identical={same_tables}; tables in acceptance_out/")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
