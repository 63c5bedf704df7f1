"""``ctr`` command line: gen, train, eval, bench, gradcheck, ablate.

Every run writes into ``<out-dir>/<UTC timestamp>-seed<seed>[-k]/``. Failures
print one JSON line on stderr and exit with a code from ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .config import ConfigError, RunConfig, key_table

EXIT_CODES = {
    "ok": 0,
    "error": 1,
    "usage": 2,
    "config": 3,
    "missing_file": 4,
    "nan_loss": 5,
    "checkpoint": 6,
    "check_failed": 7,
}

log = logging.getLogger("ctr")


class CliError(Exception):
    def __init__(self, kind: str, message: str, key: str | None = None):
        self.kind, self.key = kind, key
        super().__init__(message)


def threads() -> int:
    from .harness.ablate import worker_count

    try:
        return worker_count()
    except ValueError as exc:
        raise CliError("config", str(exc), "CTR_THREADS") from None


def make_run_dir(out_dir: str, seed: int) -> Path:
    base = Path(out_dir) / f"{time.strftime('%Y%m%d-%H%M%S', time.gmtime())}-seed{seed}"
    path, k = base, 1
    while path.exists():
        path = Path(f"{base}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    log.info("wrote %s", path)
    return path


# -- subcommands ---------------------------------------------------------

def cmd_gen(run: RunConfig, out: Path, args) -> dict:
    from .harness.data import write_split

    root = out / "scenes"
    counts = {split: len(write_split(run, split, root, threads())) for split in ("train", "eval")}
    return {"scenes_dir": str(root), **counts}


def _datasets(run: RunConfig):
    from .harness.train import load_datasets

    if run.scenes_dir and not Path(run.scenes_dir).is_dir():
        raise CliError("missing_file", f"scene directory not found: {run.scenes_dir}", "scenes_dir")
    return load_datasets(run)


def cmd_train(run: RunConfig, out: Path, args) -> dict:
    from .harness.train import NaNLossError, fit, save_model

    train_ds, eval_ds = _datasets(run)
    try:
        res = fit(run, train_ds, eval_ds, dump_dir=out)
    except NaNLossError as exc:
        raise CliError("nan_loss", str(exc)) from None
    ckpt = out / "model.ckpt"
    save_model(ckpt, res.model)
    _write(out / "metrics.csv", res.metrics_csv())
    _write(out / "eval_report.json", json.dumps(res.report.to_dict(), indent=2))
    return {"checkpoint": str(ckpt), "mean_iou_before": res.report.mean_iou_before,
            "mean_iou_after": res.report.mean_iou_after}


def cmd_eval(run: RunConfig, out: Path, args) -> dict:
    from .harness.train import VariantMismatchError, evaluate_model, load_model

    if not run.checkpoint:
        raise CliError("config", "eval needs a checkpoint path", "checkpoint")
    ckpt = Path(run.checkpoint)
    for p in (ckpt, Path(str(ckpt) + ".json")):
        if not p.is_file():
            raise CliError("missing_file", f"file not found: {p}", "checkpoint")
    try:
        model = load_model(ckpt, expect_variant=run.model.variant)
    except VariantMismatchError as exc:
        raise CliError("checkpoint", str(exc), "model.variant") from None
    except (KeyError, ValueError) as exc:
        raise CliError("checkpoint", f"unreadable checkpoint: {exc}", "checkpoint") from None
    _, eval_ds = _datasets(run)
    report = evaluate_model(model, eval_ds, run.eval.score_threshold)
    _write(out / "eval_report.json", json.dumps(report.to_dict(), indent=2))
    return {"mean_iou_before": report.mean_iou_before, "mean_iou_after": report.mean_iou_after,
            "recall07_before": report.recall07_before, "recall07_after": report.recall07_after}


def cmd_bench(run: RunConfig, out: Path, args) -> dict:
    from .bench import bench_csv, fit_exponent, sweep, time_encoder

    b = run.bench
    timings = sweep(b.n_values, b.d_model, b.n_layers, b.batch, b.reps, b.warmup,
                    n_heads=run.attn.n_heads, ffn_expansion=run.attn.ffn_expansion)
    # full-width comparison at the point count used by the refinement model
    full = [time_encoder(s, 255, 256, b.n_layers, b.batch, b.reps, b.warmup,
                         n_heads=run.attn.n_heads, ffn_expansion=run.attn.ffn_expansion)
            for s in ("self_attention", "pbc")]
    _write(out / "bench.csv", bench_csv(timings + full))
    summary = {
        "exponent_pbc": fit_exponent(timings, "pbc"),
        "exponent_self_attention": fit_exponent(timings, "self_attention"),
        "n255_d256_mean_ms": {t.scheme: t.mean_ms for t in full},
    }
    _write(out / "bench_fit.json", json.dumps(summary, indent=2))
    return summary


def cmd_gradcheck(run: RunConfig, out: Path, args) -> dict:
    from .gradcheck import run_all

    results = run_all(run.seed)
    lines = ["name,rel_error,tol,ok"] + [f"{r.name},{r.rel_error:.3e},{r.tol:g},{int(r.ok)}" for r in results]
    _write(out / "gradcheck.csv", "\n".join(lines) + "\n")
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise CliError("check_failed", f"{len(failed)} gradient checks failed: {' '.join(failed)}")
    return {"checks": len(results), "failed": 0}


def cmd_ablate(run: RunConfig, out: Path, args) -> dict:
    from .harness.ablate import SUITES, ablate

    if args.suite not in SUITES:
        raise CliError("config", f"unknown suite {args.suite!r}; expected one of {sorted(SUITES)}", "suite")
    seeds = args.seeds if args.seeds else [run.seed]
    if run.scenes_dir and not Path(run.scenes_dir).is_dir():
        raise CliError("missing_file", f"scene directory not found: {run.scenes_dir}", "scenes_dir")
    res = ablate(args.suite, run, seeds)
    _write(out / f"ablation_{args.suite}.csv", res.csv())
    if res.timing:
        _write(out / f"ablation_{args.suite}_timing.csv", res.timing_csv())
    return {"rows": len(res.rows)}


COMMANDS = {
    "gen": (cmd_gen, "generate train/eval scenes, proposals and BEV grids"),
    "train": (cmd_train, "train a refinement model; writes model.ckpt and metrics.csv"),
    "eval": (cmd_eval, "evaluate a checkpoint on the eval split; writes eval_report.json"),
    "bench": (cmd_bench, "time self-attention and PBC encoders over N; writes bench.csv"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every op and both models"),
    "ablate": (cmd_ablate, "run one ablation suite; writes ablation_<suite>.csv"),
}


def key_help() -> str:
    rows = key_table()
    width = max(len(k) for k, _, _ in rows)
    lines = ["config keys (set with --set key=value; [unit] in brackets):"]
    lines += [f"  {k:<{width}}  {h}  (default {d})" for k, d, h in rows]
    lines += ["", "environment:", "  CTR_THREADS  worker processes for gen and ablate [count] (default 1)",
              "", "exit codes: " + ", ".join(f"{v}={k}" for k, v in EXIT_CODES.items())]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out-dir", default="runs", help="parent of the run directory (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="ctr", description="Second-stage 3D box refinement toolkit.",
                                     epilog=key_help(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           epilog=key_help(), formatter_class=fmt)
        if name == "ablate":
            p.add_argument("suite", help="decoder_scheme | encoder_scheme | sampling | embedding_inputs")
            p.add_argument("--seeds", type=int, nargs="+", help="seeds to repeat the suite over")
    return parser


def fail(kind: str, message: str, key: str | None = None) -> int:
    code = EXIT_CODES[kind]
    rec = {"error": kind, "exit_code": code, "message": message}
    if key:
        rec["key"] = key
    print(json.dumps(rec, separators=(",", ":")), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        if args.config and not Path(args.config).is_file():
            raise CliError("missing_file", f"config file not found: {args.config}", "config")
        overrides = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        run = RunConfig.load(args.config, overrides)
        threads()
        out = make_run_dir(args.out_dir, run.seed)
        _write(out / "config.json", run.dumps() + "\n")
        summary = COMMANDS[args.command][0](run, out, args)
        print(json.dumps({"run_dir": str(out), **summary}, separators=(",", ":")))
        return 0
    except ConfigError as exc:
        return fail("config", str(exc), exc.key)
    except CliError as exc:
        return fail(exc.kind, str(exc), exc.key)
    except FileNotFoundError as exc:
        return fail("missing_file", str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort one-line report
        return fail("error", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
