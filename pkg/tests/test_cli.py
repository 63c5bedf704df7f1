import json
from pathlib import Path

import pytest

from ctr.cli import EXIT_CODES, build_parser, main
from ctr.config import key_table

TINY = ["--set", "scene.n_train=6", "--set", "scene.n_eval=4", "--set", "attn.d_model=8",
        "--set", "sampling.n_points=16", "--set", "train.steps=4", "--set", "train.eval_every=2",
        "--set", "train.batch=8"]


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def summary(out):
    return json.loads(out.strip().splitlines()[-1])


def test_help_lists_every_key_with_units(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["train", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for key, _, help_text in key_table():
        assert key in text
    assert "[m]" in text and "[count]" in text and "CTR_THREADS" in text


def test_misspelled_key_rejected(capsys, tmp_path):
    code, _, err = run_cli(capsys, "train", "--set", "attn.nlayers=2", "--out-dir", str(tmp_path))
    assert code == EXIT_CODES["config"] == 3
    rec = json.loads(err.strip().splitlines()[-1])
    assert rec["key"] == "attn.nlayers" and rec["exit_code"] == 3


def test_bad_value_rejected(capsys, tmp_path):
    code, _, err = run_cli(capsys, "train", "--set", "train.batch=7", "--out-dir", str(tmp_path))
    assert code == 3 and json.loads(err.strip())["key"] == "train.batch"


def test_missing_files(capsys, tmp_path):
    code, _, err = run_cli(capsys, "train", "--config", str(tmp_path / "nope.yaml"), "--out-dir", str(tmp_path))
    assert code == EXIT_CODES["missing_file"] == 4
    code, _, _ = run_cli(capsys, "eval", "--set", f"checkpoint={tmp_path / 'x.ckpt'}", "--out-dir", str(tmp_path))
    assert code == 4


def test_unknown_suite(capsys, tmp_path):
    code, _, _ = run_cli(capsys, "ablate", "colour", "--out-dir", str(tmp_path))
    assert code == 3


def test_exit_codes_distinct():
    assert len(set(EXIT_CODES.values())) == len(EXIT_CODES)


def test_gen_train_eval_pipeline(capsys, tmp_path):
    out_dir = str(tmp_path / "runs")
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  variant: ct3dpp\nattn:\n  n_layers: 1\n")
    code, out, _ = run_cli(capsys, "gen", "--config", str(cfg), *TINY, "--out-dir", out_dir)
    assert code == 0
    gen = summary(out)
    assert gen["train"] == 6 and gen["eval"] == 4

    code, out, _ = run_cli(capsys, "train", "--config", str(cfg), *TINY, "--set", f"scenes_dir={gen['scenes_dir']}",
                           "--out-dir", out_dir)
    assert code == 0
    tr = summary(out)
    run_dir = Path(tr["run_dir"])
    assert run_dir.name.endswith("-seed0") or "-seed0-" in run_dir.name
    for name in ("model.ckpt", "model.ckpt.json", "metrics.csv", "eval_report.json", "config.json"):
        assert (run_dir / name).is_file(), name

    code, out, _ = run_cli(capsys, "eval", "--config", str(cfg), *TINY, "--set", f"scenes_dir={gen['scenes_dir']}",
                           "--set", f"checkpoint={tr['checkpoint']}", "--out-dir", out_dir)
    assert code == 0
    ev = summary(out)
    assert ev["mean_iou_after"] == tr["mean_iou_after"]
    assert (Path(ev["run_dir"]) / "eval_report.json").is_file()

    code, _, err = run_cli(capsys, "eval", "--config", str(cfg), *TINY, "--set", "model.variant=ct3d",
                           "--set", f"scenes_dir={gen['scenes_dir']}", "--set", f"checkpoint={tr['checkpoint']}",
                           "--out-dir", out_dir)
    assert code == EXIT_CODES["checkpoint"]


def test_train_idempotent_in_fresh_dirs(capsys, tmp_path):
    texts = []
    for sub in ("a", "b"):
        code, out, _ = run_cli(capsys, "train", *TINY, "--seed", "3", "--out-dir", str(tmp_path / sub))
        assert code == 0
        texts.append((Path(summary(out)["run_dir"]) / "metrics.csv").read_bytes())
    assert texts[0] == texts[1]


def test_gradcheck_command(capsys, tmp_path):
    code, out, _ = run_cli(capsys, "gradcheck", "--out-dir", str(tmp_path))
    assert code == 0
    assert summary(out)["failed"] == 0


def test_bench_and_ablate_commands(capsys, tmp_path):
    code, out, _ = run_cli(capsys, "bench", "--set", "bench.n_values=[16,32]", "--set", "bench.reps=2",
                           "--set", "bench.batch=2", "--set", "bench.n_layers=1", "--out-dir", str(tmp_path))
    assert code == 0
    csv = (Path(summary(out)["run_dir"]) / "bench.csv").read_text().splitlines()
    assert csv[0] == "scheme,N,D,layers,mean_ms,std_ms"
    code, out, _ = run_cli(capsys, "ablate", "sampling", *TINY, "--seeds", "0", "1", "--out-dir", str(tmp_path))
    assert code == 0 and summary(out)["rows"] == 4
    assert (Path(summary(out)["run_dir"]) / "ablation_sampling_timing.csv").is_file()
