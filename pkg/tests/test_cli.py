"""End-to-end command line tests: every subcommand runs in-process through
``main(argv)`` against temp directories, checking artifacts and exit codes."""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from prnet import data, training
from prnet.cli import main
from prnet.gradcheck import CheckResult

CORPUS = Path(__file__).parent / "fixtures" / "corpus"

TINY_CONFIG = """\
# minimal model for fast tests
stem_channels=4
stage_channels=4,8,8,8
blocks_per_stage=1,1,1,1
run.epochs=2
run.batch=2
run.seed=0
"""


def run(*argv):
    return main([str(a) for a in argv])


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One synth -> train run shared by the eval/predict/manifest tests."""
    base = tmp_path_factory.mktemp("pipeline")
    dataset = base / "data"
    rundir = base / "run"
    cfg = base / "tiny.cfg"
    cfg.write_text(TINY_CONFIG, encoding="utf-8")
    assert run("synth", "--count", 6, "--size", 16, "--seed", 0, "--out", dataset) == 0
    assert run("train", "--data", dataset, "--config", cfg, "--out", rundir) == 0
    return {"dataset": dataset, "rundir": rundir, "config": cfg, "base": base}


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def test_synth_writes_dataset_and_manifest(tmp_path, capsys):
    out = tmp_path / "d"
    assert run("synth", "--count", 3, "--size", 16, "--out", out) == 0
    manifest = (out / "run_manifest.txt").read_text()
    assert "run.command=synth" in manifest
    assert "run.count=3" in manifest
    assert "run.seed=0" in manifest
    samples = data.load_dataset(out)
    assert len(samples) == 3
    assert samples[0].image.shape == (3, 16, 16)
    assert "wrote 3 samples" in capsys.readouterr().out


def test_synth_is_byte_identical_across_runs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("synth", "--count", 4, "--size", 16, "--seed", 5, "--out", out) == 0
    ta, tb = tree_bytes(a), tree_bytes(b)
    assert ta.keys() == tb.keys()
    # the manifest embeds --out, which legitimately differs between the dirs
    assert all(ta[k] == tb[k] for k in ta if k != "run_manifest.txt")


def test_synth_count_validation_is_usage_error(tmp_path, capsys):
    assert run("synth", "--count", 0, "--out", tmp_path / "d") == 1
    assert "--count" in capsys.readouterr().err


def test_unknown_flag_exits_1():
    with pytest.raises(SystemExit) as exc:
        run("synth", "--count", 2, "--out", "x", "--bogus")
    assert exc.value.code == 1


def test_missing_subcommand_exits_1():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


# ---------------------------------------------------------------------------
# convert
# ---------------------------------------------------------------------------


def test_convert_corpus_with_split(tmp_path, capsys):
    out = tmp_path / "conv"
    assert run(
        "convert", "--annotations", CORPUS, "--out", out,
        "--split-fraction", 0.5, "--seed", 0,
    ) == 0
    captured = capsys.readouterr()
    assert "converted 4 annotated images" in captured.out
    assert "degenerate" in captured.err  # case_04 carries a 2-point shape
    assert len(data.load_dataset(out, split="train")) == 2
    assert len(data.load_dataset(out, split="test")) == 2
    assert len(data.load_dataset(out)) == 4


def test_convert_empty_directory_is_data_error(tmp_path, capsys):
    assert run("convert", "--annotations", tmp_path / "nothing", "--out", tmp_path / "o") == 2
    assert "data error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_artifacts(pipeline):
    rundir = pipeline["rundir"]
    for name in ("run_manifest.txt", "training_log.txt", "loss_curve.png",
                 "checkpoint_final.prnc"):
        assert (rundir / name).is_file(), name
    log = (rundir / "training_log.txt").read_text().splitlines()
    assert len(log) == 6  # 2 epochs x (6 samples // batch 2)
    assert log[0].startswith("iter=0\tepoch=0\t")
    manifest = (rundir / "run_manifest.txt").read_text()
    assert "run.epochs=2" in manifest
    assert "stem_channels=4" in manifest
    assert (rundir / "loss_curve.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_flag_overrides_config_file(pipeline, tmp_path):
    out = tmp_path / "one"
    assert run(
        "train", "--data", pipeline["dataset"], "--config", pipeline["config"],
        "--epochs", 1, "--out", out,
    ) == 0
    assert "run.epochs=1" in (out / "run_manifest.txt").read_text()
    assert len((out / "training_log.txt").read_text().splitlines()) == 3


def test_manifest_reproduces_training_run(pipeline, tmp_path):
    redo = tmp_path / "redo"
    assert run(
        "train", "--data", pipeline["dataset"],
        "--config", pipeline["rundir"] / "run_manifest.txt", "--out", redo,
    ) == 0
    for name in ("training_log.txt", "checkpoint_final.prnc"):
        assert (redo / name).read_bytes() == (pipeline["rundir"] / name).read_bytes(), name


def test_ablation_flags_reach_the_checkpoint(pipeline, tmp_path):
    out = tmp_path / "ablate"
    assert run(
        "train", "--data", pipeline["dataset"], "--config", pipeline["config"],
        "--epochs", 1, "--no-cfa", "--no-gfwm", "--kernels", "3", "--out", out,
    ) == 0
    ckpt = training.load_checkpoint(out / "checkpoint_final.prnc")
    assert ckpt.config["use_cfa"] is False
    assert ckpt.config["use_gfwm"] is False
    assert tuple(ckpt.config["kernel_set"]) == (3,)


def test_bad_kernels_flag_is_usage_error(pipeline, tmp_path, capsys):
    code = run(
        "train", "--data", pipeline["dataset"], "--config", pipeline["config"],
        "--kernels", "seven", "--out", tmp_path / "x",
    )
    assert code == 1
    assert "--kernels" in capsys.readouterr().err


def test_unknown_config_key_is_usage_error(pipeline, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("stem_channels=4\nwavelets=9\n", encoding="utf-8")
    assert run("train", "--data", pipeline["dataset"], "--config", bad,
               "--out", tmp_path / "x") == 1
    assert "unknown config key" in capsys.readouterr().err


def test_missing_dataset_is_data_error(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "absent", "--out", tmp_path / "x") == 2
    assert "data error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval / predict
# ---------------------------------------------------------------------------


def test_eval_writes_report_files(pipeline, tmp_path, capsys):
    out = tmp_path / "report"
    assert run(
        "eval", "--checkpoint", pipeline["rundir"] / "checkpoint_final.prnc",
        "--data", pipeline["dataset"], "--out", out,
    ) == 0
    stdout = capsys.readouterr().out
    assert "mean foreground DSC:" in stdout
    text = (out / "report.txt").read_text()
    assert "aggregation: dataset" in text
    tsv = dict(
        line.split("\t", 1) for line in (out / "report.tsv").read_text().splitlines()
    )
    assert 0.0 <= float(tsv["mean_foreground"]) <= 1.0
    assert tsv["aggregation"] == "dataset"
    assert any(k.startswith("dsc.") for k in tsv)
    assert (out / "dsc_per_class.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_eval_per_image_aggregation(pipeline, capsys):
    assert run(
        "eval", "--checkpoint", pipeline["rundir"] / "checkpoint_final.prnc",
        "--data", pipeline["dataset"], "--per-image",
    ) == 0
    assert "aggregation: image" in capsys.readouterr().out


def test_eval_missing_checkpoint_is_data_error(pipeline, tmp_path, capsys):
    assert run("eval", "--checkpoint", tmp_path / "nope.prnc",
               "--data", pipeline["dataset"]) == 2
    assert "data error" in capsys.readouterr().err


def test_predict_writes_mask_and_overlay(pipeline, tmp_path):
    images = sorted((pipeline["dataset"] / "images").glob("*.png"))
    out = tmp_path / "pred"
    assert run(
        "predict", "--checkpoint", pipeline["rundir"] / "checkpoint_final.prnc",
        "--image", images[0], "--out", out,
    ) == 0
    with Image.open(out / "mask.png") as im:
        assert im.mode == "L"
        assert im.size == (16, 16)
        classes = np.unique(np.asarray(im))
    assert classes.max() < 10
    with Image.open(out / "overlay.png") as im:
        assert im.mode == "RGB"
        assert im.size == (16, 16)


def test_predict_resizes_foreign_extent(pipeline, tmp_path):
    # model was trained at 16x16; feed a 24x24 image and expect 24x24 outputs
    src = tmp_path / "big.png"
    rng = np.random.default_rng(3)
    Image.fromarray(rng.integers(0, 255, size=(24, 24, 3), dtype=np.uint8)).save(src)
    out = tmp_path / "pred"
    assert run(
        "predict", "--checkpoint", pipeline["rundir"] / "checkpoint_final.prnc",
        "--image", src, "--out", out,
    ) == 0
    with Image.open(out / "mask.png") as im:
        assert im.size == (24, 24)


# ---------------------------------------------------------------------------
# gradcheck + process entry
# ---------------------------------------------------------------------------


def test_gradcheck_command_reports_pass(monkeypatch, capsys):
    results = [CheckResult("conv2d_k3", {"w": 1e-5}, 1e-2)]
    monkeypatch.setattr("prnet.gradcheck.run_suite", lambda **kw: (results, True))
    assert run("gradcheck", "--size", 8) == 0
    out = capsys.readouterr().out
    assert "PASS conv2d_k3" in out
    assert "all passed" in out


def test_gradcheck_command_exit_3_on_failure(monkeypatch, capsys):
    results = [CheckResult("conv2d_k3", {"w": 0.5}, 1e-2)]
    monkeypatch.setattr("prnet.gradcheck.run_suite", lambda **kw: (results, False))
    assert run("gradcheck") == 3
    assert "FAIL conv2d_k3" in capsys.readouterr().out


def test_module_entry_point_reports_version():
    proc = subprocess.run(
        [sys.executable, "-m", "prnet", "--version"],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0
    assert proc.stdout.startswith("prnet ")
