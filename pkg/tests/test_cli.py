"""Command line contract: summaries on stdout, exit codes, artifacts."""

import csv
import subprocess
import sys

import pytest
import torch

from flowlab.cli import main
from flowlab.core import read_image, write_flo
from flowlab.models import TEACHER_KIND, build_model, save_checkpoint
from flowlab.synth import SceneDataset

torch.set_num_threads(1)

TINY_TEACHER = {"channels": [4, 6, 6], "hidden": 6}


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("clidata")
    code = main([
        "gen", "--out", str(root / "d"), "--pairs", "3", "--seed", "17",
        "--height", "32", "--width", "40",
    ])
    assert code == 0
    return root / "d"


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    model = build_model(TEACHER_KIND, seed=2, hyper=dict(TINY_TEACHER))
    save_checkpoint(model, path, {"stage": 1})
    return path


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def test_gen_smoke_and_determinism(tmp_path, capsys):
    code, out, _ = run_cli(
        capsys, "gen", "--out", str(tmp_path / "a"), "--pairs", "2", "--seed", "3",
        "--height", "32", "--width", "40",
    )
    assert code == 0
    assert "pairs=2" in out
    code, _, _ = run_cli(
        capsys, "gen", "--out", str(tmp_path / "b"), "--pairs", "2", "--seed", "3",
        "--height", "32", "--width", "40",
    )
    assert code == 0
    for name in ("0000_img1.ppm", "0001_flow_f.flo"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    code, _, _ = run_cli(
        capsys, "gen", "--out", str(tmp_path / "c"), "--pairs", "2", "--seed", "4",
        "--height", "32", "--width", "40",
    )
    assert (tmp_path / "a" / "0000_img1.ppm").read_bytes() != (
        tmp_path / "c" / "0000_img1.ppm"
    ).read_bytes()


def test_gen_no_gt_writes_frames_only(tmp_path, capsys):
    code, _, _ = run_cli(
        capsys, "gen", "--out", str(tmp_path / "u"), "--pairs", "2", "--seed", "3",
        "--height", "32", "--width", "40", "--no-gt",
    )
    assert code == 0
    assert (tmp_path / "u" / "0000_img1.ppm").exists()
    assert not (tmp_path / "u" / "0000_flow_f.flo").exists()


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def test_eval_oracle_flows_score_zero(corpus, tmp_path, capsys):
    ds = SceneDataset(corpus)
    flo = tmp_path / "flows"
    flo.mkdir()
    for i in range(len(ds)):
        write_flo(flo / f"{i:04d}.flo", torch.as_tensor(ds.load_gt(i)[0].data))
    report = tmp_path / "report.csv"
    code, out, _ = run_cli(
        capsys, "eval", "--flo-dir", str(flo), "--data", str(corpus),
        "--report", str(report),
    )
    assert code == 0
    assert "epe=0.000000" in out
    rows = list(csv.reader(report.open()))
    assert rows[0] == ["pair", "epe", "fl_all"]
    assert len(rows) == 1 + len(ds) + 1  # header, pairs, mean
    assert rows[-1][0] == "mean"
    # aggregate equals the mean of the per-pair rows
    per_pair = [float(r[1]) for r in rows[1:-1]]
    assert abs(sum(per_pair) / len(per_pair) - float(rows[-1][1])) < 1e-12


def test_eval_model_checkpoint(corpus, tiny_ckpt, capsys):
    code, out, _ = run_cli(
        capsys, "eval", "--model", str(tiny_ckpt), "--data", str(corpus)
    )
    assert code == 0
    assert out.startswith("epe=")
    assert "pairs=3" in out


def test_eval_missing_prediction_is_io_error(corpus, tmp_path, capsys):
    empty = tmp_path / "none"
    empty.mkdir()
    code, _, err = run_cli(
        capsys, "eval", "--flo-dir", str(empty), "--data", str(corpus)
    )
    assert code == 3
    assert "missing prediction" in err


def test_eval_unlabeled_data_is_io_error(tmp_path, capsys, corpus):
    code, _, _ = run_cli(
        capsys, "gen", "--out", str(tmp_path / "u"), "--pairs", "2", "--seed", "3",
        "--height", "32", "--width", "40", "--no-gt",
    )
    code, _, err = run_cli(
        capsys, "eval", "--flo-dir", str(tmp_path), "--data", str(tmp_path / "u")
    )
    assert code == 3
    assert "no ground truth" in err


# ---------------------------------------------------------------------------
# calibrate / sparsify
# ---------------------------------------------------------------------------


def test_calibrate_prints_tau(corpus, tiny_ckpt, capsys):
    code, out, _ = run_cli(
        capsys, "calibrate", "--model", str(tiny_ckpt), "--data", str(corpus),
        "--rr", "0.2",
    )
    assert code == 0
    assert out.startswith("tau=")
    removed = float(out.split("removed=")[1].split()[0])
    assert abs(removed - 0.2) < 0.02


def test_calibrate_rr_zero_removes_nothing(corpus, tiny_ckpt, capsys):
    code, out, _ = run_cli(
        capsys, "calibrate", "--model", str(tiny_ckpt), "--data", str(corpus),
        "--rr", "0",
    )
    assert code == 0
    removed = float(out.split("removed=")[1].split()[0])
    assert removed == 0.0


def test_sparsify_writes_monotone_retained(corpus, tiny_ckpt, tmp_path, capsys):
    out_csv = tmp_path / "curve.csv"
    code, out, _ = run_cli(
        capsys, "sparsify", "--model", str(tiny_ckpt), "--data", str(corpus),
        "--out", str(out_csv), "--grid", "0,0.2,0.4",
    )
    assert code == 0
    rows = list(csv.reader(out_csv.open()))
    assert rows[0] == ["rr", "epe", "retained"]
    retained = [float(r[2]) for r in rows[1:]]
    assert retained == sorted(retained, reverse=True)
    assert len(rows) == 4


def test_sparsify_single_row_grid(corpus, tiny_ckpt, tmp_path, capsys):
    out_csv = tmp_path / "one.csv"
    code, _, _ = run_cli(
        capsys, "sparsify", "--model", str(tiny_ckpt), "--data", str(corpus),
        "--out", str(out_csv), "--grid", "0",
    )
    assert code == 0
    rows = list(csv.reader(out_csv.open()))
    assert len(rows) == 2
    assert float(rows[1][2]) == 1.0


# ---------------------------------------------------------------------------
# viz
# ---------------------------------------------------------------------------


def test_viz_zero_flow_renders_white(tmp_path, capsys):
    flo = tmp_path / "z.flo"
    write_flo(flo, torch.zeros(2, 8, 8))
    out = tmp_path / "z.ppm"
    code, _, _ = run_cli(capsys, "viz", "--flow", str(flo), "--out", str(out))
    assert code == 0
    img = read_image(out)
    assert torch.equal(img.data, torch.ones_like(img.data))


def test_viz_bad_file_is_io_error(tmp_path, capsys):
    bad = tmp_path / "bad.flo"
    bad.write_bytes(b"not a flow file")
    code, _, err = run_cli(capsys, "viz", "--flow", str(bad), "--out", str(tmp_path / "x.ppm"))
    assert code == 3


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_stage2_without_teacher_is_usage_error(corpus, tmp_path, capsys):
    code, _, err = run_cli(
        capsys, "train", "--stage", "2", "--data", str(corpus),
        "--ckpt-out", str(tmp_path / "s.ckpt"),
    )
    assert code == 2
    assert "teacher" in err


def test_train_stage3_needs_two_checkpoints(corpus, tiny_ckpt, tmp_path, capsys):
    code, _, err = run_cli(
        capsys, "train", "--stage", "3", "--data", str(corpus),
        "--ckpt-in", str(tiny_ckpt),
        "--ckpt-out", str(tmp_path / "t.ckpt"),
    )
    assert code == 2


def test_train_unknown_config_key_is_usage_error(corpus, tmp_path, capsys):
    code, _, err = run_cli(
        capsys, "train", "--stage", "1", "--data", str(corpus),
        "--ckpt-out", str(tmp_path / "t.ckpt"),
        "--set", "stage1.bogus=1",
    )
    assert code == 2
    assert "valid keys" in err


def test_train_stage1_smoke(corpus, tmp_path, capsys):
    code, out, _ = run_cli(
        capsys, "train", "--stage", "1", "--data", str(corpus),
        "--ckpt-out", str(tmp_path / "t1.ckpt"),
        "--set", "stage1.iterations=2", "--set", "stage1.batch_size=2",
        "--val", str(corpus), "--strict",
    )
    assert code == 0
    assert "val_epe=" in out
    assert (tmp_path / "t1.ckpt").exists()
    assert (tmp_path / "manifest.csv").exists()
    assert (tmp_path / "summary.txt").exists()


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def test_gradcheck_sup_passes(capsys):
    code, out, _ = run_cli(capsys, "gradcheck", "--which", "sup", "--coords", "2")
    assert code == 0
    assert "ok=True" in out


def test_gradcheck_fault_injection_fails(capsys):
    code, out, _ = run_cli(
        capsys, "gradcheck", "--which", "sup", "--coords", "2",
        "--inject-gradient-fault",
    )
    assert code == 1
    assert "ok=False" in out


def test_gradcheck_unknown_objective_is_usage_error(capsys):
    code, _, _ = run_cli(capsys, "gradcheck", "--which", "nope")
    assert code == 2


# ---------------------------------------------------------------------------
# parser plumbing
# ---------------------------------------------------------------------------


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert main(["train", "--help"]) == 0


def test_unknown_flag_is_usage_error(capsys):
    assert main(["gen", "--out", "/tmp/x", "--pairs", "1", "--frobnicate"]) == 2


def test_missing_subcommand_is_usage_error(capsys):
    assert main([]) == 2


def test_console_script_entrypoint():
    proc = subprocess.run(
        [sys.executable, "-m", "flowlab.cli", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "gradcheck" in proc.stdout
