import subprocess
import sys

import numpy as np
import pytest

from corrsfm import io as fio
from corrsfm.cli import EXIT_ILL_CONDITIONED, EXIT_IO, EXIT_OK, EXIT_USAGE, main


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(["synth", "--seed", "3", "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def solved(scene, tmp_path_factory):
    out = tmp_path_factory.mktemp("solved")
    code = main(["solve", "--target", str(scene / "target.pgm"), "--source", str(scene / "source.pgm"),
                 "--intrinsics", str(scene / "intrinsics.txt"), "--out", str(out)])
    assert code == EXIT_OK
    return out


def test_synth_outputs(scene):
    for name in ("target.pgm", "source.pgm", "depth_gt.pfm", "pose_gt.txt", "intrinsics.txt", "verify.txt", "config.txt"):
        assert (scene / name).is_file()
    cfg = fio.load_config(scene / "config.txt")
    assert cfg.scene.seed == 3
    report = dict(line.split(" = ") for line in (scene / "verify.txt").read_text().splitlines())
    assert float(report["mean_error"]) < 2 / 255


def test_synth_with_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("scene.seed = 11\nscene.height = 64\nscene.width = 64\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) == EXIT_OK
    assert fio.read_image(tmp_path / "s" / "target.pgm").shape == (64, 64)


def test_solve_outputs(solved):
    depth = fio.read_pfm(solved / "depth.pfm")
    assert depth.shape == (96, 128) and depth.valid.mean() > 0.5
    assert fio.read_pose(solved / "pose.txt").is_valid(1e-9)
    lines = (solved / "diagnostics.log").read_text().splitlines()
    assert len(lines) == 9 and lines[-1].startswith("depth_unconstrained=")
    lls = [float(line.split("ll=")[1].split()[0]) for line in lines[:-1]]
    assert all(b >= a for a, b in zip(lls, lls[1:]))


def test_eval_identity(scene, capsys):
    gt = str(scene / "depth_gt.pfm")
    pose = str(scene / "pose_gt.txt")
    assert main(["eval", "--pred-depth", gt, "--gt-depth", gt, "--pred-pose", pose, "--gt-pose", pose]) == EXIT_OK
    rows = dict(line.split() for line in capsys.readouterr().out.splitlines()[1:])
    for k in ("AbsRel", "SqRel", "RMSE", "RMSE_log", "L1-inv", "Sc-inv", "L1-rel", "Tran"):
        assert float(rows[k]) == 0.0
    assert float(rows["Rot"]) < 1e-6
    assert rows["d1"] == rows["d2"] == rows["d3"] == "1"


def test_eval_byte_stable_and_csv(scene, solved, tmp_path, capsys):
    args = ["eval", "--pred-depth", str(solved / "depth.pfm"), "--gt-depth", str(scene / "depth_gt.pfm"),
            "--pred-pose", str(solved / "pose.txt"), "--gt-pose", str(scene / "pose_gt.txt"), "--align-scale"]
    assert main(args + ["--csv", str(tmp_path / "m.csv")]) == EXIT_OK
    first = capsys.readouterr().out
    assert main(args) == EXIT_OK
    assert capsys.readouterr().out == first
    header, values = (tmp_path / "m.csv").read_text().splitlines()
    assert header.split(",")[:2] == ["AbsRel", "SqRel"] and len(values.split(",")) == 12


@pytest.mark.xfail(strict=True, reason="solver does not reach the 5% AbsRel level on synthetic pairs (see decisions log)")
def test_end_to_end_absrel_below_threshold(scene, solved):
    from corrsfm.losses import depth_metrics

    m = depth_metrics(fio.read_pfm(solved / "depth.pfm"), fio.read_pfm(scene / "depth_gt.pfm"), align=True)
    assert m["AbsRel"] < 0.05


def test_inspect_corr_self_peak(scene, tmp_path):
    target = str(scene / "target.pgm")
    out = tmp_path / "heat.pfm"
    assert main(["inspect-corr", "--target", target, "--source", target, "--at", "10,7", "--out", str(out)]) == EXIT_OK
    heat = fio.read_pfm_array(out)
    assert heat.shape == (24, 32)
    assert np.unravel_index(np.argmax(heat), heat.shape) == (7, 10)


def test_exit_codes(scene, tmp_path, capsys):
    target = str(scene / "target.pgm")
    K = str(scene / "intrinsics.txt")
    assert main(["solve", "--target", "missing.pgm", "--source", target, "--intrinsics", K, "--out", str(tmp_path)]) == EXIT_USAGE
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P2\n1 1\n255\n0\n")
    assert main(["solve", "--target", str(bad), "--source", target, "--intrinsics", K, "--out", str(tmp_path)]) == EXIT_IO
    flat = tmp_path / "flat.pgm"
    fio.write_image(flat, np.full((96, 128), 0.5))
    assert main(["solve", "--target", str(flat), "--source", str(flat), "--intrinsics", K, "--out", str(tmp_path)]) == EXIT_ILL_CONDITIONED
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("solver.nope = 1\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_IO
    assert main(["inspect-corr", "--target", target, "--source", target, "--at", "99,0", "--out", str(tmp_path / "h.pfm")]) == EXIT_USAGE
    assert main(["eval", "--pred-depth", target, "--gt-depth", target, "--pred-pose", K]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["solve", "--target", target])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE
    capsys.readouterr()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "corrsfm", "eval", "--pred-depth", str(tmp_path / "x.pfm"),
                           "--gt-depth", str(tmp_path / "x.pfm")], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE and "no such file" in proc.stderr
