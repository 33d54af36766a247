import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from focus import io
from focus.cli import main
from focus.geometry import TriMesh

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="module")
def scene3(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["synth", "--views", "3", "--seed", "42", "--out", str(root)]) == 0
    return root


def test_smoke_pipeline(tmp_path):
    scene = tmp_path / "scene"
    assert main(["synth", "--views", "10", "--seed", "42", "--out", str(scene)]) == 0
    assert main(["sfm", "--scene", str(scene), "--out", str(tmp_path / "cloud.ply"), "--samples", "1000"]) == 0
    assert main(["eval", "--pred", str(tmp_path / "cloud.ply"), "--gt", str(scene / "gt.ply"),
                 "--out", str(tmp_path / "report.json")]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["kind"] == "cloud"
    assert report["chamfer"]["mean"] < 0.5
    assert {"mean", "median", "rmse"} <= set(report["normal"])


def test_optim_command_writes_params(scene3, tmp_path):
    out = tmp_path / "fit.ply"
    rc = main(["optim", "--scene", str(scene3), "--out", str(out), "--samples", "50", "--epochs", "3,2"])
    assert rc == 0
    params = json.loads((tmp_path / "fit.params.json").read_text())
    assert set(params) == {"r", "s", "t", "z_s", "z_p"}
    assert isinstance(io.read_ply(out), TriMesh)


def test_unknown_flag_is_usage_error(capsys):
    assert main(["sfm", "--scene", "x", "--out", "y.ply", "--bogus"]) == 2
    assert main([]) == 2
    assert main(["sfm", "--scene", "x", "--out", "y.ply", "--threshold", "-1"]) == 2


def test_missing_scene_is_domain_error(tmp_path, capsys):
    assert main(["optim", "--scene", str(tmp_path / "nope"), "--out", str(tmp_path / "f.ply")]) == 1
    assert "optim" in capsys.readouterr().err
    assert main(["sfm", "--scene", str(tmp_path / "nope"), "--out", str(tmp_path / "c.ply")]) == 1


def test_format_error_exit_code(tmp_path, capsys):
    (tmp_path / "bad.ply").write_bytes(b"garbage")
    io.write_ply(tmp_path / "gt.ply", TriMesh(np.eye(3), np.array([[0, 1, 2]])))
    rc = main(["eval", "--pred", str(tmp_path / "bad.ply"), "--gt", str(tmp_path / "gt.ply"),
               "--out", str(tmp_path / "r.json")])
    assert rc == 2
    assert "format error" in capsys.readouterr().err


def test_empty_after_crop_is_domain_error(tmp_path):
    high = TriMesh(np.array([[0, 0, 200], [1, 0, 200], [0, 1, 200]], float), np.array([[0, 1, 2]]))
    io.write_ply(tmp_path / "high.ply", high)
    rc = main(["eval", "--pred", str(tmp_path / "high.ply"), "--gt", str(tmp_path / "high.ply"),
               "--out", str(tmp_path / "r.json")])
    assert rc == 1


def test_help_documents_flags():
    out = subprocess.run([sys.executable, "-m", "focus", "sfm", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for flag in ("--samples", "--threshold", "--no-subpixel", "--no-normal-aggregation", "--seed", "default"):
        assert flag in out.stdout
    top = subprocess.run([sys.executable, "-m", "focus", "--help"], capture_output=True, text=True)
    for cmd in ("synth", "sfm", "optim", "eval", "bench-views"):
        assert cmd in top.stdout


def test_poisson_mesher_missing_warns(scene3, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FOCUS_POISSON_CMD", "definitely-not-a-mesher-binary")
    rc = main(["sfm", "--scene", str(scene3), "--out", str(tmp_path / "c.ply"), "--samples", "300"])
    assert rc == 0
    assert "not found" in capsys.readouterr().err
    assert (tmp_path / "c.poisson.json").exists()


def dump_default_sfm_config(tmp_path) -> dict:
    path = tmp_path / "config.json"
    assert main(["sfm", "--scene", "scene", "--out", "cloud.ply", "--dry-run", "--dump-config", str(path)]) == 0
    return json.loads(path.read_text())


def test_config_dump_matches_golden(tmp_path):
    assert dump_default_sfm_config(tmp_path) == json.loads((GOLDEN / "sfm_default_config.json").read_text())


def test_config_dump_to_stdout(capsys):
    assert main(["optim", "--scene", "s", "--out", "f.ply", "--dry-run", "--dump-config", "-"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["optim"]["epochs"] == [500, 500]
    assert cfg["optim"]["lr"] == 0.001
    assert cfg["optim"]["samples_per_image"] == 3000
