import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from advmesh.cli import main
from advmesh.config import ConfigError, load_config, parse_override
from advmesh.mesh import import_obj, load_state
from advmesh.scenes import load_kitti_bin

SMALL = {
    "dataset": {"synthetic": {"n": 2, "seed": 11, "spec": {"distractor_prob": 0.5}}},
    "pattern": {"azimuth_start": -30.0, "azimuth_end": 30.0, "azimuth_step": 0.5},
    "attack": {"epochs": 1, "step": 0.01, "level": 1},
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_attack_writes_parsable_artifacts(cfg_file, tmp_path, capsys):
    out = tmp_path / "a"
    assert run("attack", "--config", cfg_file, "--out", out, "--seed", 3) == 0
    for name in ("mesh.obj", "state.txt", "trace.log", "trace.json", "report.txt", "report.json",
                 "attack_config.json"):
        assert (out / name).is_file(), name
    mesh = import_obj((out / "mesh.obj").read_bytes())
    state = load_state((out / "state.txt").read_text())
    assert len(mesh.vertices) == 42 and np.allclose(mesh.vertices, state.local_vertices(), atol=1e-12)
    rep = json.loads((out / "report.json").read_text())
    assert 0 <= rep["map_3d"] <= 1
    snap = json.loads((out / "attack_config.json").read_text())
    assert snap["config"]["seed"] == 3 and snap["command"] == "attack" and snap["version"]
    assert len((out / "trace.log").read_text().splitlines()) == 2
    assert "asr_3d=" in capsys.readouterr().out


def test_same_seed_gives_identical_obj(cfg_file, tmp_path):
    for d in ("x", "y"):
        assert run("attack", "--config", cfg_file, "--out", tmp_path / d, "--seed", 5) == 0
    assert (tmp_path / "x" / "mesh.obj").read_bytes() == (tmp_path / "y" / "mesh.obj").read_bytes()


def test_black_box_without_surrogate_is_a_config_error(cfg_file, tmp_path, capsys):
    assert run("attack", "--config", cfg_file, "--out", tmp_path, "--mode", "black") == 2
    assert "surrogate" in capsys.readouterr().err


def test_black_box_run(cfg_file, tmp_path):
    out = tmp_path / "bb"
    code = run("attack", "--config", cfg_file, "--out", out, "--mode", "black", "--surrogate", "template",
               "--detector", f"bridge:{sys.executable} -m advmesh.detectors.stub template")
    assert code == 0
    assert "loss_after=" in (out / "trace.log").read_text()


def test_eval_of_undeformed_sphere(cfg_file, tmp_path):
    out = tmp_path / "e"
    assert run("attack", "--config", cfg_file, "--out", out, "--set", "attack.step=0.0") == 0
    assert run("eval", "--config", cfg_file, "--out", out, "--mesh", out / "mesh.obj") == 0
    rep = json.loads((out / "eval.json").read_text())
    assert rep["asr_vs_vanilla_3d"] == 0.0 and rep["asr_vs_vanilla_bev"] == 0.0
    assert rep["l2"] == 0.0
    # the state checkpoint gives the same report
    assert run("eval", "--config", cfg_file, "--out", tmp_path / "e2", "--mesh", out / "state.txt") == 0
    assert json.loads((tmp_path / "e2" / "eval.json").read_text()) == rep


def test_eval_rejects_empty_mesh(cfg_file, tmp_path, capsys):
    empty = tmp_path / "empty.obj"
    empty.write_text("")
    assert run("eval", "--config", cfg_file, "--out", tmp_path, "--mesh", empty) == 1
    assert "eval failed" in capsys.readouterr().err


def test_export_and_render(cfg_file, tmp_path):
    out = tmp_path / "r"
    assert run("attack", "--config", cfg_file, "--out", out) == 0
    assert run("export", "--config", cfg_file, "--out", tmp_path / "x", "--state", out / "state.txt") == 0
    assert (tmp_path / "x" / "mesh.obj").read_bytes() == (out / "mesh.obj").read_bytes()
    assert run("render", "--config", cfg_file, "--out", out, "--mesh", out / "mesh.obj", "--scene", 1) == 0
    pts = load_kitti_bin((out / "scene_0001.bin").read_bytes())
    assert len(pts) > 1000
    assert run("render", "--config", cfg_file, "--out", out, "--scene", 9) == 2


def test_sweep(cfg_file, tmp_path):
    out = tmp_path / "s"
    assert run("sweep", "--config", cfg_file, "--out", out, "--set", "sweep.level=[0, 1]") == 0
    rows = json.loads((out / "ablation.json").read_text())
    assert [r["level"] for r in rows] == [0, 1]
    lines = (out / "ablation.txt").read_text().splitlines()
    assert lines[0].startswith("level\tmap_3d") and len(lines) == 3
    assert run("sweep", "--config", cfg_file, "--out", out) == 2


def test_config_errors(tmp_path, capsys):
    assert run("attack", "--out", tmp_path, "--set", "bogus=1") == 2
    assert "bogus" in capsys.readouterr().err
    assert run("attack", "--out", tmp_path, "--detector", "pillar") == 2
    assert run("attack", "--out", tmp_path, "--detector", "pillar:/no/such.json") == 2
    assert run("attack", "--out", tmp_path, "--set", "attack.optimizer=sgd") == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("- a list\n")
    assert run("attack", "--config", bad, "--out", tmp_path) == 2
    with pytest.raises(ConfigError):
        parse_override("no_equals_sign")
    assert load_config(None, ["attack.epochs=3"])["attack"]["epochs"] == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "advmesh", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("attack", "eval", "sweep", "render", "export", "train"):
        assert cmd in proc.stdout
