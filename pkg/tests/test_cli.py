import json
import subprocess
import sys

import pytest

from pmdkit.cli import build_parser, main, overrides_from_args
from pmdkit.fileio import read_image

SCENE = {"surface": {"kind": "sinusoid", "amp": 0.1, "period": 20.0},
         "width": 96, "height": 96, "focal_px": 110.0, "defaults": {"scale": "geometric"}}


@pytest.fixture
def scene_file(tmp_path):
    p = tmp_path / "scene.json"
    p.write_text(json.dumps(SCENE))
    return p


def test_simulate_then_single_view(tmp_path, scene_file, capsys):
    assert main(["simulate", "--scene", str(scene_file), "--out", str(tmp_path / "b")]) == 0
    manifest = tmp_path / "b" / "manifest.json"
    assert manifest.is_file()
    capsys.readouterr()
    assert main(["single-view", "--manifest", str(manifest), "--out", str(tmp_path / "o"),
                 "--formats", "png16,pfm", "--debug-intermediates"]) == 0
    out = capsys.readouterr().out
    assert "normals.png" in out and "phase_x.pfm" in out
    assert not (tmp_path / "o" / "preview.png").exists()
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["scale"][0] != 1.0  # manifest default applied


def test_cli_flag_beats_manifest(tmp_path, scene_file):
    main(["simulate", "--scene", str(scene_file), "--out", str(tmp_path / "b")])
    main(["single-view", "--manifest", str(tmp_path / "b" / "manifest.json"), "--out", str(tmp_path / "o"),
          "--scale", "none", "--hp-sigma", "6"])
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["scale"] == [1.0, 1.0] and summary["hp_sigma"] == 6.0


def test_frequency_override(tmp_path, scene_file):
    assert main(["simulate", "--scene", str(scene_file), "--out", str(tmp_path / "b"), "--frequency", "2"]) == 0
    m = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert m["frequency"] == 2 and "reference_fringes" in m["views"][0]
    assert main(["single-view", "--manifest", str(tmp_path / "b" / "manifest.json"),
                 "--out", str(tmp_path / "o"), "--frequency", "2"]) == 0


def test_errors_return_nonzero(tmp_path, capsys):
    assert main(["single-view", "--manifest", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["single-view", "--manifest", "x", "--out", "y", "--scale", "bogus"])


def test_patterns_export(tmp_path):
    assert main(["patterns", "export", "--out", str(tmp_path), "--width", "64", "--height", "32",
                 "--bits", "16"]) == 0
    files = sorted(tmp_path.glob("*.png"))
    assert len(files) == 8
    img = read_image(tmp_path / "pattern_horizontal_1_1.png")
    assert img.shape == (32, 64) and img[0, 0] == 1.0


def test_overrides_from_args():
    args = build_parser().parse_args(["single-view", "--manifest", "m", "--out", "o", "--seed", "4"])
    o = overrides_from_args(args)
    assert o["seed"] == 4 and o["hp_sigma"] is None and o["debug_intermediates"] is None


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "pmdkit.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "single-view" in r.stdout
