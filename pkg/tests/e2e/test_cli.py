"""
End-to-end runs of the command-line interface: exit codes, sidecars and
the --json output, on scenes small enough for CI.
"""

import json
import os

import numpy as np
import pytest

from conftest import SCENES_DIR
from src.main import EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, main
from src.utils.image_io import ImageBuffer, read_image, write_image

BUILD_FLAGS = ["--max-res", "4", "--min-res", "2", "--vis-rays", "2", "--abv-rays", "1", "--no-cpca", "--quiet"]


def write_pfm_pair(tmp_path, offset=0.0):
    pixels = np.linspace(0.0, 1.0, 4 * 5 * 3).reshape(4, 5, 3)
    a, b = tmp_path / "a.pfm", tmp_path / "b.pfm"
    write_image(a, ImageBuffer(pixels))
    write_image(b, ImageBuffer(pixels + offset))
    return str(a), str(b)


def test_diff_identical_images(agglod_env, capsys):
    a, b = write_pfm_pair(agglod_env)
    assert main(["diff", a, b]) == EXIT_OK
    out = capsys.readouterr().out
    assert "RMSE 0" in out
    assert "PSNR inf dB" in out


def test_diff_json_and_threshold(agglod_env, capsys):
    a, b = write_pfm_pair(agglod_env, offset=0.25)
    assert main(["diff", a, b, "--json"]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["rmse"] == pytest.approx(0.25, abs=1e-6)
    assert main(["diff", a, b, "--max-rmse", "0.1"]) == EXIT_THRESHOLD
    assert "above --max-rmse" in capsys.readouterr().err
    print("PASS: diff honours --max-rmse")


def test_input_errors_exit_with_usage_code(agglod_env, capsys):
    a, _ = write_pfm_pair(agglod_env)
    assert main(["diff", a, str(agglod_env / "missing.pfm")]) == EXIT_USAGE
    assert main(["aggregate", "info", str(agglod_env / "missing.agg")]) == EXIT_USAGE
    bad = agglod_env / "bad.json"
    bad.write_text(json.dumps({"scene_version": 2, "meshes": []}))
    assert main(["aggregate", "build", str(bad), "--out", str(agglod_env / "x.agg")]) == EXIT_USAGE
    # settings outside their bounds
    scene = os.path.join(SCENES_DIR, "plane.json")
    assert main(["aggregate", "build", scene, "--out", str(agglod_env / "x.agg"), "--max-res", "6"]) == EXIT_USAGE
    assert capsys.readouterr().err.count("ERROR: ") >= 4


def test_unknown_command_is_rejected(agglod_env):
    with pytest.raises(SystemExit) as exc:
        main(["bake"])
    assert exc.value.code == 2


def test_build_render_and_compare(agglod_env, capsys):
    tables = str(agglod_env / "tables.abt")
    scene = os.path.join(SCENES_DIR, "plane.json")
    agg = str(agglod_env / "plane.agg")

    assert main(["tables", "fit", "--fast", "--out", tables, "--quiet"]) == EXIT_OK
    assert os.path.isfile(tables + ".json")

    assert main(["aggregate", "build", scene, "--out", agg] + BUILD_FLAGS) == EXIT_OK
    sidecar = json.loads(open(agg + ".json").read())
    assert sidecar["command"] == "aggregate build"
    assert sidecar["settings"]["max_resolution"] == 4
    assert sidecar["settings"]["seed"] == 7
    capsys.readouterr()

    assert main(["aggregate", "info", agg, "--json"]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert [lvl["resolution"] for lvl in info["levels"]] == [2, 4]
    assert info["tables"]["path"] == tables

    lod = str(agglod_env / "lod.pfm")
    ref = str(agglod_env / "ref.pfm")
    lights = os.path.join(SCENES_DIR, "lights_env.json")
    camera = os.path.join(SCENES_DIR, "camera_top.json")
    assert main(["render", "lod", agg, lights, camera, "--spp", "1", "--out", lod, "--quiet"]) == EXIT_OK
    assert main(["render", "ref", scene, camera, "--spp", "1", "--out", ref, "--quiet"]) == EXIT_OK
    assert read_image(lod).pixels.shape == (32, 32, 3)
    assert json.loads(open(lod + ".json").read())["settings"]["spp"] == 1

    capsys.readouterr()
    assert main(["diff", lod, ref, "--json"]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert np.isfinite(payload["rmse"])
    print(f"PASS: LOD vs reference RMSE {payload['rmse']:.4f}")


def test_validate_aiv_from_cli(agglod_env, capsys):
    scene = os.path.join(SCENES_DIR, "plane.json")
    agg = str(agglod_env / "plane.agg")
    assert main(["aggregate", "build", scene, "--out", agg] + BUILD_FLAGS) == EXIT_OK
    capsys.readouterr()

    mosaic = str(agglod_env / "aiv.png")
    code = main(["validate", "aiv", agg, "--voxel", "1,1,2", "--rays", "4", "--out", mosaic, "--json"])
    assert code == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["kind"] == "aiv"
    assert report["psnr"] == "inf"
    assert os.path.isfile(mosaic)

    # the voxel above the plane is empty
    assert main(["validate", "aiv", agg, "--voxel", "1,1,3", "--rays", "4"]) == EXIT_USAGE
    with pytest.raises(SystemExit):
        main(["validate", "aiv", agg, "--voxel", "1,1"])
