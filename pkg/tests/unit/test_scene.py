"""
Scene, lights and camera documents: parsing, validation and path safety.
"""

import os

import numpy as np
import pytest

from conftest import SCENES_DIR
from src.tracer.lights import DirectionalLight, EnvironmentLight
from src.tracer.scene import CheckerSource, SceneSchemaError, load_camera, load_lights, load_scene
from src.utils.security import SecurityError


def plane_doc(**overrides):
    doc = {
        "scene_version": 1,
        "materials": [{"name": "grey", "basecolor": [0.5, 0.5, 0.5], "roughness": 0.8}],
        "meshes": [{"generator": {"kind": "plane", "params": {"size": 1.0, "divisions": 2}}, "material": "grey"}],
        "lights": [{"type": "environment"}],
    }
    doc.update(overrides)
    return doc


def test_bundled_plane_scene():
    scene = load_scene(os.path.join(SCENES_DIR, "plane.json"))
    assert len(scene.triangles) == 2 * 8 * 8
    assert scene.total_area == pytest.approx(4.0)
    assert isinstance(scene.lights.environment, EnvironmentLight)
    assert len(scene.scene_hash) == 64
    assert load_scene(os.path.join(SCENES_DIR, "plane.json")).scene_hash == scene.scene_hash
    print("PASS: bundled plane scene loads")


def test_scene_hash_follows_content(write_doc):
    a = load_scene(write_doc("a.json", plane_doc()))
    b = load_scene(write_doc("b.json", plane_doc(materials=[{"name": "grey", "basecolor": [0.6, 0.5, 0.5], "roughness": 0.8}])))
    assert a.scene_hash != b.scene_hash


def test_transform_and_checker(write_doc):
    doc = plane_doc(
        materials=[{"name": "grey", "basecolor": {"checker": [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], "scale": 2.0}}],
        meshes=[{
            "generator": {"kind": "plane", "params": {"size": 1.0}},
            "material": "grey",
            "transform": {"translate": [0.0, 0.0, 2.0], "scale": 3.0},
        }],
    )
    scene = load_scene(write_doc("checker.json", doc))
    np.testing.assert_allclose(scene.vertices[:, 2], 2.0)
    assert scene.total_area == pytest.approx(9.0)
    assert isinstance(scene.materials[0].basecolor, CheckerSource)
    params = scene.material_params(np.array([0, 0]), np.array([[0.1, 0.1], [0.6, 0.1]]))
    np.testing.assert_allclose(params.basecolor, [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def test_missing_document():
    with pytest.raises(FileNotFoundError):
        load_scene("/nonexistent/scene.json")


def test_schema_errors(write_doc):
    with pytest.raises(SceneSchemaError):
        load_scene(write_doc("v2.json", plane_doc(scene_version=2)))
    with pytest.raises(SceneSchemaError):
        load_scene(write_doc("ref.json", plane_doc(meshes=[{"generator": {"kind": "plane"}, "material": "gold"}])))
    with pytest.raises(SceneSchemaError):
        load_scene(write_doc("range.json", plane_doc(materials=[{"name": "grey", "roughness": 1.5}])))
    with pytest.raises(SceneSchemaError):
        load_scene(write_doc("both.json", plane_doc(meshes=[{"path": "a.obj", "generator": {"kind": "plane"}, "material": "grey"}])))
    with pytest.raises(SceneSchemaError):
        load_scene(write_doc("params.json", plane_doc(meshes=[{"generator": {"kind": "plane", "params": {"radius": 1.0}}, "material": "grey"}])))
    with pytest.raises(SceneSchemaError):
        load_scene(write_doc("envs.json", plane_doc(lights=[{"type": "environment"}, {"type": "environment"}])))


def test_unparseable_document(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"scene_version": 1, "materials": [')
    with pytest.raises(SceneSchemaError):
        load_scene(path)


def test_mesh_path_must_stay_inside_scene_dir(write_doc):
    doc = plane_doc(meshes=[{"path": "../outside.obj", "material": "grey"}])
    with pytest.raises(SecurityError):
        load_scene(write_doc("escape.json", doc))


def test_lights_and_camera_documents():
    lights = load_lights(os.path.join(SCENES_DIR, "lights_sun.json"))
    assert len(lights) == 2
    assert isinstance(lights.lights[1], DirectionalLight)
    np.testing.assert_allclose(np.linalg.norm(lights.lights[1].direction), 1.0)
    camera = load_camera(os.path.join(SCENES_DIR, "camera.json"))
    assert (camera.width, camera.height) == (64, 64)
    assert camera.fov_deg == pytest.approx(35.0)


def test_zero_directional_light_rejected(write_doc):
    doc = {"scene_version": 1, "lights": [{"type": "directional", "direction": [0, 0, 0], "irradiance": [1, 1, 1]}]}
    with pytest.raises(SceneSchemaError):
        load_lights(write_doc("zero.json", doc))
