"""
Shared fixtures: small scenes, a coarse table set and a tiny aggregate.
This file is automatically loaded by pytest.
"""

import json
import os
import sys
from unittest.mock import patch

import numpy as np
import pytest

# Ensure source code is accessible
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.aggregate.builder import build_aggregate  # noqa: E402
from src.core.tables import build_tables  # noqa: E402
from src.tracer import shapes  # noqa: E402
from src.tracer.lights import EnvironmentLight, LightSet  # noqa: E402
from src.tracer.scene import Material, TriangleScene  # noqa: E402
from src.utils.config import AggregateSettings, TableFitSettings  # noqa: E402

SCENES_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "scenes"))


@pytest.fixture(scope="session")
def fast_tables():
    """Coarse M1-M5 tables; the same fitting code paths as the full preset."""
    return build_tables(TableFitSettings.fast(workers=1))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def grey_material():
    return Material.constant("grey", basecolor=(0.5, 0.5, 0.5), roughness=1.0, metallic=0.0, specular=0.0)


@pytest.fixture
def plane_scene(grey_material):
    """2x2 plane at z = 0 facing +z under a white environment."""
    return TriangleScene.single(shapes.plane(2.0, 4), grey_material, LightSet([EnvironmentLight.constant()]))


@pytest.fixture
def agglod_env(tmp_path):
    """Points the AGGLOD_* variables at a scratch directory."""
    with patch.dict(
        os.environ,
        {
            "AGGLOD_SEED": "7",
            "AGGLOD_WORKERS": "1",
            "AGGLOD_TABLES": str(tmp_path / "tables.abt"),
            "AGGLOD_LOG_LEVEL": "WARNING",
        },
    ):
        yield tmp_path


@pytest.fixture
def write_doc(tmp_path):
    """Writes a JSON document into tmp_path and returns its path."""

    def _write(name: str, doc: dict):
        path = tmp_path / name
        path.write_text(json.dumps(doc))
        return path

    return _write


def small_settings(**overrides) -> AggregateSettings:
    values = dict(
        max_resolution=8,
        min_resolution=2,
        vis_rays=4,
        splat_points=4,
        cpca=False,
        abv_rays_per_texel=1,
        seed=3,
        workers=1,
    )
    values.update(overrides)
    return AggregateSettings(**values)


@pytest.fixture(scope="session")
def small_plane_aggregate():
    """(scene, aggregate) for a 2x2 plane at 2^3..8^3."""
    material = Material.constant("grey", basecolor=(0.5, 0.5, 0.5), roughness=1.0, metallic=0.0, specular=0.0)
    scene = TriangleScene.single(shapes.plane(2.0, 4), material, LightSet([EnvironmentLight.constant()]))
    return scene, build_aggregate(scene, small_settings())
