"""
Triangle scenes and the scene-document loader.

Scene, lights and camera files are JSON documents. They are parsed with
ruamel.yaml (JSON is a YAML subset, so parse errors carry line numbers)
and validated against the pydantic models in ``src.protocols.scene_types``.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Union

import numpy as np
import trimesh
from pydantic import BaseModel, ValidationError
from ruamel.yaml import YAML
from ruamel.yaml.error import YAMLError

from src.core.spherical import normalize
from src.protocols.scene_types import (
    CameraDocument,
    CheckerSlot,
    DirectionalLightDocument,
    EnvironmentLightDocument,
    LightsDocument,
    MaterialDocument,
    SceneDocument,
    TextureSlot,
)
from src.tracer.disney import DisneyParams
from src.tracer.lights import DirectionalLight, EnvironmentLight, LightSet, PointLight
from src.tracer.shapes import MeshData, generate
from src.utils.image_io import ImageFormatError, read_image
from src.utils.security import validate_path


class SceneSchemaError(Exception):
    """Raised when a scene, lights or camera document is malformed or inconsistent."""


# ---------------------------------------------------------------------------
# Material parameter sources
# ---------------------------------------------------------------------------


@dataclass
class ConstantSource:
    value: np.ndarray  # (C,)

    def lookup(self, uv: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.value, (len(uv), len(self.value)))


@dataclass
class ImageSource:
    """Image texture with wrap addressing; uv (0, 0) is the bottom-left corner."""

    pixels: np.ndarray  # (H, W, C)
    filter: str = "bilinear"

    def lookup(self, uv: np.ndarray) -> np.ndarray:
        h, w, _ = self.pixels.shape
        x = np.asarray(uv[:, 0]) * w
        y = (1.0 - np.asarray(uv[:, 1])) * h
        if self.filter == "nearest":
            return self.pixels[np.floor(y).astype(np.int64) % h, np.floor(x).astype(np.int64) % w]
        x = x - 0.5
        y = y - 0.5
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        fx = (x - x0)[:, None]
        fy = (y - y0)[:, None]
        c00 = self.pixels[y0 % h, x0 % w]
        c01 = self.pixels[y0 % h, (x0 + 1) % w]
        c10 = self.pixels[(y0 + 1) % h, x0 % w]
        c11 = self.pixels[(y0 + 1) % h, (x0 + 1) % w]
        return (c00 * (1 - fx) + c01 * fx) * (1 - fy) + (c10 * (1 - fx) + c11 * fx) * fy


@dataclass
class CheckerSource:
    even: np.ndarray
    odd: np.ndarray
    scale: float = 8.0

    def lookup(self, uv: np.ndarray) -> np.ndarray:
        cells = np.floor(np.asarray(uv) * self.scale).astype(np.int64)
        odd = ((cells[:, 0] + cells[:, 1]) % 2 == 1)[:, None]
        return np.where(odd, self.odd, self.even)


ParamSource = Union[ConstantSource, ImageSource, CheckerSource]


@dataclass
class Material:
    name: str
    basecolor: ParamSource
    roughness: ParamSource
    metallic: ParamSource
    specular: ParamSource

    @classmethod
    def constant(cls, name: str = "default", basecolor=(0.8, 0.8, 0.8), roughness=0.5, metallic=0.0, specular=0.5) -> "Material":
        return cls(
            name,
            ConstantSource(np.asarray(basecolor, dtype=np.float64).reshape(3)),
            ConstantSource(np.array([float(roughness)])),
            ConstantSource(np.array([float(metallic)])),
            ConstantSource(np.array([float(specular)])),
        )

    def params(self, uv: np.ndarray) -> DisneyParams:
        return DisneyParams(
            np.clip(self.basecolor.lookup(uv), 0.0, 1.0).astype(np.float64),
            np.clip(self.roughness.lookup(uv)[:, 0], 0.0, 1.0).astype(np.float64),
            np.clip(self.metallic.lookup(uv)[:, 0], 0.0, 1.0).astype(np.float64),
            np.clip(self.specular.lookup(uv)[:, 0], 0.0, 1.0).astype(np.float64),
        )


# ---------------------------------------------------------------------------
# Triangle scene
# ---------------------------------------------------------------------------


@dataclass
class TriangleScene:
    """
    Immutable triangle soup with per-vertex normals and uvs, one material id
    per triangle, and the scene lights.
    """

    vertices: np.ndarray  # (V, 3)
    normals: np.ndarray  # (V, 3)
    uvs: np.ndarray  # (V, 2)
    triangles: np.ndarray  # (T, 3)
    material_ids: np.ndarray  # (T,)
    materials: list
    lights: LightSet = field(default_factory=LightSet)
    scene_hash: str = ""
    source: Optional[Path] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.material_ids = np.asarray(self.material_ids, dtype=np.int64).reshape(-1)
        if len(self.triangles) != len(self.material_ids):
            raise ValueError("TriangleScene: one material id per triangle is required")
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("TriangleScene: vertex index out of range")
        if len(self.material_ids) and (self.material_ids.min() < 0 or self.material_ids.max() >= len(self.materials)):
            raise ValueError("TriangleScene: material id out of range")
        normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(normals) != len(self.vertices) or len(self.uvs) != len(self.vertices):
            raise ValueError("TriangleScene: per-vertex arrays disagree in length")
        length = np.linalg.norm(normals, axis=-1)
        if np.any(length < 1e-12):
            # zero normals fall back to the area-weighted face normals
            fallback = np.zeros_like(normals)
            np.add.at(fallback, self.triangles.ravel(), np.repeat(self._face_cross(), 3, axis=0))
            normals = np.where((length < 1e-12)[:, None], fallback, normals)
        self.normals = normalize(normals)

    def _face_cross(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    @classmethod
    def from_meshes(cls, meshes: list, materials: list, lights: Optional[LightSet] = None, **kwargs) -> "TriangleScene":
        """``meshes`` is a list of (MeshData, material index)."""
        merged = MeshData.concatenate([m for m, _ in meshes])
        material_ids = np.concatenate([np.full(len(m.faces), idx, dtype=np.int64) for m, idx in meshes]) if meshes else np.zeros(0, dtype=np.int64)
        return cls(merged.vertices, merged.normals, merged.uvs, merged.faces, material_ids, materials, lights or LightSet(), **kwargs)

    @classmethod
    def single(cls, mesh: MeshData, material: Optional[Material] = None, lights: Optional[LightSet] = None) -> "TriangleScene":
        return cls.from_meshes([(mesh, 0)], [material or Material.constant()], lights)

    @cached_property
    def triangle_positions(self) -> np.ndarray:
        return self.vertices[self.triangles]

    @cached_property
    def triangle_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._face_cross(), axis=-1)

    @cached_property
    def geometric_normals(self) -> np.ndarray:
        return normalize(self._face_cross())

    @property
    def total_area(self) -> float:
        return float(self.triangle_areas.sum())

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.triangles) == 0:
            return np.zeros(3), np.zeros(3)
        used = self.vertices[np.unique(self.triangles)]
        return used.min(axis=0), used.max(axis=0)

    def with_lights(self, lights: LightSet) -> "TriangleScene":
        return TriangleScene(
            self.vertices, self.normals, self.uvs, self.triangles, self.material_ids,
            self.materials, lights, self.scene_hash, self.source,
        )

    def interpolate(self, tri: np.ndarray, bary: np.ndarray):
        """(positions, shading normals, uvs) at barycentrics (b1, b2) of triangles ``tri``."""
        idx = self.triangles[tri]
        w = np.stack([1.0 - bary[:, 0] - bary[:, 1], bary[:, 0], bary[:, 1]], axis=-1)[:, :, None]
        positions = np.sum(self.vertices[idx] * w, axis=1)
        normals = normalize(np.sum(self.normals[idx] * w, axis=1))
        uvs = np.sum(self.uvs[idx] * w, axis=1)
        return positions, normals, uvs

    def material_params(self, tri: np.ndarray, uv: np.ndarray) -> DisneyParams:
        n = len(tri)
        out = DisneyParams(np.zeros((n, 3)), np.zeros(n), np.zeros(n), np.zeros(n))
        mids = self.material_ids[tri]
        for m in np.unique(mids):
            sel = mids == m
            p = self.materials[m].params(uv[sel])
            out.basecolor[sel] = p.basecolor
            out.roughness[sel] = p.roughness
            out.metallic[sel] = p.metallic
            out.specular[sel] = p.specular
        return out

    def sample_surface(self, count: int, rng) -> tuple[np.ndarray, np.ndarray]:
        """Area-uniform (triangle ids, barycentrics) over the whole scene."""
        cdf = np.cumsum(self.triangle_areas)
        if len(cdf) == 0 or cdf[-1] <= 0.0:
            raise ValueError("sample_surface: scene has no surface area")
        u = rng.random((count, 3))
        tri = np.minimum(np.searchsorted(cdf, u[:, 0] * cdf[-1], side="right"), len(cdf) - 1)
        return tri, uniform_barycentrics(u[:, 1:3])


def uniform_barycentrics(u: np.ndarray) -> np.ndarray:
    """Square to (b1, b2) uniformly distributed over the triangle."""
    s = np.sqrt(u[:, 0])
    return np.stack([s * (1.0 - u[:, 1]), s * u[:, 1]], axis=-1)


# ---------------------------------------------------------------------------
# Document loading
# ---------------------------------------------------------------------------


class SceneLoader:
    """
    Reads scene, lights and camera documents. Referenced files are resolved
    relative to the document and must stay inside its directory.
    """

    def __init__(self):
        self.yaml = YAML(typ="safe")

    def read_document(self, path: Union[str, Path], model: type[BaseModel]):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"File not found: {path}")
        text = path.read_text(encoding="utf-8")
        try:
            raw = self.yaml.load(text)
        except YAMLError as e:
            raise SceneSchemaError(f"{path}: cannot parse document: {e}")
        if not isinstance(raw, dict):
            raise SceneSchemaError(f"{path}: top level must be an object")
        if raw.get("scene_version", 1) != 1:
            raise SceneSchemaError(f"{path}: unsupported scene_version {raw.get('scene_version')!r} (expected 1)")
        try:
            return model.model_validate(raw)
        except ValidationError as e:
            raise SceneSchemaError(f"{path}: {e}")

    # --- scene ---------------------------------------------------------

    def load_scene(self, path: Union[str, Path]) -> TriangleScene:
        path = Path(path).absolute()
        doc = self.read_document(path, SceneDocument)
        root = path.parent
        hasher = hashlib.sha256(json.dumps(doc.model_dump(mode="json"), sort_keys=True).encode("utf-8"))

        materials = [self._material(m, root, hasher) for m in doc.materials]
        index = {m.name: i for i, m in enumerate(doc.materials)}
        meshes = []
        for mesh_doc in doc.meshes:
            if mesh_doc.path is not None:
                mesh_path = validate_path(mesh_doc.path, root)
                hasher.update(mesh_path.read_bytes())
                mesh = self._load_obj(mesh_path)
            else:
                try:
                    mesh = generate(mesh_doc.generator.kind, **mesh_doc.generator.params)
                except TypeError as e:
                    raise SceneSchemaError(f"{path}: bad parameters for generator '{mesh_doc.generator.kind}': {e}")
            t = mesh_doc.transform
            matrix = trimesh.transformations.compose_matrix(
                scale=np.broadcast_to(np.asarray(t.scale, dtype=np.float64), (3,)),
                angles=np.radians(t.rotate_deg),
                translate=t.translate,
            )
            meshes.append((mesh.transformed(matrix), index[mesh_doc.material]))

        lights = self._lights(doc.lights, root, hasher)
        scene = TriangleScene.from_meshes(meshes, materials, lights, scene_hash=hasher.hexdigest(), source=path)
        logging.info(f"Loaded scene {path.name}: {len(scene.triangles)} triangles, {len(materials)} materials, {len(lights)} lights")
        return scene

    def _load_obj(self, path: Path) -> MeshData:
        try:
            mesh = trimesh.load(path, force="mesh", process=False)
        except Exception as e:
            raise SceneSchemaError(f"{path}: cannot load mesh: {e}")
        return MeshData.from_trimesh(mesh)

    def _source(self, slot, root: Path, hasher, channels: int, color: bool) -> ParamSource:
        if isinstance(slot, TextureSlot):
            tex_path = validate_path(slot.texture, root)
            hasher.update(tex_path.read_bytes())
            try:
                pixels = read_image(tex_path, linearize=color).pixels.astype(np.float64)
            except ImageFormatError as e:
                raise SceneSchemaError(str(e))
            if channels == 1:
                pixels = pixels[:, :, slot.channel:slot.channel + 1]
            return ImageSource(pixels, slot.filter)
        if isinstance(slot, CheckerSlot):
            even, odd = (self._constant(v, channels) for v in slot.checker)
            return CheckerSource(even, odd, slot.scale)
        return ConstantSource(self._constant(slot, channels))

    @staticmethod
    def _constant(value, channels: int) -> np.ndarray:
        arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
        if channels == 3 and arr.size == 1:
            arr = np.repeat(arr, 3)
        if arr.size != channels:
            raise SceneSchemaError(f"expected {channels} component(s), got {arr.size}")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise SceneSchemaError(f"material parameter {arr.tolist()} outside [0, 1]")
        return arr

    def _material(self, doc: MaterialDocument, root: Path, hasher) -> Material:
        return Material(
            doc.name,
            self._source(doc.basecolor, root, hasher, 3, color=True),
            self._source(doc.roughness, root, hasher, 1, color=False),
            self._source(doc.metallic, root, hasher, 1, color=False),
            self._source(doc.specular, root, hasher, 1, color=False),
        )

    # --- lights and camera ----------------------------------------------

    def _lights(self, docs: list, root: Path, hasher=None) -> LightSet:
        lights = []
        for doc in docs:
            if isinstance(doc, EnvironmentLightDocument):
                scale = np.asarray(doc.radiance, dtype=np.float64)
                if doc.path is None:
                    lights.append(EnvironmentLight.constant(scale))
                    continue
                env_path = validate_path(doc.path, root)
                if hasher is not None:
                    hasher.update(env_path.read_bytes())
                try:
                    pixels = read_image(env_path, linearize=True).pixels.astype(np.float64)
                except ImageFormatError as e:
                    raise SceneSchemaError(str(e))
                lights.append(EnvironmentLight(pixels * scale))
            elif isinstance(doc, DirectionalLightDocument):
                if np.linalg.norm(doc.direction) <= 0.0:
                    raise SceneSchemaError("directional light direction must be non-zero")
                lights.append(DirectionalLight(np.asarray(doc.direction), np.asarray(doc.irradiance)))
            else:
                lights.append(PointLight(np.asarray(doc.position), np.asarray(doc.intensity)))
        return LightSet(lights)

    def load_lights(self, path: Union[str, Path]) -> LightSet:
        path = Path(path).absolute()
        doc = self.read_document(path, LightsDocument)
        return self._lights(doc.lights, path.parent)

    def load_camera(self, path: Union[str, Path]) -> CameraDocument:
        return self.read_document(path, CameraDocument)

    def load_scene_document(self, path: Union[str, Path]) -> SceneDocument:
        return self.read_document(path, SceneDocument)


def load_scene(path: Union[str, Path]) -> TriangleScene:
    return SceneLoader().load_scene(path)


def load_lights(path: Union[str, Path]) -> LightSet:
    return SceneLoader().load_lights(path)


def load_camera(path: Union[str, Path]) -> CameraDocument:
    return SceneLoader().load_camera(path)
