from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, model_validator

Vec3 = Tuple[float, float, float]
ScalarOrColor = Union[float, Vec3]


class TextureSlot(BaseModel):
    """
    A material parameter read from an image file (PFM or PNG).
    """

    texture: str = Field(..., description="Image path, relative to the scene document")
    filter: Literal["bilinear", "nearest"] = Field("bilinear", description="Texel reconstruction filter")
    channel: int = Field(0, ge=0, le=2, description="Channel used when the slot is scalar")


class CheckerSlot(BaseModel):
    """
    A procedural two-value checkerboard in uv space.
    """

    checker: Tuple[ScalarOrColor, ScalarOrColor] = Field(..., description="Values of the even and odd squares")
    scale: float = Field(8.0, gt=0.0, description="Squares per unit of uv")


ParamSlot = Union[float, Vec3, TextureSlot, CheckerSlot]


class MaterialDocument(BaseModel):
    """
    Simplified Disney material: every parameter is a constant, a texture or a checker.
    """

    name: str = Field(..., description="Name referenced by meshes")
    basecolor: ParamSlot = Field((0.8, 0.8, 0.8), description="Linear RGB basecolor in [0, 1]")
    roughness: ParamSlot = Field(0.5, description="GGX alpha in [0, 1]")
    metallic: ParamSlot = Field(0.0, description="Metallic weight in [0, 1]")
    specular: ParamSlot = Field(0.5, description="Dielectric normal-incidence reflectance in [0, 1]")


class TransformDocument(BaseModel):
    """
    Applied as scale, then rotation (XYZ Euler, degrees), then translation.
    """

    translate: Vec3 = Field((0.0, 0.0, 0.0), description="Translation")
    rotate_deg: Vec3 = Field((0.0, 0.0, 0.0), description="Euler angles about x, y, z in degrees")
    scale: ScalarOrColor = Field(1.0, description="Uniform or per-axis scale")


class GeneratorDocument(BaseModel):
    """
    A procedural mesh; ``params`` are the keyword arguments of the generator.
    """

    kind: Literal["plane", "box", "sphere", "quad_cluster", "tilted_plane", "displaced_shell"] = Field(
        ..., description="Generator name"
    )
    params: Dict[str, Any] = Field(default_factory=dict, description="Generator keyword arguments")


class MeshDocument(BaseModel):
    path: Optional[str] = Field(None, description="OBJ file, relative to the scene document")
    generator: Optional[GeneratorDocument] = Field(None, description="Procedural mesh instead of a file")
    material: str = Field(..., description="Material name")
    transform: TransformDocument = Field(default_factory=TransformDocument, description="Object-to-world transform")

    @model_validator(mode="after")
    def _one_source(self) -> "MeshDocument":
        if (self.path is None) == (self.generator is None):
            raise ValueError("a mesh needs exactly one of 'path' or 'generator'")
        return self


class EnvironmentLightDocument(BaseModel):
    """
    Lat-long radiance map, z-up. Without ``path`` the environment is the constant ``radiance``.
    """

    type: Literal["environment"] = "environment"
    path: Optional[str] = Field(None, description="Lat-long PFM or PNG, relative to the document")
    radiance: Vec3 = Field((1.0, 1.0, 1.0), description="Constant radiance, or multiplier of the map")


class DirectionalLightDocument(BaseModel):
    type: Literal["directional"] = "directional"
    direction: Vec3 = Field(..., description="Direction from the scene toward the light")
    irradiance: Vec3 = Field(..., description="Irradiance on a surface facing the light")


class PointLightDocument(BaseModel):
    type: Literal["point"] = "point"
    position: Vec3 = Field(..., description="World position")
    intensity: Vec3 = Field(..., description="Radiant intensity")


LightDocument = Annotated[
    Union[EnvironmentLightDocument, DirectionalLightDocument, PointLightDocument],
    Field(discriminator="type"),
]


def _check_lights(lights: List[Any]) -> None:
    if sum(1 for light in lights if light.type == "environment") > 1:
        raise ValueError("at most one environment light is supported")


class LightsDocument(BaseModel):
    """
    Standalone lights file used by ``render lod``.
    """

    scene_version: Literal[1] = Field(..., description="Schema version, must be 1")
    lights: List[LightDocument] = Field(default_factory=list, description="Light sources")

    @model_validator(mode="after")
    def _single_environment(self) -> "LightsDocument":
        _check_lights(self.lights)
        return self


class CameraDocument(BaseModel):
    """
    Pinhole camera; ``fov_deg`` is the vertical field of view.
    """

    scene_version: Literal[1] = Field(1, description="Schema version, must be 1")
    position: Vec3 = Field(..., description="Eye position")
    look_at: Vec3 = Field(..., description="Target point")
    up: Vec3 = Field((0.0, 0.0, 1.0), description="Up vector")
    fov_deg: float = Field(40.0, gt=0.0, lt=180.0, description="Vertical field of view in degrees")
    width: int = Field(64, ge=1, description="Image width in pixels")
    height: int = Field(64, ge=1, description="Image height in pixels")


class SceneDocument(BaseModel):
    """
    Top-level scene file. The optional ``aggregate`` and ``render`` blocks
    hold settings overrides below the command-line flags.
    """

    scene_version: Literal[1] = Field(..., description="Schema version, must be 1")
    materials: List[MaterialDocument] = Field(..., description="Materials")
    meshes: List[MeshDocument] = Field(default_factory=list, description="Meshes")
    lights: List[LightDocument] = Field(default_factory=list, description="Light sources")
    camera: Optional[CameraDocument] = Field(None, description="Default camera")
    aggregate: Optional[Dict[str, Any]] = Field(None, description="AggregateSettings overrides")
    render: Optional[Dict[str, Any]] = Field(None, description="RenderSettings overrides")

    @model_validator(mode="after")
    def _references(self) -> "SceneDocument":
        names = [m.name for m in self.materials]
        if len(set(names)) != len(names):
            raise ValueError("material names must be unique")
        for mesh in self.meshes:
            if mesh.material not in names:
                raise ValueError(f"mesh references unknown material '{mesh.material}'")
        _check_lights(self.lights)
        return self
