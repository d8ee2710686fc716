import os
from typing import Any, Literal, Optional, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator

DEFAULT_TABLES_PATH = "tables.abt"

SettingsT = TypeVar("SettingsT", bound=BaseModel)


def load_environment() -> None:
    """Reads a .env file if present; real environment variables win."""
    load_dotenv(override=False)


def default_workers() -> int:
    return int(os.environ.get("AGGLOD_WORKERS", os.cpu_count() or 1))


def default_seed() -> int:
    return int(os.environ.get("AGGLOD_SEED", 0))


def default_tables_path() -> str:
    return os.environ.get("AGGLOD_TABLES", DEFAULT_TABLES_PATH)


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


class TableFitSettings(BaseModel):
    """Grid resolutions and Monte Carlo budgets for fitting M1-M5."""

    sg_grid: int = Field(20, ge=3, description="Nodes per axis of the (ax, ay, kappa) grid")
    ggx_grid: int = Field(50, ge=3, description="Nodes per axis of the (ax, ay, alpha) grid")
    beta_grid: int = Field(64, ge=3, description="Nodes per axis of the log-spaced (a, b) grid")
    ltc_nodes: int = Field(256, ge=3, description="Alpha nodes of the inverse-LTC table")
    norm_nodes: int = Field(256, ge=3, description="Alpha nodes of the GGX norm table")
    mc_samples: int = Field(100_000, ge=256, description="Monte Carlo samples per convolution node")
    directions: int = Field(256, ge=16, description="Evaluation directions per convolution node")
    beta_quadrature: int = Field(256, ge=16, description="Roughness quadrature nodes per beta node")
    seed: int = Field(0, description="Seed of the Monte Carlo ground truth")
    workers: int = Field(default_factory=default_workers, ge=1, description="Worker processes for node fits")

    @classmethod
    def fast(cls, **overrides) -> "TableFitSettings":
        """Coarse preset for tests and CI; same code paths, smaller grids."""
        values = dict(
            sg_grid=6,
            ggx_grid=7,
            beta_grid=10,
            ltc_nodes=32,
            norm_nodes=32,
            mc_samples=4096,
            directions=96,
            beta_quadrature=128,
        )
        values.update(overrides)
        return cls(**values)


class AggregateSettings(BaseModel):
    """Precomputation parameters; echoed into the aggregate parameter block."""

    max_resolution: int = Field(32, ge=1, le=512, description="Finest grid resolution per axis")
    min_resolution: int = Field(4, ge=1, description="Coarsest grid resolution per axis")
    budget: Optional[int] = Field(None, ge=1, description="Budget constant C; samples = ceil(C / res^2)")
    vis_rays: int = Field(32, ge=1, description="AIV rays per surface sample")
    ndf_k: int = Field(4, ge=1, le=4, description="Maximum SGGX lobes per voxel")
    splat_points: int = Field(16, ge=1, description="Low-discrepancy points per sample for directional moments")
    cpca: bool = Field(True, description="Compress AIV/ABV maps with clustered PCA")
    cpca_clusters: int = Field(30, ge=1, description="K-means clusters per tile position")
    cpca_reps_aiv: int = Field(10, ge=0, description="Representatives per AIV cluster")
    cpca_reps_abv: int = Field(60, ge=0, description="Representatives per ABV cluster")
    cpca_lanczos: bool = Field(False, description="Top-k Lanczos eigensolver instead of full eigh")
    abv_rays_per_texel: int = Field(2, ge=1, description="ABV rays per hemisphere texel")
    max_keep_fraction: float = Field(0.10, gt=0.0, le=1.0, description="Wavelet coefficient cap")
    accuracy_floor: float = Field(0.95, ge=0.0, le=1.0, description="Wavelet reconstruction accuracy floor")
    seed: int = Field(default_factory=default_seed, description="Seed for sampling and clustering")
    workers: int = Field(default_factory=default_workers, ge=1, description="Worker processes for per-voxel statistics")

    @field_validator("max_resolution", "min_resolution")
    @classmethod
    def _power_of_two(cls, v: int) -> int:
        if not _is_power_of_two(v):
            raise ValueError(f"resolution {v} is not a power of two")
        return v

    def effective_budget(self) -> int:
        """C such that the finest level gets at least 256 samples per voxel."""
        if self.budget is not None:
            return self.budget
        return 256 * self.max_resolution ** 2

    def samples_for(self, resolution: int) -> int:
        return max(64, -(-self.effective_budget() // resolution ** 2))

    def level_resolutions(self) -> list[int]:
        """Coarse to fine, doubling per level."""
        res = []
        r = min(self.min_resolution, self.max_resolution)
        while r <= self.max_resolution:
            res.append(r)
            r *= 2
        return res


class RenderSettings(BaseModel):
    """Settings of the aggregate (LoD) renderer."""

    spp: int = Field(16, ge=1, description="Cone samples per pixel")
    nee: int = Field(1, ge=1, description="Light samples per voxel (m)")
    seed: int = Field(default_factory=default_seed, description="Render seed")
    level: Optional[int] = Field(None, ge=0, description="Force a level (0 = finest)")
    primitive: Literal["ellipsoid", "cube"] = Field("ellipsoid", description="Primitive used for coverage")
    projected_area_samples: int = Field(16, ge=1, description="Samples of the projected-area estimator")
    diffuse_mode: Literal["quadrature", "sg"] = Field("quadrature", description="Diffuse orientation integral")
    batch_cones: int = Field(16384, ge=1, description="Cones traced and shaded per vectorized batch")
    max_pairs_per_cone: int = Field(512, ge=8, description="Cone-voxel pair capacity per cone")
    workers: int = Field(default_factory=default_workers, ge=1, description="Worker processes for cone batches")


class ReferenceSettings(BaseModel):
    """Settings of the embedded direct-illumination path tracer."""

    spp: int = Field(64, ge=1, description="Samples per pixel")
    seed: int = Field(default_factory=default_seed, description="Render seed")
    tile_size: int = Field(16, ge=1, description="Square tile edge in pixels")
    workers: int = Field(default_factory=default_workers, ge=1, description="Worker processes for image tiles")


def resolve_settings(model: type[SettingsT], *layers: Optional[dict[str, Any]]) -> SettingsT:
    """
    Builds settings from layers ordered lowest to highest precedence
    (e.g. scene-document block, then CLI flags). None values never override.
    """
    merged: dict[str, Any] = {}
    for layer in layers:
        if not layer:
            continue
        for key, value in layer.items():
            if value is not None and key in model.model_fields:
                merged[key] = value
    return model(**merged)
