"""
Scene aggregate types and the AGG1 file format.

Layout: magic ``AGG1``, then chunks (see ``src.utils.binio``). ``HEAD``
carries the format version, world bounds, level count and provenance; each
level is a ``LVLH`` header followed by ``OCCU`` (sorted voxel keys),
``VOXR`` (statistics and primitives), ``AIVM`` (interior visibility) and
``ABVF`` (boundary face keys and their visibility). Unknown chunks are
skipped with a warning.
"""

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from src.aggregate.voxelize import GridSpec
from src.core.absdf import AbsdfBatch, DirectionalMomentGrid, FactoredAbsdf, MomentSet
from src.core.primitive import TruncEllipsoid
from src.core.sggx import NdfMixture, SggxLobe
from src.core.tables import BetaParams
from src.core.visibility import ABV_RESOLUTION, AIV_RESOLUTION, CpcaVisibility, VisibilityStore, WaveletMapSet
from src.utils.binio import ChunkFormatError, pack_arrays, pack_json, read_chunk, unpack_arrays, unpack_json, write_chunk
from src.utils.security import safe_write_bytes

MAGIC = b"AGG1"
FORMAT_VERSION = 1
_LEVEL_CHUNKS = (b"OCCU", b"VOXR", b"AIVM", b"ABVF")
_ABSDF_FIELDS = ("rotations", "alphas", "weights", "beta", "moments", "dir_values", "dir_mass", "area")


class AggregateFormatError(Exception):
    """Raised for unreadable, truncated or incompatible aggregate files."""


def absdf_at(batch: AbsdfBatch, i: int) -> FactoredAbsdf:
    """The factored ABSDF stored in row ``i`` of a batch."""
    used = np.nonzero(batch.weights[i] > 0.0)[0]
    lobes = tuple(SggxLobe(batch.rotations[i, k], batch.alphas[i, k]) for k in used)
    moments = MomentSet.from_array(batch.moments[i])
    return FactoredAbsdf(
        NdfMixture(batch.weights[i, used] / batch.weights[i, used].sum(), lobes),
        BetaParams(float(batch.beta[i, 0]), float(batch.beta[i, 1])),
        moments,
        DirectionalMomentGrid(batch.dir_values[i], batch.dir_mass[i], batch.moments[i, :8]),
        float(batch.area[i]),
    )


def _store_kind(store: VisibilityStore) -> str:
    return "cpca" if isinstance(store, CpcaVisibility) else "wavelet"


def _load_store(kind: str, arrays: dict, prefix: str, domain: str, resolution: int) -> VisibilityStore:
    if kind == "cpca":
        return CpcaVisibility.from_arrays(arrays, prefix, domain, resolution)
    if kind == "wavelet":
        return WaveletMapSet.from_arrays(arrays, prefix, domain, resolution)
    raise AggregateFormatError(f"Unknown visibility encoding {kind!r}")


@dataclass(frozen=True)
class VoxelRecord:
    key: int
    area: float
    absdf: FactoredAbsdf
    primitive: TruncEllipsoid
    aiv: np.ndarray


@dataclass
class AggregateLevel:
    """One sparse level; voxel arrays are indexed in sorted key order."""

    grid: GridSpec
    keys: np.ndarray
    absdf: AbsdfBatch
    primitives: np.ndarray
    aiv: VisibilityStore
    face_keys: np.ndarray
    abv: VisibilityStore
    occupied: int = 0
    dropped: int = 0

    @property
    def resolution(self) -> int:
        return self.grid.resolution

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def fraction(self) -> float:
        return len(self.keys) / float(self.resolution ** 3)

    @staticmethod
    def _lookup(sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
        query = np.asarray(query, dtype=np.int64)
        if len(sorted_keys) == 0:
            return np.full(query.shape, -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(sorted_keys, query), len(sorted_keys) - 1)
        return np.where(sorted_keys[pos] == query, pos, -1)

    def index_of(self, keys: np.ndarray) -> np.ndarray:
        """Voxel index per key, -1 for empty voxels."""
        return self._lookup(self.keys, keys)

    def face_index(self, face_keys: np.ndarray) -> np.ndarray:
        """ABV index per face key (voxel key * 6 + face), -1 for non-boundary faces."""
        return self._lookup(self.face_keys, face_keys)

    def record(self, i: int) -> VoxelRecord:
        return VoxelRecord(
            int(self.keys[i]),
            float(self.absdf.area[i]),
            absdf_at(self.absdf, i),
            TruncEllipsoid.from_array(self.primitives[i]),
            self.aiv.grid(i),
        )

    def header(self) -> dict:
        return {
            "resolution": self.resolution,
            "voxels": len(self.keys),
            "faces": len(self.face_keys),
            "occupied": self.occupied,
            "dropped": self.dropped,
            "fraction": self.fraction,
            "aiv": _store_kind(self.aiv),
            "abv": _store_kind(self.abv),
        }

    def chunks(self) -> dict[bytes, dict[str, np.ndarray]]:
        voxels = {name: getattr(self.absdf, name) for name in _ABSDF_FIELDS}
        voxels["primitives"] = self.primitives
        faces = {"face_keys": self.face_keys}
        faces.update(self.abv.to_arrays("abv"))
        return {
            b"OCCU": {"keys": self.keys},
            b"VOXR": voxels,
            b"AIVM": self.aiv.to_arrays("aiv"),
            b"ABVF": faces,
        }

    @classmethod
    def from_chunks(cls, header: dict, origin: np.ndarray, size: float, chunks: dict) -> "AggregateLevel":
        missing = [tag.decode() for tag in _LEVEL_CHUNKS if tag not in chunks]
        if missing:
            raise AggregateFormatError(f"Level {header.get('resolution')} lacks chunk(s) {', '.join(missing)}")
        try:
            voxels = chunks[b"VOXR"]
            absdf = AbsdfBatch(**{name: voxels[name] for name in _ABSDF_FIELDS})
            faces = chunks[b"ABVF"]
            return cls(
                GridSpec(origin, size, int(header["resolution"])),
                chunks[b"OCCU"]["keys"],
                absdf,
                voxels["primitives"],
                _load_store(header["aiv"], chunks[b"AIVM"], "aiv", "sphere", AIV_RESOLUTION),
                faces["face_keys"],
                _load_store(header["abv"], faces, "abv", "hemisphere", ABV_RESOLUTION),
                int(header.get("occupied", 0)),
                int(header.get("dropped", 0)),
            )
        except KeyError as e:
            raise AggregateFormatError(f"Level {header.get('resolution')} is missing {e}")


@dataclass
class SceneAggregate:
    """Levels coarse to fine over a cubic world box."""

    origin: np.ndarray
    size: float
    levels: list
    params: dict = field(default_factory=dict)
    scene_hash: str = ""
    scene_path: str = ""
    tables: dict = field(default_factory=dict)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if not self.levels:
            raise ValueError("SceneAggregate needs at least one level")
        if not (np.all(np.isfinite(self.origin)) and np.isfinite(self.size) and self.size > 0.0):
            raise ValueError("SceneAggregate bounds must be finite")
        res = [lvl.resolution for lvl in self.levels]
        if any(b != 2 * a for a, b in zip(res, res[1:])):
            raise ValueError(f"Level resolutions must double, got {res}")

    @property
    def finest(self) -> AggregateLevel:
        return self.levels[-1]

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin, self.origin + self.size

    def level(self, resolution: int) -> AggregateLevel:
        for lvl in self.levels:
            if lvl.resolution == resolution:
                return lvl
        raise KeyError(f"no level of resolution {resolution}")

    def summary(self) -> dict:
        return {
            "origin": self.origin.tolist(),
            "size": self.size,
            "levels": [lvl.header() for lvl in self.levels],
            "scene_hash": self.scene_hash,
        }


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def serialize_aggregate(aggregate: SceneAggregate, stream: BinaryIO) -> None:
    stream.write(MAGIC)
    header = {
        "version": FORMAT_VERSION,
        "origin": aggregate.origin.tolist(),
        "size": aggregate.size,
        "level_count": len(aggregate.levels),
        "params": aggregate.params,
        "scene_hash": aggregate.scene_hash,
        "scene_path": aggregate.scene_path,
        "tables": aggregate.tables,
    }
    write_chunk(stream, b"HEAD", pack_json(header))
    for level in aggregate.levels:
        write_chunk(stream, b"LVLH", pack_json(level.header()))
        for tag, arrays in level.chunks().items():
            write_chunk(stream, tag, pack_arrays(arrays))


def deserialize_aggregate(stream: BinaryIO) -> SceneAggregate:
    if stream.read(4) != MAGIC:
        raise AggregateFormatError("Not an aggregate file (bad magic)")
    header = None
    pending: list[tuple[dict, dict]] = []
    try:
        while (chunk := read_chunk(stream)) is not None:
            tag, payload = chunk
            if tag == b"HEAD":
                header = unpack_json(payload)
                if header.get("version") != FORMAT_VERSION:
                    raise AggregateFormatError(f"Unsupported aggregate version {header.get('version')}")
            elif tag == b"LVLH":
                pending.append((unpack_json(payload), {}))
            elif tag in _LEVEL_CHUNKS:
                if not pending:
                    raise AggregateFormatError(f"Chunk {tag!r} outside of a level")
                pending[-1][1][tag] = unpack_arrays(payload)
            else:
                logging.warning(f"Skipping unknown aggregate chunk {tag!r}")
    except ChunkFormatError as e:
        raise AggregateFormatError(f"Corrupt aggregate file: {e}")
    if header is None:
        raise AggregateFormatError("Aggregate file has no header")
    if len(pending) != header["level_count"]:
        raise AggregateFormatError(f"Aggregate file is truncated: {len(pending)} of {header['level_count']} levels")

    origin = np.asarray(header["origin"], dtype=np.float64)
    size = float(header["size"])
    levels = [AggregateLevel.from_chunks(h, origin, size, chunks) for h, chunks in pending]
    return SceneAggregate(
        origin, size, levels,
        params=header.get("params", {}),
        scene_hash=header.get("scene_hash", ""),
        scene_path=header.get("scene_path", ""),
        tables=header.get("tables", {}),
    )


def save_aggregate(aggregate: SceneAggregate, path: str | Path) -> Path:
    buf = io.BytesIO()
    serialize_aggregate(aggregate, buf)
    return safe_write_bytes(path, buf.getvalue())


def load_aggregate(path: str | Path) -> SceneAggregate:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Aggregate file not found: {path}")
    with open(path, "rb") as f:
        aggregate = deserialize_aggregate(f)
    logging.info(f"Loaded aggregate {path}: {len(aggregate.levels)} level(s), finest {aggregate.finest.resolution}^3")
    return aggregate


def level_arrays(level: AggregateLevel) -> dict[str, np.ndarray]:
    """All arrays of a level flattened into one dict (for comparisons)."""
    out = {}
    for tag, arrays in level.chunks().items():
        for name, array in arrays.items():
            out[f"{tag.decode()}.{name}"] = array
    return out

