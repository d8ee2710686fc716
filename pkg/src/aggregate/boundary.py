"""
Boundary faces and aggregated boundary visibility (ABV).

A face of an occupied voxel is a boundary face when the empty cell across it
is connected to the outside of the grid; one labelling pass over the empty
cells (6-connectivity, grid padded by one empty layer) finds them all. For
every boundary face, rays start uniformly on the face and travel into the
inward hemisphere through the whole scene; the escaping fraction per texel
of a concentric hemisphere map in the face frame (z = inward normal) is the
ABV.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from src.aggregate.voxelize import GridSpec
from src.core.spherical import build_frames, concentric_square_to_hemisphere, frames_to_world
from src.core.visibility import ABV_RESOLUTION
from src.tracer.bvh import Bvh
from src.utils.logging_setup import progress_enabled
from src.utils.rng import CounterStream, hash_keys

FACES = 6
# face id -> (axis, side): 0 -x, 1 +x, 2 -y, 3 +y, 4 -z, 5 +z
FACE_AXIS = np.array([0, 0, 1, 1, 2, 2])
FACE_SIDE = np.array([-1, 1, -1, 1, -1, 1])
_FACE_TAG = 3
_FACES_PER_CALL = 8


def inward_normals(face: np.ndarray) -> np.ndarray:
    """Unit normals pointing from the face into its voxel."""
    face = np.asarray(face, dtype=np.int64)
    n = np.zeros(face.shape + (3,))
    np.put_along_axis(n, FACE_AXIS[face][..., None], -FACE_SIDE[face][..., None].astype(np.float64), axis=-1)
    return n


def face_frames(face: np.ndarray) -> np.ndarray:
    """Rows (t, b, n) of the face frame, n the inward normal."""
    return build_frames(inward_normals(face))


def entry_face(direction: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Face through which a ray moving along ``direction`` enters a voxel across ``axis``."""
    positive = np.take_along_axis(np.asarray(direction), np.asarray(axis)[..., None], axis=-1)[..., 0] > 0.0
    return 2 * np.asarray(axis) + np.where(positive, 0, 1)


def exterior_mask(occupancy: np.ndarray) -> np.ndarray:
    """Empty cells reachable from outside the grid, on the grid padded by one cell."""
    padded = np.pad(occupancy, 1, constant_values=False)
    labels, _ = ndimage.label(~padded, structure=ndimage.generate_binary_structure(3, 1))
    return labels == labels[0, 0, 0]


def boundary_faces(grid: GridSpec, keys: np.ndarray) -> np.ndarray:
    """Sorted face keys (voxel key * 6 + face id) of all exterior-reachable faces."""
    keys = np.asarray(keys, dtype=np.int64)
    if len(keys) == 0:
        return np.zeros(0, dtype=np.int64)
    res = grid.resolution
    occupancy = np.zeros(res ** 3, dtype=bool)
    occupancy[keys] = True
    outside = exterior_mask(occupancy.reshape(res, res, res))
    coords = grid.coords(keys) + 1
    found = []
    for face in range(FACES):
        neighbor = coords.copy()
        neighbor[:, FACE_AXIS[face]] += FACE_SIDE[face]
        open_ = outside[neighbor[:, 0], neighbor[:, 1], neighbor[:, 2]]
        found.append(keys[open_] * FACES + face)
    return np.sort(np.concatenate(found))


def face_origins(grid: GridSpec, face_keys: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Points on the faces at square coordinates ``u`` (F, R, 2)."""
    keys, face = np.divmod(np.asarray(face_keys, dtype=np.int64), FACES)
    lo, hi = grid.boxes(keys)
    axis = FACE_AXIS[face]
    a1 = (axis + 1) % 3
    a2 = (axis + 2) % 3
    rows = np.arange(len(keys))
    plane = np.where(FACE_SIDE[face] < 0, lo[rows, axis], hi[rows, axis])
    size = grid.voxel_size
    fi = rows[:, None]
    ri = np.arange(u.shape[1])[None, :]
    points = np.empty(u.shape[:-1] + (3,))
    points[fi, ri, axis[:, None]] = plane[:, None]
    points[fi, ri, a1[:, None]] = lo[rows, a1][:, None] + size * u[..., 0]
    points[fi, ri, a2[:, None]] = lo[rows, a2][:, None] + size * u[..., 1]
    return points


@dataclass
class BoundaryVisibility:
    face_keys: np.ndarray  # (F,) sorted
    grids: np.ndarray  # (F, res, res)

    def __len__(self) -> int:
        return len(self.face_keys)


def trace_face_maps(
    bvh: Bvh,
    grid: GridSpec,
    face_keys: np.ndarray,
    rays_per_texel: int,
    seed: int,
    eps: float,
    resolution: int = ABV_RESOLUTION,
) -> np.ndarray:
    """Escaping fraction per texel for the given faces, (F, res, res)."""
    texels = resolution * resolution
    rays = texels * rays_per_texel
    grids = np.zeros((len(face_keys), resolution, resolution), dtype=np.float32)
    texel = np.tile(np.arange(texels), rays_per_texel)
    row, col = np.divmod(texel, resolution)

    chunks = range(0, len(face_keys), _FACES_PER_CALL)
    for start in tqdm(chunks, desc=f"boundary {grid.resolution}^3", disable=not progress_enabled()):
        chunk = face_keys[start:start + _FACES_PER_CALL]
        f = len(chunk)
        u = CounterStream(hash_keys(seed, grid.resolution, chunk, _FACE_TAG)).random((f, rays, 4))
        square = np.stack([(col + u[..., 0]) / resolution, (row + u[..., 1]) / resolution], axis=-1)
        local = concentric_square_to_hemisphere(square)
        frames = face_frames(chunk % FACES)
        dirs = frames_to_world(frames[:, None], local)
        origins = face_origins(grid, chunk, u[..., 2:4])
        blocked = bvh.occluded(origins.reshape(-1, 3), dirs.reshape(-1, 3), eps)
        visible = (~blocked).reshape(f, rays).astype(np.float64)
        flat = np.repeat(np.arange(f), rays) * texels + np.tile(texel, f)
        sums = np.bincount(flat, weights=visible.ravel(), minlength=f * texels)
        grids[start:start + f] = (sums / rays_per_texel).reshape(f, resolution, resolution)
    return grids


def compute_abv(
    bvh: Bvh,
    grid: GridSpec,
    keys: np.ndarray,
    rays_per_texel: int,
    seed: int,
    eps: float,
    resolution: int = ABV_RESOLUTION,
) -> BoundaryVisibility:
    """Hemispherical visibility maps of every boundary face of the occupied ``keys``."""
    face_keys = boundary_faces(grid, keys)
    return BoundaryVisibility(face_keys, trace_face_maps(bvh, grid, face_keys, rays_per_texel, seed, eps, resolution))
