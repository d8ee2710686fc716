"""
Procedural meshes for tests, bundled scenes and the ``generator`` entries of
scene documents. Every generator returns a MeshData in object space.
"""

from dataclasses import dataclass

import numpy as np
import trimesh

from src.core.spherical import normalize


@dataclass
class MeshData:
    vertices: np.ndarray  # (V, 3)
    normals: np.ndarray  # (V, 3)
    uvs: np.ndarray  # (V, 2)
    faces: np.ndarray  # (F, 3)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not (len(self.vertices) == len(self.normals) == len(self.uvs)):
            raise ValueError("MeshData: per-vertex arrays disagree in length")

    def transformed(self, matrix: np.ndarray) -> "MeshData":
        """Applies a 4x4 affine transform; normals use the inverse transpose."""
        linear = matrix[:3, :3]
        vertices = self.vertices @ linear.T + matrix[:3, 3]
        normals = self.normals @ np.linalg.inv(linear)
        if np.linalg.det(linear) < 0.0:
            faces = self.faces[:, ::-1]
        else:
            faces = self.faces
        return MeshData(vertices, normalize(normals), self.uvs, faces)

    @classmethod
    def concatenate(cls, meshes: list["MeshData"]) -> "MeshData":
        if not meshes:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 3), dtype=np.int64))
        offsets = np.cumsum([0] + [len(m.vertices) for m in meshes[:-1]])
        return cls(
            np.concatenate([m.vertices for m in meshes]),
            np.concatenate([m.normals for m in meshes]),
            np.concatenate([m.uvs for m in meshes]),
            np.concatenate([m.faces + off for m, off in zip(meshes, offsets)]),
        )

    @classmethod
    def from_trimesh(cls, mesh: trimesh.Trimesh) -> "MeshData":
        uv = getattr(mesh.visual, "uv", None)
        if uv is None or len(uv) != len(mesh.vertices):
            uv = np.zeros((len(mesh.vertices), 2))
        return cls(mesh.vertices, mesh.vertex_normals, uv, mesh.faces)


def _grid(size_u: float, size_v: float, divisions: int):
    t = np.linspace(0.0, 1.0, divisions + 1)
    uu, vv = np.meshgrid(t, t, indexing="xy")
    uv = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    positions = np.stack([(uv[:, 0] - 0.5) * size_u, (uv[:, 1] - 0.5) * size_v, np.zeros(len(uv))], axis=-1)
    n = divisions + 1
    i, j = np.meshgrid(np.arange(divisions), np.arange(divisions), indexing="xy")
    a = (j * n + i).ravel()
    faces = np.concatenate([
        np.stack([a, a + 1, a + n + 1], axis=-1),
        np.stack([a, a + n + 1, a + n], axis=-1),
    ])
    return positions, uv, faces


def plane(size: float = 1.0, divisions: int = 1, size_v: float | None = None) -> MeshData:
    """Square (or rectangle) in the z = 0 plane, normal +z, centered on the origin."""
    positions, uv, faces = _grid(size, size if size_v is None else size_v, divisions)
    return MeshData(positions, np.tile([0.0, 0.0, 1.0], (len(positions), 1)), uv, faces)


def tilted_plane(size: float = 1.0, divisions: int = 16, angle_deg: float = 30.0) -> MeshData:
    """``plane`` rotated about the x axis; grid lines no longer align with voxels."""
    matrix = trimesh.transformations.rotation_matrix(np.radians(angle_deg), [1.0, 0.0, 0.0])
    return plane(size, divisions).transformed(matrix)


def box(extents=(1.0, 1.0, 1.0)) -> MeshData:
    """Axis-aligned box with flat per-face normals, centered on the origin."""
    half = 0.5 * np.asarray(extents, dtype=np.float64)
    quads = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_axis, v_axis = (axis + 1) % 3, (axis + 2) % 3
            if sign < 0.0:
                u_axis, v_axis = v_axis, u_axis
            corners = []
            for du, dv in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
                p = np.zeros(3)
                p[axis] = sign * half[axis]
                p[u_axis] = du * half[u_axis]
                p[v_axis] = dv * half[v_axis]
                corners.append(p)
            normal = np.zeros(3)
            normal[axis] = sign
            quads.append((np.array(corners), normal))
    vertices = np.concatenate([q[0] for q in quads])
    normals = np.concatenate([np.tile(q[1], (4, 1)) for q in quads])
    uvs = np.tile([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], (6, 1))
    base = 4 * np.arange(6)[:, None]
    faces = np.concatenate([base + [0, 1, 2], base + [0, 2, 3]])
    return MeshData(vertices, normals, uvs, faces)


def _spherical_uv(directions: np.ndarray) -> np.ndarray:
    phi = np.mod(np.arctan2(directions[:, 1], directions[:, 0]), 2.0 * np.pi)
    theta = np.arccos(np.clip(directions[:, 2], -1.0, 1.0))
    return np.stack([phi / (2.0 * np.pi), 1.0 - theta / np.pi], axis=-1)


def sphere(radius: float = 0.5, subdivisions: int = 3) -> MeshData:
    """Icosphere with smooth normals and spherical uvs."""
    mesh = trimesh.creation.icosphere(subdivisions=subdivisions, radius=1.0)
    directions = normalize(np.asarray(mesh.vertices, dtype=np.float64))
    return MeshData(directions * radius, directions, _spherical_uv(directions), mesh.faces)


def displaced_shell(
    radius: float = 0.5,
    subdivisions: int = 3,
    amplitude: float = 0.05,
    frequency: float = 3.0,
    hole_fraction: float = 0.0,
    seed: int = 0,
) -> MeshData:
    """
    Icosphere displaced along its normal by a sum of random sinusoids.
    ``hole_fraction`` of the faces (chosen by a smooth random field) are
    removed, leaving an open shell.
    """
    rng = np.random.default_rng(seed)
    mesh = trimesh.creation.icosphere(subdivisions=subdivisions, radius=1.0)
    directions = normalize(np.asarray(mesh.vertices, dtype=np.float64))
    waves = normalize(rng.normal(size=(4, 3)))
    phases = rng.uniform(0.0, 2.0 * np.pi, 4)
    field = np.sin(frequency * np.pi * directions @ waves.T + phases).mean(axis=-1)
    vertices = directions * (radius + amplitude * field)[:, None]
    faces = np.asarray(mesh.faces)
    if hole_fraction > 0.0:
        face_field = field[faces].mean(axis=-1)
        faces = faces[face_field > np.quantile(face_field, hole_fraction)]
    shell = trimesh.Trimesh(vertices, faces, process=False)
    return MeshData(vertices, normalize(np.asarray(shell.vertex_normals)), _spherical_uv(directions), faces)


def quad_cluster(
    count: int = 200,
    extent: float = 1.0,
    quad_size: float = 0.1,
    seed: int = 0,
) -> MeshData:
    """
    Randomly placed and oriented small quads in a cube of side ``extent``,
    a stand-in for foliage.
    """
    rng = np.random.default_rng(seed)
    centers = (rng.random((count, 3)) - 0.5) * extent
    normals = normalize(rng.normal(size=(count, 3)))
    helper = np.where(np.abs(normals[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    tangent = normalize(np.cross(helper, normals))
    bitangent = np.cross(normals, tangent)
    h = 0.5 * quad_size
    offsets = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64) * h
    vertices = centers[:, None, :] + offsets[None, :, 0:1] * tangent[:, None, :] + offsets[None, :, 1:2] * bitangent[:, None, :]
    uvs = np.tile([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], (count, 1))
    base = 4 * np.arange(count)[:, None]
    faces = np.concatenate([base + [0, 1, 2], base + [0, 2, 3]])
    return MeshData(vertices.reshape(-1, 3), np.repeat(normals, 4, axis=0), uvs, faces)


GENERATORS = {
    "plane": plane,
    "box": box,
    "sphere": sphere,
    "quad_cluster": quad_cluster,
    "tilted_plane": tilted_plane,
    "displaced_shell": displaced_shell,
}


def generate(kind: str, **params) -> MeshData:
    if kind not in GENERATORS:
        raise ValueError(f"Unknown mesh generator '{kind}'")
    return GENERATORS[kind](**params)
