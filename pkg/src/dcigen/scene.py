"""Core scene types: meshes, per-face textures, camera pose, lighting and scene instances.

Pose and EnvironmentParams carry exactly the parameter groups that are handed
from the background renderer to the car renderer; their JSON form is the
sidecar written next to every background frame.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_unit

DEFAULT_TEXTURE_RESOLUTION = 4


class MeshFormatError(ValueError):
    """Raised for OBJ files outside the supported subset."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = f"{path}:{line}: " if line is not None else ""
        super().__init__(where + message)


class TextureError(ValueError):
    pass


def _frozen(array, dtype):
    array = np.array(array, dtype=dtype)
    array.setflags(write=False)
    return array


def compute_face_normals(vertices, faces):
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norms = np.linalg.norm(cross, axis=1, keepdims=True)
    return cross / norms


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh in model space (meters, z up, vehicle front along +x)."""

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray = None
    face_normals: np.ndarray = field(init=False)

    def __post_init__(self):
        vertices = _frozen(self.vertices, np.float64).reshape(-1, 3)
        faces = _frozen(self.faces, np.int64).reshape(-1, 3)
        normals = self.normals if self.normals is not None else np.zeros((0, 3))
        normals = _frozen(normals, np.float64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise MeshFormatError("face index out of range")
        if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                  | (faces[:, 0] == faces[:, 2])):
            raise MeshFormatError("face with repeated vertex index")
        face_normals = compute_face_normals(vertices, faces)
        if not np.all(np.isfinite(face_normals)):
            raise MeshFormatError("degenerate (zero-area) face")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "face_normals", _frozen(face_normals, np.float64))

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def n_vertices(self):
        return len(self.vertices)


def _parse_index(token, count, lineno, path, kind):
    try:
        index = int(token)
    except ValueError:
        raise MeshFormatError(f"malformed {kind} index {token!r}", lineno, path)
    # OBJ indices are 1-based; negative values are relative to the end
    resolved = index - 1 if index > 0 else count + index
    if index == 0 or resolved < 0 or resolved >= count:
        raise MeshFormatError(f"index out of range: {kind} {index} with {count} defined",
                              lineno, path)
    return resolved


def load_mesh(path):
    """Load the ``v``/``vn``/``f`` subset of a Wavefront OBJ file.

    Faces must be triangles; quads and larger polygons are rejected rather than
    triangulated. ``vt`` records and texture indices are accepted but ignored.
    Grouping, material and smoothing statements are skipped. Every error
    carries the offending line number.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mesh file not found: {path}")
    vertices, normals, faces = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *args = line.split()
            if tag in ("v", "vn"):
                if len(args) < 3:
                    raise MeshFormatError(f"malformed line: {tag} needs 3 coordinates",
                                          lineno, path)
                try:
                    xyz = [float(a) for a in args[:3]]
                except ValueError:
                    raise MeshFormatError(f"malformed line: bad number in {line!r}", lineno, path)
                (vertices if tag == "v" else normals).append(xyz)
            elif tag == "f":
                if len(args) != 3:
                    raise MeshFormatError(f"non-triangle face with {len(args)} vertices",
                                          lineno, path)
                tri = []
                for token in args:
                    parts = token.split("/")
                    tri.append(_parse_index(parts[0], len(vertices), lineno, path, "vertex"))
                    if len(parts) == 3 and parts[2]:
                        _parse_index(parts[2], len(normals), lineno, path, "normal")
                if len(set(tri)) != 3:
                    raise MeshFormatError("face with repeated vertex index", lineno, path)
                faces.append(tri)
            elif tag in ("vt", "g", "o", "s", "usemtl", "mtllib", "l", "vp"):
                continue
            else:
                raise MeshFormatError(f"malformed line: unknown statement {tag!r}", lineno, path)
    if not faces:
        raise MeshFormatError("mesh has no faces", path=path)
    normal_array = np.array(normals, dtype=np.float64).reshape(-1, 3)
    if len(normal_array):
        lengths = np.linalg.norm(normal_array, axis=1, keepdims=True)
        normal_array = np.divide(normal_array, lengths, out=np.zeros_like(normal_array),
                                 where=lengths > 0)
    face_array = np.array(faces, dtype=np.int64)
    v = np.array(vertices, dtype=np.float64)
    area2 = np.linalg.norm(np.cross(v[face_array[:, 1]] - v[face_array[:, 0]],
                                    v[face_array[:, 2]] - v[face_array[:, 0]]), axis=1)
    bad = np.flatnonzero(area2 == 0)
    if bad.size:
        raise MeshFormatError(f"degenerate (zero-area) face #{bad[0] + 1}", path=path)
    return Mesh(vertices=v, faces=face_array, normals=normal_array)


@dataclass(frozen=True, eq=False)
class Texture:
    """Per-face RGB grid with ``resolution**2`` bins per face.

    ``values`` has shape ``(n_faces, T, T, 3)``. Bin ``(i, j)`` with
    ``i + j <= T - 1`` is the upright sub-triangle whose corner sits at
    barycentric ``(i/T, j/T)``; bins with ``i + j >= T`` hold the inverted
    sub-triangles, mirrored to ``(T-1-i, T-1-j)``, so all ``T**2`` bins are used.
    """

    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        if values.ndim != 4 or values.shape[1] != values.shape[2] or values.shape[3] != 3:
            raise TextureError(f"texture must have shape (F, T, T, 3), got {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def resolution(self):
        return self.values.shape[1]

    @property
    def n_faces(self):
        return self.values.shape[0]

    @property
    def n_bins(self):
        return self.n_faces * self.resolution ** 2

    @classmethod
    def uniform(cls, n_faces, color, resolution=DEFAULT_TEXTURE_RESOLUTION):
        values = np.empty((n_faces, resolution, resolution, 3))
        values[...] = np.asarray(color, dtype=np.float64)
        return cls(values)

    def flat(self):
        """View as ``(n_bins, 3)`` in face-major, row-major bin order."""
        return self.values.reshape(-1, 3)

    def checksum(self):
        import hashlib
        data = np.ascontiguousarray(self.values, dtype="<f8").tobytes()
        header = f"{self.n_faces}:{self.resolution}:".encode()
        return hashlib.sha256(header + data).hexdigest()


def validate_texture(texture, mesh):
    """Raise TextureError unless ``texture`` fits ``mesh`` and lies in [0, 1]."""
    if texture.n_faces != mesh.n_faces:
        raise TextureError(f"face-count mismatch: texture has {texture.n_faces} faces, "
                           f"mesh has {mesh.n_faces}")
    values = texture.values
    bad = ~((values >= 0.0) & (values <= 1.0))
    if bad.any():
        face, i, j, channel = (int(k) for k in np.argwhere(bad)[0])
        raise TextureError(f"value {values[face, i, j, channel]!r} out of [0, 1] at "
                           f"face {face}, bin ({i}, {j}), channel {channel}")
    return True


def _vec3(value, name):
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be three finite numbers, got {value!r}")
    return tuple(float(x) for x in arr)


@dataclass(frozen=True)
class Pose:
    """Camera placement plus vehicle yaw (the positional parameter group)."""

    model_angle: float
    camera_position: tuple
    camera_direction: tuple
    camera_up: tuple
    fov: float = math.radians(60.0)
    vehicle_position: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("camera_position", "camera_direction", "camera_up", "vehicle_position"):
            object.__setattr__(self, name, _vec3(getattr(self, name), name))
        direction = check_unit(self.camera_direction, "camera_direction")
        up = check_unit(self.camera_up, "camera_up")
        if abs(float(direction @ up)) >= 1.0 - 1e-6:
            raise ValueError("camera_direction and camera_up are parallel")
        if not 0.0 < self.fov < math.pi:
            raise ValueError(f"fov must lie in (0, pi), got {self.fov!r}")
        object.__setattr__(self, "model_angle", float(self.model_angle))
        object.__setattr__(self, "fov", float(self.fov))

    def to_dict(self):
        return {
            "model_angle": self.model_angle,
            "camera_position": list(self.camera_position),
            "camera_direction": list(self.camera_direction),
            "camera_up": list(self.camera_up),
            "fov": self.fov,
            "vehicle_position": list(self.vehicle_position),
        }

    @classmethod
    def from_dict(cls, data):
        _require(data, ("model_angle", "camera_position", "camera_direction", "camera_up", "fov"))
        return cls(model_angle=data["model_angle"], camera_position=data["camera_position"],
                   camera_direction=data["camera_direction"], camera_up=data["camera_up"],
                   fov=data["fov"],
                   vehicle_position=data.get("vehicle_position", (0.0, 0.0, 0.0)))


@dataclass(frozen=True)
class EnvironmentParams:
    """Ambient plus one directional light (the environmental parameter group).

    ``light_direction`` points from the surface toward the light.
    """

    ambient_intensity: float
    directional_intensity: float
    ambient_color: tuple
    directional_color: tuple
    light_direction: tuple

    def __post_init__(self):
        for name in ("ambient_color", "directional_color", "light_direction"):
            object.__setattr__(self, name, _vec3(getattr(self, name), name))
        check_unit(self.light_direction, "light_direction")
        for name in ("ambient_intensity", "directional_intensity"):
            value = float(getattr(self, name))
            if not value >= 0.0:
                raise ValueError(f"{name} must be >= 0, got {value!r}")
            object.__setattr__(self, name, value)
        for name in ("ambient_color", "directional_color"):
            if not all(0.0 <= c <= 1.0 for c in getattr(self, name)):
                raise ValueError(f"{name} must lie in [0, 1]^3")

    def to_dict(self):
        return {
            "ambient_intensity": self.ambient_intensity,
            "directional_intensity": self.directional_intensity,
            "ambient_color": list(self.ambient_color),
            "directional_color": list(self.directional_color),
            "light_direction": list(self.light_direction),
        }

    @classmethod
    def from_dict(cls, data):
        _require(data, ("ambient_intensity", "directional_intensity", "ambient_color",
                        "directional_color", "light_direction"))
        return cls(**{k: data[k] for k in ("ambient_intensity", "directional_intensity",
                                            "ambient_color", "directional_color",
                                            "light_direction")})


class SidecarError(ValueError):
    pass


def _require(data, keys):
    missing = [k for k in keys if k not in data]
    if missing:
        raise SidecarError(f"missing key(s) in sidecar: {', '.join(missing)}")


def sidecar_dict(pose, env, **extra):
    """Flat sidecar JSON object: pose keys and lighting keys side by side."""
    out = pose.to_dict()
    out.update(env.to_dict())
    out.update(extra)
    return out


def parse_sidecar(data):
    return Pose.from_dict(data), EnvironmentParams.from_dict(data)


def mask_bbox(mask):
    """Tight ``[x0, y0, x1, y1]`` box (exclusive max) of a mask, or None if empty."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return [int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1]


@dataclass(frozen=True, eq=False)
class SceneInstance:
    background: np.ndarray
    mask: np.ndarray
    pose: Pose
    env: EnvironmentParams
    scene_id: str = ""
    weather_tag: str = ""
    viewpoint_tag: str = ""
    ground_truth_box: list = field(init=False)

    def __post_init__(self):
        if self.background.shape[:2] != self.mask.shape:
            raise ValueError("background and mask dimensions differ")
        object.__setattr__(self, "ground_truth_box", mask_bbox(self.mask))

    @property
    def visible(self):
        return self.ground_truth_box is not None
