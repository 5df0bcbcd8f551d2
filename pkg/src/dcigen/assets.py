"""Bundled desk-scale assets: a low-poly box car and its default paint."""

from importlib import resources
from pathlib import Path

import numpy as np

from .scene import DEFAULT_TEXTURE_RESOLUTION, Texture, load_mesh

# (lo, hi, subdivisions)
_PARTS = {
    "body": ((-2.3, -0.95, 0.3), (2.3, 0.95, 1.1), 4),
    "cabin": ((-1.3, -0.8, 1.1), (0.9, 0.8, 1.6), 3),
    "wheel_fl": ((1.15, 0.75, 0.0), (1.85, 1.0, 0.6), 1),
    "wheel_fr": ((1.15, -1.0, 0.0), (1.85, -0.75, 0.6), 1),
    "wheel_rl": ((-1.85, 0.75, 0.0), (-1.15, 1.0, 0.6), 1),
    "wheel_rr": ((-1.85, -1.0, 0.0), (-1.15, -0.75, 0.6), 1),
}

PAINT = {"body": (0.75, 0.12, 0.1), "cabin": (0.3, 0.35, 0.45), "wheel": (0.08, 0.08, 0.08)}


def _box_faces(lo, hi, n):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    verts, tris = [], []
    for axis in range(3):
        u_axis, v_axis = [a for a in range(3) if a != axis]
        for side, value in ((-1.0, lo[axis]), (1.0, hi[axis])):
            base = len(verts)
            for i in range(n + 1):
                for j in range(n + 1):
                    p = np.empty(3)
                    p[axis] = value
                    p[u_axis] = lo[u_axis] + (hi[u_axis] - lo[u_axis]) * i / n
                    p[v_axis] = lo[v_axis] + (hi[v_axis] - lo[v_axis]) * j / n
                    verts.append(p)
            outward = np.zeros(3)
            outward[axis] = side
            for i in range(n):
                for j in range(n):
                    a = base + i * (n + 1) + j
                    b, c, d = a + n + 1, a + n + 2, a + 1
                    for tri in ((a, b, c), (a, c, d)):
                        p0, p1, p2 = (verts[k] for k in tri)
                        if np.cross(p1 - p0, p2 - p0) @ outward < 0:
                            tri = (tri[0], tri[2], tri[1])
                        tris.append(tri)
    return verts, tris


def toy_car_obj_text():
    """OBJ source of the bundled car (front along +x, z up, ground at z=0)."""
    lines = ["# low-poly box car, 1 unit = 1 m"]
    offset = 0
    normal_index = 0
    for name, (lo, hi, n) in _PARTS.items():
        verts, tris = _box_faces(lo, hi, n)
        lines.append(f"g {name}")
        lines.extend(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}" for p in verts)
        for tri in tris:
            p0, p1, p2 = (verts[k] for k in tri)
            nrm = np.cross(p1 - p0, p2 - p0)
            nrm /= np.linalg.norm(nrm)
            lines.append(f"vn {nrm[0]:.6f} {nrm[1]:.6f} {nrm[2]:.6f}")
            normal_index += 1
            a, b, c = (k + offset + 1 for k in tri)
            lines.append(f"f {a}//{normal_index} {b}//{normal_index} {c}//{normal_index}")
        offset += len(verts)
    return "\n".join(lines) + "\n"


def data_path(name):
    return Path(str(resources.files("dcigen") / "data" / name))


def toy_car_path():
    return data_path("toy_car.obj")


def toy_car_mesh():
    return load_mesh(toy_car_path())


def initial_texture(mesh, resolution=DEFAULT_TEXTURE_RESOLUTION):
    """Default paint: red body, blue-grey cabin, black wheels (by face centroid)."""
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    colors = np.empty((mesh.n_faces, 3))
    colors[:] = PAINT["body"]
    colors[centroids[:, 2] > 1.1 + 1e-6] = PAINT["cabin"]
    colors[(centroids[:, 2] < 0.3) | (np.abs(centroids[:, 1]) > 0.95 + 1e-6)] = PAINT["wheel"]
    values = np.repeat(colors[:, None, None, :], resolution, axis=1)
    values = np.repeat(values, resolution, axis=2)
    return Texture(values)
