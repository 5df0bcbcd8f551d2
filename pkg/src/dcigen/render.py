"""Hard z-buffered triangle rasterizer with exact texture gradients.

Coverage is decided by casting one ray per pixel center against each candidate
triangle, which gives perspective-correct barycentrics and handles triangles
that cross the near plane without clipping. Geometry is fixed during an
attack, so the rendered colour at a covered pixel is linear in a single texture
bin and the backward pass is a scatter-add.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_resolution
from .scene import Mesh, Texture

NEAR_CLIP = 1e-3
_CHUNK = 1 << 21


class BehindCamera(ValueError):
    """The projected point does not lie in front of the near plane."""


def camera_basis(pose):
    """Rows: right, up, forward (world -> camera rotation)."""
    forward = np.asarray(pose.camera_direction, dtype=np.float64)
    up = np.asarray(pose.camera_up, dtype=np.float64)
    right = np.cross(up, forward)
    right /= np.linalg.norm(right)
    true_up = np.cross(forward, right)
    return np.stack([right, true_up, forward])


def focal_length(pose, height):
    return 0.5 * height / np.tan(0.5 * pose.fov)


def yaw_rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def model_to_world(pose, points):
    """Rotate by the vehicle yaw about +z, then translate to the vehicle position."""
    rot = yaw_rotation(pose.model_angle)
    return np.asarray(points, dtype=np.float64) @ rot.T + np.asarray(pose.vehicle_position)


def world_to_camera(pose, points):
    return (np.asarray(points, dtype=np.float64) - np.asarray(pose.camera_position)) \
        @ camera_basis(pose).T


def project(pose, point, resolution):
    """Project a world point to continuous pixel coordinates ``(x, y)`` and depth.

    Pixel ``(0, 0)`` is the top-left corner of the image; the center of pixel
    ``(col, row)`` is at ``(col + 0.5, row + 0.5)``.
    """
    height, width = check_resolution(resolution)
    x, y, z = world_to_camera(pose, np.asarray(point, dtype=np.float64)[None])[0]
    if not z > NEAR_CLIP:
        raise BehindCamera(f"point at depth {z!r} is behind the near plane")
    f = focal_length(pose, height)
    return np.array([0.5 * width + f * x / z, 0.5 * height - f * y / z]), float(z)


def shade(face_normal, env):
    """Lambertian + ambient RGB multiplier for a unit face normal.

    Accepts a single normal or an ``(N, 3)`` stack.
    """
    n = np.asarray(face_normal, dtype=np.float64)
    lambert = np.maximum(0.0, n @ np.asarray(env.light_direction))
    ambient = env.ambient_intensity * np.asarray(env.ambient_color)
    directional = env.directional_intensity * np.asarray(env.directional_color)
    return ambient + np.multiply.outer(lambert, directional)


def texture_bins(bary, resolution):
    """Map barycentrics ``(..., 3)`` to a flat bin index in ``[0, T*T)``."""
    t = resolution
    u = bary[..., 1] * t
    v = bary[..., 2] * t
    i = np.clip(np.floor(u), 0, t - 1).astype(np.int64)
    j = np.clip(np.floor(v), 0, t - 1).astype(np.int64)
    inverted = ((u - i) + (v - j) > 1.0) & (i + j <= t - 2)
    i = np.where(inverted, t - 1 - i, i)
    j = np.where(inverted, t - 1 - j, j)
    return i * t + j


@dataclass(frozen=True, eq=False)
class RenderOutput:
    image: np.ndarray           # (H, W, 3) clamped colours
    mask: np.ndarray            # (H, W) bool
    face_buffer: np.ndarray     # (H, W) int, -1 where empty
    bary_buffer: np.ndarray     # (H, W, 3)
    depth_buffer: np.ndarray    # (H, W), inf where empty
    bin_buffer: np.ndarray      # (H, W) bin index within the face, -1 where empty
    shade_buffer: np.ndarray    # (H, W, 3) lighting multiplier per pixel
    face_normals: np.ndarray    # (F, 3) world-space normals used for shading
    texture_resolution: int

    def recolor(self, texture):
        """Re-shade the cached geometry with another texture."""
        image, _ = _colorize(self, texture)
        return image


def rasterize(mesh, pose, resolution):
    """Return face, barycentric and depth buffers for ``mesh`` seen from ``pose``."""
    height, width = check_resolution(resolution)
    verts_cam = world_to_camera(pose, model_to_world(pose, mesh.vertices))
    tri = verts_cam[mesh.faces]                       # (F, 3, 3)
    f = focal_length(pose, height)

    depth = tri[:, :, 2]
    in_front = depth > NEAR_CLIP
    all_front = in_front.all(axis=1)
    straddle = in_front.any(axis=1) & ~all_front

    x0 = np.zeros(len(tri), dtype=np.int64)
    x1 = np.zeros(len(tri), dtype=np.int64)
    y0 = np.zeros(len(tri), dtype=np.int64)
    y1 = np.zeros(len(tri), dtype=np.int64)
    if all_front.any():
        safe = np.where(in_front, depth, 1.0)
        px = 0.5 * width + f * tri[:, :, 0] / safe
        py = 0.5 * height - f * tri[:, :, 1] / safe
        # pixel (c, r) is a candidate when its center c+0.5 lies in [min, max]
        x0 = np.clip(np.ceil(px.min(axis=1) - 0.5), 0, width).astype(np.int64)
        x1 = np.clip(np.floor(px.max(axis=1) - 0.5) + 1, 0, width).astype(np.int64)
        y0 = np.clip(np.ceil(py.min(axis=1) - 0.5), 0, height).astype(np.int64)
        y1 = np.clip(np.floor(py.max(axis=1) - 0.5) + 1, 0, height).astype(np.int64)
        for arr in (x0, x1, y0, y1):
            arr[~all_front] = 0
    # no reliable screen bounds for triangles crossing the near plane
    x1 = np.where(straddle, width, x1)
    y1 = np.where(straddle, height, y1)

    widths = np.maximum(x1 - x0, 0)
    counts = widths * np.maximum(y1 - y0, 0)

    n_pix = height * width
    best_depth = np.full(n_pix, np.inf)
    best_face = np.full(n_pix, -1, dtype=np.int64)
    best_bary = np.zeros((n_pix, 3))

    faces_with_work = np.flatnonzero(counts)
    start = 0
    while start < len(faces_with_work):
        stop = start
        total = 0
        while stop < len(faces_with_work) and (total == 0 or total + counts[faces_with_work[stop]] <= _CHUNK):
            total += counts[faces_with_work[stop]]
            stop += 1
        chunk = faces_with_work[start:stop]
        start = stop

        face_idx = np.repeat(chunk, counts[chunk])
        offsets = np.arange(total) - np.repeat(np.cumsum(counts[chunk]) - counts[chunk], counts[chunk])
        cols = x0[face_idx] + offsets % widths[face_idx]
        rows = y0[face_idx] + offsets // widths[face_idx]

        ray = np.stack([(cols + 0.5 - 0.5 * width) / f,
                        -(rows + 0.5 - 0.5 * height) / f,
                        np.ones(total)], axis=1)
        a = tri[face_idx, 0]
        e1 = tri[face_idx, 1] - a
        e2 = tri[face_idx, 2] - a
        p = np.cross(ray, e2)
        det = np.einsum("ij,ij->i", e1, p)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = -a
        b1 = np.einsum("ij,ij->i", s, p) * inv
        q = np.cross(s, e1)
        b2 = np.einsum("ij,ij->i", ray, q) * inv
        t = np.einsum("ij,ij->i", e2, q) * inv
        b0 = 1.0 - b1 - b2
        hit = ok & (b0 >= 0) & (b1 >= 0) & (b2 >= 0) & (t > NEAR_CLIP)
        if not hit.any():
            continue
        pix = rows[hit] * width + cols[hit]
        cand_depth = t[hit]
        cand_face = face_idx[hit]
        cand_bary = np.stack([b0[hit], b1[hit], b2[hit]], axis=1)
        # merge with the running buffer: min depth, then lower face index
        keep = best_face >= 0
        all_pix = np.concatenate([np.flatnonzero(keep), pix])
        all_depth = np.concatenate([best_depth[keep], cand_depth])
        all_face = np.concatenate([best_face[keep], cand_face])
        all_bary = np.concatenate([best_bary[keep], cand_bary])
        order = np.lexsort((all_face, all_depth, all_pix))
        sorted_pix = all_pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = sorted_pix[1:] != sorted_pix[:-1]
        winners = order[first]
        best_depth[all_pix[winners]] = all_depth[winners]
        best_face[all_pix[winners]] = all_face[winners]
        best_bary[all_pix[winners]] = all_bary[winners]

    covered = best_face >= 0
    best_bary[~covered] = 0.0
    return (best_face.reshape(height, width), best_bary.reshape(height, width, 3),
            best_depth.reshape(height, width))


def _colorize(out, texture):
    if texture.resolution != out.texture_resolution:
        raise ValueError("texture resolution differs from the rendered one")
    t2 = out.texture_resolution ** 2
    flat = texture.flat()
    pre = np.zeros(out.shade_buffer.shape)
    covered = out.mask
    idx = out.face_buffer[covered] * t2 + out.bin_buffer[covered]
    pre[covered] = out.shade_buffer[covered] * flat[idx]
    return np.clip(pre, 0.0, 1.0), pre


def render(mesh, texture, pose, env, resolution):
    """Render ``mesh`` with ``texture`` under ``pose``/``env``.

    Covered pixels get ``clip(shade(face_normal) * texture_bin, 0, 1)`` where
    the bin is the sub-triangle containing the pixel's barycentric
    coordinates. Uncovered pixels are black with mask 0.
    """
    if texture.n_faces != mesh.n_faces:
        raise ValueError("texture does not match mesh face count")
    face_buffer, bary_buffer, depth_buffer = rasterize(mesh, pose, resolution)
    mask = face_buffer >= 0
    face_normals = mesh.face_normals @ yaw_rotation(pose.model_angle).T
    shades = shade(face_normals, env)
    bin_buffer = np.full(face_buffer.shape, -1, dtype=np.int64)
    bin_buffer[mask] = texture_bins(bary_buffer[mask], texture.resolution)
    shade_buffer = np.zeros(face_buffer.shape + (3,))
    shade_buffer[mask] = shades[face_buffer[mask]]
    out = RenderOutput(image=None, mask=mask, face_buffer=face_buffer, bary_buffer=bary_buffer,
                       depth_buffer=depth_buffer, bin_buffer=bin_buffer,
                       shade_buffer=shade_buffer, face_normals=face_normals,
                       texture_resolution=texture.resolution)
    image, _ = _colorize(out, texture)
    object.__setattr__(out, "image", image)
    return out


def render_backward(output, env, texture_shape, loss_grad, texture=None):
    """Gradient of a scalar loss w.r.t. every texture bin.

    ``loss_grad`` is ``dL/dimage`` with shape ``(H, W, 3)``. The lighting
    multiplier is recomputed from ``env`` and the stored face normals. When
    ``texture`` is given, channels whose shaded value falls outside [0, 1] are
    clamped in the forward pass and contribute no gradient.
    """
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != output.shade_buffer.shape:
        raise ValueError(f"loss_grad shape {loss_grad.shape} does not match image "
                         f"{output.shade_buffer.shape}")
    n_faces, t, t_, _ = texture_shape
    t2 = t * t_
    mask = output.mask
    faces = output.face_buffer[mask]
    shades = shade(output.face_normals, env)[faces]
    upstream = shades * loss_grad[mask]
    if texture is not None:
        _, pre = _colorize(output, texture)
        inside = (pre[mask] >= 0.0) & (pre[mask] <= 1.0)
        upstream = np.where(inside, upstream, 0.0)
    idx = faces * t2 + output.bin_buffer[mask]
    grad = np.stack([np.bincount(idx, weights=upstream[:, c], minlength=n_faces * t2)
                     for c in range(3)], axis=1)
    return grad.reshape(n_faces, t, t_, 3)
