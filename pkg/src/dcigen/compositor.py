"""Dual-renderer fusion: background acquisition, mask compositing and scene assembly."""

import dataclasses
import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ._validation import check_image, check_mask, check_resolution, check_same_shape
from .render import camera_basis, focal_length, render
from .scene import (EnvironmentParams, Pose, SceneInstance, SidecarError, parse_sidecar,
                    validate_texture)
from .weather import WEATHER_PRESETS, get_preset


class BackgroundError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackgroundRequest:
    scene_id: str
    weather_tag: str = "ClearNoon"
    pose: Pose = None
    resolution: tuple = (256, 256)
    frame: str = None
    viewpoint_tag: str = ""
    background_key: str = None


@dataclass(frozen=True, eq=False)
class Background:
    image: np.ndarray
    pose: Pose
    env: EnvironmentParams


def save_png(path, image):
    """Write an (H, W, 3) float image in [0, 1] as 8-bit RGB."""
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_png(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


class BackgroundProvider:
    """Source of background frames together with their pose and lighting."""

    def acquire(self, request):
        raise NotImplementedError


def _seed_for(scene_id):
    return zlib.crc32(str(scene_id).encode("utf-8"))


class SyntheticProvider(BackgroundProvider):
    """Procedural ground plane, sky gradient and box obstacles, ray-cast per pixel.

    Lighting uses the same parameters handed to the car renderer. With
    ``A = ambient_intensity * ambient_color`` and
    ``D = directional_intensity * directional_color``:

    * sky: ``(1 - e) * clip(A + 0.6 D) + e * clip((A + 0.3 D) * (0.55, 0.7, 1.0))``
      where ``e`` is the ray elevation (z component of the unit ray);
    * ground and obstacles: ``albedo * (A + D * max(0, n . light_direction))``,
      blended toward the horizon colour with ``1 - exp(-distance / 150)``.

    The ground albedo is a grey asphalt with lane stripes every 7 m along y and
    a weak seeded ripple; obstacle placement is seeded by the scene id and
    keeps a clear radius around the vehicle.
    """

    def __init__(self, presets=None, n_obstacles=6, clear_radius=9.0):
        self.presets = WEATHER_PRESETS if presets is None else presets
        self.n_obstacles = n_obstacles
        self.clear_radius = clear_radius

    def acquire(self, request):
        if request.pose is None:
            raise BackgroundError("synthetic provider needs a pose hint")
        env = get_preset(request.weather_tag, self.presets).env
        key = request.background_key or request.scene_id
        image = self.synthesize(key, request.pose, env, request.resolution)
        return Background(image, request.pose, env)

    def _obstacles(self, scene_id, center):
        rng = np.random.default_rng(_seed_for(scene_id))
        boxes = []
        for _ in range(self.n_obstacles):
            radius = rng.uniform(self.clear_radius + 3.0, 60.0)
            angle = rng.uniform(0.0, 2.0 * np.pi)
            half = rng.uniform(1.0, 3.0, size=2)
            height = rng.uniform(2.0, 10.0)
            cx = center[0] + radius * np.cos(angle)
            cy = center[1] + radius * np.sin(angle)
            lo = np.array([cx - half[0], cy - half[1], 0.0])
            hi = np.array([cx + half[0], cy + half[1], height])
            boxes.append((lo, hi, rng.uniform(0.25, 0.75, size=3)))
        return boxes, rng.uniform(0.0, 2.0 * np.pi)

    def synthesize(self, scene_id, pose, env, resolution):
        height, width = check_resolution(resolution)
        f = focal_length(pose, height)
        cols, rows = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
        cam = np.stack([(cols - 0.5 * width) / f, -(rows - 0.5 * height) / f,
                        np.ones_like(cols)], axis=-1)
        rays = cam @ camera_basis(pose)
        rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
        origin = np.asarray(pose.camera_position)

        amb = env.ambient_intensity * np.asarray(env.ambient_color)
        direct = env.directional_intensity * np.asarray(env.directional_color)
        light = np.asarray(env.light_direction)
        horizon = np.clip(amb + 0.6 * direct, 0.0, 1.0)
        zenith = np.clip((amb + 0.3 * direct) * np.array([0.55, 0.7, 1.0]), 0.0, 1.0)
        elevation = np.clip(rays[..., 2:3], 0.0, 1.0)
        image = (1.0 - elevation) * horizon + elevation * zenith

        dist = np.full((height, width), np.inf)
        albedo = np.zeros((height, width, 3))
        normal = np.zeros((height, width, 3))

        boxes, phase = self._obstacles(scene_id, pose.vehicle_position)
        if origin[2] > 0:
            down = rays[..., 2] < -1e-9
            t = -origin[2] / rays[down][:, 2]
            hit = origin + t[:, None] * rays[down]
            stripe = np.abs(np.mod(hit[:, 1], 7.0) - 3.5) < 0.12
            ripple = 0.05 * np.sin(0.3 * hit[:, 0] + phase) * np.cos(0.23 * hit[:, 1])
            gray = np.where(stripe, 0.85, 0.35 + ripple)
            dist[down] = t
            albedo[down] = gray[:, None]
            normal[down] = (0.0, 0.0, 1.0)

        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / rays
            for lo, hi, color in boxes:
                t1 = (lo - origin) * inv
                t2 = (hi - origin) * inv
                tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
                tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
                hit = (tmax >= np.maximum(tmin, 1e-6)) & (tmin > 1e-6) & (tmin < dist)
                if not hit.any():
                    continue
                axis = np.nanargmax(np.minimum(t1, t2)[hit], axis=-1)
                sign = -np.sign(rays[hit][np.arange(hit.sum()), axis])
                n = np.zeros((hit.sum(), 3))
                n[np.arange(hit.sum()), axis] = sign
                dist[hit] = tmin[hit]
                albedo[hit] = color
                normal[hit] = n

        solid = np.isfinite(dist)
        lit = albedo[solid] * (amb + np.multiply.outer(np.maximum(0.0, normal[solid] @ light), direct))
        fog = 1.0 - np.exp(-dist[solid] / 150.0)
        image[solid] = (1.0 - fog[:, None]) * lit + fog[:, None] * horizon
        return np.clip(image, 0.0, 1.0)


class DirectoryProvider(BackgroundProvider):
    """Frames exported from a simulator: ``<frame>.png`` plus ``<frame>.json`` sidecar.

    Sidecar keys are those of :func:`dcigen.scene.sidecar_dict`; optional
    ``width``/``height``/``weather_tag`` keys are cross-checked when present.
    """

    def __init__(self, root, presets=None):
        self.root = Path(root)
        self.presets = WEATHER_PRESETS if presets is None else presets

    def acquire(self, request):
        frame = request.frame or request.scene_id
        image_path = self.root / f"{frame}.png"
        sidecar_path = self.root / f"{frame}.json"
        if not image_path.is_file():
            raise BackgroundError(f"missing background image {image_path}")
        if not sidecar_path.is_file():
            raise BackgroundError(f"missing sidecar {sidecar_path}")
        with open(sidecar_path, encoding="utf-8") as fh:
            data = json.load(fh)
        try:
            pose, env = parse_sidecar(data)
        except SidecarError as exc:
            raise BackgroundError(f"{sidecar_path}: {exc}") from None
        tag = data.get("weather_tag")
        if request.weather_tag is not None:
            get_preset(request.weather_tag, self.presets)
            if tag is not None and tag != request.weather_tag:
                raise BackgroundError(f"{sidecar_path}: weather_tag {tag!r} does not match "
                                      f"requested {request.weather_tag!r}")
        image = load_png(image_path)
        h, w = image.shape[:2]
        if ("height" in data and data["height"] != h) or ("width" in data and data["width"] != w):
            raise BackgroundError(f"{sidecar_path}: sidecar size {data.get('width')}x"
                                  f"{data.get('height')} does not match image {w}x{h}")
        if request.resolution is not None and tuple(request.resolution) != (h, w):
            raise BackgroundError(f"{image_path}: image is {h}x{w}, manifest expects "
                                  f"{request.resolution[0]}x{request.resolution[1]}")
        return Background(image, pose, env)


def acquire_background(provider, request):
    bg = provider.acquire(request)
    return bg.image, bg.pose, bg.env


def composite(car, mask, background):
    """Per-pixel select: car where mask is set, background elsewhere."""
    car = check_image(car, "car")
    background = check_image(background, "background")
    check_same_shape(car, mask, background, names=("car", "mask", "background"))
    mask = check_mask(mask, car.shape[:2])
    return np.where(mask[..., None], car, background)


def composite_backward(mask, grad_output):
    """Gradient w.r.t. the car image; the background receives none of it."""
    return np.where(np.asarray(mask, dtype=bool)[..., None], grad_output, 0.0)


def build_scene_instance(mesh, texture, provider, request, resolution=None, with_render=False):
    """Acquire a background, render the car with its parameters and composite.

    Returns ``(instance, image)``, or ``(instance, image, render_output)`` when
    ``with_render`` is set. An empty mask is not an error: the instance is
    kept with ``visible == False`` and the image equals the background.
    """
    validate_texture(texture, mesh)
    if resolution is not None:
        request = dataclasses.replace(request, resolution=tuple(resolution))
    background, pose, env = acquire_background(provider, request)
    out = render(mesh, texture, pose, env, background.shape[:2])
    image = composite(out.image, out.mask, background)
    instance = SceneInstance(background=background, mask=out.mask, pose=pose, env=env,
                             scene_id=request.scene_id, weather_tag=request.weather_tag or "",
                             viewpoint_tag=request.viewpoint_tag)
    if with_render:
        return instance, image, out
    return instance, image
