"""Adversarial texture optimisation over sampled scene instances, and its evaluation."""

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .compositor import build_scene_instance, composite, composite_backward
from .dataset import entry_request
from .detector import ExternalDetector
from .evaluation import ALL, EvalReport, compute_ap
from .render import render_backward
from .scene import Texture, validate_texture

DEFAULT_STEP = 1e-5
DEFAULT_EPOCHS = 1
DEFAULT_BATCH = 1


class AttackError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True, eq=False)
class PreparedScene:
    """A scene with its geometry rasterized once; only the texture varies afterwards."""

    entry_id: str
    scene_id: str
    weather: str
    background: np.ndarray
    render: object
    env: object
    box: list

    @property
    def visible(self):
        return self.box is not None

    def image(self, texture):
        return composite(self.render.recolor(texture), self.render.mask, self.background)


def prepare_scenes(mesh, texture, manifest, provider, resolution):
    scenes = []
    for entry in manifest:
        instance, _, out = build_scene_instance(mesh, texture, provider,
                                                entry_request(entry, resolution),
                                                with_render=True)
        scenes.append(PreparedScene(entry["entry_id"], entry["scene_id"], entry["weather"],
                                    instance.background, out, instance.env,
                                    instance.ground_truth_box))
    return scenes


def matched_score_loss(detector, image, target_box):
    """Hiding loss: confidence of the best anchor matching the ground-truth box."""
    result = detector.score_grad(image, target_box)
    return result.score, result.grad


class TextureAttack(BaseEstimator):
    """Projected gradient descent on a per-face texture.

    Each iteration draws a batch of visible scenes (seeded permutation per
    epoch), averages ``loss(detector, image, box)`` over it, back-propagates
    through compositing and rendering, and applies
    ``texture <- clip(texture - step * grad, *clamp)``.
    ``loss_trace_[k]`` is the batch loss measured before update ``k``.
    """

    def __init__(self, detector=None, step=DEFAULT_STEP, epochs=DEFAULT_EPOCHS,
                 batch_size=DEFAULT_BATCH, loss=None, max_iter=None, clamp=(0.0, 1.0),
                 random_state=0):
        self.detector = detector
        self.step = step
        self.epochs = epochs
        self.batch_size = batch_size
        self.loss = loss
        self.max_iter = max_iter
        self.clamp = clamp
        self.random_state = random_state

    def _check_params(self):
        if not self.step > 0:
            raise ValueError("step must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.detector is None:
            raise ValueError("an attack needs a detector")

    def schedule(self, n_scenes):
        """Scene index batches for every iteration, fixed by ``random_state``."""
        rng = np.random.default_rng(self.random_state)
        batches = []
        for _ in range(self.epochs):
            perm = rng.permutation(n_scenes)
            batches.extend(perm[k:k + self.batch_size].tolist()
                           for k in range(0, n_scenes, self.batch_size))
        if self.max_iter is not None:
            batches = batches[:self.max_iter]
        return batches

    def gradient(self, scenes, texture):
        """Mean batch loss and its gradient w.r.t. the texture (fixed summation order)."""
        loss_fn = self.loss or matched_score_loss
        total = 0.0
        grad = np.zeros(texture.values.shape)
        for scene in scenes:
            value, d_image = loss_fn(self.detector, scene.image(texture), scene.box)
            d_car = composite_backward(scene.render.mask, d_image)
            grad += render_backward(scene.render, scene.env, texture.values.shape, d_car,
                                    texture=texture)
            total += value
        return total / len(scenes), grad / len(scenes)

    def fit(self, scenes, texture):
        self._check_params()
        visible = [s for s in scenes if s.visible]
        if not visible:
            raise AttackError("every sampled scene has an empty mask; nothing to attack")
        lo, hi = self.clamp
        values = np.clip(np.array(texture.values, dtype=np.float64), lo, hi)
        current = Texture(values)
        trace = []
        for batch in self.schedule(len(visible)):
            loss, grad = self.gradient([visible[k] for k in batch], current)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise AttackError("non-finite loss during attack", trace)
            trace.append(float(loss))
            current = Texture(np.clip(current.values - self.step * grad, lo, hi))
        self.texture_ = current
        self.loss_trace_ = trace
        self.n_iter_ = len(trace)
        self.initial_checksum_ = texture.checksum()
        return self

    def transform(self, scenes):
        check_is_fitted(self, "texture_")
        return [s.image(self.texture_) for s in scenes]

    def run_record(self):
        check_is_fitted(self, "texture_")
        return {
            "config": {"step": self.step, "epochs": self.epochs, "batch_size": self.batch_size,
                       "max_iter": self.max_iter, "clamp": list(self.clamp),
                       "seed": self.random_state,
                       "loss": getattr(self.loss, "__name__", "matched_score_loss")},
            "loss_trace": self.loss_trace_,
            "n_iter": self.n_iter_,
            "texture_checksum_before": self.initial_checksum_,
            "texture_checksum_after": self.texture_.checksum(),
        }


def attack_texture(mesh, texture0, manifest, provider, detector, resolution=(128, 128),
                   **config):
    """Prepare the manifest's scenes and run :class:`TextureAttack` on them."""
    validate_texture(texture0, mesh)
    scenes = prepare_scenes(mesh, texture0, manifest, provider, resolution)
    attack = TextureAttack(detector=detector, **config).fit(scenes, texture0)
    return attack.texture_, attack.loss_trace_


_MAGIC = b"DCITEX\x01\n"


def save_texture(texture, path):
    """Binary grid: magic, u32 header length, JSON header, little-endian float64 data."""
    header = json.dumps({"faces": texture.n_faces, "resolution": texture.resolution,
                         "dtype": "<f8", "checksum": texture.checksum()},
                        sort_keys=True).encode("utf-8")
    data = np.ascontiguousarray(texture.values, dtype="<f8").tobytes()
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(header)) + header + data)


def load_texture(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a texture grid file")
    (n,) = struct.unpack_from("<I", raw, len(_MAGIC))
    start = len(_MAGIC) + 4
    header = json.loads(raw[start:start + n].decode("utf-8"))
    values = np.frombuffer(raw[start + n:], dtype="<f8").astype(np.float64)
    t = header["resolution"]
    texture = Texture(values.reshape(header["faces"], t, t, 3))
    if texture.checksum() != header["checksum"]:
        raise ValueError(f"{path}: checksum mismatch")
    return texture


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _detect(detector, image, name):
    if isinstance(detector, ExternalDetector):
        return detector.detect(image, name=name)
    return detector.detect(image)


def evaluate_textures(textures, scenes, detectors, iou_threshold=0.5, baseline=None):
    """AP for every (texture, detector), overall and per scene / weather.

    ``textures`` and ``detectors`` map names to objects; ``scenes`` are
    :class:`PreparedScene` instances (invisible ones count as images without
    a ground-truth vehicle).
    """
    report = EvalReport(baseline=baseline or next(iter(textures), None))
    for tex_name, texture in textures.items():
        for det_name, detector in detectors.items():
            dets, gts = [], []
            for scene in scenes:
                image = scene.image(texture)
                for d in _detect(detector, image, f"{tex_name}/{scene.entry_id}"):
                    dets.append((d, scene.entry_id))
                gts.append((scene.box, scene.entry_id, scene.visible))
            report.add(tex_name, det_name, compute_ap(dets, gts, iou_threshold))
            groups = {}
            for k, scene in enumerate(scenes):
                groups.setdefault((scene.scene_id, ALL), set()).add(scene.entry_id)
                groups.setdefault((scene.scene_id, scene.weather), set()).add(scene.entry_id)
            for (scene_id, weather), ids in groups.items():
                sub_d = [(d, i) for d, i in dets if i in ids]
                sub_g = [g for g in gts if g[1] in ids]
                report.add(tex_name, det_name, compute_ap(sub_d, sub_g, iou_threshold),
                           scene=scene_id, weather=weather)
    return report


@dataclass(frozen=True)
class DeclineRecord:
    ap_before: float
    ap_after: float

    @property
    def decline(self):
        return self.ap_before - self.ap_after


def evaluate_attack(texture_before, texture_after, scenes, detector, iou_threshold=0.5):
    """AP under both textures and the decline in percentage points."""
    report = evaluate_textures({"before": texture_before, "after": texture_after}, scenes,
                               {"detector": detector}, iou_threshold)
    return DeclineRecord(report.get("before", "detector").ap,
                         report.get("after", "detector").ap)
