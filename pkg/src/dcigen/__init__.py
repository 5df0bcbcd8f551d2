"""Instant-level scene generation, adversarial texture attacks and detection evaluation."""

from .attack import TextureAttack, attack_texture, evaluate_attack, evaluate_textures
from .boxes import iou, nms
from .casegraph import CaseGraph, poses_from_samples, sample_trajectory, shortest_path
from .compositor import (DirectoryProvider, SyntheticProvider, acquire_background,
                         build_scene_instance, composite)
from .dataset import build_continuous_manifest, build_discrete_manifest, materialize
from .detector import Detection, ExternalDetector, ToyDetector
from .evaluation import EvalReport, ap_decline, compute_ap, emit_report
from .render import project, render, render_backward, shade
from .scene import EnvironmentParams, Mesh, Pose, SceneInstance, Texture, load_mesh, validate_texture
from .weather import WEATHER_PRESETS

__version__ = "0.1.0"

__all__ = [
    "TextureAttack", "attack_texture", "evaluate_attack", "evaluate_textures", "iou", "nms",
    "CaseGraph", "poses_from_samples", "sample_trajectory", "shortest_path",
    "DirectoryProvider", "SyntheticProvider", "acquire_background", "build_scene_instance",
    "composite", "build_continuous_manifest", "build_discrete_manifest", "materialize",
    "Detection", "ExternalDetector", "ToyDetector", "EvalReport", "ap_decline", "compute_ap",
    "emit_report", "project", "render", "render_backward", "shade", "EnvironmentParams", "Mesh",
    "Pose", "SceneInstance", "Texture", "load_mesh", "validate_texture", "WEATHER_PRESETS",
]
