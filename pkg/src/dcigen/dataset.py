"""DCI-style manifests (discrete grid and scripted continuous scenes) and materialization.

Output layout of :func:`materialize`::

    out_dir/images/<entry_id>.png
    out_dir/labels/<entry_id>.json   # box, visibility, entry metadata
    out_dir/index.json               # all entries + failures
    out_dir/manifest.json            # the manifest that was materialized
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assets import data_path
from .casegraph import RIGS, RigConfig, load_graph, poses_from_samples, sample_trajectory, shortest_path
from .compositor import BackgroundRequest, build_scene_instance, save_png
from .scene import Pose
from .weather import WEATHER_PRESETS, get_preset

log = logging.getLogger(__name__)

CONTINUOUS_SCENES = ("Traffic Circle", "Parking Lot", "Stationary A", "Straight A", "Turning A",
                 "Stationary B", "Straight B")
DISCRETE_SCENE = "Overall"
DEFAULT_FOV = math.radians(60.0)
AIM_HEIGHT = 0.8


class ManifestError(ValueError):
    pass


def dump_json(obj, path):
    """Stable JSON serialization (sorted keys, trailing newline)."""
    text = json.dumps(obj, indent=1, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def slug(name):
    return "-".join(name.lower().split())


class Manifest:
    """Ordered collection of dataset entries.

    Discrete manifests are lazy: entries are decoded from a mixed-radix index
    over the parameter axes, so full-size grids can be counted without
    being enumerated.
    """

    def __init__(self, part, seed, params, entries=None, axes=None, indices=None):
        if part not in ("discrete", "continuous"):
            raise ManifestError(f"unknown manifest part {part!r}")
        self.part = part
        self.seed = seed
        self.params = params
        self._entries = entries
        self._axes = axes
        self._indices = indices

    def __len__(self):
        if self._entries is not None:
            return len(self._entries)
        if self._indices is not None:
            return len(self._indices)
        return self._axes.size

    def __getitem__(self, k):
        if self._entries is not None:
            return self._entries[k]
        if self._indices is not None:
            return self._axes.entry(int(self._indices[k]))
        if not -self._axes.size <= k < self._axes.size:
            raise IndexError(k)
        return self._axes.entry(k % self._axes.size)

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def to_dict(self, max_entries=1_000_000):
        if len(self) > max_entries:
            raise ManifestError(f"manifest has {len(self)} entries; refusing to serialize "
                                f"more than {max_entries}")
        return {"part": self.part, "seed": self.seed, "params": self.params,
                "count": len(self), "entries": list(self)}

    @classmethod
    def from_dict(cls, data, presets=None):
        manifest = cls(data["part"], data.get("seed"), data.get("params", {}),
                       entries=list(data["entries"]))
        manifest.validate(presets)
        return manifest

    def validate(self, presets=None):
        presets = WEATHER_PRESETS if presets is None else presets
        seen = set()
        for entry in self:
            if entry["entry_id"] in seen:
                raise ManifestError(f"duplicate entry_id {entry['entry_id']!r}")
            seen.add(entry["entry_id"])
            get_preset(entry["weather"], presets)


def load_manifest(path, presets=None):
    with open(path, encoding="utf-8") as fh:
        return Manifest.from_dict(json.load(fh), presets)


def sample_locations(count, seed, extent=500.0):
    """Seeded ground-plane positions in ``[-extent, extent]^2``."""
    rng = np.random.default_rng([seed, 0x10C])
    return [(round(float(x), 3), round(float(y), 3), 0.0)
            for x, y in rng.uniform(-extent, extent, size=(count, 2))]


def orbit_pose(location, azimuth, distance, pitch, fov=DEFAULT_FOV, model_angle=0.0):
    """Camera on a sphere around the vehicle, looking at its center."""
    target = np.asarray(location, dtype=np.float64) + (0.0, 0.0, AIM_HEIGHT)
    offset = distance * np.array([math.cos(pitch) * math.cos(azimuth),
                                  math.cos(pitch) * math.sin(azimuth), math.sin(pitch)])
    direction = -offset / np.linalg.norm(offset)
    return Pose(model_angle=model_angle, camera_position=target + offset,
                camera_direction=direction, camera_up=(0.0, 0.0, 1.0), fov=fov,
                vehicle_position=location)


@dataclass(frozen=True)
class DiscreteAxes:
    azimuths: tuple
    distances: tuple
    locations: tuple
    pitches: tuple
    lightings: tuple
    fov: float = DEFAULT_FOV

    @property
    def sizes(self):
        return (len(self.locations), len(self.azimuths), len(self.distances),
                len(self.pitches), len(self.lightings))

    @property
    def size(self):
        return math.prod(self.sizes)

    def decode(self, k):
        digits = []
        for radix in reversed(self.sizes):
            k, d = divmod(k, radix)
            digits.append(d)
        return tuple(reversed(digits))

    def entry(self, k):
        loc, az, dist, pitch, light = self.decode(k)
        location = self.locations[loc]
        pose = orbit_pose(location, self.azimuths[az], self.distances[dist], self.pitches[pitch],
                          self.fov)
        return {
            "entry_id": f"d{k:09d}",
            "scene_id": DISCRETE_SCENE,
            "weather": self.lightings[light],
            "viewpoint": "random",
            "pose": pose.to_dict(),
            "background": f"loc{loc:05d}",
            "trajectory": None,
            "grid": {"location": loc, "azimuth": self.azimuths[az],
                     "distance": self.distances[dist], "pitch": self.pitches[pitch]},
        }


def build_discrete_manifest(azimuths, distances, locations, pitches, lightings, seed=0,
                            cap=None, fov=DEFAULT_FOV, presets=None):
    """Cartesian product over the grid axes, optionally subsampled to ``cap`` entries.

    ``locations`` is a list of ``(x, y, z)`` ground positions or an integer
    count of seeded random positions. The subsample is uniform without
    replacement and ordered by grid index.
    """
    if isinstance(locations, int):
        locations = sample_locations(locations, seed)
    axes_in = {"azimuths": azimuths, "distances": distances, "locations": locations,
               "pitches": pitches, "lightings": lightings}
    for name, values in axes_in.items():
        if len(values) == 0:
            raise ManifestError(f"{name} must not be empty")
    for name in lightings:
        get_preset(name, presets)
    axes = DiscreteAxes(tuple(float(a) for a in azimuths), tuple(float(d) for d in distances),
                        tuple(tuple(float(c) for c in loc) for loc in locations),
                        tuple(float(p) for p in pitches), tuple(lightings), float(fov))
    params = {"azimuths": list(axes.azimuths), "distances": list(axes.distances),
              "n_locations": len(axes.locations), "pitches": list(axes.pitches),
              "lightings": list(axes.lightings), "cap": cap, "fov": axes.fov}
    indices = None
    if cap is not None:
        if cap > axes.size:
            raise ManifestError(f"cap {cap} exceeds the {axes.size}-entry product")
        rng = np.random.default_rng(seed)
        indices = np.sort(rng.choice(axes.size, size=cap, replace=False))
    return Manifest("discrete", seed, params, axes=axes, indices=indices)


def full_scale_axes():
    """Grid sizes of the discrete part: 40 azimuths, 15 distances, 20k locations."""
    azimuths = [2.0 * math.pi * k / 40 for k in range(40)]
    distances = list(np.linspace(5.0, 40.0, 15))
    return azimuths, distances, 20000


@dataclass(frozen=True)
class SceneScript:
    name: str
    graph: str
    start: str
    end: str
    viewpoint: str
    target: tuple = (0.0, 0.0, 0.0)
    target_yaw: float = 0.0
    default_heading: tuple = (1.0, 0.0)
    monitor_anchor: tuple = (0.0, 0.0, 6.0)

    def rig_config(self, fov=DEFAULT_FOV):
        return RigConfig(monitor_anchor=tuple(self.monitor_anchor), fov=fov,
                         target_position=tuple(self.target), target_yaw=self.target_yaw)


def load_scripts(path=None):
    path = data_path("scenes.json") if path is None else Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    base = path.parent
    scripts = []
    for item in raw:
        item = dict(item)
        graph = Path(item["graph"])
        item["graph"] = str(graph if graph.is_absolute() else base / graph)
        scripts.append(SceneScript(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in item.items()}))
    return scripts


def build_continuous_manifest(scene_scripts=None, weather_presets=None, step=1.0, seed=0,
                              fov=DEFAULT_FOV, presets=None):
    """One group of entries per (script, weather): A* route, arc-length samples, rig poses."""
    scripts = load_scripts() if scene_scripts is None else list(scene_scripts)
    presets = WEATHER_PRESETS if presets is None else presets
    weathers = list(presets) if weather_presets is None else list(weather_presets)
    for name in weathers:
        get_preset(name, presets)
    graphs = {}
    entries = []
    for script in scripts:
        if script.viewpoint not in RIGS:
            raise ManifestError(f"script {script.name!r}: unknown viewpoint {script.viewpoint!r}")
        if script.graph not in graphs:
            graphs[script.graph] = load_graph(script.graph)
        trajectory = shortest_path(graphs[script.graph], script.start, script.end)
        samples = sample_trajectory(trajectory, step, script.default_heading)
        poses = poses_from_samples(samples, script.viewpoint, script.rig_config(fov))
        for weather in weathers:
            for k, (pose, sample) in enumerate(zip(poses, samples)):
                entries.append({
                    "entry_id": f"{slug(script.name)}-{slug(weather)}-{k:04d}",
                    "scene_id": script.name,
                    "weather": weather,
                    "viewpoint": script.viewpoint,
                    "pose": pose.to_dict(),
                    "background": slug(script.name),
                    "trajectory": {"script": script.name, "index": k, "arc": sample.arc,
                                   "nodes": list(trajectory.nodes)},
                    "grid": None,
                })
    params = {"scenes": [s.name for s in scripts], "weathers": weathers, "step": step,
              "fov": fov}
    manifest = Manifest("continuous", seed, params, entries=entries)
    manifest.validate(presets)
    return manifest


def entry_request(entry, resolution):
    return BackgroundRequest(scene_id=entry["scene_id"], weather_tag=entry["weather"],
                             pose=Pose.from_dict(entry["pose"]), resolution=tuple(resolution),
                             frame=entry["entry_id"], viewpoint_tag=entry["viewpoint"],
                             background_key=entry.get("background"))


def label_record(entry, instance, seed):
    return {"entry_id": entry["entry_id"], "scene_id": entry["scene_id"],
            "weather": entry["weather"], "viewpoint": entry["viewpoint"],
            "box": instance.ground_truth_box, "visible": instance.visible,
            "pose": instance.pose.to_dict(), "env": instance.env.to_dict(),
            "trajectory": entry.get("trajectory"), "grid": entry.get("grid"), "seed": seed}


def _materialize_one(args):
    entry, mesh, texture, provider, resolution, out_dir, seed = args
    try:
        instance, image = build_scene_instance(mesh, texture, provider,
                                               entry_request(entry, resolution))
        save_png(out_dir / "images" / f"{entry['entry_id']}.png", image)
        dump_json(label_record(entry, instance, seed),
                  out_dir / "labels" / f"{entry['entry_id']}.json")
        return entry["entry_id"], instance.visible, None
    except Exception as exc:  # one bad frame must not stop the run
        return entry["entry_id"], False, f"{type(exc).__name__}: {exc}"


@dataclass
class MaterializeReport:
    written: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.failures


def materialize(manifest, mesh, texture, provider, resolution, out_dir, workers=1, config=None):
    """Render every manifest entry to ``out_dir`` and write the index last."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    jobs = ((entry, mesh, texture, provider, tuple(resolution), out_dir, manifest.seed)
            for entry in manifest)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_materialize_one, jobs, chunksize=8))
    else:
        results = [_materialize_one(job) for job in jobs]

    report = MaterializeReport()
    index_entries = []
    for entry_id, visible, error in results:
        if error is None:
            report.written.append(entry_id)
            index_entries.append({"entry_id": entry_id, "image": f"images/{entry_id}.png",
                                  "label": f"labels/{entry_id}.json", "visible": visible})
        else:
            log.warning("entry %s failed: %s", entry_id, error)
            report.failures.append({"entry_id": entry_id, "error": error})
    dump_json(manifest.to_dict(), out_dir / "manifest.json")
    dump_json({"part": manifest.part, "seed": manifest.seed, "resolution": list(resolution),
               "texture_checksum": texture.checksum(), "count": len(index_entries),
               "entries": index_entries, "failures": report.failures,
               "config": config or {}}, out_dir / "index.json")
    if report.failures:
        log.warning("%d of %d entries failed", len(report.failures), len(results))
    return report
