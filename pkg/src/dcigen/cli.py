"""Command-line front end: ``dcigen generate | attack | evaluate | report``.

Every command accepts ``--config FILE``, a JSON object whose keys are the
long flag names with dashes turned into underscores. Flags given on the
command line override the file, which overrides the built-in defaults. The
resolved configuration, seed included, is embedded in every JSON artifact.

Exit codes: 0 success, 1 configuration error, 2 pipeline error,
3 partial materialization (some entries failed).
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .assets import initial_texture, toy_car_mesh
from .attack import (AttackError, TextureAttack, evaluate_attack, evaluate_textures, file_sha256,
                     load_texture, prepare_scenes, save_texture)
from .compositor import DirectoryProvider, SyntheticProvider
from .dataset import (Manifest, build_continuous_manifest, build_discrete_manifest, dump_json,
                      load_manifest, load_scripts, materialize)
from .detector import ExternalDetector, ToyDetector, load_detector, save_detector
from .evaluation import EvalReport, ap_decline, emit_report
from .scene import load_mesh, validate_texture
from .weather import WEATHER_PRESETS, load_presets, resolve_weathers

log = logging.getLogger("dcigen")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_PARTIAL = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


COMMON = {"seed": 0, "mesh": None, "texture": None, "weather_file": None,
          "background_dir": None, "out": None}
SCENES = {"manifest": None, "part": "discrete", "weathers": None, "azimuths": 8,
          "distances": 3, "locations": 5, "pitches": 1, "distance_range": [7.0, 11.0],
          "pitch_range": [12.0, 20.0], "cap": None, "step": 1.0, "scripts": None}

DEFAULTS = {
    "generate": {**COMMON, **SCENES, "resolution": [256, 256], "workers": 1,
                 "out": "dci_dataset"},
    "attack": {**COMMON, **SCENES, "resolution": [128, 128], "cap": 50, "detector": None,
               "attack_step": 1e-5, "epochs": 1, "batch_size": 1, "max_iter": None,
               "out": "attack_out"},
    "evaluate": {**COMMON, **SCENES, "resolution": [128, 128], "cap": 50,
                 "textures": ["initial=initial"], "detectors": [], "baseline": None,
                 "iou_threshold": 0.5, "timeout": 0.0, "out": "eval_out"},
    "report": {"report": None, "baseline": None, "out": "report_out",
               "formats": "csv,markdown,svg-pr-curve,pr-csv"},
}

# resolved keys naming files that must exist, and the flag to blame
PATH_FLAGS = {"mesh": "--mesh", "texture": "--texture", "weather_file": "--weather-file",
              "background_dir": "--background-dir", "manifest": "--manifest",
              "detector": "--detector", "scripts": "--scripts", "report": "--report"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="top-level seed for every random choice")
    p.add_argument("--mesh", help="triangle OBJ (default: bundled toy car)")
    p.add_argument("--texture", help="texture grid file (default: bundled paint scheme)")
    p.add_argument("--weather-file", help="JSON presets {name: env fields} added to the builtins")
    p.add_argument("--background-dir", help="directory of <frame>.png + <frame>.json backgrounds "
                                            "(default: synthetic backgrounds)")
    p.add_argument("--resolution", help="image size as H or HxW")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_scenes(p):
    g = p.add_argument_group("scene source")
    g.add_argument("--manifest", help="manifest JSON; overrides the grid/script options")
    g.add_argument("--part", choices=["discrete", "continuous"])
    g.add_argument("--weathers", help="'all' or comma-separated preset names")
    g.add_argument("--azimuths", type=int, help="number of evenly spaced azimuths")
    g.add_argument("--distances", type=int, help="number of distances in --distance-range")
    g.add_argument("--locations", type=int, help="number of seeded ground locations")
    g.add_argument("--pitches", type=int, help="number of pitch angles in --pitch-range")
    g.add_argument("--distance-range", type=float, nargs=2, metavar=("MIN", "MAX"),
                   help="camera distance range in meters")
    g.add_argument("--pitch-range", type=float, nargs=2, metavar=("MIN", "MAX"),
                   help="camera pitch range in degrees")
    g.add_argument("--cap", type=int, help="seeded uniform subsample size")
    g.add_argument("--step", type=float, help="trajectory sampling step in meters (continuous)")
    g.add_argument("--scripts", help="scene script JSON (default: bundled scenes)")


def build_parser():
    parser = _Parser(prog="dcigen", description=__doc__.splitlines()[0],
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="materialize a dataset (images, labels, index)")
    _add_common(p)
    _add_scenes(p)
    p.add_argument("--workers", type=int, help="parallel worker processes")

    p = sub.add_parser("attack", help="optimize an adversarial texture")
    _add_common(p)
    _add_scenes(p)
    p.add_argument("--detector", help="toy detector JSON (default: train one on the scenes)")
    p.add_argument("--attack-step", type=float, help="gradient step size (default 1e-5)")
    p.add_argument("--epochs", type=int, help="passes over the scenes (default 1)")
    p.add_argument("--batch-size", type=int, help="scenes per update (default 1)")
    p.add_argument("--max-iter", type=int, help="stop after this many updates (0 = no-op)")

    p = sub.add_parser("evaluate", help="AP of textures under detectors, with decline tables")
    _add_common(p)
    _add_scenes(p)
    p.add_argument("--textures", nargs="+", metavar="NAME=PATH",
                   help="textures to compare; PATH 'initial' is the bundled paint")
    p.add_argument("--detectors", nargs="+", metavar="NAME=PATH",
                   help="toy detector JSON, or an exchange directory for an external detector")
    p.add_argument("--baseline", help="baseline texture name (default: the first)")
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--timeout", type=float, help="seconds to wait for external detections")

    p = sub.add_parser("report", help="tables and PR-curve charts from an evaluation report")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--report", help="report.json written by 'evaluate'")
    p.add_argument("--baseline", help="baseline texture name for the decline table")
    p.add_argument("--formats", help="comma list of csv, markdown, svg-pr-curve, pr-csv")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args):
    """Merge defaults, the config file and explicit flags (in that order of precedence)."""
    defaults = DEFAULTS[args.command]
    cfg = dict(defaults)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"--config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config {args.config}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"--config {args.config}: expected a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise ConfigError(f"--config {args.config}: unknown keys {unknown}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in defaults and value is not None:
            cfg[key] = value
    if "resolution" in cfg:
        cfg["resolution"] = parse_resolution(cfg["resolution"])
    for key, flag in PATH_FLAGS.items():
        value = cfg.get(key)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"{flag} {value}: no such file or directory")
    if args.command == "report" and cfg["report"] is None:
        raise ConfigError("--report is required")
    return cfg


def parse_resolution(value):
    try:
        if isinstance(value, (list, tuple)):
            h, w = (int(v) for v in value)
        elif isinstance(value, int):
            h = w = value
        elif "x" in str(value):
            h, w = (int(v) for v in str(value).lower().split("x"))
        else:
            h = w = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"--resolution {value!r}: expected H or HxW") from None
    if h <= 0 or w <= 0:
        raise ConfigError(f"--resolution {value!r}: must be positive")
    return [h, w]


def config_echo(cfg):
    """The resolved config as embedded in artifacts (the output location is left out)."""
    return {k: v for k, v in cfg.items() if k != "out"}


def _pairs(items, flag):
    out = {}
    for item in items:
        name, sep, path = str(item).partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"{flag} {item!r}: expected NAME=PATH")
        if name in out:
            raise ConfigError(f"{flag}: duplicate name {name!r}")
        out[name] = path
    return out


def _spread(lo, hi, n):
    if n == 1:
        return [0.5 * (lo + hi)]
    return [float(v) for v in np.linspace(lo, hi, n)]


def _axis(cfg, key, count_to_values):
    value = cfg[key]
    if isinstance(value, list):
        return [float(v) for v in value]
    if not isinstance(value, int) or value < 1:
        raise ConfigError(f"--{key} must be a positive count, got {value!r}")
    return count_to_values(value)


def _load(flag, fn, *args):
    """Run a loader, turning any failure into a configuration error naming ``flag``."""
    try:
        return fn(*args)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"{flag}: {exc}") from None


def load_inputs(cfg):
    presets = (_load("--weather-file", load_presets, cfg["weather_file"])
               if cfg["weather_file"] else WEATHER_PRESETS)
    mesh = _load("--mesh", load_mesh, cfg["mesh"]) if cfg["mesh"] else toy_car_mesh()
    if cfg["texture"]:
        texture = _load("--texture", load_texture, cfg["texture"])
        _load("--texture", validate_texture, texture, mesh)
    else:
        texture = initial_texture(mesh)
    if cfg["background_dir"]:
        provider = DirectoryProvider(cfg["background_dir"], presets)
    else:
        provider = SyntheticProvider(presets)
    return presets, mesh, texture, provider


def build_manifest(cfg, presets):
    seed = cfg["seed"]
    if cfg["manifest"]:
        manifest = _load("--manifest", load_manifest, cfg["manifest"], presets)
        return subsample(manifest, cfg["cap"], seed)
    part = cfg["part"]
    if part not in ("discrete", "continuous"):
        raise ConfigError(f"--part must be discrete or continuous, got {part!r}")
    default_weathers = "all" if part == "continuous" else "ClearNoon"
    weathers = _load("--weathers", resolve_weathers, cfg["weathers"] or default_weathers,
                     presets)
    if part == "continuous":
        scripts = _load("--scripts", load_scripts, cfg["scripts"])
        if not cfg["step"] > 0:
            raise ConfigError(f"--step must be > 0, got {cfg['step']!r}")
        manifest = _load("--part continuous", build_continuous_manifest, scripts, weathers,
                         cfg["step"], seed, math.radians(60.0), presets)
        return subsample(manifest, cfg["cap"], seed)
    azimuths = _axis(cfg, "azimuths", lambda n: [2.0 * math.pi * k / n for k in range(n)])
    distances = _axis(cfg, "distances", lambda n: _spread(*cfg["distance_range"], n))
    pitches = _axis(cfg, "pitches",
                    lambda n: [math.radians(p) for p in _spread(*cfg["pitch_range"], n)])
    locations = cfg["locations"]
    if isinstance(locations, int) and locations < 1:
        raise ConfigError(f"--locations must be a positive count, got {locations!r}")
    size = len(azimuths) * len(distances) * len(pitches) * len(weathers) * (
        locations if isinstance(locations, int) else len(locations))
    cap = cfg["cap"] if cfg["cap"] is not None and cfg["cap"] < size else None
    return _load("--part discrete", build_discrete_manifest, azimuths, distances, locations,
                 pitches, weathers, seed, cap, math.radians(60.0), presets)


def subsample(manifest, cap, seed):
    """Seeded uniform subsample of an explicit manifest, kept in manifest order."""
    if cap is None or cap >= len(manifest):
        return manifest
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(manifest), size=cap, replace=False))
    params = dict(manifest.params, cap=cap)
    return Manifest(manifest.part, manifest.seed, params,
                    entries=[manifest[int(k)] for k in keep])


def cmd_generate(cfg):
    presets, mesh, texture, provider = load_inputs(cfg)
    manifest = build_manifest(cfg, presets)
    out = Path(cfg["out"])
    log.info("materializing %d %s entries into %s", len(manifest), manifest.part, out)
    report = materialize(manifest, mesh, texture, provider, cfg["resolution"], out,
                         workers=cfg["workers"], config=config_echo(cfg))
    print(f"wrote {len(report.written)} entries to {out} "
          f"({len(report.failures)} failed)")
    if report.ok:
        return EXIT_OK
    for failure in report.failures:
        print(f"  {failure['entry_id']}: {failure['error']}", file=sys.stderr)
    return EXIT_PARTIAL if report.written else EXIT_PIPELINE


def train_detector(scenes, texture, seed):
    positives = [(s.image(texture), s.box) for s in scenes if s.visible]
    negatives = [s.background for s in scenes]
    if not positives:
        raise AttackError("no visible vehicle to train the toy detector on")
    return ToyDetector(random_state=seed).fit(positives, negatives)


def _check_detector(detector, resolution, flag):
    if tuple(detector.image_shape_) != tuple(resolution):
        raise ConfigError(f"{flag}: detector expects {detector.image_shape_[0]}x"
                          f"{detector.image_shape_[1]} images, resolution is "
                          f"{resolution[0]}x{resolution[1]}")


def cmd_attack(cfg):
    presets, mesh, texture, provider = load_inputs(cfg)
    manifest = build_manifest(cfg, presets)
    detector = None
    if cfg["detector"]:
        detector = _load("--detector", load_detector, cfg["detector"])
        _check_detector(detector, cfg["resolution"], "--detector")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    scenes = prepare_scenes(mesh, texture, manifest, provider, cfg["resolution"])
    if detector is None:
        log.info("training toy detector on %d scenes", len(scenes))
        detector = train_detector(scenes, texture, cfg["seed"])
        save_detector(detector, out / "detector.json")
        detector_path = out / "detector.json"
    else:
        detector_path = Path(cfg["detector"])

    attack = TextureAttack(detector=detector, step=cfg["attack_step"], epochs=cfg["epochs"],
                           batch_size=cfg["batch_size"], max_iter=cfg["max_iter"],
                           random_state=cfg["seed"])
    attack.fit(scenes, texture)
    save_texture(attack.texture_, out / "texture.dcitex")
    decline = evaluate_attack(texture, attack.texture_, scenes, detector)

    record = attack.run_record()
    record.update({
        "seed": cfg["seed"],
        "run_config": config_echo(cfg),
        "n_scenes": len(scenes),
        "detector": {"path": str(detector_path), "sha256": file_sha256(detector_path),
                     "trained": not cfg["detector"]},
        "ap_before": decline.ap_before,
        "ap_after": decline.ap_after,
        "ap_decline": decline.decline,
    })
    dump_json(record, out / "run_record.json")
    print(f"{attack.n_iter_} updates, AP {decline.ap_before:.2f} -> {decline.ap_after:.2f} "
          f"on the attack scenes; texture written to {out / 'texture.dcitex'}")
    return EXIT_OK


def _load_detectors(specs, cfg):
    detectors = {}
    for name, path in _pairs(specs, "--detectors").items():
        if not Path(path).exists():
            raise ConfigError(f"--detectors {name}={path}: no such file or directory")
        if Path(path).is_dir():
            detectors[name] = ExternalDetector(path, timeout=cfg["timeout"])
        else:
            detector = _load("--detectors", load_detector, path)
            _check_detector(detector, cfg["resolution"], f"--detectors {name}")
            detectors[name] = detector
    if not detectors:
        raise ConfigError("--detectors is required (NAME=PATH)")
    return detectors


def _write_tables(report, baseline, out, formats):
    written = []
    suffix = {"csv": "csv", "markdown": "md"}
    for fmt in ("csv", "markdown"):
        if fmt not in formats:
            continue
        written += emit_report(report, fmt, out / f"ap.{suffix[fmt]}")
        if len(report.textures) > 1:
            written += emit_report(ap_decline(report, report, baseline), fmt,
                                   out / f"decline.{suffix[fmt]}")
            written += emit_report(ap_decline(report, report, baseline, by="scene"), fmt,
                                   out / f"decline_by_scene.{suffix[fmt]}")
    return written


def cmd_evaluate(cfg):
    presets, mesh, _, provider = load_inputs(cfg)
    manifest = build_manifest(cfg, presets)
    textures = {}
    for name, path in _pairs(cfg["textures"], "--textures").items():
        if path == "initial":
            textures[name] = initial_texture(mesh)
            continue
        if not Path(path).is_file():
            raise ConfigError(f"--textures {name}={path}: no such file")
        textures[name] = _load("--textures", load_texture, path)
        _load("--textures", validate_texture, textures[name], mesh)
    baseline = cfg["baseline"] or next(iter(textures))
    if baseline not in textures:
        raise ConfigError(f"--baseline {baseline!r} is not among --textures")
    detectors = _load_detectors(cfg["detectors"], cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    scenes = prepare_scenes(mesh, textures[baseline], manifest, provider, cfg["resolution"])
    report = evaluate_textures(textures, scenes, detectors, cfg["iou_threshold"], baseline)
    report.config = config_echo(cfg)
    report.save(out / "report.json")
    _write_tables(report, baseline, out, ("csv", "markdown"))
    for name in report.textures:
        cells = ", ".join(f"{d} {report.get(name, d).ap:.2f}" for d in report.detectors)
        print(f"{name}: AP {cells}")
    return EXIT_OK


def cmd_report(cfg):
    report = _load("--report", EvalReport.load, cfg["report"])
    formats = [f.strip() for f in str(cfg["formats"]).split(",") if f.strip()]
    unknown = sorted(set(formats) - {"csv", "markdown", "svg-pr-curve", "pr-csv"})
    if unknown:
        raise ConfigError(f"--formats: unknown formats {unknown}")
    baseline = cfg["baseline"] or report.baseline
    if report.textures and baseline not in report.textures:
        raise ConfigError(f"--baseline {baseline!r} is not in the report")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    written = _write_tables(report, baseline, out, formats)
    for fmt in ("svg-pr-curve", "pr-csv"):
        if fmt in formats:
            written += emit_report(report, fmt, out / "pr")
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "attack": cmd_attack, "evaluate": cmd_evaluate,
            "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"dcigen {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("pipeline failure", exc_info=True)
        print(f"dcigen {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
