"""Named lighting presets.

The three names are CARLA weather presets; the numbers are our own choice of
ambient/directional light for each, not values taken from the simulator.
"""

import json
import math
from dataclasses import dataclass

from .scene import EnvironmentParams


def _unit(x, y, z):
    n = math.sqrt(x * x + y * y + z * z)
    return (x / n, y / n, z / n)


@dataclass(frozen=True)
class WeatherPreset:
    name: str
    env: EnvironmentParams


WEATHER_PRESETS = {
    "ClearNoon": WeatherPreset("ClearNoon", EnvironmentParams(
        ambient_intensity=0.55, directional_intensity=0.6,
        ambient_color=(1.0, 1.0, 1.0), directional_color=(1.0, 0.97, 0.9),
        light_direction=_unit(0.3, 0.2, 0.93))),
    "ClearNight": WeatherPreset("ClearNight", EnvironmentParams(
        ambient_intensity=0.18, directional_intensity=0.12,
        ambient_color=(0.6, 0.7, 1.0), directional_color=(0.7, 0.8, 1.0),
        light_direction=_unit(-0.4, 0.5, 0.77))),
    "WetCloudySunset": WeatherPreset("WetCloudySunset", EnvironmentParams(
        ambient_intensity=0.4, directional_intensity=0.45,
        ambient_color=(0.8, 0.78, 0.75), directional_color=(1.0, 0.6, 0.35),
        light_direction=_unit(-0.85, 0.3, 0.25))),
}


class UnknownWeather(KeyError):
    def __str__(self):
        return f"unknown weather_tag {self.args[0]!r} (known: {', '.join(WEATHER_PRESETS)})"


def get_preset(name, presets=None):
    presets = WEATHER_PRESETS if presets is None else presets
    try:
        return presets[name]
    except KeyError:
        raise UnknownWeather(name) from None


def resolve_weathers(spec, presets=None):
    """Turn ``"all"``, a comma list, or a list of names into preset names."""
    presets = WEATHER_PRESETS if presets is None else presets
    if spec in (None, "all"):
        return list(presets)
    names = spec.split(",") if isinstance(spec, str) else list(spec)
    names = [n.strip() for n in names if n.strip()]
    for name in names:
        get_preset(name, presets)
    return names


def load_presets(path):
    """Builtin presets extended (or overridden) by a JSON file ``{name: env fields}``."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected an object mapping preset names to env fields")
    presets = dict(WEATHER_PRESETS)
    for name, fields in raw.items():
        presets[name] = WeatherPreset(name, EnvironmentParams.from_dict(fields))
    return presets
