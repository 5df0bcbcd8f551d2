import math

import numpy as np
import pytest

from dcigen.assets import initial_texture, toy_car_mesh
from dcigen.scene import EnvironmentParams, Mesh, Pose


@pytest.fixture(scope="session")
def car_mesh():
    return toy_car_mesh()


@pytest.fixture(scope="session")
def car_texture(car_mesh):
    return initial_texture(car_mesh)


@pytest.fixture
def white_env():
    """Directional white light only, straight toward the camera in the test poses."""
    return EnvironmentParams(ambient_intensity=0.0, directional_intensity=1.0,
                             ambient_color=(1, 1, 1), directional_color=(1, 1, 1),
                             light_direction=(0.0, 0.0, -1.0))


@pytest.fixture
def front_pose():
    """Camera at (0, 0, -5) looking along +z with +y up and a 90 degree field of view."""
    return Pose(model_angle=0.0, camera_position=(0.0, 0.0, -5.0), camera_direction=(0, 0, 1),
                camera_up=(0, 1, 0), fov=math.pi / 2)


@pytest.fixture
def screen_triangle():
    """One triangle at z=0 that covers the whole 90 degree frustum from (0, 0, -5)."""
    return Mesh(vertices=[(-20.0, -20.0, 0.0), (40.0, -20.0, 0.0), (-20.0, 40.0, 0.0)],
                faces=[(0, 2, 1)])


def write_text(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def small_scenes(car_mesh, car_texture):
    """24 prepared 64x64 scenes around the car in two weathers."""
    from dcigen.attack import prepare_scenes
    from dcigen.compositor import SyntheticProvider
    from dcigen.dataset import build_discrete_manifest

    manifest = build_discrete_manifest([2 * math.pi * k / 8 for k in range(8)], [6.0, 8.0], 2,
                                       [0.3], ["ClearNoon", "WetCloudySunset"], seed=1, cap=24)
    return prepare_scenes(car_mesh, car_texture, manifest, SyntheticProvider(), (64, 64))


@pytest.fixture(scope="session")
def small_detector(small_scenes, car_texture):
    from dcigen.detector import ToyDetector

    return ToyDetector(random_state=0).fit(
        [(s.image(car_texture), s.box) for s in small_scenes if s.visible],
        [s.background for s in small_scenes])


def random_detector(shape, seed, **params):
    """Linear-logistic detector with random filters, for analytic checks."""
    from dcigen.detector import ToyDetector

    rng = np.random.default_rng(seed)
    probe = ToyDetector(**params)
    n_feat = 3 * (probe.grid ** 2 + (4 if probe.context > 0 else 0))
    return ToyDetector.from_weights(shape, rng.normal(size=(len(probe.box_sizes), n_feat)),
                                    rng.normal(size=len(probe.box_sizes)), **params)


ONE_PIXEL_ENV = dict(ambient_intensity=0.3, directional_intensity=0.5,
                     ambient_color=(1.0, 0.5, 0.25), directional_color=(1.0, 1.0, 1.0),
                     light_direction=(0.0, 0.0, -1.0))


def one_pixel_scene(weights=(2.0, 1.0, 3.0), bias=-1.0):
    """A 1x1 frame fully covered by one face, and a 1x1-anchor linear-logistic detector.

    The face looks straight at the light, so its shade is
    ``ambient_intensity * ambient_color + directional_intensity``.
    """
    from dcigen.attack import PreparedScene
    from dcigen.detector import ToyDetector
    from dcigen.render import render
    from dcigen.scene import Texture

    env = EnvironmentParams(**ONE_PIXEL_ENV)
    mesh = Mesh(vertices=[(-20.0, -20.0, 0.0), (40.0, -20.0, 0.0), (-20.0, 40.0, 0.0)],
                faces=[(0, 2, 1)])
    pose = Pose(model_angle=0.0, camera_position=(0.0, 0.0, -5.0), camera_direction=(0, 0, 1),
                camera_up=(0, 1, 0), fov=math.pi / 2)
    out = render(mesh, Texture.uniform(1, (0.5, 0.5, 0.5), resolution=1), pose, env, (1, 1))
    scene = PreparedScene("px", "px", "ClearNoon", np.zeros((1, 1, 3)), out, env,
                          [0.0, 0.0, 1.0, 1.0])
    detector = ToyDetector.from_weights((1, 1), weights, bias, stride=1, box_sizes=((1, 1),),
                                        grid=1, context=0.0)
    shade = [ONE_PIXEL_ENV["ambient_intensity"] * a + ONE_PIXEL_ENV["directional_intensity"]
             for a in ONE_PIXEL_ENV["ambient_color"]]
    return scene, detector, shade


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance_log(request):
    def log(line):
        request.config.acceptance_lines.append(line)
        print(line)
    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
