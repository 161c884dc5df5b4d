import numpy as np
import pytest
from hypothesis import settings

from svgir.scene import Camera, EnvironmentMap, Gaussians, Scene, VertexSets, quat_from_axis_angle

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def random_scene(rng, n=20, m=4, res=32, sh=False, images=True):
    """Small random surfel cloud in front of one camera looking down -z."""
    pos = rng.uniform(-0.8, 0.8, (n, 3))
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    # keep surfels roughly facing the camera so none are culled edge-on
    axes[:, 2] = np.abs(axes[:, 2]) + 1.0
    quats = np.array([quat_from_axis_angle(a, ang) for a, ang in zip(axes, rng.uniform(-0.6, 0.6, n))])
    scales = rng.uniform(0.08, 0.25, (n, 2))
    opac = rng.uniform(0.5, 0.95, n)
    if sh:
        rad = rng.uniform(0.1, 0.9, (n, 4, 3)) * np.array([1, 0.2, 0.2, 0.2])[:, None]
    else:
        rad = rng.uniform(0.1, 0.9, (n, 3))
    g = Gaussians(pos, quats, scales, opac, rad)
    vs = VertexSets(rng.uniform(0.1, 0.9, (n, m, 3)), rng.uniform(0.2, 0.9, (n, m)),
                    rng.normal(0, 0.1, (n, m, 3)))
    cam = Camera.look_at([0.1, -0.2, 3.0], [0, 0, 0], up=(0, 1, 0), focal=res * 1.2, width=res, height=res)
    env = EnvironmentMap(rng.uniform(0.2, 1.5, (8, 16, 3)))
    imgs = [rng.uniform(0, 1, (res, res, 3))] if images else []
    return Scene(g, vs, env, [cam], imgs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_scene(rng):
    return random_scene(rng)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
