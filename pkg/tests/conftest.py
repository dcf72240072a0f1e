import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from regnf.fields import Box, Sphere, Torus, UnionOfPrimitives, TransformedField
from regnf.transforms import Sim3Matrix, Sim3Params


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * rng.uniform(0, max_angle)).as_matrix()


def random_sim3(rng, max_angle=np.pi, t_scale=1.0, scale_range=(0.5, 2.0)):
    return Sim3Matrix(random_rotation(rng, max_angle), rng.normal(size=3) * t_scale, rng.uniform(*scale_range))


def random_params(rng):
    return Sim3Params(*rng.uniform(-2, 2, size=3), rng.uniform(-np.pi, np.pi),
                      rng.uniform(-1.4, 1.4), rng.uniform(-np.pi, np.pi), rng.uniform(0.3, 3.0))


def asymmetric_object():
    """Box with an offset sphere bump; no rotational symmetry."""
    return UnionOfPrimitives([Box((0.5, 0.3, 0.2)), Sphere(0.25, (0.4, 0.2, 0.25))])


LIBRARY_SPECS = {
    "sphere": {"kind": "sphere", "radius": 0.5},
    "box": {"kind": "box", "half_extents": [0.6, 0.4, 0.25]},
    "torus": {"kind": "torus", "major_radius": 0.5, "minor_radius": 0.15},
    "composite": {"kind": "union", "parts": [{"kind": "box", "half_extents": [0.5, 0.3, 0.2]},
                                             {"kind": "sphere", "radius": 0.25, "center": [0.4, 0.2, 0.25]}]},
}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def library_specs():
    return {k: dict(v) for k, v in LIBRARY_SPECS.items()}


@pytest.fixture
def unit_sphere():
    return Sphere(1.0)


@pytest.fixture
def torus():
    return Torus(0.5, 0.15)


def placed(f, T):
    return TransformedField(f, T)


DEGRADED_LIBRARY = {"crate": {"kind": "box", "half_extents": [0.4, 0.3, 0.25]},
                    "ring": {"kind": "torus", "major_radius": 0.4, "minor_radius": 0.1}}


def degraded_fixture(dims=(64, 48, 40)):
    """Crate plus ring, baked from a frontal camera arc so the crate's back is missing.

    Returns ``(scene, truth_field, degraded_grid, back_pose, region)``; ``region``
    is the crate's box grown by 5 cm, used to score back-view rays.
    """
    from regnf.harness import scene_from_dict
    from regnf.harness.edit import degrade_scene
    from regnf.harness.scene import detection_from_instance
    from regnf.sampling import CameraPose
    d = {"name": "degraded", "library": DEGRADED_LIBRARY,
         "instances": [{"object": "crate", "pose": {"t_x": 0.2, "t_y": 0.1, "r_y": 0.3, "sigma": 1.2}},
                       {"object": "ring", "pose": {"t_x": 2.0}}]}
    scene = scene_from_dict(d)
    scene.detections = [detection_from_instance(scene.library, i) for i in scene.instances]
    truth = scene.build_field()
    det = scene.detection("crate")
    c, r = det.centroid, 2.0 * det.half_diagonal
    grid = degrade_scene(truth, [-1.5, -1.5, -1.2], [3.0, 1.5, 1.2], dims, c, 2.5 * r)
    back = CameraPose(c + np.array([-2.5 * r, 0.0, 0.3 * r]), c)
    return scene, truth, grid, back, (det.lo - 0.05, det.hi + 0.05)


def report_stub(name, T, xi=0.02):
    """Minimal report dict carrying what substitution reads."""
    return {"object": name, "T_final": {"matrix": T.to_dict()}, "config": {"sampling": {"xi": xi}}}
