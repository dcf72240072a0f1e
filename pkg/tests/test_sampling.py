import numpy as np
import pytest

from regnf.fields import Box, Sphere, UnionOfPrimitives
from regnf.sampling import (CameraPose, ExtractionError, ResampleError, ResamplerParams, SampleSet, SamplingConfig,
                            extract_surface_samples, generate_camera_views, ray_grid, read_ply, resample,
                            sphere_trace, trace_rays)
from regnf.transforms import Sim3Matrix


def test_config_invariants():
    for bad in ({"n_views": 0}, {"ray_grid": (0, 4)}, {"xi": 0.0}):
        with pytest.raises(ValueError):
            SamplingConfig(**bad)
    with pytest.raises(ValueError):
        ResamplerParams(omega2=1.5)
    with pytest.raises(ValueError):
        ResamplerParams(rho=0.0)
    with pytest.raises(ValueError):
        ResamplerParams(refresh_period=0)


def test_camera_pose_invariants():
    with pytest.raises(ValueError):
        CameraPose([1, 0, 0], [1, 0, 0])
    with pytest.raises(ValueError):
        CameraPose([0, 0, 2], [0, 0, 0], up=[0, 0, 1])


def test_single_view_looks_at_centroid():
    c = np.array([0.3, -0.2, 0.1])
    (pose,) = generate_camera_views(c, 2.0, SamplingConfig(n_views=1))
    fwd, _, _ = pose.basis()
    d = c - pose.position
    assert fwd @ d == pytest.approx(np.linalg.norm(d), abs=1e-12)
    az = np.arctan2(pose.position[1] - c[1], pose.position[0] - c[0])
    assert az == pytest.approx(0.0, abs=1e-12)


def test_views_evenly_spaced_at_radius():
    c = np.array([1.0, 2.0, 3.0])
    poses = generate_camera_views(c, 2.5, SamplingConfig(n_views=6))
    az = [np.arctan2(p.position[1] - c[1], p.position[0] - c[0]) for p in poses]
    steps = np.diff(np.unwrap(az))
    assert np.allclose(steps, np.pi / 3, atol=1e-9)
    for p in poses:
        assert np.linalg.norm(p.position - c) == pytest.approx(2.5, abs=1e-12)
    again = generate_camera_views(c, 2.5, SamplingConfig(n_views=6))
    assert all(a.to_dict() == b.to_dict() for a, b in zip(poses, again))


def test_ray_grid_center_and_corner():
    pose = CameraPose([3.0, 0.5, 1.0], [0.0, 0.0, 0.0], fov=np.deg2rad(50.0))
    o, d = ray_grid(pose, SamplingConfig(ray_grid=(1, 1)))
    fwd = pose.basis()[0]
    assert d.shape == (1, 3) and np.allclose(d[0], fwd, atol=1e-12)
    cfg = SamplingConfig(ray_grid=(32, 32))
    o, d = ray_grid(pose, cfg)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    # pixel-center corner ray of a square pinhole camera
    ty = np.tan(pose.fov / 2) * (1 - 1 / 32)
    expect = np.arctan(np.hypot(ty, ty))
    assert np.arccos(np.clip(d[0] @ fwd, -1, 1)) == pytest.approx(expect, abs=1e-9)


def test_sphere_trace_examples(unit_sphere):
    cfg = SamplingConfig()
    hit = sphere_trace(unit_sphere, ([3.0, 0, 0], [-1.0, 0, 0]), cfg)
    assert np.allclose(hit, [1, 0, 0], atol=1e-4)
    assert abs(unit_sphere.value(hit)) <= cfg.trace_epsilon
    assert sphere_trace(unit_sphere, ([3.0, 2.0, 0], [-1.0, 0, 0]), cfg) is None


def _dense_march(f, o, d, t_max, step=1e-4):
    t = np.arange(0.0, t_max, step)
    v = f.value(o + t[:, None] * d)
    inside = np.nonzero(v <= 0)[0]
    if inside.size == 0:
        return None
    return o + t[inside[0]] * d


def test_sphere_trace_matches_dense_march(rng):
    f = Sphere(0.8, (0.1, -0.1, 0.0))
    cfg = SamplingConfig()
    n = 1000
    o = rng.normal(size=(n, 3))
    o = 3.0 * o / np.linalg.norm(o, axis=1, keepdims=True)
    aim = rng.uniform(-1.2, 1.2, size=(n, 3))
    d = aim - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    # keep rays clear of grazing incidence, where hit/miss is ill-conditioned
    c, r = np.array([0.1, -0.1, 0.0]), 0.8
    b = np.einsum("ij,ij->i", c - o, d)
    miss_dist = np.linalg.norm(o + b[:, None] * d - c, axis=1)
    ok = np.abs(miss_dist - r) > 1e-2
    pts, hit = trace_rays(f, o[ok], d[ok], cfg)
    for p, h, oo, dd in zip(pts, hit, o[ok], d[ok]):
        ref = _dense_march(f, oo, dd, 6.0)
        assert h == (ref is not None)
        if h:
            assert np.linalg.norm(p - ref) <= 1e-3


def test_extract_sphere_radius(unit_sphere):
    s = extract_surface_samples(unit_sphere, np.zeros(3), 3.0, SamplingConfig(n_views=6, ray_grid=(32, 32)))
    assert len(s) > 100
    assert np.allclose(np.linalg.norm(s.points, axis=1), 1.0, atol=1e-3)
    assert np.all(np.abs(unit_sphere.value(s.points)) <= SamplingConfig().xi)


def test_extract_is_deterministic(unit_sphere):
    cfg = SamplingConfig(n_views=3, ray_grid=(16, 16))
    a = extract_surface_samples(unit_sphere, np.zeros(3), 3.0, cfg)
    b = extract_surface_samples(unit_sphere, np.zeros(3), 3.0, cfg)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.source_view, b.source_view)


def test_single_view_sees_one_hemisphere(unit_sphere):
    cfg = SamplingConfig(n_views=1, ray_grid=(48, 48))
    s = extract_surface_samples(unit_sphere, np.zeros(3), 3.0, cfg)
    (pose,) = generate_camera_views(np.zeros(3), 3.0, cfg)
    axis = pose.position / np.linalg.norm(pose.position)
    ang = np.arccos(np.clip(s.points @ axis, -1, 1))
    assert ang.max() <= np.pi / 2 + 1e-3


def test_multi_view_beats_worst_single_view_on_l_shape():
    L = UnionOfPrimitives([Box((0.6, 0.2, 0.2), (0.0, 0.0, 0.0)), Box((0.2, 0.2, 0.6), (-0.4, 0.0, 0.4))])
    c = np.array([0.0, 0.0, 0.2])
    multi = SamplingConfig(n_views=6, ray_grid=(32, 32))
    n_multi = len(extract_surface_samples(L, c, 3.0, multi))
    singles = []
    for k in range(6):
        az = 2 * np.pi * k / 6
        cfg = SamplingConfig(n_views=1, ray_grid=(32, 32), azimuth_range=(az, az + 2 * np.pi),
                             elevation_range=multi.elevation_range)
        singles.append(len(extract_surface_samples(L, c, 3.0, cfg)))
    assert n_multi > min(singles)


def test_hidden_face_coverage():
    b = Box((0.5, 0.5, 0.5))
    front = SamplingConfig(n_views=1, elevation_range=(0.0, 0.0), ray_grid=(32, 32))
    one = extract_surface_samples(b, np.zeros(3), 3.0, front)
    many = extract_surface_samples(b, np.zeros(3), 3.0,
                                   SamplingConfig(n_views=4, elevation_range=(0.0, 0.0), ray_grid=(32, 32)))
    back = lambda s: np.sum(s.points[:, 0] < -0.5 + 1e-3)
    assert back(one) == 0 and back(many) > 0


def test_extraction_failure_names_field():
    far = Sphere(0.1, (50.0, 0, 0))
    with pytest.raises(ExtractionError, match="probe"):
        extract_surface_samples(far, np.zeros(3), 2.0, SamplingConfig(n_views=1, ray_grid=(4, 4)), name="probe")


@pytest.fixture(scope="module")
def sphere_samples():
    return extract_surface_samples(Sphere(1.0), np.zeros(3), 3.0, SamplingConfig(n_views=4, ray_grid=(24, 24)))


def test_resample_rho_limit(sphere_samples):
    out = resample(sphere_samples, Sphere(1.0), Sphere(1.0), Sim3Matrix(),
                   ResamplerParams(rho=1e-12, omega2=0.0), rng_seed=3)
    assert np.allclose(out.points, sphere_samples.points, atol=1e-9)


def test_resample_band_and_determinism(sphere_samples):
    f, g = Sphere(1.0), Sphere(0.9)
    p = ResamplerParams()
    a = resample(sphere_samples, f, g, Sim3Matrix(), p, rng_seed=7)
    b = resample(sphere_samples, f, g, Sim3Matrix(), p, rng_seed=7)
    assert len(a) == len(sphere_samples)
    assert np.all(np.abs(f.value(a.points)) <= 0.02)
    assert np.array_equal(a.points, b.points)
    c = resample(sphere_samples, f, g, Sim3Matrix(), p, rng_seed=8)
    assert not np.array_equal(a.points, c.points)


def test_resample_empty_and_all_dropped(sphere_samples):
    with pytest.raises(ResampleError):
        resample(SampleSet(np.zeros((0, 3)), np.zeros(0)), Sphere(1.0), Sphere(1.0), Sim3Matrix(),
                 ResamplerParams(), 0)
    boxed = SampleSet(sphere_samples.points, sphere_samples.source_view, region=(np.full(3, 5.0), np.full(3, 6.0)))
    with pytest.raises(ResampleError):
        resample(boxed, Sphere(1.0), Sphere(1.0), Sim3Matrix(), ResamplerParams(), 0)


def test_ply_round_trip(tmp_path, sphere_samples):
    sphere_samples.write_ply(tmp_path / "s.ply")
    back = read_ply(tmp_path / "s.ply")
    assert np.allclose(back.points, sphere_samples.points, atol=1e-8)
    assert np.array_equal(back.source_view, sphere_samples.source_view)
    head = (tmp_path / "s.ply").read_text().splitlines()[:3]
    assert head[:2] == ["ply", "format ascii 1.0"]
