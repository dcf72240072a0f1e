"""Multi-view surface sampling and the in-optimization resampler."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from .fields import SdfField, TransformedField
from .transforms import Sim3Matrix

log = logging.getLogger(__name__)


class ExtractionError(RuntimeError):
    pass


class ResampleError(RuntimeError):
    pass


@dataclass(frozen=True)
class CameraPose:
    position: NDArray
    look_at: NDArray
    up: NDArray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    fov: float = np.deg2rad(60.0)

    def __post_init__(self):
        for name in ("position", "look_at", "up"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        d = self.look_at - self.position
        if np.linalg.norm(d) == 0:
            raise ValueError("camera position coincides with look_at")
        if np.linalg.norm(np.cross(d, self.up)) < 1e-12 * np.linalg.norm(d) * np.linalg.norm(self.up):
            raise ValueError("camera up vector is parallel to the view direction")
        if not 0 < self.fov < np.pi:
            raise ValueError(f"field of view must be in (0, pi), got {self.fov}")

    def basis(self):
        """Unit (forward, right, up) vectors of the camera."""
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        return fwd, right, np.cross(right, fwd)

    def to_dict(self):
        return {"position": self.position.tolist(), "look_at": self.look_at.tolist(),
                "up": self.up.tolist(), "fov": float(self.fov)}

    @classmethod
    def from_dict(cls, d):
        kw = {k: d[k] for k in ("position", "look_at")}
        if "up" in d:
            kw["up"] = d["up"]
        if "fov" in d:
            kw["fov"] = float(d["fov"])
        return cls(**kw)


@dataclass(frozen=True)
class SamplingConfig:
    n_views: int = 6
    ray_grid: tuple = (32, 32)
    view_radius: float | None = None  # None: derived from the target's extent
    elevation_range: tuple = (np.deg2rad(15.0), np.deg2rad(60.0))
    azimuth_range: tuple = (0.0, 2.0 * np.pi)
    fov: float = np.deg2rad(60.0)
    xi: float = 0.02
    max_trace_steps: int = 128
    trace_epsilon: float = 1e-4

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if len(self.ray_grid) != 2 or min(self.ray_grid) < 1:
            raise ValueError("ray_grid must be (rows, cols) with both >= 1")
        if self.xi <= 0:
            raise ValueError("xi must be positive")
        if self.trace_epsilon <= 0 or self.max_trace_steps < 1:
            raise ValueError("trace_epsilon must be positive and max_trace_steps >= 1")


@dataclass(frozen=True)
class ResamplerParams:
    omega1: float = 0.01  # residual above which a sample is kept preferentially
    omega2: float = 0.02  # fraction of the set replaced by fresh pool draws
    rho: float | None = None  # None: region radius / 20
    refresh_period: int = 10

    def __post_init__(self):
        if not 0.0 <= self.omega2 <= 1.0:
            raise ValueError("omega2 must lie in [0, 1]")
        if self.rho is not None and self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")


@dataclass
class SampleSet:
    """Surface samples of one field, in that field's frame.

    ``pool`` keeps the original extraction for fresh draws during resampling
    and ``region`` optionally confines samples to an axis-aligned box.
    """

    points: NDArray
    source_view: NDArray
    frame: str = "scene"
    view_origins: NDArray | None = None
    pool: NDArray | None = None
    region: tuple | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.source_view = np.asarray(self.source_view, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.source_view):
            raise ValueError("points and source_view differ in length")
        if self.frame not in ("scene", "object"):
            raise ValueError(f"frame must be 'scene' or 'object', got {self.frame!r}")
        if self.pool is None:
            self.pool = self.points.copy()

    def __len__(self):
        return len(self.points)

    @property
    def radius(self) -> float:
        """Half diagonal of the region (or of the pool's bounding box)."""
        if self.region is not None:
            lo, hi = self.region
        else:
            lo, hi = self.pool.min(axis=0), self.pool.max(axis=0)
        return 0.5 * float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))

    def write_ply(self, path):
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(self)}\n")
            fh.write("property float x\nproperty float y\nproperty float z\n")
            fh.write("property int source_view\nend_header\n")
            for p, v in zip(self.points, self.source_view):
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {int(v)}\n")


def read_ply(path) -> SampleSet:
    with open(path) as fh:
        lines = fh.read().splitlines()
    end = lines.index("end_header")
    rows = np.array([ln.split() for ln in lines[end + 1:] if ln.strip()], dtype=float).reshape(-1, 4)
    return SampleSet(rows[:, :3], rows[:, 3].astype(np.int64))


def generate_camera_views(centroid, radius: float, cfg: SamplingConfig) -> list[CameraPose]:
    """``n_views`` cameras on a sphere around ``centroid``, evenly spaced in azimuth.

    Azimuths start at the low end of ``azimuth_range`` (the high end is
    excluded, so the default full circle wraps cleanly); elevations sweep the
    configured band from its low to its high end.
    """
    if radius <= 0:
        raise ValueError("view radius must be positive")
    centroid = np.asarray(centroid, dtype=float)
    lo, hi = cfg.elevation_range
    a0, a1 = cfg.azimuth_range
    poses = []
    for i in range(cfg.n_views):
        az = a0 + (a1 - a0) * i / cfg.n_views
        el = lo if cfg.n_views == 1 else lo + (hi - lo) * i / (cfg.n_views - 1)
        offset = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        up = np.array([0.0, 0.0, 1.0]) if abs(np.cos(el)) > 1e-9 else np.array([0.0, 1.0, 0.0])
        poses.append(CameraPose(centroid + offset, centroid, up, cfg.fov))
    return poses


def ray_grid(pose: CameraPose, cfg: SamplingConfig) -> tuple[NDArray, NDArray]:
    """Pinhole rays through pixel centers; returns ``(origins, directions)``."""
    rows, cols = cfg.ray_grid
    fwd, right, up = pose.basis()
    ty = np.tan(pose.fov / 2.0)
    tx = ty * cols / rows
    u = ((np.arange(cols) + 0.5) / cols * 2.0 - 1.0) * tx
    v = (1.0 - (np.arange(rows) + 0.5) / rows * 2.0) * ty
    V, U = np.meshgrid(v, u, indexing="ij")
    d = fwd + U.reshape(-1, 1) * right + V.reshape(-1, 1) * up
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.broadcast_to(pose.position, d.shape).copy(), d


def trace_rays(f: SdfField, origins, directions, cfg: SamplingConfig) -> tuple[NDArray, NDArray]:
    """Sphere-trace a batch of rays; returns ``(points, hit_mask)``.

    A ray misses once it has travelled past the far side of the field's
    bounds by two bounds diagonals, or when the step budget runs out.
    """
    origins = np.asarray(origins, dtype=float)
    directions = np.asarray(directions, dtype=float)
    n = len(origins)
    lo, hi = f.bounds
    diag = float(np.linalg.norm(hi - lo))
    t_max = np.linalg.norm(origins - 0.5 * (lo + hi), axis=1) + 2.0 * diag
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(cfg.max_trace_steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        v = f.value(origins[idx] + t[idx, None] * directions[idx])
        done = np.abs(v) <= cfg.trace_epsilon
        hit[idx[done]] = True
        active[idx[done]] = False
        t[idx] += np.where(done, 0.0, v)
        gone = (t > t_max) | ~np.isfinite(t)
        active &= ~gone
    return origins + t[:, None] * directions, hit


def sphere_trace(f: SdfField, ray, cfg: SamplingConfig):
    """Trace a single ``(origin, direction)`` ray; returns the hit point or ``None``."""
    o, d = ray
    pts, hit = trace_rays(f, np.asarray(o, float)[None], np.asarray(d, float)[None], cfg)
    return pts[0] if hit[0] else None


def _in_box(pts, box):
    lo, hi = box
    return np.all((pts >= lo) & (pts <= hi), axis=1)


def dedup_voxel(points, edge):
    """Indices of the first point in each voxel of the given edge, in input order."""
    keys = np.floor(points / edge).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return np.sort(first)


def extract_surface_samples(f: SdfField, centroid, radius: float, cfg: SamplingConfig,
                            frame: str = "scene", region=None, name: str = "field") -> SampleSet:
    """Union of sphere-traced hits over all camera views, voxel-deduplicated.

    ``radius`` is the camera distance from ``centroid``. Hits outside
    ``region`` (an axis-aligned ``(lo, hi)`` box) are discarded.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    poses = generate_camera_views(centroid, radius, cfg)
    pts, views = [], []
    for k, pose in enumerate(poses):
        o, d = ray_grid(pose, cfg)
        p, hit = trace_rays(f, o, d, cfg)
        p = p[hit]
        pts.append(p)
        views.append(np.full(len(p), k, dtype=np.int64))
    pts = np.concatenate(pts)
    views = np.concatenate(views)
    keep = np.abs(f.value(pts)) <= cfg.xi if len(pts) else np.zeros(0, bool)
    if region is not None and len(pts):
        region = (np.asarray(region[0], float), np.asarray(region[1], float))
        keep &= _in_box(pts, region)
    pts, views = pts[keep], views[keep]
    if len(pts) == 0:
        raise ExtractionError(f"no surface hits on {name} around centroid {np.asarray(centroid).tolist()}")
    first = dedup_voxel(pts, cfg.xi / 2.0)
    origins = np.array([p.position for p in poses])
    log.debug("extracted %d samples from %s (%d views)", len(first), name, len(poses))
    return SampleSet(pts[first], views[first], frame, origins, region=region)


def project_to_surface(f: SdfField, pts, xi: float, max_steps: int = 10):
    """Newton steps along the gradient until ``|f| <= xi``; returns (points, ok)."""
    pts = np.array(pts, dtype=float)
    ok = np.zeros(len(pts), dtype=bool)
    todo = np.arange(len(pts))
    for step in range(max_steps + 1):
        if todo.size == 0:
            break
        v, g = f.value_and_gradient(pts[todo])
        done = np.abs(v) <= xi
        ok[todo[done]] = True
        todo, v, g = todo[~done], v[~done], g[~done]
        if step == max_steps or todo.size == 0:
            break
        gn2 = np.einsum("ij,ij->i", g, g)
        good = gn2 > 1e-16
        todo, v, g, gn2 = todo[good], v[good], g[good], gn2[good]
        pts[todo] -= (v / gn2)[:, None] * g
    return pts, ok


def cross_residual(points, f_src: SdfField, f_dst: SdfField, T: Sim3Matrix):
    """``|f_src(x) - (f_dst placed by T)(x)|`` for points in the source frame."""
    return np.abs(f_src.value(points) - TransformedField(f_dst, T).value(points))


def resample(current: SampleSet, f_src: SdfField, f_dst: SdfField, T: Sim3Matrix,
             params: ResamplerParams, rng_seed, xi: float = 0.02) -> SampleSet:
    """Refresh a sample set during optimization.

    ``T`` places ``f_dst`` into the frame of ``f_src`` (the frame of the samples).
    """
    if len(current) == 0:
        raise ResampleError("cannot resample an empty sample set")
    rng = np.random.default_rng(rng_seed)
    n = len(current)
    rho = params.rho if params.rho is not None else current.radius / 20.0
    moved = current.points + rng.normal(scale=rho, size=current.points.shape)
    moved, ok = project_to_surface(f_src, moved, xi)
    if current.region is not None:
        ok &= _in_box(moved, current.region)
    if not ok.any():
        raise ResampleError(f"all {n} perturbed samples were dropped")
    pts, views = moved[ok], current.source_view[ok]

    n_fresh = int(round(params.omega2 * n))
    n_fill = max(0, n - len(pts))
    n_draw = min(len(current.pool), n_fresh + n_fill)
    if n_draw:
        pick = rng.choice(len(current.pool), size=n_draw, replace=False)
        pts = np.concatenate([pts, current.pool[pick]])
        views = np.concatenate([views, np.full(n_draw, -1, dtype=np.int64)])

    if len(pts) > n:
        res = cross_residual(pts, f_src, f_dst, T)
        order = rng.permutation(len(pts))
        priority = res[order] > params.omega1
        # stable: high-residual first, random order within each group
        order = order[np.argsort(~priority, kind="stable")]
        keep = np.sort(order[:n])
        pts, views = pts[keep], views[keep]
    return replace(current, points=pts, source_view=views)
