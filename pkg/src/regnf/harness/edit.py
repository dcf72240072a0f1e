"""Library substitution, instance replacement and the degraded-scene fixture."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..fields import EditedField, GridField, SdfField, carve_and_substitute, transformed_bounds
from ..sampling import CameraPose, SamplingConfig, extract_surface_samples
from ..transforms import Sim3Matrix
from .render import trace_image
from .scene import SceneConfig


class SubstitutionError(ValueError):
    pass


def _report_fields(report):
    d = report.to_dict() if hasattr(report, "to_dict") else report
    try:
        T = Sim3Matrix.from_dict(d["T_final"]["matrix"])
        name = d["object"]
    except (KeyError, TypeError, ValueError) as exc:
        raise SubstitutionError(f"report lacks a usable T_final/object: {exc}") from exc
    xi = (d.get("config") or {}).get("sampling", {}).get("xi", SamplingConfig().xi)
    return name, T, float(xi)


def carve_box(scene: SceneConfig, object_name: str, replacement: str, T: Sim3Matrix, margin: float):
    """Transformed bounds of the registered object and the replacement, grown by ``margin``."""
    lo, hi = transformed_bounds(*scene.library[object_name].bounds, T)
    if replacement != object_name:
        rlo, rhi = transformed_bounds(*scene.library[replacement].bounds, T)
        lo, hi = np.minimum(lo, rlo), np.maximum(hi, rhi)
    return lo - margin, hi + margin


def substitute(scene: SceneConfig, scene_field: SdfField, report, replacement: str,
               margin: float | None = None) -> EditedField:
    """Carve the registered object's region out of the scene and insert ``replacement`` at ``T_final``.

    ``margin`` defaults to two voxels of a grid scene, or to twice the
    sampling band of the run that produced the report for analytic scenes.
    """
    name, T, xi = _report_fields(report)
    if replacement not in scene.library:
        raise SubstitutionError(f"replacement {replacement!r} is not in the library "
                                f"(have {sorted(scene.library.names())})")
    if name not in scene.library:
        raise SubstitutionError(f"registered object {name!r} is not in the library")
    if margin is None:
        margin = 2.0 * (float(scene_field.spacing.max()) if isinstance(scene_field, GridField) else xi)
    lo, hi = carve_box(scene, name, replacement, T, margin)
    return carve_and_substitute(scene_field, lo, hi, scene.library[replacement], T)


def degrade_scene(f: SdfField, lo, hi, dims, centroid, view_radius: float,
                  azimuth_range=(-np.pi / 3, np.pi / 3), n_views: int = 4,
                  band: float | None = None, fill: float | None = None) -> GridField:
    """Grid bake of ``f`` that only knows what a restricted camera arc saw.

    Nodes within ``band`` of a surface sample visible from the arc keep the
    true value; all other nodes get the constant ``fill``, which hides the
    unseen surfaces from sphere tracing. Defaults: band 3 voxels, fill 4 voxels.
    """
    cfg = SamplingConfig(n_views=n_views, azimuth_range=tuple(azimuth_range), ray_grid=(64, 64))
    seen = extract_surface_samples(f, centroid, view_radius, cfg, "scene", name="degraded bake")
    grid = GridField.from_field(f, lo, hi, dims)
    h = float(grid.spacing.max())
    band = 3.0 * h if band is None else band
    fill = 4.0 * h if fill is None else fill
    nodes = grid.node_points()
    dist, _ = cKDTree(seen.points).query(nodes)
    vals = grid.values.reshape(-1).copy()
    vals[dist > band] = fill
    return GridField(vals.reshape(grid.values.shape), grid.origin, grid.spacing)


def hit_rate(f: SdfField, truth: SdfField, pose: CameraPose, resolution=(64, 64), tol: float = 0.02,
             region=None) -> float:
    """Share of rays hitting ``truth`` (inside ``region`` when given) that ``f`` also hits within ``tol``."""
    p_true, h_true, _ = trace_image(truth, pose, resolution)
    p_test, h_test, _ = trace_image(f, pose, resolution)
    want = h_true
    if region is not None:
        lo, hi = region
        want = want & np.all((p_true >= lo) & (p_true <= hi), axis=-1)
    if not want.any():
        return float("nan")
    good = h_test & (np.linalg.norm(p_test - p_true, axis=-1) <= tol)
    return float(np.count_nonzero(good & want) / np.count_nonzero(want))
