"""Scene descriptions: posed library objects plus detection boxes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..fields import (FieldError, ObjectLibrary, SdfField, composite_scene, field_from_spec,
                      grid_field_load, transformed_bounds)
from ..transforms import InvalidParameterError, Sim3Matrix, Sim3Params, sim3_from_params


class SceneLoadError(ValueError):
    pass


@dataclass
class Instance:
    object: str
    pose: Sim3Params

    @property
    def transform(self) -> Sim3Matrix:
        return sim3_from_params(self.pose)


@dataclass
class Detection:
    object: str
    lo: np.ndarray
    hi: np.ndarray

    @property
    def centroid(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def half_diagonal(self):
        return 0.5 * float(np.linalg.norm(self.hi - self.lo))


@dataclass
class SceneConfig:
    name: str
    library: ObjectLibrary
    instances: list = field(default_factory=list)
    detections: list = field(default_factory=list)
    grid_path: str | None = None
    library_specs: dict = field(default_factory=dict)

    def instance(self, name) -> Instance | None:
        for inst in self.instances:
            if inst.object == name:
                return inst
        return None

    def detection(self, name) -> Detection:
        for det in self.detections:
            if det.object == name:
                return det
        raise SceneLoadError(f"scene {self.name!r} has no detection for object {name!r}")

    def build_field(self) -> SdfField:
        if self.grid_path is not None:
            return grid_field_load(self.grid_path)
        return composite_scene([(self.library[i.object], i.transform) for i in self.instances])

    def to_dict(self) -> dict:
        d = {"name": self.name, "library": self.library_specs,
             "instances": [{"object": i.object, "pose": i.pose.to_dict()} for i in self.instances],
             "detections": [{"object": d.object, "box": {"min": d.lo.tolist(), "max": d.hi.tolist()}}
                            for d in self.detections]}
        if self.grid_path is not None:
            d["grid"] = str(self.grid_path)
        return d


def detection_from_instance(library: ObjectLibrary, inst: Instance) -> Detection:
    """Ground-truth detection: the axis-aligned box of the posed object bounds."""
    lo, hi = transformed_bounds(*library[inst.object].bounds, inst.transform)
    return Detection(inst.object, lo, hi)


def _load_library(spec, base: Path):
    if isinstance(spec, str):
        path = base / spec
        if not path.exists():
            raise SceneLoadError(f"library manifest not found: {path}")
        with open(path) as fh:
            specs = json.load(fh)
        lib_base = path.parent
    elif isinstance(spec, dict):
        specs, lib_base = spec, base
    else:
        raise SceneLoadError("scene 'library' must be a manifest path or an inline mapping")
    try:
        entries = {name: field_from_spec(s, lib_base) for name, s in specs.items()}
    except FieldError as exc:
        raise SceneLoadError(f"library: {exc}") from exc
    # grid paths become absolute so the echo stays valid from anywhere
    resolved = {}
    for name, s in specs.items():
        s = dict(s)
        if s.get("backend") == "grid":
            s["path"] = str((lib_base / s["path"]).resolve())
        resolved[name] = s
    return ObjectLibrary(entries), resolved


def scene_from_dict(d: dict, base_dir=".") -> SceneConfig:
    base = Path(base_dir)
    if not isinstance(d, dict):
        raise SceneLoadError("scene config must be a JSON object")
    if "library" not in d:
        raise SceneLoadError("scene config needs a 'library'")
    library, specs = _load_library(d["library"], base)
    instances = []
    for k, raw in enumerate(d.get("instances", [])):
        name = raw.get("object")
        if name not in library:
            raise SceneLoadError(f"instance {k}: object {name!r} is not in the library")
        try:
            pose = Sim3Params.from_dict(raw.get("pose", {}))
        except (InvalidParameterError, TypeError, ValueError) as exc:
            raise SceneLoadError(f"instance {k} ({name}): malformed pose: {exc}") from exc
        instances.append(Instance(name, pose))
    detections = []
    for k, raw in enumerate(d.get("detections", [])):
        name = raw.get("object")
        present = any(i.object == name for i in instances) or d.get("grid") is not None
        if name not in library or not present:
            raise SceneLoadError(f"detection {k}: object {name!r} is not present in the scene")
        try:
            lo = np.asarray(raw["box"]["min"], dtype=float)
            hi = np.asarray(raw["box"]["max"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneLoadError(f"detection {k} ({name}): malformed box") from exc
        if lo.shape != (3,) or hi.shape != (3,) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise SceneLoadError(f"detection {k} ({name}): box must be two finite 3-vectors")
        if np.any(hi <= lo):
            raise SceneLoadError(f"detection {k} ({name}): box max must exceed min")
        detections.append(Detection(name, lo, hi))
    grid = d.get("grid")
    if grid is not None:
        grid = base / grid
        if not grid.exists():
            raise SceneLoadError(f"scene grid file not found: {grid}")
        grid = str(grid.resolve())
    elif not instances:
        raise SceneLoadError("scene needs instances or a baked grid")
    return SceneConfig(d.get("name", "scene"), library, instances, detections, grid, specs)


def load_scene_config(path) -> tuple[SceneConfig, SdfField]:
    """Read a scene JSON and build its field."""
    path = Path(path)
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError as exc:
        raise SceneLoadError(f"scene file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SceneLoadError(f"scene file {path} is not valid JSON: {exc}") from exc
    scene = scene_from_dict(d, path.parent)
    try:
        f = scene.build_field()
    except FieldError as exc:
        raise SceneLoadError(str(exc)) from exc
    return scene, f
