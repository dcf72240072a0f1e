"""Seeded synthetic benchmark: rooms of posed library objects with logged ground truth."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from ..config import RegistrationConfig
from ..fields import ObjectLibrary
from ..transforms import Sim3Params, matrix_to_euler
from .run import StageError, run_registration, write_json_atomic
from .scene import Instance, SceneConfig, _load_library, detection_from_instance

log = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 1000


class BenchmarkError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbationLevel:
    """Pose draw ranges. ``translation_max`` is in object bounding-box diagonals."""

    name: str = "default"
    rotation_max: float = np.deg2rad(30.0)
    translation_max: float = 0.5
    scale_range: tuple = (0.5, 2.0)

    def __post_init__(self):
        if not 0 <= self.rotation_max <= np.pi:
            raise BenchmarkError(f"level {self.name}: rotation_max must lie in [0, pi]")
        if self.translation_max < 0:
            raise BenchmarkError(f"level {self.name}: translation_max must be non-negative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise BenchmarkError(f"level {self.name}: scale_range must satisfy 0 < lo <= hi")


@dataclass
class BenchmarkCase:
    scene: SceneConfig
    object: str
    level: str
    seed: int

    @property
    def cell(self):
        return (self.level, self.object)


@dataclass
class BenchmarkSuite:
    seed: int
    spec: dict
    cases: list = field(default_factory=list)
    results: dict = field(default_factory=dict)

    def cells(self):
        out = {}
        for k, c in enumerate(self.cases):
            out.setdefault(c.cell, []).append(k)
        return out

    def aggregate(self) -> list[dict]:
        """Median final-stage errors per (level, object) cell."""
        rows = []
        for (level, obj), idx in self.cells().items():
            res = [self.results.get(k) for k in idx]
            ok = [r for r in res if r is not None and r.get("errors")]
            fin = [r["errors"]["final"] for r in ok]
            ini = [r["errors"]["init"] for r in ok]

            def med(rs, key):
                return float(np.median([r[key] for r in rs])) if rs else float("nan")
            rows.append({"object": obj, "delta_t": med(fin, "delta_t"), "delta_R": med(fin, "delta_R_rad"),
                         "delta_s": med(fin, "delta_s"), "level": level,
                         "delta_R_sym": med(fin, "delta_R_sym_rad"),
                         "init_delta_t": med(ini, "delta_t"), "init_delta_R": med(ini, "delta_R_rad"),
                         "init_delta_s": med(ini, "delta_s"), "n_trials": len(idx),
                         "n_failed": len(idx) - len(ok)})
        return rows

    def write_csv(self, path):
        rows = self.aggregate()
        cols = ["object", "delta_t", "delta_R", "delta_s", "level", "delta_R_sym", "init_delta_t", "init_delta_R",
                "init_delta_s", "n_trials", "n_failed"]
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=cols)
            wr.writeheader()
            for r in rows:
                wr.writerow(r)


def random_rotation(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    """Rotation about a uniform random axis by an angle uniform in [0, max_angle]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * rng.uniform(0.0, max_angle)).as_matrix()


def random_pose(rng: np.random.Generator, level: PerturbationLevel, diag: float, anchor=(0.0, 0.0, 0.0)) -> Sim3Params:
    R = random_rotation(rng, level.rotation_max)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = np.asarray(anchor, float) + direction * rng.uniform(0.0, level.translation_max) * diag
    s = rng.uniform(*level.scale_range)
    roll, pitch, yaw = matrix_to_euler(R)
    return Sim3Params(t_x=t[0], t_y=t[1], t_z=t[2], r_r=roll, r_p=pitch, r_y=yaw, sigma=s)


def _boxes_overlap(a, b):
    return bool(np.all(a[0] < b[1]) and np.all(b[0] < a[1]))


def _place_room(rng, library: ObjectLibrary, names, level: PerturbationLevel, spacing: float):
    """Poses for ``names`` on a line of anchors; redraws until no two boxes intersect."""
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        instances, boxes = [], []
        for k, name in enumerate(names):
            lo, hi = library[name].bounds
            anchor = (k * spacing, 0.0, 0.0)
            inst = Instance(name, random_pose(rng, level, float(np.linalg.norm(hi - lo)), anchor))
            det = detection_from_instance(library, inst)
            instances.append(inst)
            boxes.append((det.lo, det.hi))
        if not any(_boxes_overlap(boxes[i], boxes[j])
                   for i in range(len(boxes)) for j in range(i + 1, len(boxes))):
            return instances
    raise BenchmarkError(f"could not place {list(names)} without overlap after {MAX_PLACEMENT_ATTEMPTS} attempts")


def _levels(spec):
    raw = spec.get("levels")
    if raw is None:
        raw = [{k: spec[k] for k in ("rotation_max", "translation_max", "scale_range") if k in spec}]
    out = []
    for k, d in enumerate(raw):
        d = dict(d)
        d.setdefault("name", f"level{k}")
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        out.append(PerturbationLevel(**d))
    return out


def generate_benchmark(seed: int, spec: dict, base_dir=".") -> BenchmarkSuite:
    """Expand a benchmark spec into scenes, deterministically from ``seed``.

    Spec keys: ``library`` (manifest path or inline mapping), ``objects``
    (defaults to the whole library), ``levels`` (list of perturbation levels,
    or top-level ``rotation_max``/``translation_max``/``scale_range``),
    ``scenes_per_level``, ``objects_per_scene`` and ``spacing`` (anchor
    distance along x; defaults to three times the largest scaled diagonal).
    """
    library, specs = _load_library(spec.get("library"), Path(base_dir))
    names = list(spec.get("objects") or library.names())
    for n in names:
        if n not in library:
            raise BenchmarkError(f"benchmark object {n!r} is not in the library")
    levels = _levels(spec)
    n_scenes = int(spec.get("scenes_per_level", 1))
    per_scene = int(spec.get("objects_per_scene", 1))
    if n_scenes < 1 or per_scene < 1:
        raise BenchmarkError("scenes_per_level and objects_per_scene must be positive")
    max_diag = max(float(np.linalg.norm(np.subtract(*library[n].bounds[::-1]))) for n in names)
    suite = BenchmarkSuite(seed, spec)
    ss = np.random.SeedSequence(int(seed))
    for li, level in enumerate(levels):
        spacing = float(spec.get("spacing", 3.0 * max_diag * level.scale_range[1]))
        for si in range(n_scenes):
            child = np.random.SeedSequence(ss.entropy, spawn_key=(li, si))
            rng = np.random.default_rng(child)
            chosen = [names[(si * per_scene + k) % len(names)] for k in range(per_scene)]
            instances = _place_room(rng, library, chosen, level, spacing)
            detections = [detection_from_instance(library, i) for i in instances]
            scene = SceneConfig(f"{level.name}-room{si:03d}", library, instances, detections,
                                library_specs=specs)
            for obj in dict.fromkeys(chosen):
                run_seed = int(rng.integers(0, 2**31 - 1))
                suite.cases.append(BenchmarkCase(scene, obj, level.name, run_seed))
    return suite


def _run_case(case: BenchmarkCase, cfg: RegistrationConfig):
    try:
        rep = run_registration(case.scene, case.scene.build_field(), case.object, cfg, case.seed)
    except StageError as exc:
        return {"scene": case.scene.name, "object": case.object, "seed": case.seed,
                "failed_stage": exc.stage, "error": str(exc.cause), "errors": None}
    return rep.to_dict()


def run_benchmark(suite: BenchmarkSuite, cfg: RegistrationConfig, out_dir=None, jobs: int = 1) -> BenchmarkSuite:
    """Run every case (in ``jobs`` worker processes), writing per-case reports to ``out_dir``."""
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_case, suite.cases, [cfg] * len(suite.cases)))
    else:
        results = [_run_case(c, cfg) for c in suite.cases]
    for k, (case, res) in enumerate(zip(suite.cases, results)):
        suite.results[k] = res
        if out_dir is not None:
            write_json_atomic(Path(out_dir) / f"{case.scene.name}__{case.object}.json", res)
    if out_dir is not None:
        suite.write_csv(Path(out_dir) / "aggregate.csv")
    return suite
