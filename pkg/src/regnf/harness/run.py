"""End-to-end registration of one library object against a scene."""

from __future__ import annotations

import json
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..coarse import InitialisationError, initial_registration
from ..config import RegistrationConfig
from ..fields import SdfField
from ..fine import OptimizationAbort, final_kernel, optimize
from ..metrics import registration_errors
from ..sampling import ExtractionError, ResampleError, extract_surface_samples
from ..transforms import Sim3Matrix, params_from_sim3
from .scene import SceneConfig


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def transform_record(T: Sim3Matrix) -> dict:
    return {"matrix": T.to_dict(), "params": params_from_sim3(T).to_dict()}


@dataclass
class RegistrationReport:
    scene: str
    object: str
    seed: int
    T_init: Sim3Matrix
    T_final: Sim3Matrix
    coarse: dict
    trace: dict
    config: dict
    timings: dict
    errors: dict | None = None
    kernel: dict = field(default_factory=dict)
    full_trace: object = None

    @property
    def status(self):
        return self.trace["status"]

    def to_dict(self) -> dict:
        d = {"scene": self.scene, "object": self.object, "seed": self.seed,
             "T_init": transform_record(self.T_init), "T_final": transform_record(self.T_final),
             "coarse": self.coarse, "optimization": self.trace, "kernel": self.kernel,
             "errors": self.errors, "timings": self.timings, "config": self.config}
        return d

    def write(self, path):
        write_json_atomic(path, self.to_dict())


def write_json_atomic(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def strip_timings(obj):
    """Copy of a report dict without wall-clock fields (keys ending in ``_seconds``)."""
    if isinstance(obj, dict):
        return {k: strip_timings(v) for k, v in obj.items() if not k.endswith("_seconds")}
    if isinstance(obj, list):
        return [strip_timings(v) for v in obj]
    return obj


def run_registration(scene: SceneConfig, scene_field: SdfField, object_name: str,
                     cfg: RegistrationConfig = RegistrationConfig(), seed: int = 0) -> RegistrationReport:
    """Sample both fields, initialise with FPFH/RANSAC/ICP and refine the pose."""
    det = scene.detection(object_name)
    obj = scene.library[object_name]
    t_start = time.perf_counter()

    pad = cfg.region_padding * (det.hi - det.lo) + cfg.sampling.xi
    region = (det.lo - pad, det.hi + pad)
    scene_sampling = cfg.scene_sampling or cfg.sampling
    olo, ohi = obj.bounds
    o_half = 0.5 * float(np.linalg.norm(ohi - olo))
    try:
        A = extract_surface_samples(
            scene_field, det.centroid, scene_sampling.view_radius or cfg.view_distance * det.half_diagonal,
            scene_sampling, "scene", region, name=f"scene {scene.name}")
        B = extract_surface_samples(
            obj, 0.5 * (olo + ohi), cfg.sampling.view_radius or cfg.view_distance * o_half,
            cfg.sampling, "object", name=f"object {object_name}")
    except ExtractionError as exc:
        raise StageError("sampling", exc) from exc
    t_sampled = time.perf_counter()

    try:
        coarse_cfg = cfg.coarse
        T_init, diag = initial_registration(A, B, coarse_cfg, scene_field, obj)
    except InitialisationError as exc:
        raise StageError("initialisation", exc) from exc
    t_init = time.perf_counter()

    try:
        T_final, trace = optimize(scene_field, obj, A, B, T_init, cfg.optimizer, seed)
    except (OptimizationAbort, ResampleError) as exc:
        raise StageError("optimization", exc) from exc
    t_opt = time.perf_counter()

    errors = None
    inst = scene.instance(object_name)
    if inst is not None:
        T_gt = inst.transform
        box = (det.lo, det.hi)
        errors = {"init": registration_errors(T_gt, T_init, box, obj.symmetry).to_dict(),
                  "final": registration_errors(T_gt, T_final, box, obj.symmetry).to_dict(),
                  "ground_truth": transform_record(T_gt)}
    k = final_kernel(trace)
    coarse = diag.to_dict()
    coarse["n_scene_samples"] = len(A)
    coarse["n_object_samples"] = len(B)
    return RegistrationReport(
        scene=scene.name, object=object_name, seed=int(seed), T_init=T_init, T_final=T_final,
        coarse=coarse, trace=trace.summary(), config=cfg.to_dict(),
        timings={"sampling_seconds": t_sampled - t_start, "init_seconds": t_init - t_sampled,
                 "optimize_seconds": t_opt - t_init, "total_seconds": t_opt - t_start},
        errors=errors, kernel={"p": k.p, "alpha": k.alpha}, full_trace=trace)
