"""Scene ingestion, end-to-end runs, substitution, rendering and benchmarks."""

from .run import RegistrationReport, StageError, run_registration, strip_timings, write_json_atomic
from .scene import Detection, Instance, SceneConfig, SceneLoadError, load_scene_config, scene_from_dict

__all__ = ["Detection", "Instance", "RegistrationReport", "SceneConfig", "SceneLoadError", "StageError",
           "load_scene_config", "run_registration", "scene_from_dict", "strip_timings", "write_json_atomic"]
