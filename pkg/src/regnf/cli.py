"""Command-line entry point: register, benchmark, substitute, render."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import kernels
from .config import ConfigError, RegistrationConfig
from .fields import FieldError, field_from_spec, grid_field_load
from .fine import OptimizationAbort
from .harness.benchmark import BenchmarkError, generate_benchmark, run_benchmark
from .harness.edit import SubstitutionError, substitute
from .harness.render import render_image, write_ppm
from .harness.run import StageError, run_registration, write_json_atomic
from .harness.scene import SceneLoadError, load_scene_config, scene_from_dict
from .sampling import CameraPose

EXIT_OK, EXIT_LOAD, EXIT_REGISTRATION, EXIT_ABORT = 0, 2, 3, 4

log = logging.getLogger("regnf")


class LoadError(Exception):
    pass


def _read_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise LoadError(f"{what} not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{what} {path} is not valid JSON: {exc}") from exc


def _config_from(d, what):
    try:
        return RegistrationConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise LoadError(f"{what}: {exc}") from exc


def _load_config(path):
    if path is None:
        return RegistrationConfig()
    return _config_from(_read_json(path, "config"), f"config {path}")


def _load_pose(path):
    d = _read_json(path, "pose")
    try:
        pose = CameraPose.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"pose {path}: {exc}") from exc
    return pose, tuple(d.get("resolution", (128, 128)))


def _load_field(path):
    """A grid file, a scene JSON (has a ``library``) or a single field spec."""
    path = Path(path)
    if path.suffix.lower() in (".sdfg", ".grid", ".bin"):
        return grid_field_load(path)
    d = _read_json(path, "field spec")
    if isinstance(d, dict) and "library" in d:
        return scene_from_dict(d, path.parent).build_field()
    return field_from_spec(d, path.parent)


def cmd_register(args):
    scene, f = load_scene_config(args.scene)
    cfg = _load_config(args.config)
    rep = run_registration(scene, f, args.object, cfg, args.seed)
    rep.write(args.out)
    if args.trace:
        if str(args.trace).endswith(".csv"):
            rep.full_trace.to_csv(args.trace)
        else:
            write_json_atomic(args.trace, rep.full_trace.to_dict())
    fin = rep.errors["final"] if rep.errors else None
    log.info("%s/%s: %s after %d iterations%s", scene.name, args.object, rep.status,
             rep.trace["iterations"], f"; final errors {fin}" if fin else "")
    return EXIT_OK


def cmd_benchmark(args):
    spec_path = Path(args.spec)
    spec = _read_json(spec_path, "benchmark spec")
    cfg = _config_from(spec.get("config", {}), f"benchmark spec {spec_path} config")
    suite = generate_benchmark(args.seed, spec, spec_path.parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_benchmark(suite, cfg, out, jobs=args.jobs)
    log.info("wrote %d reports and aggregate.csv to %s", len(suite.cases), out)
    return EXIT_OK


def cmd_substitute(args):
    scene, f = load_scene_config(args.scene)
    report = _read_json(args.report, "report")
    edited = substitute(scene, f, report, args.replacement, args.margin)
    pose, res = _load_pose(args.render)
    write_ppm(args.out, render_image(edited, pose, res))
    return EXIT_OK


def cmd_render(args):
    f = _load_field(args.field)
    pose, res = _load_pose(args.pose)
    write_ppm(args.out, render_image(f, pose, res))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="regnf", description="Sim(3) registration of SDF objects into SDF scenes.")
    p.add_argument("--threads", type=int, default=None,
                   help="kernel thread count (overrides REGNF_NUM_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="register one library object against a scene")
    r.add_argument("--scene", required=True)
    r.add_argument("--object", required=True)
    r.add_argument("--config", default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--trace", default=None, help="also write the optimisation trace (.json or .csv)")
    r.set_defaults(func=cmd_register)

    b = sub.add_parser("benchmark", help="generate and run a synthetic benchmark")
    b.add_argument("--spec", required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.add_argument("--jobs", type=int, default=1)
    b.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("substitute", help="replace a registered object and render the result")
    s.add_argument("--scene", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--replacement", required=True)
    s.add_argument("--render", required=True, help="camera pose JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--margin", type=float, default=None)
    s.set_defaults(func=cmd_substitute)

    d = sub.add_parser("render", help="render a field")
    d.add_argument("--field", required=True)
    d.add_argument("--pose", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        kernels.set_num_threads(args.threads)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT if isinstance(exc.cause, OptimizationAbort) else EXIT_REGISTRATION
    except (LoadError, SceneLoadError, ConfigError, FieldError, SubstitutionError, BenchmarkError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the abort code
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
