"""Acceptance criteria. Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line."""

import dataclasses
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from regnf.config import RegistrationConfig
from regnf.fields import GridField, ObjectLibrary, TransformedField, field_from_spec, grid_field_save
from regnf.fine import optimize, regularizer, residual_forward
from regnf.harness import run_registration, strip_timings
from regnf.harness.benchmark import PerturbationLevel, generate_benchmark, random_pose, run_benchmark
from regnf.harness.edit import hit_rate, substitute
from regnf.harness.scene import Instance, SceneConfig, detection_from_instance
from regnf.sampling import SamplingConfig, extract_surface_samples
from regnf.transforms import Sim3Matrix, Sim3Params, sim3_from_params

from conftest import LIBRARY_SPECS, asymmetric_object, degraded_fixture, random_sim3, report_stub
from test_fine import GRADIENT_FIXTURES, brute_regularizer, gradient_check

# criterion tolerances
MEDIAN_DT, MEDIAN_DR, MEDIAN_DS = 0.05, 0.05, 0.02
MIN_SUCCESS = 0.90
FINE_OVER_INIT = 0.2
MULTI_VIEW_WINS = 0.80
EARLY_STOP_RESIDUAL, EARLY_STOP_ITERS = 0.0005, 2
REG_TOL = 1e-12
BASIN_DT, BASIN_DR, BASIN_RATE = 0.5, 0.7, 0.95
LOCALITY_TOL, HIT_BEFORE, HIT_AFTER = 1e-9, 0.5, 0.95
RUNTIME_BUDGET = 60.0


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return report


@pytest.fixture(scope="module")
def recovery_trials():
    """52 benchmark trials over sphere, box, torus and a two-primitive composite, default config."""
    spec = {"library": LIBRARY_SPECS, "scenes_per_level": 52,
            "levels": [{"name": "recovery", "rotation_max": float(np.deg2rad(30.0)), "translation_max": 0.5,
                        "scale_range": [0.5, 2.0]}]}
    suite = run_benchmark(generate_benchmark(1, spec), RegistrationConfig())
    return [suite.results[k] for k in range(len(suite.cases))]


def _success(r):
    if not r.get("errors"):
        return False
    e = r["errors"]["final"]
    return e["delta_t"] <= MEDIAN_DT and e["delta_R_sym_rad"] <= MEDIAN_DR and e["delta_s"] <= MEDIAN_DS


def test_1_known_transform_recovery(recovery_trials, verdict):
    res = recovery_trials
    done = [r for r in res if r.get("errors")]
    fin = [r["errors"]["final"] for r in done]
    med = {k: float(np.median([e[k] for e in fin])) for k in ("delta_t", "delta_R_sym_rad", "delta_s")}
    ok_rate = np.mean([_success(r) for r in res])
    bad_status = [r.get("trace", {}).get("status", r.get("failed_stage")) for r in res
                  if not _success(r) and r.get("trace", {}).get("status") != "max-iters"]
    ok = (len(res) >= 50 and med["delta_t"] <= MEDIAN_DT and med["delta_R_sym_rad"] <= MEDIAN_DR
          and med["delta_s"] <= MEDIAN_DS and ok_rate >= MIN_SUCCESS and not bad_status)
    verdict(1, ok, f"{len(res)} trials, median dt={med['delta_t']:.4g} dR={med['delta_R_sym_rad']:.4g} "
                   f"ds={med['delta_s']:.4g}, success {ok_rate:.0%}, non-max-iters failures {bad_status}")


def test_2_fine_improves_on_init(recovery_trials, verdict):
    good = [r for r in recovery_trials if _success(r)]
    worse = [r["object"] for r in good
             if not (r["errors"]["final"]["delta_t"] < r["errors"]["init"]["delta_t"]
                     and r["errors"]["final"]["delta_s"] < r["errors"]["init"]["delta_s"])]
    ratio = float(np.median([r["errors"]["final"]["delta_t"] / r["errors"]["init"]["delta_t"] for r in good]))
    verdict(2, bool(good) and not worse and ratio <= FINE_OVER_INIT,
            f"{len(good)} successful trials, not strictly improved: {worse}, median dt ratio {ratio:.4g}")


def _view_trial(seed, n_single=4):
    """Multi-view registration against the worst of ``n_single`` face-on single views."""
    lib = ObjectLibrary({"asym": asymmetric_object()})
    lo, hi = lib["asym"].bounds
    rng = np.random.default_rng(seed)
    inst = Instance("asym", random_pose(rng, PerturbationLevel(), float(np.linalg.norm(hi - lo))))
    scene = SceneConfig("views", lib, [inst], [detection_from_instance(lib, inst)])
    f = scene.build_field()
    base = RegistrationConfig()
    keys = ("delta_t", "delta_R_rad", "delta_s")
    multi = run_registration(scene, f, "asym", base, seed).errors["final"]
    worst = dict.fromkeys(keys, 0.0)
    for k in range(n_single):
        az = 2 * np.pi * k / n_single
        single = dataclasses.replace(base.sampling, n_views=1, elevation_range=(0.0, 0.0),
                                     azimuth_range=(az, az + 2 * np.pi))
        try:
            e = run_registration(scene, f, "asym", dataclasses.replace(base, scene_sampling=single), seed)
            e = e.errors["final"]
        except Exception:
            e = dict.fromkeys(keys, np.inf)
        worst = {q: max(worst[q], e[q]) for q in keys}
    return all(multi[q] < worst[q] for q in keys)


def test_3_multi_view_beats_single_hostile_view(verdict):
    wins = [_view_trial(seed) for seed in range(20)]
    rate = float(np.mean(wins))
    verdict(3, rate >= MULTI_VIEW_WINS, f"multi-view better on dt, dR and ds in {rate:.0%} of 20 trials")


def test_4_gradients_match_finite_differences(verdict):
    worst = {name: gradient_check(name, 20, 2026) for name in sorted(GRADIENT_FIXTURES)}
    verdict(4, all(v <= 1.0 for v in worst.values()),
            "worst error / tolerance per fixture: " + ", ".join(f"{k}={v:.3g}" for k, v in worst.items()))


def test_5_early_stop_on_exact_init(verdict):
    lib = {name: field_from_spec(spec) for name, spec in LIBRARY_SPECS.items()}
    lib["asym"] = asymmetric_object()
    rows = []
    for name, f in lib.items():
        lo, hi = f.bounds
        s = extract_surface_samples(f, 0.5 * (lo + hi), 1.25 * np.linalg.norm(hi - lo), SamplingConfig(), "object")
        T, trace = optimize(f, f, s, s, Sim3Matrix())
        res = float(np.mean(residual_forward(s.points, f, f, T)))
        rows.append((name, trace.status, len(trace), res))
    ok = all(st == "early-stopped" and n <= EARLY_STOP_ITERS and r <= EARLY_STOP_RESIDUAL for _, st, n, r in rows)
    verdict(5, ok, "; ".join(f"{n}: {st} after {k} it, residual {r:.2g}" for n, st, k, r in rows))


def test_6_regularizer_oracle(verdict):
    diffs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        A, B = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
        T = random_sim3(rng)
        diffs.append(abs(regularizer(A, B, T) - brute_regularizer(A, B, T)))
    verdict(6, max(diffs) <= REG_TOL, f"max |fast - brute force| over 10 seeds = {max(diffs):.3g}")


def test_7_coarse_basin(recovery_trials, verdict):
    init = [r["errors"]["init"] for r in recovery_trials if r.get("errors")]
    inside = [e["delta_t"] <= BASIN_DT and e["delta_R_sym_rad"] <= BASIN_DR for e in init]
    rate = sum(inside) / len(recovery_trials)
    verdict(7, rate >= BASIN_RATE, f"coarse stage within dt<={BASIN_DT}, dR<={BASIN_DR} in {rate:.0%} "
                                   f"of {len(recovery_trials)} trials")


def _outside_diff(edited, f, lo, hi, n=40):
    axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
    probe = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    out = ~np.all((probe >= edited.box_lo) & (probe <= edited.box_hi), axis=1)
    return float(np.abs(edited.value(probe[out]) - f.value(probe[out])).max())


def test_8_substitution_locality_and_hit_rate(verdict):
    scene, truth, grid, back, region = degraded_fixture()
    T = scene.instance("crate").transform
    edited = substitute(scene, grid, report_stub("crate", T), "crate")
    loc_grid = _outside_diff(edited, grid, [-1.5, -1.5, -1.2], [3.0, 1.5, 1.2])
    swapped = substitute(scene, truth, report_stub("crate", T), "ring")
    loc_analytic = _outside_diff(swapped, truth, [-2.0, -2.0, -1.5], [3.5, 2.0, 1.5])
    before = hit_rate(grid, truth, back, region=region)
    after = hit_rate(edited, truth, back, region=region)
    ok = max(loc_grid, loc_analytic) <= LOCALITY_TOL and before < HIT_BEFORE and after > HIT_AFTER
    verdict(8, ok, f"outside-box max |diff| grid={loc_grid:.3g} analytic={loc_analytic:.3g}; "
                   f"back-view hit rate {before:.3f} -> {after:.3f}")


@pytest.fixture(scope="module")
def grid_scene(tmp_path_factory):
    """Asymmetric object and its placed instance, both baked on 64^3 grids."""
    d = tmp_path_factory.mktemp("grid64")
    obj = asymmetric_object()
    lo, hi = obj.bounds
    m = 0.1 * float((hi - lo).max())
    og = GridField.from_field(obj, lo - m, hi + m, (64, 64, 64))
    grid_field_save(og, d / "obj.sdfg")
    pose = {"t_x": 0.3, "t_y": -0.2, "r_r": 0.2, "r_y": 0.4, "sigma": 1.4}
    inst = TransformedField(og, sim3_from_params(Sim3Params.from_dict(pose)))
    slo, shi = inst.bounds
    sm = 0.1 * float((shi - slo).max())
    grid_field_save(GridField.from_field(inst, slo - sm, shi + sm, (64, 64, 64)), d / "scene.sdfg")
    scene = {"name": "grid64", "library": {"asym": {"backend": "grid", "path": "obj.sdfg"}},
             "instances": [{"object": "asym", "pose": pose}], "grid": "scene.sdfg",
             "detections": [{"object": "asym", "box": {"min": slo.tolist(), "max": shi.tolist()}}]}
    (d / "scene.json").write_text(json.dumps(scene))
    return d


def _cli_register(d, threads, out):
    env = dict(os.environ, REGNF_NUM_THREADS=str(threads))
    t0 = time.perf_counter()
    p = subprocess.run([sys.executable, "-m", "regnf", "--threads", str(threads), "register",
                        "--scene", str(d / "scene.json"), "--object", "asym", "--seed", "5", "--out", str(out)],
                       env=env, capture_output=True, text=True)
    return p, time.perf_counter() - t0


def test_9_runtime_budget_on_64_grids(grid_scene, verdict):
    p, wall = _cli_register(grid_scene, 1, grid_scene / "rep_t1.json")
    rep = json.loads((grid_scene / "rep_t1.json").read_text()) if p.returncode == 0 else {}
    err = rep.get("errors", {}).get("final", {})
    ok = p.returncode == 0 and wall < RUNTIME_BUDGET
    verdict(9, ok, f"single-threaded 64^3 registration {wall:.1f} s wall (exit {p.returncode}), "
                   f"final dt={err.get('delta_t', float('nan')):.3g} {p.stderr.strip()[-200:]}")


def test_10_reports_identical_across_thread_counts(grid_scene, verdict):
    blobs, codes = [], []
    for threads in (1, 2, 4):
        out = grid_scene / f"rep_det{threads}.json"
        p, _ = _cli_register(grid_scene, threads, out)
        codes.append(p.returncode)
        if p.returncode == 0:
            blobs.append(json.dumps(strip_timings(json.loads(out.read_text())), sort_keys=True).encode())
    same = len(blobs) == 3 and len(set(blobs)) == 1
    verdict(10, same, f"exit codes {codes}; timing-stripped reports byte-identical across 1/2/4 threads: {same}")
