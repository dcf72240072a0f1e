"""Signed distance fields: analytic primitives, voxel grids and their compositions.

All fields accept a single point ``(3,)`` or a batch ``(n, 3)`` and return a
scalar or ``(n,)`` array accordingly. Distances are negative inside.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from . import kernels
from .transforms import (Sim3Matrix, Sim3Params, sim3_apply, sim3_apply_inverse,
                         sim3_from_params)


class FieldError(ValueError):
    pass


class GridFormatError(FieldError):
    pass


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return np.atleast_2d(x), single


def _unbatch(v, single):
    return v[0] if single else v


def box_sdf(x, lo, hi):
    """Exact signed distance to an axis-aligned box ``[lo, hi]`` for ``(n, 3)`` points."""
    c = 0.5 * (np.asarray(lo) + np.asarray(hi))
    h = 0.5 * (np.asarray(hi) - np.asarray(lo))
    q = np.abs(x - c) - h
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


class SdfField:
    """Base class. Subclasses implement ``_value`` and optionally ``_gradient``."""

    #: rotational symmetry of the shape about the object-frame origin, used by metrics
    symmetry: tuple = ("none",)

    def value(self, x):
        pts, single = _as_batch(x)
        return _unbatch(self._value(pts), single)

    def gradient(self, x):
        pts, single = _as_batch(x)
        return _unbatch(self._gradient(pts), single)

    def value_and_gradient(self, x):
        pts, single = _as_batch(x)
        v, g = self._value_and_gradient(pts)
        return _unbatch(v, single), _unbatch(g, single)

    def _value_and_gradient(self, pts):
        return self._value(pts), self._gradient(pts)

    @property
    def bounds(self) -> tuple[NDArray, NDArray]:
        raise NotImplementedError

    def fd_step(self) -> float:
        lo, hi = self.bounds
        return 1e-4 * float(np.linalg.norm(hi - lo)) / 1000.0

    def _gradient(self, pts):
        return central_difference_gradient(self._value, pts, self.fd_step())

    def _value(self, pts):
        raise NotImplementedError


def central_difference_gradient(fn, pts, h):
    g = np.empty_like(pts)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (fn(pts + e) - fn(pts - e)) / (2.0 * h)
    return g


def eval_sdf(f: SdfField, x):
    return f.value(x)


def sdf_gradient(f: SdfField, x):
    return f.gradient(x)


# --------------------------------------------------------------------------
# analytic primitives
# --------------------------------------------------------------------------

class Sphere(SdfField):
    def __init__(self, radius=1.0, center=(0.0, 0.0, 0.0)):
        if radius <= 0:
            raise FieldError(f"sphere radius must be positive, got {radius}")
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)
        self.symmetry = ("full",) if not self.center.any() else ("none",)

    def _value(self, pts):
        return np.linalg.norm(pts - self.center, axis=1) - self.radius

    def _gradient(self, pts):
        d = pts - self.center
        n = np.linalg.norm(d, axis=1, keepdims=True)
        out = np.zeros_like(d)
        ok = n[:, 0] > 0
        out[ok] = d[ok] / n[ok]
        out[~ok] = (1.0, 0.0, 0.0)
        return out

    @property
    def bounds(self):
        return self.center - self.radius, self.center + self.radius

    def spec(self):
        return {"kind": "sphere", "radius": self.radius, "center": self.center.tolist()}


def _box_symmetries(half_extents):
    """Proper signed-permutation rotations that map the box onto itself."""
    import itertools
    out = []
    h = np.asarray(half_extents)
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            P = np.zeros((3, 3))
            for i, j in enumerate(perm):
                P[i, j] = signs[i]
            if np.linalg.det(P) > 0 and np.allclose(np.abs(P) @ h, h):
                out.append(P)
    return out


class Box(SdfField):
    def __init__(self, half_extents=(0.5, 0.5, 0.5), center=(0.0, 0.0, 0.0)):
        self.half_extents = np.asarray(half_extents, dtype=float)
        if self.half_extents.shape != (3,) or np.any(self.half_extents <= 0):
            raise FieldError(f"box half extents must be 3 positive numbers, got {half_extents}")
        self.center = np.asarray(center, dtype=float)
        self.symmetry = (("discrete", _box_symmetries(self.half_extents))
                         if not self.center.any() else ("none",))

    def _value(self, pts):
        return box_sdf(pts, self.center - self.half_extents, self.center + self.half_extents)

    def _gradient(self, pts):
        q_signed = pts - self.center
        q = np.abs(q_signed) - self.half_extents
        sgn = np.where(q_signed >= 0, 1.0, -1.0)
        qp = np.maximum(q, 0.0)
        n = np.linalg.norm(qp, axis=1, keepdims=True)
        out = np.zeros_like(pts)
        outside = n[:, 0] > 0
        out[outside] = qp[outside] / n[outside] * sgn[outside]
        inside = ~outside
        k = np.argmax(q[inside], axis=1)
        rows = np.nonzero(inside)[0]
        out[rows, k] = sgn[rows, k]
        return out

    @property
    def bounds(self):
        return self.center - self.half_extents, self.center + self.half_extents

    def spec(self):
        return {"kind": "box", "half_extents": self.half_extents.tolist(), "center": self.center.tolist()}


class RoundedBox(Box):
    def __init__(self, half_extents=(0.5, 0.5, 0.5), radius=0.1, center=(0.0, 0.0, 0.0)):
        super().__init__(half_extents, center)
        if not 0 < radius < self.half_extents.min():
            raise FieldError("rounding radius must be in (0, min half extent)")
        self.radius = float(radius)
        self._inner = self.half_extents - self.radius

    def _value(self, pts):
        return box_sdf(pts, self.center - self._inner, self.center + self._inner) - self.radius

    def _gradient(self, pts):
        inner = Box(self._inner, self.center)
        return inner._gradient(pts)

    def spec(self):
        return {"kind": "rounded_box", "half_extents": self.half_extents.tolist(),
                "radius": self.radius, "center": self.center.tolist()}


class Torus(SdfField):
    """Torus around the z axis."""

    def __init__(self, major_radius=1.0, minor_radius=0.25, center=(0.0, 0.0, 0.0)):
        if not 0 < minor_radius < major_radius:
            raise FieldError("torus needs 0 < minor_radius < major_radius")
        self.major_radius = float(major_radius)
        self.minor_radius = float(minor_radius)
        self.center = np.asarray(center, dtype=float)
        self.symmetry = (("axis", np.array([0.0, 0.0, 1.0]), True)
                         if not self.center.any() else ("none",))

    def _value(self, pts):
        p = pts - self.center
        q = np.hypot(p[:, 0], p[:, 1]) - self.major_radius
        return np.hypot(q, p[:, 2]) - self.minor_radius

    def _gradient(self, pts):
        p = pts - self.center
        rxy = np.hypot(p[:, 0], p[:, 1])
        safe = np.where(rxy > 0, rxy, 1.0)
        ring = np.stack([p[:, 0] / safe * self.major_radius,
                         p[:, 1] / safe * self.major_radius,
                         np.zeros(len(p))], axis=1)
        ring[rxy == 0] = (self.major_radius, 0.0, 0.0)
        d = p - ring
        n = np.linalg.norm(d, axis=1, keepdims=True)
        return d / np.where(n > 0, n, 1.0)

    @property
    def bounds(self):
        e = np.array([self.major_radius + self.minor_radius] * 2 + [self.minor_radius])
        return self.center - e, self.center + e

    def spec(self):
        return {"kind": "torus", "major_radius": self.major_radius,
                "minor_radius": self.minor_radius, "center": self.center.tolist()}


class Capsule(SdfField):
    def __init__(self, a=(0.0, 0.0, -0.5), b=(0.0, 0.0, 0.5), radius=0.25):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        if radius <= 0 or np.allclose(self.a, self.b):
            raise FieldError("capsule needs a positive radius and distinct end points")
        self.radius = float(radius)
        axis = (self.b - self.a) / np.linalg.norm(self.b - self.a)
        self.symmetry = (("axis", axis, True) if np.allclose(self.a, -self.b) else ("none",))

    def _closest(self, pts):
        ba = self.b - self.a
        h = np.clip((pts - self.a) @ ba / (ba @ ba), 0.0, 1.0)
        return self.a + h[:, None] * ba

    def _value(self, pts):
        return np.linalg.norm(pts - self._closest(pts), axis=1) - self.radius

    def _gradient(self, pts):
        d = pts - self._closest(pts)
        n = np.linalg.norm(d, axis=1, keepdims=True)
        return d / np.where(n > 0, n, 1.0)

    @property
    def bounds(self):
        lo = np.minimum(self.a, self.b) - self.radius
        hi = np.maximum(self.a, self.b) + self.radius
        return lo, hi

    def spec(self):
        return {"kind": "capsule", "a": self.a.tolist(), "b": self.b.tolist(), "radius": self.radius}


class EmptyField(SdfField):
    """No surface anywhere; every ray misses."""

    FAR = 1e9

    def _value(self, pts):
        return np.full(len(pts), self.FAR)

    def _gradient(self, pts):
        g = np.zeros((len(pts), 3))
        g[:, 2] = 1.0
        return g

    @property
    def bounds(self):
        return -np.ones(3), np.ones(3)


class CompositeField(SdfField):
    """Pointwise minimum (CSG union) of several fields."""

    def __init__(self, parts):
        parts = list(parts)
        if not parts:
            raise FieldError("a composite needs at least one field")
        self.parts = parts

    def _stack(self, pts):
        return np.stack([p._value(pts) for p in self.parts])

    def _value(self, pts):
        return self._stack(pts).min(axis=0)

    def _value_and_gradient(self, pts):
        vals = self._stack(pts)
        k = np.argmin(vals, axis=0)
        grad = np.empty_like(pts)
        for i, p in enumerate(self.parts):
            sel = k == i
            if sel.any():
                grad[sel] = p._gradient(pts[sel])
        return vals[k, np.arange(len(pts))], grad

    def _gradient(self, pts):
        return self._value_and_gradient(pts)[1]

    @property
    def bounds(self):
        los, his = zip(*(p.bounds for p in self.parts))
        return np.min(los, axis=0), np.max(his, axis=0)


class UnionOfPrimitives(CompositeField):
    """Analytic object built from several (optionally posed) primitives."""


# --------------------------------------------------------------------------
# voxel grid
# --------------------------------------------------------------------------

GRID_MAGIC = b"SDFG"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sI3I3d3d")


class GridField(SdfField):
    """Trilinearly interpolated samples on a regular grid, x-fastest layout.

    Outside the grid box the value is the distance to the box plus the value
    at the nearest box point. This is exact along face normals and keeps
    sphere tracing moving toward the box from any outside start.
    """

    def __init__(self, values, origin, spacing):
        values = np.asarray(values)
        if values.ndim != 3:
            raise FieldError("grid values must be a (nz, ny, nx) array")
        if min(values.shape) < 2:
            raise FieldError(f"grid needs at least 2 samples per axis, got {values.shape[::-1]}")
        self.values = np.ascontiguousarray(values)
        self.values.setflags(write=False)
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,)).copy()
        if np.any(self.spacing <= 0):
            raise FieldError(f"grid spacing must be positive, got {self.spacing}")

    @property
    def dims(self):
        nz, ny, nx = self.values.shape
        return nx, ny, nz

    @property
    def bounds(self):
        return self.origin, self.origin + self.spacing * (np.array(self.dims) - 1)

    def fd_step(self):
        return 1e-4 * float(self.spacing.max())

    def _value_and_gradient(self, pts):
        lo, hi = self.bounds
        clamped = np.clip(pts, lo, hi)
        val, grad = kernels.trilinear(self.values, self.origin, self.spacing, clamped)
        out = np.any(pts != clamped, axis=1)
        if out.any():
            val = val.copy()
            val[out] += np.linalg.norm(pts[out] - clamped[out], axis=1)
            grad[out] = central_difference_gradient(self._value, pts[out], self.fd_step())
        return val, grad

    def _value(self, pts):
        lo, hi = self.bounds
        clamped = np.clip(pts, lo, hi)
        val, _ = kernels.trilinear(self.values, self.origin, self.spacing, clamped)
        return val + np.linalg.norm(pts - clamped, axis=1)

    def _gradient(self, pts):
        return self._value_and_gradient(pts)[1]

    @classmethod
    def from_field(cls, f: SdfField, lo, hi, dims, dtype=np.float32) -> "GridField":
        """Sample ``f`` on a grid with ``dims = (nx, ny, nz)`` spanning ``[lo, hi]``."""
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        nx, ny, nz = dims
        spacing = (hi - lo) / (np.array(dims) - 1)
        zs, ys, xs = (lo[2] + spacing[2] * np.arange(nz), lo[1] + spacing[1] * np.arange(ny),
                      lo[0] + spacing[0] * np.arange(nx))
        Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        vals = f.value(pts).reshape(nz, ny, nx).astype(dtype)
        return cls(vals, lo, spacing)

    def node_points(self) -> NDArray:
        nx, ny, nz = self.dims
        Z, Y, X = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        idx = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        return self.origin + idx * self.spacing


def grid_field_save(grid: GridField, path) -> None:
    nx, ny, nz = grid.dims
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, nx, ny, nz, *grid.origin, *grid.spacing)
    payload = np.ascontiguousarray(grid.values, dtype="<f4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def grid_field_load(path) -> GridField:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise GridFormatError(f"header: expected {_HEADER.size} bytes, file has {len(data)}")
    magic, version, nx, ny, nz, *rest = _HEADER.unpack_from(data)
    origin, spacing = np.array(rest[:3]), np.array(rest[3:])
    if magic != GRID_MAGIC:
        raise GridFormatError(f"magic: expected {GRID_MAGIC!r}, got {magic!r}")
    if version != GRID_VERSION:
        raise GridFormatError(f"version: expected {GRID_VERSION}, got {version}")
    if min(nx, ny, nz) < 2:
        raise GridFormatError(f"dims: need >= 2 per axis, got {(nx, ny, nz)}")
    if not (np.all(np.isfinite(origin))):
        raise GridFormatError("origin: non-finite value")
    if not (np.all(np.isfinite(spacing)) and np.all(spacing > 0)):
        raise GridFormatError(f"spacing: must be finite and positive, got {spacing.tolist()}")
    expected = nx * ny * nz
    payload = len(data) - _HEADER.size
    if payload != 4 * expected:
        raise GridFormatError(f"samples: expected {expected} float32 samples, "
                              f"payload holds {payload / 4:g}")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(nz, ny, nx)
    if not np.all(np.isfinite(values)):
        raise GridFormatError("samples: non-finite value in payload")
    return GridField(values.astype(np.float32), origin, spacing)


# --------------------------------------------------------------------------
# transforms and scene composition
# --------------------------------------------------------------------------

def transformed_bounds(lo, hi, T: Sim3Matrix):
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    c = sim3_apply(T, corners)
    return c.min(axis=0), c.max(axis=0)


class TransformedField(SdfField):
    """``f`` placed by ``T``: ``value(x) = sigma * f(T^-1 x)``, still metric."""

    def __init__(self, f: SdfField, T: Sim3Matrix):
        self.field = f
        self.T = T

    def _value(self, pts):
        return self.T.scale * self.field._value(sim3_apply_inverse(self.T, pts))

    def _gradient(self, pts):
        return self.field._gradient(sim3_apply_inverse(self.T, pts)) @ self.T.rotation.T

    def _value_and_gradient(self, pts):
        v, g = self.field._value_and_gradient(sim3_apply_inverse(self.T, pts))
        return self.T.scale * v, g @ self.T.rotation.T

    @property
    def bounds(self):
        return transformed_bounds(*self.field.bounds, self.T)


def transformed_field(f: SdfField, T: Sim3Matrix) -> SdfField:
    return TransformedField(f, T)


def composite_scene(instances) -> CompositeField:
    """Union of ``(field, T)`` instances placed into one scene frame."""
    instances = list(instances)
    if not instances:
        raise FieldError("composite_scene needs at least one instance")
    return CompositeField([TransformedField(f, T) for f, T in instances])


class EditedField(SdfField):
    """A scene with an axis-aligned region replaced by another field.

    Inside the carve box the scene is hollowed out (CSG difference) and the
    placed replacement is unioned in; outside the box the scene is untouched.
    """

    def __init__(self, scene: SdfField, box_lo, box_hi, replacement: SdfField | None, T: Sim3Matrix | None):
        self.scene = scene
        self.box_lo = np.asarray(box_lo, dtype=float)
        self.box_hi = np.asarray(box_hi, dtype=float)
        if not (np.all(np.isfinite(self.box_lo)) and np.all(np.isfinite(self.box_hi))):
            raise FieldError("carve box must be finite")
        self.replacement = None if replacement is None else TransformedField(replacement, T or Sim3Matrix())

    def _inside(self, pts):
        return np.all((pts >= self.box_lo) & (pts <= self.box_hi), axis=1)

    def _value_and_gradient(self, pts):
        v, g = self.scene._value_and_gradient(pts)
        inside = self._inside(pts)
        if not inside.any():
            return v, g
        p = pts[inside]
        vin, gin = v[inside], g[inside]
        carve = -box_sdf(p, self.box_lo, self.box_hi)
        carve_g = -Box(0.5 * (self.box_hi - self.box_lo), 0.5 * (self.box_hi + self.box_lo))._gradient(p)
        use_carve = carve > vin
        vin = np.where(use_carve, carve, vin)
        gin = np.where(use_carve[:, None], carve_g, gin)
        if self.replacement is not None:
            rv, rg = self.replacement._value_and_gradient(p)
            use_rep = rv < vin
            vin = np.where(use_rep, rv, vin)
            gin = np.where(use_rep[:, None], rg, gin)
        v = v.copy()
        g = g.copy()
        v[inside] = vin
        g[inside] = gin
        return v, g

    def _value(self, pts):
        return self._value_and_gradient(pts)[0]

    def _gradient(self, pts):
        return self._value_and_gradient(pts)[1]

    @property
    def bounds(self):
        lo, hi = self.scene.bounds
        if self.replacement is not None:
            rlo, rhi = self.replacement.bounds
            lo, hi = np.minimum(lo, rlo), np.maximum(hi, rhi)
        return lo, hi


def carve_and_substitute(scene: SdfField, carve_lo, carve_hi, replacement: SdfField | None,
                         T: Sim3Matrix | None = None) -> EditedField:
    return EditedField(scene, carve_lo, carve_hi, replacement, T)


# --------------------------------------------------------------------------
# object library
# --------------------------------------------------------------------------

_PRIMITIVES = {
    "empty": lambda s: EmptyField(),
    "sphere": lambda s: Sphere(s.get("radius", 1.0), s.get("center", (0, 0, 0))),
    "box": lambda s: Box(s.get("half_extents", (0.5, 0.5, 0.5)), s.get("center", (0, 0, 0))),
    "rounded_box": lambda s: RoundedBox(s.get("half_extents", (0.5, 0.5, 0.5)), s.get("radius", 0.1),
                                        s.get("center", (0, 0, 0))),
    "torus": lambda s: Torus(s.get("major_radius", 1.0), s.get("minor_radius", 0.25),
                             s.get("center", (0, 0, 0))),
    "capsule": lambda s: Capsule(s.get("a", (0, 0, -0.5)), s.get("b", (0, 0, 0.5)), s.get("radius", 0.25)),
}


def field_from_spec(spec: dict, base_dir=".") -> SdfField:
    """Build a field from a JSON-style description.

    ``{"backend": "grid", "path": ...}`` loads a grid file; otherwise ``kind``
    names a primitive, or ``"union"`` with a ``parts`` list whose entries may
    carry a ``pose`` (Sim3Params fields).
    """
    if not isinstance(spec, dict):
        raise FieldError(f"field spec must be an object, got {type(spec).__name__}")
    backend = spec.get("backend", "analytic")
    if backend == "grid":
        if "path" not in spec:
            raise FieldError("grid field spec needs a 'path'")
        path = Path(base_dir) / spec["path"]
        if not path.exists():
            raise FieldError(f"grid file not found: {path}")
        return grid_field_load(path)
    if backend != "analytic":
        raise FieldError(f"unknown field backend {backend!r}")
    kind = spec.get("kind")
    if kind == "union":
        parts = []
        for p in spec.get("parts", []):
            f = field_from_spec({k: v for k, v in p.items() if k != "pose"}, base_dir)
            if "pose" in p:
                f = TransformedField(f, sim3_from_params(Sim3Params.from_dict(p["pose"])))
            parts.append(f)
        return UnionOfPrimitives(parts)
    if kind not in _PRIMITIVES:
        raise FieldError(f"unknown primitive kind {kind!r}")
    try:
        return _PRIMITIVES[kind](spec)
    except (TypeError, ValueError) as exc:
        raise FieldError(f"bad parameters for {kind}: {exc}") from exc


@dataclass
class ObjectLibrary:
    entries: dict

    def __post_init__(self):
        for name, f in self.entries.items():
            lo, hi = f.bounds
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                raise FieldError(f"library entry {name!r} has non-finite bounds")

    def __getitem__(self, name) -> SdfField:
        try:
            return self.entries[name]
        except KeyError:
            raise KeyError(f"object {name!r} not in library (have {sorted(self.entries)})") from None

    def __contains__(self, name):
        return name in self.entries

    def names(self):
        return sorted(self.entries)

    @classmethod
    def from_manifest(cls, path) -> "ObjectLibrary":
        path = Path(path)
        with open(path) as fh:
            manifest = json.load(fh)
        if not isinstance(manifest, dict):
            raise FieldError("library manifest must map names to field specs")
        return cls({name: field_from_spec(spec, path.parent) for name, spec in manifest.items()})
