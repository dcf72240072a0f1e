"""Sim(3) transforms: uniform scale, rotation and translation.

A transform places an object into a scene, ``x_scene = sigma * R @ x_obj + t``.
Rotations are parameterized by roll/pitch/yaw composed as
``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

PARAM_NAMES = ("t_x", "t_y", "t_z", "r_r", "r_p", "r_y", "sigma")


class InvalidParameterError(ValueError):
    pass


def _wrap_angle(a: float) -> float:
    # (-pi, pi]
    w = float(np.mod(a + np.pi, 2.0 * np.pi) - np.pi)
    return np.pi if w == -np.pi else w


def rot_x(a: float) -> NDArray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> NDArray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> NDArray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(roll: float, pitch: float, yaw: float) -> NDArray:
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def euler_jacobians(roll: float, pitch: float, yaw: float) -> tuple[NDArray, NDArray, NDArray]:
    """Partial derivatives of ``euler_to_matrix`` w.r.t. roll, pitch and yaw."""
    rx, ry, rz = rot_x(roll), rot_y(pitch), rot_z(yaw)
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sr, -cr], [0.0, cr, -sr]])
    dry = np.array([[-sp, 0.0, cp], [0.0, 0.0, 0.0], [-cp, 0.0, -sp]])
    drz = np.array([[-sy, -cy, 0.0], [cy, -sy, 0.0], [0.0, 0.0, 0.0]])
    return rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx


def matrix_to_euler(R: NDArray) -> tuple[float, float, float]:
    """Inverse of :func:`euler_to_matrix`; at gimbal lock the twist goes to yaw."""
    sp = -R[2, 0]
    sp = min(1.0, max(-1.0, sp))
    pitch = float(np.arcsin(sp))
    if abs(abs(sp) - 1.0) < 1e-12:
        # column 1 is Rz(yaw -/+ roll) @ e_y for pitch = +/-pi/2
        roll = 0.0
        yaw = float(np.arctan2(-R[0, 1], R[1, 1]))
        pitch = float(np.sign(sp) * np.pi / 2)
    else:
        roll = float(np.arctan2(R[2, 1], R[2, 2]))
        yaw = float(np.arctan2(R[1, 0], R[0, 0]))
    return _wrap_angle(roll), pitch, _wrap_angle(yaw)


@dataclass(frozen=True)
class Sim3Params:
    t_x: float = 0.0
    t_y: float = 0.0
    t_z: float = 0.0
    r_r: float = 0.0
    r_p: float = 0.0
    r_y: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise InvalidParameterError(f"sigma must be positive, got {self.sigma}")

    def as_array(self) -> NDArray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, v) -> "Sim3Params":
        return cls(*(float(x) for x in v))

    def to_dict(self) -> dict:
        return {n: float(getattr(self, n)) for n in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "Sim3Params":
        unknown = set(d) - set(PARAM_NAMES)
        if unknown:
            raise InvalidParameterError(f"unknown pose fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class Sim3Matrix:
    """Immutable similarity transform ``x -> scale * rotation @ x + translation``."""

    rotation: NDArray = field(default_factory=lambda: np.eye(3))
    translation: NDArray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise InvalidParameterError(f"rotation must be 3x3, got {R.shape}")
        if not np.isscalar(self.scale) and np.ndim(self.scale) != 0:
            raise InvalidParameterError("scale must be a single uniform factor")
        s = float(self.scale)
        if not np.isfinite(s) or s <= 0:
            raise InvalidParameterError(f"scale must be positive, got {s}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise InvalidParameterError("rotation must be a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> "Sim3Matrix":
        return cls()

    def apply(self, x) -> NDArray:
        return sim3_apply(self, x)

    def inverse(self) -> "Sim3Matrix":
        return sim3_inverse(self)

    def __matmul__(self, other: "Sim3Matrix") -> "Sim3Matrix":
        return sim3_compose(self, other)

    def as_homogeneous(self) -> NDArray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    def to_dict(self) -> dict:
        """Row-major ``[R|t]`` (12 numbers) plus the scalar scale."""
        Rt = np.hstack([self.rotation, self.translation[:, None]])
        return {"Rt": [float(v) for v in Rt.ravel()], "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "Sim3Matrix":
        Rt = np.asarray(d["Rt"], dtype=float)
        if Rt.size != 12:
            raise InvalidParameterError(f"Rt must have 12 entries, got {Rt.size}")
        Rt = Rt.reshape(3, 4)
        return cls(Rt[:, :3], Rt[:, 3], float(d["scale"]))

    def __repr__(self):
        return (f"Sim3Matrix(scale={self.scale:.6g}, translation={self.translation.tolist()}, "
                f"rotation={self.rotation.tolist()})")


def sim3_from_params(p: Sim3Params) -> Sim3Matrix:
    if p.sigma <= 0:
        raise InvalidParameterError(f"sigma must be positive, got {p.sigma}")
    R = euler_to_matrix(p.r_r, p.r_p, p.r_y)
    return Sim3Matrix(R, np.array([p.t_x, p.t_y, p.t_z]), p.sigma)


def params_from_sim3(T: Sim3Matrix) -> Sim3Params:
    roll, pitch, yaw = matrix_to_euler(T.rotation)
    t = T.translation
    return Sim3Params(float(t[0]), float(t[1]), float(t[2]), roll, pitch, yaw, T.scale)


def sim3_apply(T: Sim3Matrix, x) -> NDArray:
    """Apply ``T`` to a point ``(3,)`` or a batch ``(n, 3)``."""
    x = np.asarray(x, dtype=float)
    return T.scale * (x @ T.rotation.T) + T.translation


def sim3_apply_inverse(T: Sim3Matrix, x) -> NDArray:
    x = np.asarray(x, dtype=float)
    return ((x - T.translation) @ T.rotation) / T.scale


def sim3_inverse(T: Sim3Matrix) -> Sim3Matrix:
    Rinv = T.rotation.T
    s = 1.0 / T.scale
    return Sim3Matrix(Rinv, -s * (Rinv @ T.translation), s)


def sim3_compose(T1: Sim3Matrix, T2: Sim3Matrix) -> Sim3Matrix:
    """``(T1 o T2)(x) = T1(T2(x))``."""
    R = T1.rotation @ T2.rotation
    # re-orthonormalize to keep long chains valid
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    t = T1.scale * (T1.rotation @ T2.translation) + T1.translation
    return Sim3Matrix(R, t, T1.scale * T2.scale)


def kabsch(src: NDArray, dst: NDArray, weights: NDArray | None = None) -> tuple[NDArray, NDArray]:
    """Least-squares rigid ``(R, t)`` with ``dst ~ R @ src + t`` (det-corrected)."""
    if weights is None:
        cs, cd = src.mean(axis=0), dst.mean(axis=0)
        H = (src - cs).T @ (dst - cd)
    else:
        w = weights / weights.sum()
        cs, cd = w @ src, w @ dst
        H = (src - cs).T @ ((dst - cd) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs
