"""Pose error metrics between ground-truth and predicted object-to-scene transforms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .transforms import Sim3Matrix


@dataclass(frozen=True)
class RegistrationErrors:
    delta_t: float
    delta_R: float
    delta_s: float
    matrix_rmse: float
    delta_R_sym: float | None = None

    def to_dict(self):
        d = {"delta_t": self.delta_t, "delta_R_rad": self.delta_R, "delta_s": self.delta_s,
             "matrix_rmse": self.matrix_rmse}
        if self.delta_R_sym is not None:
            d["delta_R_sym_rad"] = self.delta_R_sym
        return d


def _angle(R):
    """Rotation angle of ``R``; atan2 keeps full precision near 0, unlike arccos of the trace."""
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, c))


def rotation_error(T_gt: Sim3Matrix, T_pred: Sim3Matrix) -> float:
    """Geodesic angle (radians) between the two rotations."""
    return _angle(T_gt.rotation.T @ T_pred.rotation)


def symmetric_rotation_error(T_gt: Sim3Matrix, T_pred: Sim3Matrix, symmetry=("none",)) -> float:
    """Rotation error modulo the object's own rotational symmetry.

    ``symmetry`` is ``("none",)``, ``("full",)``, ``("discrete", [R...])`` or
    ``("axis", axis, flip)`` for a continuous symmetry about an object-frame
    axis (``flip`` when the axis may also be reversed).
    """
    kind = symmetry[0]
    if kind == "full":
        return 0.0
    if kind == "discrete":
        return min(_angle(S.T @ T_gt.rotation.T @ T_pred.rotation) for S in symmetry[1])
    if kind == "axis":
        axis = np.asarray(symmetry[1], dtype=float)
        a, b = T_gt.rotation @ axis, T_pred.rotation @ axis
        c, s = float(a @ b), float(np.linalg.norm(np.cross(a, b)))
        return float(np.arctan2(s, abs(c) if symmetry[2] else c))
    return rotation_error(T_gt, T_pred)


def translation_error(T_gt: Sim3Matrix, T_pred: Sim3Matrix, object_bounds) -> float:
    """Translation difference divided by the object's bounding-box diagonal."""
    lo, hi = object_bounds
    diag = float(np.linalg.norm(np.asarray(hi, float) - np.asarray(lo, float)))
    if not np.isfinite(diag) or diag <= 0:
        raise ValueError(f"object bounds have degenerate diagonal {diag}")
    return float(np.linalg.norm(T_gt.translation - T_pred.translation)) / diag


def scale_error(T_gt: Sim3Matrix, T_pred: Sim3Matrix) -> float:
    return abs(T_gt.scale - T_pred.scale)


def matrix_rmse(T_gt: Sim3Matrix, T_pred: Sim3Matrix) -> float:
    """Element-wise RMSE of the two homogeneous 4x4 matrices."""
    d = T_gt.as_homogeneous() - T_pred.as_homogeneous()
    return float(np.sqrt(np.mean(d * d)))


def registration_errors(T_gt: Sim3Matrix, T_pred: Sim3Matrix, object_bounds, symmetry=None) -> RegistrationErrors:
    return RegistrationErrors(
        delta_t=translation_error(T_gt, T_pred, object_bounds),
        delta_R=rotation_error(T_gt, T_pred),
        delta_s=scale_error(T_gt, T_pred),
        matrix_rmse=matrix_rmse(T_gt, T_pred),
        delta_R_sym=None if symmetry is None else symmetric_rotation_error(T_gt, T_pred, symmetry),
    )
