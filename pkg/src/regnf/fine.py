"""Bidirectional robust SDF-residual optimization of a Sim(3) pose.

The loss over scene samples ``A`` and object samples ``B`` is

    mean_A kappa(|S_a(x) - sigma S_b(T^-1 x)|)
  + mean_B kappa(|S_b(x) - S_a(T x) / sigma|)
  + w * mean_A min_B |x - T b|^2

optimized over translation, Euler angles, scale and the kernel's scale ``p``
and shape ``alpha``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .fields import SdfField
from .sampling import ResamplerParams, SampleSet, resample
from .transforms import (Sim3Matrix, Sim3Params, euler_jacobians, euler_to_matrix,
                         params_from_sim3, sim3_apply, sim3_apply_inverse, sim3_inverse)

log = logging.getLogger(__name__)

PARAM_LABELS = ("t_x", "t_y", "t_z", "r_r", "r_p", "r_y", "sigma", "p", "alpha")


class OptimizationAbort(RuntimeError):
    """Raised on a non-finite loss; carries the trace up to that point."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


# --------------------------------------------------------------------------
# robust kernel
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelParams:
    p: float = 0.04
    alpha: float = 1.0

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError(f"kernel scale p must be positive, got {self.p}")
        if not math.isfinite(self.alpha):
            raise ValueError("kernel shape alpha must be finite")


def _kappa(z, alpha):
    """Kernel as a function of the squared scaled residual ``z = (r/p)^2``."""
    if alpha == 2.0:
        return 0.5 * z
    if alpha == 0.0:
        return np.log1p(0.5 * z)
    b = abs(alpha - 2.0)
    return (b / alpha) * np.expm1(0.5 * alpha * np.log1p(z / b))


def robust_kernel(r, k: KernelParams):
    """General adaptive robust cost; ``alpha=2`` is L2, ``alpha=0`` Cauchy, ``alpha=1`` pseudo-Huber."""
    z = (np.asarray(r, dtype=float) / k.p) ** 2
    return _kappa(z, float(k.alpha))


def _dkappa_dz(z, alpha):
    if alpha == 2.0:
        return 0.5 * np.ones_like(z)
    b = abs(alpha - 2.0)
    return 0.5 * np.exp((0.5 * alpha - 1.0) * np.log1p(z / b))


ALPHA_TWO_OFFSET = 1e-6


def _dkappa_dalpha(z, alpha):
    if abs(alpha) < 1e-2:
        # smooth here, but the closed form below cancels badly
        h = 2e-2
        f = lambda a: _kappa(z, a)  # noqa: E731
        return (-f(alpha + 2 * h) + 8 * f(alpha + h) - 8 * f(alpha - h) + f(alpha - 2 * h)) / (12 * h)
    if alpha == 2.0:
        # the slope in alpha diverges like log(1/|alpha - 2|); use a finite stand-in
        alpha = 2.0 - ALPHA_TWO_OFFSET
    b = abs(alpha - 2.0)
    s = 1.0 if alpha > 2.0 else -1.0
    L = np.log1p(z / b)
    E = np.expm1(0.5 * alpha * L)
    dL = -z * s / (b * (b + z))
    dE = (E + 1.0) * (0.5 * L + 0.5 * alpha * dL)
    return (s * alpha - b) / alpha ** 2 * E + (b / alpha) * dE


def kernel_derivatives(r, k: KernelParams):
    """``(kappa, dkappa/dr, dkappa/dp, dkappa/dalpha)`` elementwise."""
    r = np.asarray(r, dtype=float)
    z = (r / k.p) ** 2
    a = float(k.alpha)
    val = _kappa(z, a)
    dz = _dkappa_dz(z, a)
    d_r = dz * 2.0 * r / k.p ** 2
    d_p = dz * (-2.0 * z / k.p)
    d_a = _dkappa_dalpha(z, a)
    return val, d_r, d_p, d_a


# --------------------------------------------------------------------------
# residuals and regularizer
# --------------------------------------------------------------------------

def residual_forward(x, S_a: SdfField, S_b: SdfField, T: Sim3Matrix):
    """``|S_a(x) - sigma S_b(T^-1 x)|`` for scene-frame points ``x``.

    ``T`` places the second field into the frame of the first.
    """
    x = np.asarray(x, dtype=float)
    return np.abs(S_a.value(x) - T.scale * S_b.value(sim3_apply_inverse(T, x)))


def residual_backward(x, S_b: SdfField, S_a: SdfField, T_inv: Sim3Matrix):
    """Object-side residual; identical to the forward one with the roles swapped."""
    return residual_forward(x, S_b, S_a, T_inv)


def _nearest_sq(a_pts, b_mapped):
    d, j = cKDTree(b_mapped).query(a_pts)
    return d * d, j


def regularizer(A, B, T: Sim3Matrix) -> float:
    """Mean over ``A`` of the squared distance to the nearest ``T``-mapped ``B`` point."""
    a = A.points if isinstance(A, SampleSet) else np.asarray(A, dtype=float)
    b = B.points if isinstance(B, SampleSet) else np.asarray(B, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("regularizer needs non-empty sample sets")
    d2, _ = _nearest_sq(a, sim3_apply(T, b))
    return float(np.mean(d2))


def _points(S):
    return S.points if isinstance(S, SampleSet) else np.asarray(S, dtype=float)


def total_loss(A, B, S_a: SdfField, S_b: SdfField, T: Sim3Matrix, k: KernelParams, w: float) -> float:
    a, b = _points(A), _points(B)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("loss needs non-empty sample sets")
    fwd = residual_forward(a, S_a, S_b, T)
    bwd = residual_backward(b, S_b, S_a, sim3_inverse(T))
    loss = float(np.mean(robust_kernel(fwd, k)) + np.mean(robust_kernel(bwd, k)))
    if w:
        loss += w * regularizer(a, b, T)
    if not math.isfinite(loss):
        raise OptimizationAbort(f"non-finite loss {loss}")
    return loss


# --------------------------------------------------------------------------
# analytic gradient
# --------------------------------------------------------------------------

@dataclass
class LossTerms:
    loss: float
    grad: NDArray
    mean_forward: float
    mean_backward: float
    reg: float


def _state_transform(theta) -> Sim3Matrix:
    return Sim3Matrix(euler_to_matrix(theta[3], theta[4], theta[5]), theta[:3], theta[6])


def pack_state(T: Sim3Matrix, k: KernelParams) -> NDArray:
    p = params_from_sim3(T)
    return np.concatenate([p.as_array(), [k.p, k.alpha]])


def unpack_state(theta) -> tuple[Sim3Matrix, KernelParams]:
    return _state_transform(theta), KernelParams(float(theta[7]), float(theta[8]))


def loss_and_gradient(a, b, S_a: SdfField, S_b: SdfField, theta, w: float, Sa_at_a=None, Sb_at_b=None) -> LossTerms:
    """Loss and its gradient w.r.t. the nine-vector
    ``(t_x, t_y, t_z, r_r, r_p, r_y, sigma, p, alpha)``.

    Field values at the (fixed) sample points may be passed in to skip
    re-evaluation.
    """
    theta = np.asarray(theta, dtype=float)
    t = theta[:3]
    sigma = theta[6]
    k = KernelParams(float(theta[7]), float(theta[8]))
    R = euler_to_matrix(*theta[3:6])
    dRs = euler_jacobians(*theta[3:6])
    grad = np.zeros(9)

    # scene -> object direction
    va = S_a.value(a) if Sa_at_a is None else Sa_at_a
    q = a - t
    y = (q @ R) / sigma
    vb_y, gb_y = S_b.value_and_gradient(y)
    d_f = va - sigma * vb_y
    r_f = np.abs(d_f)
    kf, kf_r, kf_p, kf_a = kernel_derivatives(r_f, k)
    coef = kf_r * np.sign(d_f) / len(a)
    grad[:3] += coef @ (gb_y @ R.T)
    for i, dR in enumerate(dRs):
        grad[3 + i] += coef @ (-np.einsum("ij,ij->i", gb_y, q @ dR))
    grad[6] += coef @ (-vb_y + np.einsum("ij,ij->i", gb_y, y))
    grad[7] += kf_p.mean()
    grad[8] += kf_a.mean()

    # object -> scene direction
    vb = S_b.value(b) if Sb_at_b is None else Sb_at_b
    Rb = b @ R.T
    z = sigma * Rb + t
    va_z, ga_z = S_a.value_and_gradient(z)
    d_b = vb - va_z / sigma
    r_b = np.abs(d_b)
    kb, kb_r, kb_p, kb_a = kernel_derivatives(r_b, k)
    coef = kb_r * np.sign(d_b) / len(b)
    grad[:3] += coef @ (-ga_z / sigma)
    for i, dR in enumerate(dRs):
        grad[3 + i] += coef @ (-np.einsum("ij,ij->i", ga_z, b @ dR.T))
    grad[6] += coef @ (va_z / sigma ** 2 - np.einsum("ij,ij->i", ga_z, Rb) / sigma)
    grad[7] += kb_p.mean()
    grad[8] += kb_a.mean()

    loss = float(kf.mean() + kb.mean())
    reg = 0.0
    if w:
        d2, j = _nearest_sq(a, z)
        reg = float(d2.mean())
        loss += w * reg
        diff = a - z[j]  # d|a - z_j|^2 = -2 diff . dz_j
        c = -2.0 * w / len(a)
        grad[:3] += c * diff.sum(axis=0)
        bj = b[j]
        for i, dR in enumerate(dRs):
            grad[3 + i] += c * sigma * np.einsum("ij,ij->", diff, bj @ dR.T)
        grad[6] += c * np.einsum("ij,ij->", diff, Rb[j])
    return LossTerms(loss, grad, float(r_f.mean()), float(r_b.mean()), reg)


def loss_gradients(A, B, S_a: SdfField, S_b: SdfField, params: Sim3Params, k: KernelParams, w: float) -> NDArray:
    theta = np.concatenate([params.as_array(), [k.p, k.alpha]])
    return loss_and_gradient(_points(A), _points(B), S_a, S_b, theta, w).grad


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    lr_rotation: float = 0.02
    lr_translation: float = 0.01
    lr_scale: float = 0.01
    lr_kernel: float = 0.005
    max_iters: int = 200
    early_stop_threshold: float = 0.0005
    regularizer_weight: float = 0.01
    kernel_init: KernelParams | None = None  # None: p = 2 xi, alpha = 1
    method: str = "adam"
    adam_betas: tuple = (0.9, 0.9)
    xi: float = 0.02
    resampler: ResamplerParams = field(default_factory=ResamplerParams)

    def __post_init__(self):
        for name in ("lr_rotation", "lr_translation", "lr_scale", "lr_kernel"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.method not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer method {self.method!r}")

    def learning_rates(self) -> NDArray:
        return np.array([self.lr_translation] * 3 + [self.lr_rotation] * 3
                        + [self.lr_scale, self.lr_kernel, self.lr_kernel])


@dataclass
class IterationRecord:
    iteration: int
    loss: float
    mean_forward: float
    mean_backward: float
    params: list
    resampled: bool = False

    def to_dict(self):
        return {"iteration": self.iteration, "loss": self.loss, "mean_forward": self.mean_forward,
                "mean_backward": self.mean_backward, "params": self.params, "resampled": self.resampled}


@dataclass
class OptimizationTrace:
    records: list = field(default_factory=list)
    status: str = "running"
    best_iteration: int = -1

    def __len__(self):
        return len(self.records)

    def to_dict(self):
        return {"status": self.status, "best_iteration": self.best_iteration,
                "iterations": [r.to_dict() for r in self.records]}

    def summary(self):
        losses = [r.loss for r in self.records]
        best = self.records[self.best_iteration] if self.records else None
        return {"status": self.status, "iterations": len(self.records),
                "best_iteration": self.best_iteration,
                "initial_loss": losses[0] if losses else None,
                "best_loss": best.loss if best else None,
                "final_mean_forward": best.mean_forward if best else None,
                "resample_events": sum(r.resampled for r in self.records)}

    def to_csv(self, path):
        import csv
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iteration", "loss", "mean_forward", "mean_backward", *PARAM_LABELS, "resampled"])
            for r in self.records:
                wr.writerow([r.iteration, r.loss, r.mean_forward, r.mean_backward, *r.params, int(r.resampled)])


def _seed_for(seed, iteration, which):
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, iteration, which])


def optimize(S_a: SdfField, S_b: SdfField, A0: SampleSet, B0: SampleSet, T_init: Sim3Matrix,
             cfg: OptimizerConfig = OptimizerConfig(), seed: int = 0) -> tuple[Sim3Matrix, OptimizationTrace]:
    """Refine ``T_init`` (object -> scene) by descent on the bidirectional loss.

    Returns the best-loss iterate and the trace. Terminates when the mean
    forward residual drops to ``early_stop_threshold``, after ``max_iters``,
    or raises :class:`OptimizationAbort` on a non-finite loss.
    """
    if len(A0) == 0 or len(B0) == 0:
        raise ValueError("optimize needs non-empty sample sets")
    kinit = cfg.kernel_init or KernelParams(2.0 * cfg.xi, 1.0)
    theta = pack_state(T_init, kinit)
    lrs = cfg.learning_rates()
    A, B = A0, B0
    Sa_a, Sb_b = S_a.value(A.points), S_b.value(B.points)
    trace = OptimizationTrace()
    best_loss, best_theta = np.inf, theta.copy()
    m = np.zeros(9)
    v = np.zeros(9)
    (beta1, beta2), eps = cfg.adam_betas, 1e-8
    resampled = False
    for it in range(cfg.max_iters):
        if it > 0 and it % cfg.resampler.refresh_period == 0:
            T_cur = _state_transform(theta)
            A = resample(A, S_a, S_b, T_cur, cfg.resampler, _seed_for(seed, it, 0), cfg.xi)
            B = resample(B, S_b, S_a, sim3_inverse(T_cur), cfg.resampler, _seed_for(seed, it, 1), cfg.xi)
            Sa_a, Sb_b = S_a.value(A.points), S_b.value(B.points)
            resampled = True
        terms = loss_and_gradient(A.points, B.points, S_a, S_b, theta, cfg.regularizer_weight, Sa_a, Sb_b)
        rec = IterationRecord(it, terms.loss, terms.mean_forward, terms.mean_backward,
                              [float(x) for x in theta], resampled)
        resampled = False
        trace.records.append(rec)
        if not (math.isfinite(terms.loss) and np.all(np.isfinite(terms.grad))):
            trace.status = "aborted"
            raise OptimizationAbort(f"non-finite loss at iteration {it}", trace)
        if terms.loss < best_loss:
            best_loss, best_theta = terms.loss, theta.copy()
            trace.best_iteration = it
        if terms.mean_forward <= cfg.early_stop_threshold:
            trace.status = "early-stopped"
            best_theta = theta.copy()
            trace.best_iteration = it
            break
        g = terms.grad
        if cfg.method == "adam":
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            step = lrs * (m / (1 - beta1 ** (it + 1))) / (np.sqrt(v / (1 - beta2 ** (it + 1))) + eps)
        else:
            step = lrs * g
        theta = theta - step
        theta[6] = max(theta[6], 1e-3)
        theta[7] = max(theta[7], 1e-4)
    else:
        trace.status = "max-iters"
    T_best, _ = unpack_state(best_theta)
    return T_best, trace


def final_kernel(trace: OptimizationTrace) -> KernelParams:
    rec = trace.records[trace.best_iteration]
    return KernelParams(rec.params[7], rec.params[8])
