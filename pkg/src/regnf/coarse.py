"""Coarse alignment: normals, FPFH descriptors, RANSAC and point-to-point ICP.

The object samples are the source and the scene samples the target, so the
resulting transform places the object into the scene.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from . import kernels
from .fields import SdfField
from .transforms import Sim3Matrix, kabsch

log = logging.getLogger(__name__)


class InitialisationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CoarseConfig:
    normal_k: int = 10
    fpfh_radius: float | None = None  # None: 5 x voxel size
    voxel_size: float | None = None   # None: 1/30 of the target cloud's diagonal
    ransac_iters: int = 4096
    ransac_inlier_threshold: float | None = None  # None: 1.5 x voxel size
    icp_max_iters: int = 50
    icp_convergence_eps: float = 1e-7
    correspondence_ratio_test: float = 0.9
    ratio_fallback: bool = True  # use plain nearest matches if < 3 pass the ratio test
    # match at the RMS-radius size ratio; the result is still emitted at scale 1
    scale_aware_matching: bool = True
    prenormalize: bool = False  # keep the size ratio as the initial scale
    seed: int = 0

    def __post_init__(self):
        for name in ("normal_k", "ransac_iters", "icp_max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("fpfh_radius", "voxel_size", "ransac_inlier_threshold"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")
        if self.icp_convergence_eps <= 0 or not 0 < self.correspondence_ratio_test <= 1:
            raise ValueError("icp_convergence_eps must be > 0 and ratio test in (0, 1]")


@dataclass
class CoarseDiagnostics:
    inlier_fraction: float
    n_correspondences: int
    icp_residual: float
    icp_iters: int
    init_seconds: float
    low_inlier_warning: bool
    scale_estimate: float = 1.0
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {"inlier_fraction": self.inlier_fraction, "n_correspondences": self.n_correspondences,
                "icp_residual": self.icp_residual, "icp_iters": self.icp_iters,
                "init_seconds": self.init_seconds, "low_inlier_warning": self.low_inlier_warning,
                "scale_estimate": self.scale_estimate}


# --------------------------------------------------------------------------
# normals and descriptors
# --------------------------------------------------------------------------

def pca_normals(points, k: int, view_origins=None, source_view=None):
    """Plane-fit normals from the ``k`` nearest neighbors, oriented toward the camera."""
    k = min(k, len(points))
    _, idx = cKDTree(points).query(points, k=k)
    idx = np.atleast_2d(idx).reshape(len(points), -1)
    nbrs = points[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    if view_origins is not None and source_view is not None:
        cams = np.asarray(view_origins)[np.clip(source_view, 0, len(view_origins) - 1)]
        flip = np.einsum("ij,ij->i", normals, cams - points) < 0
        normals[flip] *= -1
    return normals


def estimate_normals(samples, f: SdfField | None = None, k: int = 10):
    """Unit normals from the field gradient, PCA where the gradient vanishes."""
    pts = samples.points
    normals = np.zeros_like(pts)
    weak = np.ones(len(pts), dtype=bool)
    if f is not None:
        g = f.gradient(pts)
        gn = np.linalg.norm(g, axis=1)
        weak = gn < 1e-8
        normals[~weak] = g[~weak] / gn[~weak, None]
    if weak.any():
        pca = pca_normals(pts, k, samples.view_origins, samples.source_view)
        normals[weak] = pca[weak]
    return normals


def radius_neighbors(points, radius):
    """CSR neighbor lists (self excluded, sorted by index)."""
    lists = cKDTree(points).query_ball_point(points, radius)
    counts = np.zeros(len(points) + 1, dtype=np.int64)
    flat = []
    for i, nb in enumerate(lists):
        nb = sorted(j for j in nb if j != i)
        counts[i + 1] = len(nb)
        flat.extend(nb)
    return np.cumsum(counts), np.asarray(flat, dtype=np.int64)


def compute_fpfh(points, normals, radius: float) -> NDArray:
    """33-bin FPFH per point; all-zero for points without neighbors in ``radius``."""
    points = np.ascontiguousarray(points, dtype=float)
    normals = np.ascontiguousarray(normals, dtype=float)
    ptr, idx = radius_neighbors(points, radius)
    spfh = kernels.spfh_histograms(points, normals, ptr, idx)
    return kernels.fpfh_accumulate(spfh, points, ptr, idx)


def voxel_downsample(points, normals, voxel):
    """Centroid of each occupied voxel with the averaged (renormalized) normal."""
    keys = np.floor(points / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    m = len(counts)
    p = np.zeros((m, 3))
    nrm = np.zeros((m, 3))
    np.add.at(p, inv, points)
    np.add.at(nrm, inv, normals)
    p /= counts[:, None]
    nn = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = np.where(nn > 1e-12, nrm / np.where(nn > 0, nn, 1), (0.0, 0.0, 1.0))
    return p, nrm


# --------------------------------------------------------------------------
# RANSAC and ICP
# --------------------------------------------------------------------------

def match_descriptors(src_desc, dst_desc, ratio: float):
    """Nearest-descriptor matches from source to target that pass the ratio test."""
    tree = cKDTree(dst_desc)
    k = 2 if len(dst_desc) > 1 else 1
    d, j = tree.query(src_desc, k=k)
    d = np.atleast_2d(d).reshape(len(src_desc), -1)
    j = np.atleast_2d(j).reshape(len(src_desc), -1)
    if k == 2:
        ok = d[:, 0] <= ratio * d[:, 1]
        # exact ties on both neighbors (e.g. zero descriptors) carry no information
        ok &= ~((d[:, 0] == d[:, 1]) & (d[:, 0] == 0))
    else:
        ok = np.ones(len(src_desc), dtype=bool)
    ok &= np.any(src_desc > 0, axis=1)
    src_idx = np.nonzero(ok)[0]
    return src_idx, j[src_idx, 0]


def _batch_kabsch(S, D):
    """Rigid fits for a batch of 3-point samples, shapes ``(m, 3, 3)``."""
    cs, cd = S.mean(axis=1, keepdims=True), D.mean(axis=1, keepdims=True)
    H = np.einsum("mki,mkj->mij", S - cs, D - cd)
    U, _, Vt = np.linalg.svd(H)
    det = np.linalg.det(np.einsum("mji,mkj->mik", Vt, U))
    Dm = np.zeros_like(H)
    Dm[:, 0, 0] = 1.0
    Dm[:, 1, 1] = 1.0
    Dm[:, 2, 2] = np.where(det < 0, -1.0, 1.0)
    R = np.einsum("mji,mjk,mlk->mil", Vt, Dm, U)
    t = cd[:, 0] - np.einsum("mij,mj->mi", R, cs[:, 0])
    return R, t


@dataclass
class RansacResult:
    transform: Sim3Matrix
    inliers: int
    n_correspondences: int

    @property
    def inlier_fraction(self):
        return self.inliers / max(self.n_correspondences, 1)

    @property
    def low_inlier_warning(self):
        return self.inlier_fraction < 0.2


def ransac_align(src_pts, src_desc, dst_pts, dst_desc, cfg: CoarseConfig,
                 threshold: float, seed=None, batch: int = 512) -> RansacResult:
    """Rigid alignment ``dst ~ R src + t`` from putative descriptor matches."""
    if len(src_pts) < 3 or len(dst_pts) < 3:
        raise InitialisationError("RANSAC needs at least 3 points on each side")
    si, di = match_descriptors(src_desc, dst_desc, cfg.correspondence_ratio_test)
    if len(si) < 3 and cfg.ratio_fallback:
        # shapes with self-similar surfaces (spheres, cylinders) make every match ambiguous
        si, di = match_descriptors(src_desc, dst_desc, 1.0)
    if len(si) < 3:
        raise InitialisationError(f"only {len(si)} correspondences survived the ratio test")
    cs, cd = src_pts[si], dst_pts[di]
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    samples = np.stack([rng.choice(len(si), size=3, replace=False) for _ in range(cfg.ransac_iters)])
    thr2 = threshold * threshold
    best = (-1, np.inf, None)
    for start in range(0, len(samples), batch):
        sm = samples[start:start + batch]
        R, t = _batch_kabsch(cs[sm], cd[sm])
        mapped = np.einsum("mij,nj->mni", R, cs) + t[:, None, :]
        err = np.einsum("mni,mni->mn", mapped - cd, mapped - cd)
        inl = err < thr2
        count = inl.sum(axis=1)
        mse = np.where(count > 0, np.where(inl, err, 0).sum(axis=1) / np.maximum(count, 1), np.inf)
        for m in range(len(sm)):
            if count[m] > best[0] or (count[m] == best[0] and mse[m] < best[1]):
                best = (int(count[m]), float(mse[m]), (R[m], t[m]))
    R, t = best[2]
    inl = np.sum((cs @ R.T + t - cd) ** 2, axis=1) < thr2
    if inl.sum() >= 3:
        R, t = kabsch(cs[inl], cd[inl])
        inl = np.sum((cs @ R.T + t - cd) ** 2, axis=1) < thr2
    return RansacResult(Sim3Matrix(R, t, 1.0), int(inl.sum()), len(si))


@dataclass
class IcpResult:
    transform: Sim3Matrix
    residual: float
    iterations: int
    history: list


def icp_refine(src, dst, T0: Sim3Matrix, cfg: CoarseConfig) -> IcpResult:
    """Point-to-point ICP; the scale of ``T0`` is held fixed.

    The residual is the RMS correspondence distance, which each iteration
    cannot increase. Returns the best iterate, so the residual never exceeds
    the one at ``T0``.
    """
    src = np.asarray(src, dtype=float)
    tree = cKDTree(dst)
    s = T0.scale
    R, t = T0.rotation, T0.translation
    scaled = s * src
    d, j = tree.query(scaled @ R.T + t)
    err = float(np.sqrt(np.mean(d * d)))
    history = [err]
    best = (err, R, t)
    it = 0
    for it in range(1, cfg.icp_max_iters + 1):
        R, t = kabsch(scaled, dst[j])
        d, j = tree.query(scaled @ R.T + t)
        new = float(np.sqrt(np.mean(d * d)))
        history.append(new)
        if new < best[0]:
            best = (new, R, t)
        if abs(err - new) < cfg.icp_convergence_eps:
            break
        err = new
    return IcpResult(Sim3Matrix(best[1], best[2], s), best[0], it, history)


def _rms_radius(pts):
    return float(np.sqrt(np.mean(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1))))


def initial_registration(P_a, P_b, cfg: CoarseConfig = CoarseConfig(), f_a: SdfField | None = None,
                         f_b: SdfField | None = None) -> tuple[Sim3Matrix, CoarseDiagnostics]:
    """Object-to-scene initial transform from two sample sets.

    ``P_b`` (object frame) is aligned onto ``P_a`` (scene frame). Without
    ``prenormalize`` the returned scale is exactly 1. With
    ``scale_aware_matching`` the object cloud is resized to the scene's RMS
    radius for descriptors, RANSAC and ICP; the rigid result is then shifted
    so the object centroid lands where the resized fit put it.
    """
    t0 = time.perf_counter()
    if len(P_a) == 0 or len(P_b) == 0:
        raise InitialisationError("initial registration needs non-empty sample sets")
    dst_pts, src_pts = P_a.points, P_b.points
    scale = 1.0
    if cfg.prenormalize or cfg.scale_aware_matching:
        scale = _rms_radius(dst_pts) / max(_rms_radius(src_pts), 1e-12)
    dst_n = estimate_normals(P_a, f_a, cfg.normal_k)
    src_n = estimate_normals(P_b, f_b, cfg.normal_k)
    src_scaled = src_pts * scale

    diag = float(np.linalg.norm(dst_pts.max(axis=0) - dst_pts.min(axis=0)))
    voxel = cfg.voxel_size or diag / 30.0
    radius = cfg.fpfh_radius or 5.0 * voxel
    thr = cfg.ransac_inlier_threshold or 1.5 * voxel

    dp, dn = voxel_downsample(dst_pts, dst_n, voxel)
    sp, sn = voxel_downsample(src_scaled, src_n, voxel)
    if len(dp) < 3 or len(sp) < 3:
        raise InitialisationError("too few points left after downsampling")
    d_desc = compute_fpfh(dp, dn, radius)
    s_desc = compute_fpfh(sp, sn, radius)
    rr = ransac_align(sp, s_desc, dp, d_desc, cfg, thr)
    T_r = Sim3Matrix(rr.transform.rotation, rr.transform.translation, scale)
    icp = icp_refine(src_pts, dst_pts, T_r, cfg)
    T_out = icp.transform
    if not cfg.prenormalize and scale != 1.0:
        c = src_pts.mean(axis=0)
        T_out = Sim3Matrix(T_out.rotation, T_out.apply(c) - T_out.rotation @ c, 1.0)
    diag_out = CoarseDiagnostics(
        inlier_fraction=rr.inlier_fraction, n_correspondences=rr.n_correspondences,
        icp_residual=icp.residual, icp_iters=icp.iterations,
        init_seconds=time.perf_counter() - t0, low_inlier_warning=rr.low_inlier_warning,
        scale_estimate=scale)
    if rr.low_inlier_warning:
        log.info("RANSAC inlier fraction %.3f is low; initialisation may be unreliable",
                 rr.inlier_fraction)
    return T_out, diag_out
