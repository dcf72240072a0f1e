"""numba-compiled kernels; same contracts as :mod:`regnf.kernels._numpy`."""

import math

import numpy as np
from numba import njit, prange

N_BINS = 11
SNAP = 1e-9


@njit(cache=True)
def _snap(g):
    r = math.floor(g + 0.5)
    return r if abs(g - r) <= SNAP else g


@njit(parallel=True, cache=True)
def _trilinear(values, origin, spacing, pts, val, grad):
    nz, ny, nx = values.shape
    for k in prange(pts.shape[0]):
        gx = (pts[k, 0] - origin[0]) / spacing[0]
        gy = (pts[k, 1] - origin[1]) / spacing[1]
        gz = (pts[k, 2] - origin[2]) / spacing[2]
        gx = _snap(gx)
        gy = _snap(gy)
        gz = _snap(gz)
        ix = min(max(int(math.floor(gx)), 0), nx - 2)
        iy = min(max(int(math.floor(gy)), 0), ny - 2)
        iz = min(max(int(math.floor(gz)), 0), nz - 2)
        fx, fy, fz = gx - ix, gy - iy, gz - iz
        c000 = np.float64(values[iz, iy, ix])
        c100 = np.float64(values[iz, iy, ix + 1])
        c010 = np.float64(values[iz, iy + 1, ix])
        c110 = np.float64(values[iz, iy + 1, ix + 1])
        c001 = np.float64(values[iz + 1, iy, ix])
        c101 = np.float64(values[iz + 1, iy, ix + 1])
        c011 = np.float64(values[iz + 1, iy + 1, ix])
        c111 = np.float64(values[iz + 1, iy + 1, ix + 1])
        c00 = c000 + fx * (c100 - c000)
        c10 = c010 + fx * (c110 - c010)
        c01 = c001 + fx * (c101 - c001)
        c11 = c011 + fx * (c111 - c011)
        c0 = c00 + fy * (c10 - c00)
        c1 = c01 + fy * (c11 - c01)
        val[k] = c0 + fz * (c1 - c0)
        dx0 = (c100 - c000) + fy * ((c110 - c010) - (c100 - c000))
        dx1 = (c101 - c001) + fy * ((c111 - c011) - (c101 - c001))
        grad[k, 0] = (dx0 + fz * (dx1 - dx0)) / spacing[0]
        grad[k, 1] = ((c10 - c00) + fz * ((c11 - c01) - (c10 - c00))) / spacing[1]
        grad[k, 2] = (c1 - c0) / spacing[2]


def trilinear(values, origin, spacing, pts):
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    val = np.empty(pts.shape[0])
    grad = np.empty((pts.shape[0], 3))
    _trilinear(values, np.asarray(origin, np.float64), np.asarray(spacing, np.float64), pts, val, grad)
    return val, grad


@njit(cache=True)
def _clip_bin(b):
    if b < 0:
        return 0
    if b > N_BINS - 1:
        return N_BINS - 1
    return b


@njit(cache=True)
def _pair_bins(p1, n1, p2, n2, out):
    """Write the three bin indices of a pair into ``out``; False if degenerate."""
    dx, dy, dz = p2[0] - p1[0], p2[1] - p1[1], p2[2] - p1[2]
    f4 = math.sqrt(dx * dx + dy * dy + dz * dz)
    if f4 == 0.0:
        return False
    a1 = (n1[0] * dx + n1[1] * dy + n1[2] * dz) / f4
    a2 = (n2[0] * dx + n2[1] * dy + n2[2] * dz) / f4
    if math.acos(min(abs(a1), 1.0)) > math.acos(min(abs(a2), 1.0)):
        na0, na1, na2 = n2[0], n2[1], n2[2]
        nb0, nb1, nb2 = n1[0], n1[1], n1[2]
        dx, dy, dz = -dx, -dy, -dz
        f3 = -a2
    else:
        na0, na1, na2 = n1[0], n1[1], n1[2]
        nb0, nb1, nb2 = n2[0], n2[1], n2[2]
        f3 = a1
    vx = dy * na2 - dz * na1
    vy = dz * na0 - dx * na2
    vz = dx * na1 - dy * na0
    vn = math.sqrt(vx * vx + vy * vy + vz * vz)
    if vn == 0.0:
        return False
    vx, vy, vz = vx / vn, vy / vn, vz / vn
    wx = na1 * vz - na2 * vy
    wy = na2 * vx - na0 * vz
    wz = na0 * vy - na1 * vx
    f2 = vx * nb0 + vy * nb1 + vz * nb2
    f1 = math.atan2(wx * nb0 + wy * nb1 + wz * nb2, na0 * nb0 + na1 * nb1 + na2 * nb2)
    out[0] = _clip_bin(int(math.floor(N_BINS * (f1 + math.pi) / (2 * math.pi))))
    out[1] = _clip_bin(int(math.floor(N_BINS * (f2 + 1.0) * 0.5))) + N_BINS
    out[2] = _clip_bin(int(math.floor(N_BINS * (f3 + 1.0) * 0.5))) + 2 * N_BINS
    return True


@njit(parallel=True, cache=True)
def _spfh(points, normals, nbr_ptr, nbr_idx, hist):
    n = points.shape[0]
    for i in prange(n):
        bins = np.empty(3, np.int64)
        nvalid = 0
        for e in range(nbr_ptr[i], nbr_ptr[i + 1]):
            j = nbr_idx[e]
            if _pair_bins(points[i], normals[i], points[j], normals[j], bins):
                nvalid += 1
        if nvalid == 0:
            continue
        incr = 100.0 / nvalid
        for e in range(nbr_ptr[i], nbr_ptr[i + 1]):
            j = nbr_idx[e]
            if _pair_bins(points[i], normals[i], points[j], normals[j], bins):
                for b in range(3):
                    hist[i, bins[b]] += incr


def spfh_histograms(points, normals, nbr_ptr, nbr_idx):
    hist = np.zeros((len(points), 3 * N_BINS))
    _spfh(np.ascontiguousarray(points, np.float64), np.ascontiguousarray(normals, np.float64),
          np.asarray(nbr_ptr, np.int64), np.asarray(nbr_idx, np.int64), hist)
    return hist


@njit(parallel=True, cache=True)
def _fpfh(spfh, points, nbr_ptr, nbr_idx, out):
    n = points.shape[0]
    nb_total = spfh.shape[1]
    for i in prange(n):
        acc = np.zeros(nb_total)
        for e in range(nbr_ptr[i], nbr_ptr[i + 1]):
            j = nbr_idx[e]
            dx = points[j, 0] - points[i, 0]
            dy = points[j, 1] - points[i, 1]
            dz = points[j, 2] - points[i, 2]
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            if d == 0.0:
                continue
            for b in range(nb_total):
                acc[b] += spfh[j, b] / d
        for k in range(3):
            s = 0.0
            for b in range(k * N_BINS, (k + 1) * N_BINS):
                s += acc[b]
            sc = 100.0 / s if s > 0 else 0.0
            t = 0.0
            for b in range(k * N_BINS, (k + 1) * N_BINS):
                out[i, b] = spfh[i, b] + acc[b] * sc
                t += out[i, b]
            sc2 = 100.0 / t if t > 0 else 0.0
            for b in range(k * N_BINS, (k + 1) * N_BINS):
                out[i, b] *= sc2


def fpfh_accumulate(spfh, points, nbr_ptr, nbr_idx):
    out = np.zeros_like(spfh)
    _fpfh(np.ascontiguousarray(spfh), np.ascontiguousarray(points, np.float64),
          np.asarray(nbr_ptr, np.int64), np.asarray(nbr_idx, np.int64), out)
    return out
