"""Pure-numpy kernels (reference path, also used when numba is unavailable)."""

import numpy as np

N_BINS = 11
SNAP = 1e-9


def trilinear(values, origin, spacing, pts):
    """Trilinear value and gradient of a (nz, ny, nx) sample array.

    ``pts`` must already be clamped to the grid box.
    """
    nz, ny, nx = values.shape
    g = (pts - origin) / spacing
    # snap coordinates that are a rounding error away from a node
    r = np.rint(g)
    g = np.where(np.abs(g - r) <= SNAP, r, g)
    hi = np.array([nx - 1, ny - 1, nz - 1])
    i0 = np.clip(np.floor(g).astype(np.int64), 0, hi - 1)
    f = g - i0
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    v = values.astype(np.float64, copy=False)
    c000 = v[iz, iy, ix]
    c100 = v[iz, iy, ix + 1]
    c010 = v[iz, iy + 1, ix]
    c110 = v[iz, iy + 1, ix + 1]
    c001 = v[iz + 1, iy, ix]
    c101 = v[iz + 1, iy, ix + 1]
    c011 = v[iz + 1, iy + 1, ix]
    c111 = v[iz + 1, iy + 1, ix + 1]
    c00 = c000 + fx * (c100 - c000)
    c10 = c010 + fx * (c110 - c010)
    c01 = c001 + fx * (c101 - c001)
    c11 = c011 + fx * (c111 - c011)
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    val = c0 + fz * (c1 - c0)
    dx0 = (c100 - c000) + fy * ((c110 - c010) - (c100 - c000))
    dx1 = (c101 - c001) + fy * ((c111 - c011) - (c101 - c001))
    gx = dx0 + fz * (dx1 - dx0)
    gy = (c10 - c00) + fz * ((c11 - c01) - (c10 - c00))
    gz = c1 - c0
    grad = np.stack([gx, gy, gz], axis=1) / spacing
    return val, grad


def pair_features(p1, n1, p2, n2):
    """Darboux-frame features (f1, f2, f3) for arrays of point pairs.

    Returns a validity mask; degenerate pairs (coincident points or normal
    parallel to the connecting line) are invalid.
    """
    dp = p2 - p1
    f4 = np.linalg.norm(dp, axis=1)
    ok = f4 > 0
    safe = np.where(ok, f4, 1.0)
    a1 = np.einsum("ij,ij->i", n1, dp) / safe
    a2 = np.einsum("ij,ij->i", n2, dp) / safe
    swap = np.arccos(np.clip(np.abs(a1), -1, 1)) > np.arccos(np.clip(np.abs(a2), -1, 1))
    na = np.where(swap[:, None], n2, n1)
    nb = np.where(swap[:, None], n1, n2)
    dp = np.where(swap[:, None], -dp, dp)
    f3 = np.where(swap, -a2, a1)
    v = np.cross(dp, na)
    vn = np.linalg.norm(v, axis=1)
    ok &= vn > 0
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(na, v)
    f2 = np.einsum("ij,ij->i", v, nb)
    f1 = np.arctan2(np.einsum("ij,ij->i", w, nb), np.einsum("ij,ij->i", na, nb))
    return f1, f2, f3, ok


def feature_bins(f1, f2, f3):
    b1 = np.floor(N_BINS * (f1 + np.pi) / (2 * np.pi)).astype(np.int64)
    b2 = np.floor(N_BINS * (f2 + 1.0) * 0.5).astype(np.int64)
    b3 = np.floor(N_BINS * (f3 + 1.0) * 0.5).astype(np.int64)
    return (np.clip(b1, 0, N_BINS - 1), np.clip(b2, 0, N_BINS - 1) + N_BINS,
            np.clip(b3, 0, N_BINS - 1) + 2 * N_BINS)


def spfh_histograms(points, normals, nbr_ptr, nbr_idx):
    """Simplified point feature histograms, each 11-bin block summing to 100.

    Neighbors come in CSR form (``nbr_ptr``, ``nbr_idx``) and must not contain
    the query point itself.
    """
    n = len(points)
    counts = np.diff(nbr_ptr)
    owner = np.repeat(np.arange(n), counts)
    f1, f2, f3, ok = pair_features(points[owner], normals[owner], points[nbr_idx], normals[nbr_idx])
    hist = np.zeros((n, 3 * N_BINS))
    nvalid = np.bincount(owner[ok], minlength=n).astype(float)
    incr = np.where(nvalid > 0, 100.0 / np.maximum(nvalid, 1), 0.0)
    w = incr[owner[ok]]
    for b in feature_bins(f1[ok], f2[ok], f3[ok]):
        np.add.at(hist, (owner[ok], b), w)
    return hist


def fpfh_accumulate(spfh, points, nbr_ptr, nbr_idx):
    """Combine SPFH of each point with 1/d-weighted neighbor SPFHs.

    The neighbor part is normalized to 100 per block, added to the point's own
    SPFH, and each block of the result renormalized to sum 100.
    """
    n = len(points)
    counts = np.diff(nbr_ptr)
    owner = np.repeat(np.arange(n), counts)
    d = np.linalg.norm(points[nbr_idx] - points[owner], axis=1)
    ok = d > 0
    wts = np.zeros_like(d)
    wts[ok] = 1.0 / d[ok]
    nb = np.zeros_like(spfh)
    np.add.at(nb, owner, spfh[nbr_idx] * wts[:, None])
    out = spfh.copy()
    for k in range(3):
        sl = slice(k * N_BINS, (k + 1) * N_BINS)
        s = nb[:, sl].sum(axis=1)
        scale = np.where(s > 0, 100.0 / np.where(s > 0, s, 1.0), 0.0)
        out[:, sl] += nb[:, sl] * scale[:, None]
        t = out[:, sl].sum(axis=1)
        out[:, sl] *= np.where(t > 0, 100.0 / np.where(t > 0, t, 1.0), 0.0)[:, None]
    return out
