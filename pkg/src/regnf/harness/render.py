"""Normal-shaded sphere-traced images and binary PPM I/O."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from ..fields import SdfField
from ..sampling import CameraPose, SamplingConfig, ray_grid, trace_rays

BACKGROUND = (32, 32, 48)
_LIGHT = np.array([0.4, -0.3, 0.866])


def _trace_config(resolution, max_steps=256, epsilon=1e-4):
    w, h = resolution
    return SamplingConfig(n_views=1, ray_grid=(int(h), int(w)), max_trace_steps=max_steps,
                          trace_epsilon=epsilon)


def trace_image(f: SdfField, pose: CameraPose, resolution=(128, 128), max_steps: int = 256):
    """Per-pixel hit points and hit mask, both in row-major (height, width) layout."""
    w, h = resolution
    cfg = _trace_config(resolution, max_steps)
    o, d = ray_grid(pose, cfg)
    pts, hit = trace_rays(f, o, d, cfg)
    return pts.reshape(h, w, 3), hit.reshape(h, w), d.reshape(h, w, 3)


def render_image(f: SdfField, pose: CameraPose, resolution=(128, 128)) -> NDArray[np.uint8]:
    """RGB image of ``f`` seen from ``pose``; hits are shaded by a headlight plus a key light."""
    pts, hit, d = trace_image(f, pose, resolution)
    img = np.empty(hit.shape + (3,), dtype=np.uint8)
    img[:] = BACKGROUND
    if hit.any():
        n = f.gradient(pts[hit])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        head = np.clip(-np.sum(n * d[hit], axis=1), 0.0, 1.0)
        key = np.clip(n @ (_LIGHT / np.linalg.norm(_LIGHT)), 0.0, 1.0)
        shade = 0.1 + 0.6 * head + 0.3 * key
        base = np.array([230.0, 220.0, 200.0])
        img[hit] = np.clip(np.rint(shade[:, None] * base), 0, 255).astype(np.uint8)
    return img


def write_ppm(path, img: NDArray[np.uint8]) -> None:
    """Binary P6, written to a temp file and renamed into place."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got shape {img.shape}")
    path = Path(path)
    h, w, _ = img.shape
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(img.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_ppm(path) -> NDArray[np.uint8]:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()
