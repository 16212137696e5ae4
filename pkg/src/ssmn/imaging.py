"""Raster preprocessing: ink masks, Euclidean distance transform, patch
cropping, and binary PGM I/O.

Images are 2-D float64 arrays of shape (height, width) with intensities in
[0, 1] (0 = black ink, 1 = white background). Normalized coordinates put pixel
(row r, col c) at ((c + 0.5) / W, (r + 0.5) / H).
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

_INF = 1e20


def check_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty 2-D grayscale image, got shape {img.shape}")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("grayscale intensities must lie in [0, 1]")
    return img


def binarize(img, ink_threshold: float = 0.98) -> np.ndarray:
    """True where the pixel is darker than ``ink_threshold``."""
    if not 0 < ink_threshold < 1:
        raise ValueError(f"ink_threshold must be in (0, 1), got {ink_threshold}")
    return check_gray(img) < ink_threshold


def _dt1d(f: np.ndarray) -> np.ndarray:
    """Squared distance transform of a sampled function (lower envelope of
    parabolas rooted at each sample)."""
    f = f.tolist()
    n = len(f)
    v = [0] * n
    z = [0.0] * (n + 1)
    k = 0
    z[0], z[1] = -math.inf, math.inf
    for q in range(1, n):
        fq = f[q] + q * q
        while True:
            p = v[k]
            s = (fq - (f[p] + p * p)) / (2.0 * (q - p))
            if s > z[k]:
                break
            k -= 1
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = math.inf
    d = [0.0] * n
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = (q - p) * (q - p) + f[p]
    return np.array(d)


def squared_edt(mask) -> np.ndarray:
    """Exact squared Euclidean distance (in pixels) to the nearest True pixel.

    Separable: a 1-D transform down every column, then along every row.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not mask.any():
        raise ValueError("distance transform undefined for a mask without ink")
    f = np.where(mask, 0.0, _INF)
    cols = np.empty_like(f)
    for c in range(f.shape[1]):
        cols[:, c] = _dt1d(f[:, c])
    out = np.empty_like(f)
    for r in range(f.shape[0]):
        out[r] = _dt1d(cols[r])
    return out


def edt(mask) -> np.ndarray:
    return np.sqrt(squared_edt(mask))


def distance_transform(mask, clip_fraction: float = 0.2) -> np.ndarray:
    """Distance to the nearest ink pixel, clipped at
    ``clip_fraction * max(H, W)`` and scaled into [0, 1]."""
    d = edt(mask)
    d_max = clip_fraction * max(d.shape)
    return np.minimum(d, d_max) / d_max


def brute_force_edt(mask) -> np.ndarray:
    """Quadratic-time nearest-ink search; test oracle."""
    mask = np.asarray(mask, dtype=bool)
    ink = np.argwhere(mask)
    if ink.size == 0:
        raise ValueError("distance transform undefined for a mask without ink")
    rr, cc = np.indices(mask.shape)
    pts = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    best = np.full(pts.shape[0], np.inf)
    for chunk in np.array_split(ink.astype(np.float64), max(1, len(ink) // 256)):
        d2 = ((pts[:, None, :] - chunk[None, :, :]) ** 2).sum(-1)
        best = np.minimum(best, d2.min(axis=1))
    return np.sqrt(best).reshape(mask.shape)


def luminance(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {rgb.shape}")
    return rgb @ np.array([0.299, 0.587, 0.114])


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional pixel-index coordinates, clamping to the
    border."""
    h, w = img.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def extract_patch(img, center, crop_fraction: float = 0.2, out_size: int = 32) -> np.ndarray:
    """Square crop of side ``crop_fraction * max(H, W)`` centred on the
    normalized ``center`` (x, y), resampled bilinearly to out_size x out_size.

    Samples falling outside the image take the nearest border value.
    """
    img = np.asarray(img, dtype=np.float64)
    cx, cy = float(center[0]), float(center[1])
    if not (0 <= cx <= 1 and 0 <= cy <= 1):
        raise ValueError(f"center must lie in [0, 1]^2, got {(cx, cy)}")
    if not 0 < crop_fraction <= 1:
        raise ValueError(f"crop_fraction must be in (0, 1], got {crop_fraction}")
    h, w = img.shape
    side = crop_fraction * max(h, w)
    step = side / out_size
    offs = (np.arange(out_size) + 0.5) * step - side / 2
    # continuous coordinate u maps to pixel index u - 0.5
    xs = cx * w + offs - 0.5
    ys = cy * h + offs - 0.5
    return _bilinear(img, ys, xs)


def extract_patches(img, centers, crop_fraction: float = 0.2, out_size: int = 32) -> np.ndarray:
    return np.stack([extract_patch(img, c, crop_fraction, out_size) for c in centers])


# --- PGM -------------------------------------------------------------------------

def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte follows maxval


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary (P5) PGM as floats in [0, 1]."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(data, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return raw.reshape(h, w).astype(np.float64) / maxval


def to_uint8(img) -> np.ndarray:
    return np.round(check_gray(img) * 255.0).astype(np.uint8)


def write_pgm(path, img) -> None:
    arr = img if np.asarray(img).dtype == np.uint8 else to_uint8(img)
    arr = np.ascontiguousarray(arr)
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())
