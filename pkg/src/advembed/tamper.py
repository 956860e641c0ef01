"""Image tampering simulations and the recovery metric.

All transforms take and return float images ``(H, W, C)`` in [0, 1].
Geometry uses bilinear sampling with pixel centres at half-integer
coordinates; JPEG is simulated with an 8x8 DCT and the standard
quantization tables.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.fft import dctn, idctn

from . import neuralkey as nk


def _sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: float | None) -> np.ndarray:
    """Bilinear lookup at float pixel coordinates (row, col) of the same shape.

    Neighbours outside the image read ``fill``; with ``fill=None`` they read
    the nearest edge pixel instead.
    """
    h, w = img.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]

    def at(yi, xi):
        if fill is None:
            return img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(inside[..., None], vals, fill)

    top = at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx
    bottom = at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx
    return top * (1 - fy) + bottom * fy


def _as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {img.shape}")
    return img


def _finish(img) -> np.ndarray:
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def rotate(img, degrees: float, fill: float = 0.0) -> np.ndarray:
    """Rotate counter-clockwise about the image centre; uncovered corners get ``fill``."""
    img = _as_image(img)
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: rotate each output coordinate clockwise back into the source
    src_x = c * dx - s * dy + cx
    src_y = s * dx + c * dy + cy
    return _finish(_sample(img, src_y, src_x, fill))


def resize(img, size: Sequence[int]) -> np.ndarray:
    """Bilinear resize to ``(height, width)`` with edge clamping."""
    img = _as_image(img)
    h, w = img.shape[:2]
    nh, nw = int(size[0]), int(size[1])
    if nh < 1 or nw < 1:
        raise ValueError("target size must be positive")
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _finish(_sample(img, yy, xx, None))


def upscale(img, factor: float) -> np.ndarray:
    img = _as_image(img)
    if factor <= 0:
        raise ValueError("factor must be positive")
    h, w = img.shape[:2]
    return resize(img, (max(1, round(h * factor)), max(1, round(w * factor))))


def center_crop(img, fraction: float) -> np.ndarray:
    """Remove ``fraction`` of the area around the centre, then resize back."""
    img = _as_image(img)
    if not 0 <= fraction < 1:
        raise ValueError("fraction must be in [0, 1)")
    h, w = img.shape[:2]
    scale = np.sqrt(1 - fraction)
    ch, cw = max(1, round(h * scale)), max(1, round(w * scale))
    top, left = (h - ch) // 2, (w - cw) // 2
    return resize(img[top:top + ch, left:left + cw], (h, w))


LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_TABLE = np.full((8, 8), 99.0)
CHROMA_TABLE[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]


def quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    """Scale a base table the way libjpeg does for quality 1..100."""
    if not 1 <= quality <= 100:
        raise ValueError("quality must be in 1..100")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def _rgb_to_ycbcr(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128
    return np.stack([y, cb, cr], axis=-1)


def _ycbcr_to_rgb(ycc):
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128, ycc[..., 2] - 128
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _jpeg_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ph, pw = -h % 8, -w % 8
    p = np.pad(plane - 128, ((0, ph), (0, pw)), mode="edge")
    blocks = p.reshape(p.shape[0] // 8, 8, p.shape[1] // 8, 8).transpose(0, 2, 1, 3)
    coef = dctn(blocks, axes=(2, 3), norm="ortho")
    coef = np.round(coef / table) * table
    back = idctn(coef, axes=(2, 3), norm="ortho").transpose(0, 2, 1, 3).reshape(p.shape)
    return back[:h, :w] + 128


def jpeg_compress(img, quality: int) -> np.ndarray:
    """Lossy JPEG round trip (4:4:4, no entropy coding), returned at 8 bits."""
    img = _as_image(img)
    luma, chroma = quant_table(LUMA_TABLE, quality), quant_table(CHROMA_TABLE, quality)
    x = np.clip(img, 0, 1) * 255
    if img.shape[2] == 1:
        out = _jpeg_plane(x[..., 0], luma)[..., None]
    elif img.shape[2] == 3:
        ycc = _rgb_to_ycbcr(x)
        ycc = np.stack([_jpeg_plane(ycc[..., 0], luma),
                        _jpeg_plane(ycc[..., 1], chroma),
                        _jpeg_plane(ycc[..., 2], chroma)], axis=-1)
        out = _ycbcr_to_rgb(ycc)
    else:
        raise ValueError("JPEG needs 1 or 3 channels")
    return (np.clip(np.round(out), 0, 255).astype(np.float32) / np.float32(255)).astype(np.float32)


def color_depth_reduce(img, bits: int) -> np.ndarray:
    """Keep ``bits`` bits per channel, mapping each level back onto [0, 1]."""
    if not 1 <= bits <= 8:
        raise ValueError("bits must be in 1..8")
    img = _as_image(img)
    levels = (1 << bits) - 1
    steps = np.round(np.clip(img, 0, 1) * levels).astype(np.float32)
    return steps / np.float32(levels)


TRANSFORMS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "rotate_15": lambda x: rotate(x, 15),
    "upscale_2x": lambda x: upscale(x, 2),
    "crop_12.5": lambda x: center_crop(x, 0.125),
    "jpeg_90": lambda x: jpeg_compress(x, 90),
    "jpeg_75": lambda x: jpeg_compress(x, 75),
    "jpeg_50": lambda x: jpeg_compress(x, 50),
    "depth_3bit": lambda x: color_depth_reduce(x, 3),
}


def recovery_rate(model: nk.ModelKey, stego_images: np.ndarray, reference: Sequence[Sequence[int]],
                  transform: Callable[[np.ndarray], np.ndarray]) -> float:
    """Fraction of transformed images whose top classes still equal ``reference``.

    ``reference[i]`` is the ordered class list read from the untampered
    image ``i``. Transformed images whose size no longer matches the model
    input are resized back to it before classification.
    """
    if len(stego_images) != len(reference):
        raise ValueError("one reference class list per image is required")
    if not len(stego_images):
        return 1.0
    h, w = model.input_shape[:2]
    tampered = []
    for img in stego_images:
        t = transform(img)
        if t.shape[:2] != (h, w):
            t = resize(t, (h, w))
        tampered.append(t)
    order = nk.rank_classes(nk.forward(model, np.stack(tampered).astype(np.float32)))
    hits = [list(row[:len(ref)]) == [int(c) for c in ref] for row, ref in zip(order, reference)]
    return float(np.mean(hits))
