"""Image IO, bicubic resampling, training-pair synthesis and PSNR.

Images are ``float64`` numpy arrays of shape ``(H, W, 3)`` with values in
``[0, 1]``.
"""
from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParseError, UsageError

PSNR_CAP = 100.0
IMAGE_SUFFIXES = (".ppm",)


# ---------------------------------------------------------------- PPM / PNG

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("truncated PPM header", start)
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise ParseError(f"unsupported magic {buf[:2]!r}", 0)
    pos = 2
    fields = []
    for _ in range(3):
        at = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ParseError(f"bad PPM header field {tok!r}", at)
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ParseError("PPM extents must be positive", 2)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after PPM header", pos)
    pos += 1
    need = width * height * 3
    if len(buf) - pos < need:
        raise ParseError(f"truncated PPM raster: need {need} bytes, have {len(buf) - pos}", len(buf))
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return raster.reshape(height, width, 3).astype(np.float64) / 255.0


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected an H x W x 3 image, got {img.shape}")
    h, w, _ = img.shape
    raster = img if img.dtype == np.uint8 else to_bytes(img)
    return b"P6\n%d %d\n255\n" % (w, h) + raster.tobytes()


def _decode_png(buf: bytes) -> np.ndarray:
    try:
        from PIL import Image as PILImage
    except ImportError as exc:  # pragma: no cover
        raise UsageError("PNG support needs Pillow (pip install moeisr[png])") from exc
    im = PILImage.open(io.BytesIO(buf))
    if im.mode != "RGB" or im.info.get("interlace"):
        raise ParseError(f"only 8-bit non-interlaced RGB PNG is supported, got mode {im.mode}", 0)
    return np.asarray(im, dtype=np.float64) / 255.0


def load_image(path: str | os.PathLike, allow_png: bool = False) -> np.ndarray:
    buf = Path(path).read_bytes()
    if allow_png and buf[:8] == b"\x89PNG\r\n\x1a\n":
        return _decode_png(buf)
    try:
        return decode_ppm(buf)
    except ParseError as exc:
        err = ParseError(f"{path}: {exc.args[0]}")
        err.offset = exc.offset
        raise err from None


def save_image(path: str | os.PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def list_images(directory: str | os.PathLike, allow_png: bool = False) -> list[Path]:
    """Image files of a flat dataset folder in lexicographic filename order."""
    suffixes = IMAGE_SUFFIXES + ((".png",) if allow_png else ())
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() in suffixes)


# ---------------------------------------------------------------- bicubic

def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` resampling matrix with pixel-center alignment and edge clamp."""
    w = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    base = np.floor(src).astype(int)
    for tap in range(-1, 3):
        idx = base + tap
        kw = cubic_kernel(src - idx)
        np.add.at(w, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), kw)
    return w


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise UsageError(f"output extents must be >= 1, got {out_h}x{out_w}")
    h, w = img.shape[:2]
    wy, wx = resize_weights(h, out_h), resize_weights(w, out_w)
    out = np.einsum("ih,hwc,jw->ijc", wy, img, wx, optimize=True)
    return np.clip(out, 0.0, 1.0)


def downscale(img: np.ndarray, scale: float) -> np.ndarray:
    h, w = img.shape[:2]
    return bicubic_resize(img, max(1, round(h / scale)), max(1, round(w / scale)))


# ---------------------------------------------------------------- training pairs

@dataclass
class TrainingPair:
    lr_patch: np.ndarray       # (P, P, 3)
    query_coords: np.ndarray   # (N, 2) normalized (y, x) pixel centers of the HR window
    query_cells: np.ndarray    # (N, 2)
    target_rgb: np.ndarray     # (N, 3)
    scale: float


def sample_training_pair(hr: np.ndarray, rng: np.random.Generator, patch: int = 48,
                         scale_range: tuple[float, float] = (1.0, 4.0),
                         n_queries: int = 2304) -> TrainingPair:
    """Random-scale crop of ``hr`` downscaled to a ``patch`` x ``patch`` LR input."""
    lo, hi = scale_range
    need = round(patch * hi)
    h, w = hr.shape[:2]
    if h < need or w < need:
        raise UsageError(f"HR image {h}x{w} too small: scale {hi} with patch {patch} needs {need}x{need}")
    s = float(rng.uniform(lo, hi))
    win = round(patch * s)
    y0 = int(rng.integers(0, h - win + 1))
    x0 = int(rng.integers(0, w - win + 1))
    crop = hr[y0:y0 + win, x0:x0 + win]
    lr = bicubic_resize(crop, patch, patch)
    flat = rng.choice(win * win, size=n_queries, replace=win * win < n_queries)
    rows, cols = np.divmod(flat, win)
    coords = np.stack([-1 + (2 * rows + 1) / win, -1 + (2 * cols + 1) / win], axis=1)
    cells = np.full((n_queries, 2), 2.0 / win)
    return TrainingPair(lr, coords, cells, crop[rows, cols], s)


# ---------------------------------------------------------------- metric

def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """PSNR in dB over all RGB values in [0, 1], capped at 100 dB."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise UsageError(f"psnr: shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def synthetic_image(n: int = 64) -> np.ndarray:
    """Smooth gradient with a disc and a rectangle; sharp edges on a flat background."""
    yy, xx = np.mgrid[0:n, 0:n] / n
    img = np.stack([0.3 + 0.4 * xx, 0.2 + 0.5 * yy, 0.6 - 0.3 * xx * yy], -1)
    img[(yy - 0.35) ** 2 + (xx - 0.6) ** 2 < 0.04] = [0.9, 0.2, 0.1]
    img[(yy > 0.6) & (yy < 0.85) & (xx > 0.15) & (xx < 0.45)] = [0.1, 0.1, 0.8]
    return np.clip(img, 0.0, 1.0)
