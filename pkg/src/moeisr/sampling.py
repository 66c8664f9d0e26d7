"""Coordinate bookkeeping between output queries and latent sites.

Coordinates live in ``[-1, 1]`` with pixel centers at ``-1 + (2i + 1) / n``.
Queries are ``(y, x)`` rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# row-major 3x3 neighbourhood; slot 4 is the site itself
UNFOLD_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
CENTER_SLOT = 4


def make_coord(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"extent must be >= 1, got {n}")
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def make_coord_grid(h_out: int, w_out: int) -> np.ndarray:
    """``(h_out * w_out, 2)`` pixel-center coordinates in row-major order."""
    ys, xs = make_coord(h_out), make_coord(w_out)
    return np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1).reshape(-1, 2)


@dataclass
class QueryBinding:
    rows: np.ndarray       # (N,) latent row index
    cols: np.ndarray       # (N,) latent column index
    rel_coord: np.ndarray  # (N, 2) query minus latent center, unscaled
    cell: np.ndarray       # (N, 2) output pixel size
    latent_shape: tuple[int, int]

    @property
    def site(self) -> np.ndarray:
        """Flat row-major latent index per query."""
        return self.rows * self.latent_shape[1] + self.cols

    def __len__(self):
        return len(self.rows)


def _axis_candidates(q: np.ndarray, n: int) -> np.ndarray:
    t = (q + 1.0) * n / 2.0 - 0.5
    i = np.clip(np.ceil(t - 0.5).astype(np.intp), 0, n - 1)
    return np.clip(i[:, None] + np.array([-1, 0, 1]), 0, n - 1)


def nearest_latent(queries: np.ndarray, latent_shape: tuple[int, int],
                   cell: np.ndarray | tuple[float, float] | None = None) -> QueryBinding:
    """Bind each query to the Euclidean-nearest latent center.

    Ties go to the smallest row-major index. Rounding gives a per-axis
    estimate; the final pick is an exact distance comparison over the 3x3
    candidates around it so the result agrees bit-for-bit with an
    exhaustive search.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    h, w = latent_shape
    cy, cx = make_coord(h), make_coord(w)
    ry = _axis_candidates(queries[:, 0], h)
    rx = _axis_candidates(queries[:, 1], w)
    rows = np.repeat(ry, 3, axis=1)   # (N, 9) row-major over (ry, rx)
    cols = np.tile(rx, (1, 3))
    d = (queries[:, :1] - cy[rows]) ** 2 + (queries[:, 1:] - cx[cols]) ** 2
    flat = rows * w + cols
    best = _argmin_ties_low(d, flat)
    n = np.arange(len(queries))
    r, c = rows[n, best], cols[n, best]
    rel = queries - np.stack([cy[r], cx[c]], axis=1)
    if cell is None:
        cell = np.zeros((len(queries), 2))
    cell = np.broadcast_to(np.asarray(cell, dtype=np.float64), (len(queries), 2)).copy()
    return QueryBinding(r, c, rel, cell, (h, w))


def _argmin_ties_low(d: np.ndarray, flat: np.ndarray) -> np.ndarray:
    dmin = d.min(axis=1, keepdims=True)
    masked = np.where(d == dmin, flat, np.iinfo(np.intp).max)
    return masked.argmin(axis=1)


def bind_grid(h_out: int, w_out: int, latent_shape: tuple[int, int]) -> QueryBinding:
    """Bindings for every pixel of an ``h_out`` x ``w_out`` output image."""
    return nearest_latent(make_coord_grid(h_out, w_out), latent_shape, (2.0 / h_out, 2.0 / w_out))


def feature_unfold(z: Tensor) -> Tensor:
    """``(H, W, D) -> (H, W, 9D)``: concatenated 3x3 neighbourhood, zero padded."""
    h, w, d = z.shape
    flat = ad.concat([ad.reshape(z, (h * w, d)), Tensor(np.zeros((1, d)), dtype=z.dtype)], axis=0)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    parts = []
    for dy, dx in UNFOLD_OFFSETS:
        ny, nx = yy + dy, xx + dx
        valid = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        idx = np.where(valid, ny * w + nx, h * w).ravel()
        parts.append(ad.take(flat, idx))
    return ad.reshape(ad.concat(parts, axis=1), (h, w, 9 * d))


def query_extras(binding: QueryBinding) -> np.ndarray:
    """Scaled ``[rel_coord, cell]`` block, ``(N, 4)``.

    Both are multiplied per axis by the latent extent, so the relative
    coordinate lies in about ``[-1, 1]`` and the cell equals ``2 / scale``.
    """
    ext = np.asarray(binding.latent_shape, dtype=np.float64)
    return np.concatenate([binding.rel_coord * ext, binding.cell * ext], axis=1)


def assemble_query_features(binding: QueryBinding, unfolded: Tensor) -> Tensor:
    """Decoder inputs ``[z_unfolded(k); rel_coord; cell]`` per query."""
    h, w, c = unfolded.shape
    z_k = ad.take(ad.reshape(unfolded, (h * w, c)), binding.site)
    extras = Tensor(query_extras(binding), dtype=unfolded.dtype)
    return ad.concat([z_k, extras], axis=1)
