"""Sliding-window patch extraction, bilinear resizing, and tissue fraction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import io
from .stain import DEFAULT_BETA, od_norm

MANIFEST_HEADER = ("slide_id", "patch_id", "x", "y", "size", "label", "path")


@dataclass
class SlideImage:
    """An RGB slide, either held in memory or read from disk in row bands."""

    slide_id: str
    width: int
    height: int
    label: str | None = None
    _array: np.ndarray | None = field(default=None, repr=False)
    _reader: io.BandReader | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("slide dimensions must be positive")

    @classmethod
    def from_array(cls, slide_id: str, pixels: np.ndarray, label: str | None = None) -> "SlideImage":
        pixels = np.asarray(pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"slide must be HxWx3, got shape {pixels.shape}")
        if pixels.dtype != np.uint8:
            raise ValueError("slide pixels must be 8-bit")
        return cls(slide_id, pixels.shape[1], pixels.shape[0], label, _array=pixels)

    @classmethod
    def open(cls, path: str | Path, slide_id: str | None = None, label: str | None = None) -> "SlideImage":
        reader = io.BandReader(path)
        return cls(slide_id or Path(path).stem, reader.width, reader.height, label, _reader=reader)

    def rows(self, y0: int, y1: int) -> np.ndarray:
        if self._array is not None:
            return self._array[y0:y1]
        return self._reader.rows(y0, y1)


@dataclass(frozen=True)
class TileGrid:
    patch_size: int = 500
    overlap: float = 0.5

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError("patch size must be positive")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        if self.stride < 1:
            raise ValueError("derived stride is zero; reduce overlap")

    @property
    def stride(self) -> int:
        # round half up
        return int(math.floor(self.patch_size * (1.0 - self.overlap) + 0.5))

    def counts(self, width: int, height: int) -> tuple[int, int]:
        """(rows, cols) of full windows that fit; zero when the slide is too small."""
        p, s = self.patch_size, self.stride
        if width < p or height < p:
            return 0, 0
        return (height - p) // s + 1, (width - p) // s + 1


@dataclass(frozen=True)
class PatchRecord:
    slide_id: str
    patch_id: int
    x: int
    y: int
    size: int
    label: str | None = None
    path: str = ""
    row: int = 0
    col: int = 0

    def manifest_row(self) -> tuple:
        return (self.slide_id, self.patch_id, self.x, self.y, self.size, self.label or "", self.path)


def iter_patches(slide: SlideImage, grid: TileGrid) -> Iterator[tuple[PatchRecord, np.ndarray]]:
    """Yield ``(record, pixels)`` in row-major order.

    Rows are pulled through a sliding band buffer, so at most ``patch_size``
    slide rows are resident at once.  Partial border windows are skipped.
    """
    n_rows, n_cols = grid.counts(slide.width, slide.height)
    p, s = grid.patch_size, grid.stride
    band = np.empty((0, slide.width, 3), dtype=np.uint8)
    band_y0 = 0
    for i in range(n_rows):
        y = i * s
        band_end = band_y0 + band.shape[0]
        if y >= band_end:
            band = slide.rows(y, y + p)
        else:
            band = np.concatenate([band[y - band_y0:], slide.rows(band_end, y + p)], axis=0)
        band_y0 = y
        if band.shape != (p, slide.width, 3):
            raise ValueError(f"slide {slide.slide_id}: short read at row {y}")
        for j in range(n_cols):
            x = j * s
            rec = PatchRecord(slide.slide_id, i * n_cols + j, x, y, p, slide.label, row=i, col=j)
            yield rec, band[:, x:x + p]


def patch_filename(slide_id: str, row: int, col: int) -> str:
    return f"{slide_id}_{row}_{col}.png"


def extract_patches(slide: SlideImage, grid: TileGrid, out_dir: str | Path | None = None) -> list[PatchRecord]:
    """Cut all full windows of ``slide``; optionally write one PNG per patch."""
    records = []
    for rec, pixels in iter_patches(slide, grid):
        if out_dir is not None:
            path = Path(out_dir) / patch_filename(rec.slide_id, rec.row, rec.col)
            io.write_png(path, pixels)
            rec = PatchRecord(rec.slide_id, rec.patch_id, rec.x, rec.y, rec.size, rec.label,
                              str(path), rec.row, rec.col)
        records.append(rec)
    return records


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Half-pixel centres (align_corners=False), edge-clamped.
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, target: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``target`` (square side, or ``(height, width)``).

    uint8 input is rounded half-to-even back to uint8; float input stays float.
    """
    th, tw = (target, target) if isinstance(target, int) else target
    if th < 1 or tw < 1:
        raise ValueError("target size must be >= 1")
    img = np.asarray(image)
    h, w = img.shape[:2]
    if (h, w) == (th, tw):
        return img.copy()
    data = img.astype(np.float64)
    r0, r1, fr = _axis_weights(h, th)
    c0, c1, fc = _axis_weights(w, tw)
    extra = (None,) * (img.ndim - 2)
    rows = data[r0] * (1 - fr)[(slice(None), None) + extra] + data[r1] * fr[(slice(None), None) + extra]
    out = rows[:, c0] * (1 - fc)[(None, slice(None)) + extra] + rows[:, c1] * fc[(None, slice(None)) + extra]
    if img.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def tissue_ratio(image: np.ndarray, beta: float = DEFAULT_BETA) -> float:
    """Fraction of pixels whose optical-density norm exceeds ``beta``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return float((od_norm(image) > beta).mean())
