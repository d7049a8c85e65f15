"""Image files, CSV manifests, and write-then-rename output helpers."""
from __future__ import annotations

import contextlib
import csv
import os
import shutil
import tempfile
from io import BytesIO, StringIO
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, TiffImagePlugin

Image.MAX_IMAGE_PIXELS = None


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@contextlib.contextmanager
def staged_dir(out: Path) -> Iterator[Path]:
    """Yield a scratch directory whose files move into ``out`` only on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}.", suffix=".tmp"))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    out.mkdir(parents=True, exist_ok=True)
    for item in sorted(tmp.iterdir()):
        os.replace(item, out / item.name)
    tmp.rmdir()


def read_rgb(path: str | Path) -> np.ndarray:
    """Load an 8-bit RGB image as an (H, W, 3) uint8 array."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA", "L"):
                raise ValueError(f"{path}: unsupported image mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"{path}: corrupt or unreadable image ({exc})") from exc
    return arr


def encode_png(image: np.ndarray) -> bytes:
    buf = BytesIO()
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def write_png(path: str | Path, image: np.ndarray) -> None:
    atomic_write_bytes(Path(path), encode_png(image))


def write_gray_png(path: str | Path, image: np.ndarray) -> None:
    buf = BytesIO()
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(buf, format="PNG")
    atomic_write_bytes(Path(path), buf.getvalue())


class BandReader:
    """Row-band access to a slide file.

    Uncompressed, contiguous, single-level RGB TIFFs are memory-mapped so
    only the requested rows are paged in.  Anything else (PNG, deflate
    TIFF) is decoded once by Pillow and served from memory.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(f"file not found: {self.path}")
        self._array: np.ndarray | None = None
        self._mmap = self._try_memmap()
        if self._mmap is None:
            self._array = read_rgb(self.path)
        src = self._mmap if self._mmap is not None else self._array
        self.height, self.width = src.shape[:2]

    def _try_memmap(self) -> np.ndarray | None:
        if self.path.suffix.lower() not in (".tif", ".tiff"):
            return None
        try:
            with Image.open(self.path) as im:
                if im.mode != "RGB" or getattr(im, "n_frames", 1) != 1:
                    return None
                tags = im.tag_v2
                if tags.get(259, 1) != 1 or tags.get(284, 1) != 1:
                    return None
                offsets = tags.get(TiffImagePlugin.STRIPOFFSETS)
                counts = tags.get(TiffImagePlugin.STRIPBYTECOUNTS)
                width, height = im.size
        except (OSError, SyntaxError) as exc:
            raise ValueError(f"{self.path}: corrupt or unreadable image ({exc})") from exc
        if not offsets:
            return None
        offsets, counts = list(offsets), list(counts)
        for off, cnt, nxt in zip(offsets, counts, offsets[1:]):
            if off + cnt != nxt:
                return None
        if sum(counts) != width * height * 3:
            return None
        return np.memmap(self.path, dtype=np.uint8, mode="r", offset=offsets[0], shape=(height, width, 3))

    def rows(self, y0: int, y1: int) -> np.ndarray:
        src = self._mmap if self._mmap is not None else self._array
        return np.asarray(src[y0:y1])


def write_tiff(path: str | Path, image: np.ndarray) -> None:
    """Uncompressed single-strip RGB TIFF (memory-mappable by :class:`BandReader`)."""
    buf = BytesIO()
    im = Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8))
    im.save(buf, format="TIFF", compression="raw", tiffinfo={278: image.shape[0]})
    atomic_write_bytes(Path(path), buf.getvalue())


def read_csv(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write_text(Path(path), csv_text(header, rows))
