"""Procedural H&E-like slides for the four severity classes.

Each class is a fixed villus-height to crypt-depth ratio and a lymphocyte
density.  A slide is white background plus a tissue block made of
repeated mucosa strips::

    villus zone   finger-shaped epithelium (eosin) separated by lumen
    crypt zone    lamina propria with hematoxylin-dense crypt slots
    submucosa     faint eosin

Lymphocytes are hematoxylin dots scattered in the epithelial band along
the finger edges.  Stain concentrations are rendered in optical-density
space with per-slide stain hue/intensity jitter, so stain normalization
has real work to do.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import io, labels
from . import rng as rng_mod
from .stain import od_to_rgb, rgb_to_od
from .tiling import SlideImage

CLASS_GEOMETRY: dict[str, tuple[float, float]] = {
    # label: (villus:crypt ratio, lymphocytes per 100x100 px of epithelial band)
    "I": (3.0, 40.0),
    "IIIa": (1.5, 60.0),
    "IIIb": (0.7, 90.0),
    "IIIc": (0.1, 130.0),
}
LYMPHOCYTE_BASELINE = 30.0

HEMATOXYLIN_RGB = (133, 126, 190)
EOSIN_RGB = (237, 95, 228)

MUCOSA_DEPTH = 200
SUBMUCOSA = 40
VILLUS_PERIOD = 60
VILLUS_WIDTH = 36
CRYPT_WIDTH = 20
BAND = 8
DOT_RADIUS = 4

# (hematoxylin, eosin) concentrations per tissue compartment
EPITHELIUM = (0.15, 0.9)
LAMINA = (0.10, 0.35)
CRYPT = (0.9, 0.25)
SUBMUCOSA_C = (0.05, 0.25)
LYMPHOCYTE = (1.5, 0.1)

CORPUS_HEADER = ("slide_id", "label", "path", "width", "height", "seed", "villus_ratio", "lymphocyte_density")


@dataclass(frozen=True)
class SynthParams:
    label: str
    villus_ratio: float
    lymphocyte_density: float
    palette: tuple[tuple[int, int, int], tuple[int, int, int]] = (HEMATOXYLIN_RGB, EOSIN_RGB)
    seed: int = 0

    def __post_init__(self):
        labels.index(self.label)
        if self.villus_ratio <= 0 or self.lymphocyte_density <= 0:
            raise ValueError("villus ratio and lymphocyte density must be positive")

    @classmethod
    def for_class(cls, label: str, seed: int = 0, jitter_palette: bool = True) -> "SynthParams":
        ratio, density = CLASS_GEOMETRY[labels.name(labels.index(label))]
        palette = (HEMATOXYLIN_RGB, EOSIN_RGB)
        if jitter_palette:
            gen = rng_mod.stream(seed, "synth", 1)
            palette = tuple(_jitter_color(c, gen) for c in palette)
        return cls(label, ratio, density, palette, seed)

    @property
    def villus_height(self) -> float:
        return MUCOSA_DEPTH * self.villus_ratio / (1.0 + self.villus_ratio)

    @property
    def crypt_depth(self) -> float:
        return MUCOSA_DEPTH - self.villus_height


def _jitter_color(rgb, gen: np.random.Generator) -> tuple[int, int, int]:
    od = rgb_to_od(np.array(rgb, dtype=np.uint8))
    od = np.maximum(od * gen.uniform(0.8, 1.2, 3) * gen.uniform(0.8, 1.25), 0.02)
    return tuple(int(v) for v in od_to_rgb(od))


def _stain_vectors(palette) -> np.ndarray:
    """OD of each palette colour at unit concentration, shape (2, 3)."""
    return rgb_to_od(np.array(palette, dtype=np.uint8))


def generate_slide(params: SynthParams, width: int, height: int, slide_id: str | None = None) -> SlideImage:
    """Render one labelled slide; identical inputs give identical pixels."""
    if width < 1 or height < 1:
        raise ValueError("slide dimensions must be positive")
    gen = rng_mod.stream(params.seed, "synth", 0)
    period = MUCOSA_DEPTH + SUBMUCOSA
    hv = int(round(params.villus_height))

    tissue_frac = gen.uniform(0.5, 0.7)
    tissue_w = max(1, int(round(width * tissue_frac)))
    on_left = bool(gen.integers(2))
    tx0, tx1 = (0, tissue_w) if on_left else (width - tissue_w, width)
    y_phase = int(gen.integers(period))
    x_phase = int(gen.integers(VILLUS_PERIOD))

    ys = (np.arange(height) + y_phase) % period
    xs = (np.arange(width) + x_phase) % VILLUS_PERIOD
    u = ys[:, None]
    finger_x = xs < VILLUS_WIDTH
    # crypt slots centred under the lumen between fingers
    crypt_start = (VILLUS_WIDTH + VILLUS_PERIOD - CRYPT_WIDTH) // 2
    crypt_x = ((xs - crypt_start) % VILLUS_PERIOD) < CRYPT_WIDTH
    in_tissue = np.zeros(width, dtype=bool)
    in_tissue[tx0:tx1] = True

    villus_zone = u < hv
    crypt_zone = (u >= hv) & (u < MUCOSA_DEPTH)
    sub_zone = u >= MUCOSA_DEPTH
    epithelium = villus_zone & finger_x[None, :] & in_tissue[None, :]
    crypt = crypt_zone & crypt_x[None, :] & in_tissue[None, :]
    lamina = crypt_zone & ~crypt_x[None, :] & in_tissue[None, :]
    submucosa = sub_zone & in_tissue[None, :]

    conc = np.zeros((2, height, width))
    for mask, (ch, ce) in ((epithelium, EPITHELIUM), (crypt, CRYPT), (lamina, LAMINA), (submucosa, SUBMUCOSA_C)):
        conc[0][mask] = ch
        conc[1][mask] = ce

    # Epithelial band: finger pixels near a finger side or tip.
    edge_dist = np.minimum(xs, VILLUS_WIDTH - 1 - xs)
    band = epithelium & ((edge_dist[None, :] < BAND) | (u < BAND))
    band_idx = np.flatnonzero(band)
    n_dots = gen.poisson(params.lymphocyte_density * band_idx.size / 10_000.0) if band_idx.size else 0
    if n_dots:
        centers = gen.choice(band_idx, size=n_dots, replace=True)
        cy, cx = np.divmod(centers, width)
        r = DOT_RADIUS
        oy, ox = np.mgrid[-r:r + 1, -r:r + 1]
        disk = (oy ** 2 + ox ** 2) <= r * r
        py = (cy[:, None] + oy[disk][None, :]).ravel()
        px = (cx[:, None] + ox[disk][None, :]).ravel()
        keep = (py >= 0) & (py < height) & (px >= 0) & (px < width)
        py, px = py[keep], px[keep]
        keep = epithelium[py, px]  # intraepithelial only
        conc[0, py[keep], px[keep]] = LYMPHOCYTE[0]
        conc[1, py[keep], px[keep]] = LYMPHOCYTE[1]

    tissue = conc.sum(axis=0) > 0
    texture = 1.0 + 0.08 * gen.standard_normal((2, height, width))
    conc = np.where(tissue[None], np.maximum(conc * texture, 0.0), 0.0)
    od = np.einsum("shw,sc->hwc", conc, _stain_vectors(params.palette))
    pixels = od_to_rgb(od)
    pixels[~tissue] = 255
    sid = slide_id or f"{params.label}_{params.seed}"
    return SlideImage.from_array(sid, pixels, params.label)


def estimate_villus_ratio(image: np.ndarray) -> float:
    """Column-scan estimate of villus height over crypt depth.

    Pixels are classed by OD magnitude and red-channel share: strong,
    red-poor pixels are epithelium; strong, red-rich ones are crypt or
    lymphocyte.  "Strong" is relative to the median red-rich OD so that
    palette jitter does not move the cut; a 3x3 box blur first suppresses
    texture noise.  The longest vertical epithelium run is the villus
    height, the longest crypt run the crypt depth.
    """
    od = rgb_to_od(image)
    padded = np.pad(od, ((1, 1), (1, 1), (0, 0)), mode="edge")
    od = sliding_window_view(padded, (3, 3), axis=(0, 1)).mean(axis=(-2, -1))
    norm = np.linalg.norm(od, axis=-1)
    red_share = od[..., 0] / np.maximum(norm, 1e-9)
    rich = (norm > 0.1) & (red_share > 0.4)
    if not rich.any():
        return float("inf")
    strong = norm > 0.55 * np.median(norm[rich])
    epi = strong & (red_share < 0.35)
    crypt = strong & (red_share > 0.4)
    villus = _longest_vertical_run(epi)
    depth = _longest_vertical_run(crypt)
    if depth == 0:
        return float("inf")
    return villus / depth


def _longest_vertical_run(mask: np.ndarray) -> int:
    best = np.zeros(mask.shape[1], dtype=np.int64)
    run = np.zeros(mask.shape[1], dtype=np.int64)
    for row in mask:
        run = np.where(row, run + 1, 0)
        np.maximum(best, run, out=best)
    return int(best.max()) if best.size else 0


@dataclass
class Corpus:
    slides: list[SlideImage] = field(default_factory=list)
    params: list[SynthParams] = field(default_factory=list)
    rows: list[tuple] = field(default_factory=list)


def generate_corpus(per_class: int, width: int, height: int | None = None, seed: int = 0,
                    out_dir: str | Path | None = None, keep_pixels: bool = True) -> Corpus:
    """Balanced corpus, ``per_class`` slides for each of the four classes.

    Slide seeds are split from ``seed``.  With ``out_dir`` each slide is
    written as PNG and a ``corpus.csv`` manifest is produced.
    """
    if per_class < 1:
        raise ValueError("per-class count must be >= 1")
    height = width if height is None else height
    seeds = rng_mod.split(seed, per_class * len(labels.CLASSES), "corpus")
    corpus = Corpus()
    k = 0
    for j in range(per_class):
        for label in labels.CLASSES:
            params = SynthParams.for_class(label, seeds[k])
            sid = f"s{seed}_{k:04d}_{label}"
            slide = generate_slide(params, width, height, sid)
            path = ""
            if out_dir is not None:
                path = str(Path(out_dir) / f"{sid}.png")
                io.write_png(path, slide.rows(0, height))
            corpus.rows.append((sid, label, path, width, height, params.seed, params.villus_ratio,
                                params.lymphocyte_density))
            corpus.params.append(params)
            if keep_pixels:
                corpus.slides.append(slide)
            k += 1
    if out_dir is not None:
        io.write_csv(Path(out_dir) / "corpus.csv", CORPUS_HEADER, corpus.rows)
    return corpus


def slide_digest(slide: SlideImage) -> str:
    return hashlib.sha256(np.ascontiguousarray(slide.rows(0, slide.height)).tobytes()).hexdigest()
