import csv

import numpy as np
import pytest

from marshnet.synth import (
    SynthParams,
    estimate_villus_ratio,
    generate_corpus,
    generate_slide,
    slide_digest,
)
from marshnet.tiling import TileGrid, iter_patches, tissue_ratio


def test_same_params_bitwise_identical():
    p = SynthParams.for_class("IIIb", 11)
    a = generate_slide(p, 320, 280)
    b = generate_slide(p, 320, 280)
    assert a.width == 320 and a.height == 280 and a.label == "IIIb"
    assert np.array_equal(a.rows(0, 280), b.rows(0, 280))


def test_params_validation_and_ordering():
    ratios = [SynthParams.for_class(c).villus_ratio for c in ("I", "IIIa", "IIIb", "IIIc")]
    assert ratios == sorted(ratios, reverse=True) and ratios[0] == 3.0
    assert all(SynthParams.for_class(c).lymphocyte_density > 30 for c in ("I", "IIIa", "IIIb", "IIIc"))
    with pytest.raises(ValueError):
        SynthParams("II", 1.0, 40.0)
    with pytest.raises(ValueError):
        SynthParams("I", 0.0, 40.0)


def test_class_one_ratio_within_ten_percent():
    for seed in range(10):
        img = generate_slide(SynthParams.for_class("I", seed), 500, 500).rows(0, 500)
        assert abs(estimate_villus_ratio(img) - 3.0) <= 0.3


def test_ratio_estimator_separates_extreme_classes():
    for seed in range(25):
        for label, pick in (("I", lambda r: r > 1.0), ("IIIc", lambda r: r <= 1.0)):
            img = generate_slide(SynthParams.for_class(label, 1000 + seed), 500, 500).rows(0, 500)
            assert pick(estimate_villus_ratio(img))


def test_white_margin_present():
    img = generate_slide(SynthParams.for_class("IIIa", 3), 1000, 500).rows(0, 500)
    white_cols = (img == 255).all(axis=(0, 2))
    assert 0.25 <= white_cols.mean() <= 0.55


def test_corpus_counts_labels_and_manifest(tmp_path):
    c = generate_corpus(2, 300, 260, seed=4, out_dir=tmp_path)
    assert len(c.slides) == 8
    assert [s.label for s in c.slides].count("IIIc") == 2
    with open(tmp_path / "corpus.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    for row, p, s in zip(rows, c.params, c.slides):
        assert row["label"] == p.label == s.label
        assert float(row["villus_ratio"]) == p.villus_ratio
        assert (tmp_path / f"{row['slide_id']}.png").exists()


def test_different_seeds_give_distinct_slides():
    a = {slide_digest(s) for s in generate_corpus(5, 200, seed=1).slides}
    b = {slide_digest(s) for s in generate_corpus(5, 200, seed=2).slides}
    assert len(a) == len(b) == 20 and not a & b


def test_every_slide_yields_tissue_patches():
    for s in generate_corpus(1, 1000, 750, seed=5).slides:
        ratios = [tissue_ratio(p) for _, p in iter_patches(s, TileGrid())]
        assert max(ratios) > 0.5
