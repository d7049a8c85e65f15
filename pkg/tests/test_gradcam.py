from types import SimpleNamespace

import numpy as np
import pytest

from marshnet.gradcam import class_activation, gradcam, occlusion_trial, overlay, top_decile_mask
from marshnet.model import Classifier, ModelConfig
from marshnet.tensor import Tensor

from .oracles import OneMapNet

TINY = ModelConfig(input_size=16, stem_channels=4, stages=(4, 8), blocks_per_stage=1, head_width=8)


def _patch(seed=0, size=16):
    return np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)


def test_one_map_network_heatmap_proportional_to_feature_map():
    net = OneMapNet()
    patch = _patch(1)
    x = Tensor(patch.transpose(2, 0, 1)[None].astype(np.float64) / 255.0 - 0.5)
    a = np.maximum(net.features(x).data[0, 2], 0.0)
    raw = class_activation(net, patch, 1)
    assert np.allclose(raw, a / a.size, atol=1e-12)
    heat = gradcam(net, patch, 1).values
    assert a.min() == 0.0
    assert np.allclose(heat, a / a.max(), atol=1e-12)
    assert np.unravel_index(heat.argmax(), heat.shape) == np.unravel_index(a.argmax(), a.shape)


def test_logit_shift_invariance():
    patch = _patch(2)
    a = gradcam(OneMapNet(shift=0.0), patch, "IIIa").values
    b = gradcam(OneMapNet(shift=7.5), patch, "IIIa").values
    assert np.allclose(a, b, atol=1e-12)
    m = Classifier(TINY, seed=1)
    before = gradcam(m, patch, 3).values
    m.out.bias.assign(m.out.bias.data + 4.0)
    assert np.allclose(gradcam(m, patch, 3).values, before, atol=1e-12)


def test_zero_head_gives_zero_map():
    m = Classifier(TINY, seed=2)
    m.out.weight.assign(np.zeros_like(m.out.weight.data))
    heat = gradcam(m, _patch(3, size=40), 2)
    assert heat.values.shape == (40, 40) and not heat.values.any()


def test_output_shape_and_range_on_random_inputs():
    m = Classifier(TINY, seed=3)
    m.out.weight.assign(np.random.default_rng(0).normal(size=m.out.weight.data.shape))
    for seed in range(5):
        patch = _patch(seed, size=24 + seed)
        heat = gradcam(m, patch, seed % 4, patch_id=f"p{seed}")
        assert heat.values.shape == patch.shape[:2] and heat.patch_id == f"p{seed}"
        assert heat.values.min() >= 0.0 and heat.values.max() <= 1.0


def test_model_without_features_rejected():
    with pytest.raises(TypeError):
        gradcam(SimpleNamespace(config=SimpleNamespace(input_size=16)), _patch(), 0)


def test_overlay_examples():
    patch = _patch(4)
    assert np.array_equal(overlay(patch, np.ones((16, 16)), alpha=0.0), patch)
    assert np.array_equal(overlay(patch, np.zeros((16, 16)), alpha=0.8), patch)
    blue = overlay(patch, np.ones((16, 16)), alpha=1.0)
    assert np.all(blue == np.array([0, 0, 255], np.uint8))
    half = overlay(np.full((2, 2, 3), 100, np.uint8), np.full((2, 2), 0.5), alpha=1.0)
    assert np.all(half[0, 0] == [50, 50, 178])  # 177.5 rounds half to even
    with pytest.raises(ValueError):
        overlay(patch, np.ones((8, 8)))
    with pytest.raises(ValueError):
        overlay(patch, np.ones((16, 16)), alpha=1.5)


def test_top_decile_mask_area():
    v = np.arange(100, dtype=float).reshape(10, 10)
    m = top_decile_mask(v)
    assert m.sum() == 10 and m[9].all()


def test_occlusion_trial_runs():
    m = Classifier(TINY, seed=4)
    hot, rand = occlusion_trial(m, _patch(5), 0, np.random.default_rng(0))
    assert np.isfinite(hot) and np.isfinite(rand)
