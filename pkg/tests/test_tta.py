import math

import pytest
import torch

from ctsfda.adapt import ScalingFactors
from ctsfda.datamodel import make_reshape_spec
from ctsfda.models import Backbone, UNet, WarpBlock
from ctsfda.params import fingerprint, freeze
from ctsfda.tta import (TTAConfig, cosine_similarity, ensemble_from_probs, ensemble_predict, perturbation_grid,
                        stability_ensemble, stability_weights)


def test_grid_examples():
    grid = perturbation_grid(TTAConfig(0.001, 2))
    assert torch.allclose(grid, torch.tensor([0.998, 0.999, 1.0, 1.001, 1.002], dtype=torch.float64),
                          atol=1e-9, rtol=0)
    assert perturbation_grid(TTAConfig(0.01, 1)).tolist() == pytest.approx([0.99, 1.0, 1.01], abs=1e-12)
    for n in (1, 3, 8, 10):
        g = perturbation_grid(TTAConfig(0.001, n))
        assert len(g) == 2 * n + 1
        assert g[n].item() == 1.0
        assert (g[1:] > g[:-1]).all()


def test_config_validation():
    with pytest.raises(ValueError):
        TTAConfig(delta=0.0)
    with pytest.raises(ValueError):
        TTAConfig(n=0)
    with pytest.raises(ValueError):
        TTAConfig(weighting="median")


def test_cosine_examples():
    p = torch.tensor([0.3, 0.7], dtype=torch.float64)
    assert abs(cosine_similarity(p, p).item() - 1.0) < 1e-9
    assert cosine_similarity(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])).item() == 0.0
    a = torch.tensor([0.6, 0.8], dtype=torch.float64)
    b = torch.tensor([0.8, 0.6], dtype=torch.float64)
    assert abs(cosine_similarity(a, b).item() - 0.96) < 1e-9
    with pytest.raises(ValueError):
        cosine_similarity(torch.zeros(2), a)


def test_stability_weight_examples():
    w = stability_weights(torch.tensor([1.0, 0.0], dtype=torch.float64))
    e = math.e
    assert abs(w[0].item() - e / (e + 1)) < 1e-9 and abs(w[1].item() - 1 / (e + 1)) < 1e-9
    assert w.tolist() == pytest.approx([0.7311, 0.2689], abs=1e-4)
    flat = stability_weights(torch.full((6,), 0.37, dtype=torch.float64))
    assert torch.allclose(flat, torch.full((6,), 1 / 6, dtype=torch.float64), atol=1e-12)
    s = torch.randn(7, dtype=torch.float64)
    assert torch.allclose(stability_weights(s), stability_weights(s + 3.5), atol=1e-12)
    with pytest.raises(ValueError):
        stability_weights(torch.zeros(0))


def test_identical_predictions_return_common_prediction():
    p = torch.tensor([0.2, 0.5, 0.3], dtype=torch.float64)
    probs = p.expand(4, 7, 3).clone()
    for weighting in ("cosine", "entropy", "off"):
        out = ensemble_from_probs(probs, perturbation_grid(TTAConfig(0.001, 3)), weighting)
        assert torch.allclose(out.p, p.expand(4, 3), atol=1e-12)
        assert (out.p.argmax(1) == p.argmax()).all()


def test_ensemble_indexing_excludes_anchor():
    # grid positions -1, 0, +1; the anchor (position -1) only feeds the first similarity
    probs = torch.tensor([[[1.0, 0.0], [0.6, 0.4], [0.2, 0.8]]], dtype=torch.float64)
    out = ensemble_from_probs(probs, perturbation_grid(TTAConfig(0.001, 1)))
    s0 = 0.6 / math.hypot(0.6, 0.4)
    s1 = (0.12 + 0.32) / (math.hypot(0.6, 0.4) * math.hypot(0.2, 0.8))
    w0 = math.exp(s0) / (math.exp(s0) + math.exp(s1))
    expected = [w0 * 0.6 + (1 - w0) * 0.2, w0 * 0.4 + (1 - w0) * 0.8]
    assert out.sims[0].tolist() == pytest.approx([s0, s1], abs=1e-12)
    assert out.p[0].tolist() == pytest.approx(expected, abs=1e-12)
    off = ensemble_from_probs(probs, perturbation_grid(TTAConfig(0.001, 1)), "off")
    assert off.p[0].tolist() == [0.6, 0.4]


@pytest.fixture(scope="module")
def tiny_models():
    torch.manual_seed(0)
    spec = make_reshape_spec(1, 60, 8, 8)
    theta = freeze(UNet(1, 4, 2))
    phi = freeze(WarpBlock(1, 4, 8, 2))
    backbone = freeze(Backbone(1, 3, 60, (8, 8, 8), 5))
    scales = freeze(ScalingFactors(v_t=0.3))
    return spec, theta, phi, backbone, scales


def test_ensemble_on_simplex_and_read_only(tiny_models):
    spec, theta, phi, backbone, scales = tiny_models
    x = torch.randn(9, 1, 60) * 3
    before = [fingerprint(m) for m in (theta, phi, backbone, scales)]
    p = ensemble_predict(x, theta, phi, backbone, scales, TTAConfig(0.01, 4), spec)
    assert p.dtype == torch.float64
    assert (p >= 0).all()
    assert ((p.sum(1) - 1).abs() <= 1e-9).all()
    assert [fingerprint(m) for m in (theta, phi, backbone, scales)] == before
    assert scales.v_s.item() == 1.0


def test_batch_versus_single(tiny_models):
    spec, theta, phi, backbone, scales = tiny_models
    x = torch.randn(6, 1, 60)
    cfg = TTAConfig(0.001, 3)
    batched = ensemble_predict(x, theta, phi, backbone, scales, cfg, spec)
    single = torch.cat([ensemble_predict(x[i:i + 1], theta, phi, backbone, scales, cfg, spec) for i in range(6)])
    assert torch.allclose(batched, single, atol=1e-6, rtol=0)
    assert torch.equal(batched.argmax(1), single.argmax(1))


def test_ensemble_requires_frozen(tiny_models):
    spec, theta, phi, backbone, _ = tiny_models
    with pytest.raises(RuntimeError, match="frozen"):
        stability_ensemble(torch.randn(2, 1, 60), theta, phi, backbone, ScalingFactors(), TTAConfig(), spec)
