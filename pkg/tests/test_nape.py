"""Adaptive point embedding: formulas, oracle equivalence, invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slnet.nape import (NapeConfig, adaptive_bandwidth, blend_gate,
                        global_dispersion, nape_embed, nape_embed_batch)


def nape_oracle(points, cfg):
    """Scalar triple-loop reference for the full embedding."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    sg = global_dispersion(points)
    sigma = adaptive_bandwidth(sg, cfg)
    beta = blend_gate(sg, cfg)
    m = cfg.grid_size
    full = np.zeros((n, 3 * m))
    for i in range(n):
        col = 0
        for axis in range(3):
            for j in range(m):
                diff = points[i, axis] - cfg.grid[j]
                rbf = np.exp(-diff * diff / (2.0 * sigma * sigma))
                cosv = np.cos(diff / sigma)
                full[i, col] = beta * rbf + (1.0 - beta) * cosv
                col += 1
    return full[:, :cfg.d]


# ---------------------------------------------------------------------------
# config

def test_config_grid_properties():
    for d in (4, 16, 32):
        cfg = NapeConfig(d=d)
        m = cfg.grid_size
        assert m == -(-d // 3)  # ceil
        assert 3 * m >= d
        assert np.all(cfg.grid > -1) and np.all(cfg.grid < 1)
        assert np.all(np.diff(cfg.grid) > 0)
        np.testing.assert_allclose(cfg.grid, -cfg.grid[::-1], atol=1e-12)


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        NapeConfig(d=0)
    with pytest.raises(ValueError):
        NapeConfig(sigma0=-1.0)


# ---------------------------------------------------------------------------
# dispersion

def test_dispersion_identical_points_is_zero():
    assert global_dispersion(np.ones((10, 3)) * 4.2) == pytest.approx(0.0, abs=1e-12)
    assert global_dispersion(np.full((7, 3), 2.0)) == 0.0  # exact for powers of two


def test_dispersion_two_points_on_axis():
    pts = np.array([[0, 0, 0], [2, 0, 0]], dtype=float)
    assert global_dispersion(pts) == pytest.approx(1.0 / 3.0)


def test_dispersion_matches_two_pass_oracle():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((100, 3)) * 2.3 + 0.7
    per_axis = []
    for axis in range(3):
        mean = sum(pts[:, axis]) / 100
        var = sum((v - mean) ** 2 for v in pts[:, axis]) / 100
        per_axis.append(np.sqrt(var))
    assert global_dispersion(pts) == pytest.approx(sum(per_axis) / 3, abs=1e-7)


def test_dispersion_translation_invariance():
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((50, 3))
    shifted = pts + np.array([10.0, -4.0, 0.25])
    assert global_dispersion(pts) == pytest.approx(global_dispersion(shifted), abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(min_value=0.01, max_value=100.0))
def test_dispersion_scales_linearly(s):
    rng = np.random.default_rng(2)
    pts = rng.standard_normal((40, 3))
    assert global_dispersion(s * pts) == pytest.approx(
        s * global_dispersion(pts), rel=1e-6)


# ---------------------------------------------------------------------------
# bandwidth and gate

def test_adaptive_bandwidth_values():
    cfg = NapeConfig()
    assert adaptive_bandwidth(0.0, cfg) == pytest.approx(0.4)
    assert adaptive_bandwidth(1.0, cfg) == pytest.approx(0.8)
    assert adaptive_bandwidth(0.25, cfg) == pytest.approx(0.5)


def test_blend_gate_values():
    cfg = NapeConfig()
    assert blend_gate(0.1, cfg) == pytest.approx(0.5)
    assert blend_gate(0.0, cfg) == pytest.approx(1.0 / (1.0 + np.e))
    assert blend_gate(100.0, cfg) == pytest.approx(1.0)


def test_blend_gate_monotone():
    cfg = NapeConfig()
    xs = np.linspace(0, 2, 50)
    ys = [blend_gate(x, cfg) for x in xs]
    assert np.all(np.diff(ys) > 0)
    assert all(0 < y < 1 for y in ys)


# ---------------------------------------------------------------------------
# embedding

def test_embed_peak_value_at_grid_point():
    cfg = NapeConfig(d=16)
    pts = np.zeros((1, 3))
    pts[0, 0] = cfg.grid[2]
    out = nape_embed(pts, cfg)
    assert out[0, 2] == pytest.approx(1.0, abs=1e-6)  # both bases peak at 1


def test_embed_output_shape_and_truncation():
    cfg = NapeConfig(d=16)
    assert cfg.grid_size == 6  # 18 raw features, last 2 dropped
    rng = np.random.default_rng(3)
    out = nape_embed(rng.standard_normal((11, 3)), cfg)
    assert out.shape == (11, 16)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("d", [16, 32])
def test_embed_matches_scalar_oracle(seed, d):
    rng = np.random.default_rng(100 + seed)
    pts = rng.uniform(-1, 1, (10, 3))
    cfg = NapeConfig(d=d)
    out = nape_embed(pts.astype(np.float64), cfg)
    np.testing.assert_allclose(out, nape_oracle(pts, cfg), rtol=1e-6)


def test_embed_batch_matches_per_cloud():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-1, 1, (6, 30, 3)).astype(np.float32)
    cfg = NapeConfig(d=16)
    batch = nape_embed_batch(pts, cfg)
    for i in range(6):
        np.testing.assert_array_equal(batch[i], nape_embed(pts[i], cfg))


def test_embed_value_ranges():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-1, 1, (200, 3))
    rbf_only = nape_embed(pts, NapeConfig(d=16, force_beta=1.0))
    cos_only = nape_embed(pts, NapeConfig(d=16, force_beta=0.0))
    blended = nape_embed(pts, NapeConfig(d=16))
    assert np.all(rbf_only > 0) and np.all(rbf_only <= 1.0 + 1e-12)
    assert np.all(cos_only >= -1.0) and np.all(cos_only <= 1.0)
    assert np.all(blended >= -1.0 - 1e-12) and np.all(blended <= 1.0 + 1e-12)


def test_embed_deterministic():
    rng = np.random.default_rng(6)
    pts = rng.uniform(-1, 1, (64, 3)).astype(np.float32)
    cfg = NapeConfig(d=16)
    np.testing.assert_array_equal(nape_embed(pts, cfg), nape_embed(pts, cfg))


def test_embed_has_zero_parameters():
    # the whole embedding path must register no learnable parameters
    from slnet.backbone import ModelConfig, build_model

    with_gmu = build_model(ModelConfig.slnet_s_tiny())
    without = build_model(ModelConfig.slnet_s_tiny(gmu_placement="none"))
    diff = (sum(p.value.size for p in with_gmu.params())
            - sum(p.value.size for p in without.params()))
    assert diff == 2 * 16  # only the modulation unit, never the embedding
