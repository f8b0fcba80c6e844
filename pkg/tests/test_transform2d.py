import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from eqvae.transform2d import (
    IDENTITY,
    DegenerateOutputError,
    TransformDomainError,
    TransformSamplerConfig,
    apply_transform,
    bicubic_matrix,
    make_transform,
    output_shape,
    round_half_away,
    rotation,
    sample_transform,
    scaling,
    spawn_rngs,
)

PI = math.pi


def test_identity_matrix_and_kind():
    t = make_transform(1, 1, 0)
    np.testing.assert_array_equal(t.matrix, np.eye(2))
    assert t.kind == "identity"


def test_quarter_rotation_matrix():
    t = make_transform(1, 1, PI / 2)
    np.testing.assert_array_equal(t.matrix, [[0, -1], [1, 0]])
    assert t.kind == "rotation"


def test_scaled_half_turn_by_hand():
    # S(0.5, 0.25) @ R(pi) = diag(0.5, 0.25) @ [[-1, 0], [0, -1]]
    t = make_transform(0.5, 0.25, PI)
    np.testing.assert_array_equal(t.matrix, [[-0.5, 0], [0, -0.25]])
    assert t.kind == "composed"


@pytest.mark.parametrize("sx,sy,theta", [(0, 1, 0), (1.2, 1, 0), (1, -0.5, 0), (1, 1, 0.3), (1, 1, 2 * PI)])
def test_domain_errors(sx, sy, theta):
    with pytest.raises(TransformDomainError):
        make_transform(sx, sy, theta)


@given(
    st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.integers(0, 3)
)
def test_matrix_is_scale_times_rotation(sx, sy, k):
    t = make_transform(sx, sy, k * PI / 2)
    th = k * PI / 2
    expected = np.diag([sx, sy]) @ np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    np.testing.assert_allclose(t.matrix, expected, atol=1e-15)
    assert (t.kind == "identity") == (sx == 1 and sy == 1 and k == 0) == np.array_equal(t.matrix, np.eye(2))


def test_round_half_away():
    assert [round_half_away(v) for v in (0.5, 1.5, 2.5, -0.5, 2.49)] == [1, 2, 3, -1, 2]


def _inverse_map_oracle(grid, k):
    """x_tau(p) = x(tau^-1 p) on the index lattice, for a quarter-turn count k (square grids)."""
    n = grid.shape[-1]
    out = np.empty_like(grid)
    c = (n - 1) / 2
    th = -k * PI / 2
    cos, sin = round(math.cos(th)), round(math.sin(th))
    for r in range(n):
        for col in range(n):
            # p = [u, v] with u the column and v the row measured upward
            u, v = col - c, c - r
            su, sv = cos * u - sin * v, sin * u + cos * v
            out[..., r, col] = grid[..., int(round(c - sv)), int(round(su + c))]
    return out


def test_rotation_example_2x2():
    g = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    out = apply_transform(g, rotation(PI / 2))
    assert out.tolist() == [[[2.0, 4.0], [1.0, 3.0]]]
    np.testing.assert_array_equal(out.numpy(), _inverse_map_oracle(g.numpy(), 1))


@pytest.mark.parametrize("k", [1, 2, 3])
def test_rotation_matches_coordinate_oracle(k):
    g = torch.arange(2 * 5 * 5, dtype=torch.float64).reshape(2, 5, 5)
    out = apply_transform(g, rotation(k * PI / 2))
    np.testing.assert_array_equal(out.numpy(), _inverse_map_oracle(g.numpy(), k))


def test_identity_is_bit_identical():
    g = torch.randn(3, 7, 9)
    assert torch.equal(apply_transform(g, IDENTITY), g)


def test_constant_field_downscale():
    g = torch.full((1, 8, 8), 5.0)
    out = apply_transform(g, scaling(0.5))
    assert out.shape == (1, 4, 4)
    assert torch.allclose(out, torch.full_like(out, 5.0), atol=1e-5)


def test_composition_closure_and_fourfold():
    g = torch.randn(2, 6, 10)
    r90, r180 = rotation(PI / 2), rotation(PI)
    assert torch.equal(apply_transform(apply_transform(g, r90), r90), apply_transform(g, r180))
    h = g
    for _ in range(4):
        h = apply_transform(h, r90)
    assert torch.equal(h, g)


def test_rotate_then_scale_order():
    g = torch.randn(1, 8, 16)
    t = make_transform(0.5, 0.25, PI / 2)
    # after rotation the grid is 16 x 8; s_y scales rows, s_x columns
    assert apply_transform(g, t).shape == (1, 4, 4)
    assert output_shape(8, 16, make_transform(0.25, 0.5, PI / 2)) == (8, 2)


def test_degenerate_output():
    with pytest.raises(DegenerateOutputError):
        apply_transform(torch.zeros(1, 1, 1), scaling(0.4))


def test_bicubic_rows_sum_to_one_and_identity():
    for n_in, n_out in [(8, 4), (64, 16), (7, 3), (5, 5)]:
        m = bicubic_matrix(n_in, n_out, torch.float64)
        assert torch.allclose(m.sum(1), torch.ones(n_out, dtype=torch.float64), atol=1e-14)
    assert torch.equal(bicubic_matrix(6, 6, torch.float64), torch.eye(6, dtype=torch.float64))


def _catmull_rom(d):
    d = abs(d)
    if d <= 1:
        return 1.5 * d ** 3 - 2.5 * d ** 2 + 1
    if d < 2:
        return -0.5 * d ** 3 + 2.5 * d ** 2 - 4 * d + 2
    return 0.0


def test_bicubic_matches_pointwise_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(9, 13))
    out = apply_transform(torch.from_numpy(x)[None], scaling(0.6, 0.45))[0].numpy()
    oh, ow = out.shape
    for i in range(oh):
        for j in range(ow):
            sy = (i + 0.5) * 9 / oh - 0.5
            sx = (j + 0.5) * 13 / ow - 0.5
            acc = wsum = 0.0
            for a in range(math.floor(sy) - 1, math.floor(sy) + 3):
                for b in range(math.floor(sx) - 1, math.floor(sx) + 3):
                    w = _catmull_rom(sy - a) * _catmull_rom(sx - b)
                    acc += w * x[min(max(a, 0), 8), min(max(b, 0), 12)]
                    wsum += w
            assert out[i, j] == pytest.approx(acc / wsum, abs=1e-12)


sizes = st.integers(4, 256)
scales = st.floats(0.25, 1.0, exclude_min=True)


@settings(max_examples=250, deadline=None)
@given(sizes, sizes, scales, scales, st.integers(0, 3))
def test_shape_law(h, w, sx, sy, k):
    t = make_transform(sx, sy, k * PI / 2)
    hr, wr = (w, h) if k % 2 else (h, w)
    expected = (max(1, math.floor(sy * hr + 0.5)), max(1, math.floor(sx * wr + 0.5)))
    assert output_shape(h, w, t) == expected
    if h * w <= 64 * 64:
        assert apply_transform(torch.zeros(1, h, w), t).shape[-2:] == expected


@settings(max_examples=60, deadline=None)
@given(st.floats(-100, 100), sizes, sizes, scales, scales, st.integers(0, 3))
def test_constant_field_preserved(value, h, w, sx, sy, k):
    g = torch.full((2, min(h, 64), min(w, 64)), value)
    out = apply_transform(g, make_transform(sx, sy, k * PI / 2))
    assert torch.allclose(out, torch.full_like(out, value), atol=1e-5, rtol=1e-6)


def test_sampler_identity_saturation():
    rng = np.random.default_rng(0)
    cfg = TransformSamplerConfig(p_alpha=1.0)
    assert all(sample_transform(rng, cfg).is_identity for _ in range(1000))


def _binomial_band(count, n, p, k=4.0):
    sd = math.sqrt(n * p * (1 - p))
    return abs(count - n * p) <= k * sd


def test_sampler_rotation_frequencies():
    rng = np.random.default_rng(1)
    cfg = TransformSamplerConfig(p_alpha=0.0, enable_scale=False)
    n = 30_000
    counts = np.zeros(4, dtype=int)
    for _ in range(n):
        t = sample_transform(rng, cfg)
        counts[t.quarter_turns] += 1
        assert t.s_x == t.s_y == 1.0
    assert counts[0] == 0
    for k in (1, 2, 3):
        assert _binomial_band(counts[k], n, 1 / 3)


def test_sampler_default_identity_rate_and_ranges():
    rng = np.random.default_rng(2)
    cfg = TransformSamplerConfig()
    n = 30_000
    draws = [sample_transform(rng, cfg) for _ in range(n)]
    n_id = sum(t.is_identity for t in draws)
    assert _binomial_band(n_id, n, 0.5)
    for t in draws:
        if not t.is_identity:
            assert t.s_x == t.s_y and 0.25 <= t.s_x < 1.0 and t.quarter_turns in (1, 2, 3)


def test_sampler_anisotropic_and_determinism():
    cfg = TransformSamplerConfig(p_alpha=0.0, isotropic=False, enable_rotation=False)
    a = [sample_transform(np.random.default_rng(5), cfg) for _ in range(3)]
    b = [sample_transform(np.random.default_rng(5), cfg) for _ in range(3)]
    assert a == b
    rng = np.random.default_rng(3)
    ts = [sample_transform(rng, cfg) for _ in range(100)]
    assert any(t.s_x != t.s_y for t in ts)
    assert all(t.quarter_turns == 0 for t in ts)


@pytest.mark.parametrize("kw", [dict(p_alpha=1.5), dict(scale_min=0.0), dict(scale_min=0.5, scale_max=0.4),
                                dict(enable_rotation=False, enable_scale=False)])
def test_sampler_config_validation(kw):
    with pytest.raises(TransformDomainError):
        TransformSamplerConfig(**kw)


def test_spawned_streams_are_distinct_and_reproducible():
    a = [r.random() for r in spawn_rngs(7, 3)]
    b = [r.random() for r in spawn_rngs(7, 3)]
    assert a == b and len(set(a)) == 3
