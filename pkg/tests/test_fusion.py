import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from asffnet.errors import AlignmentError, ValidationError, WeightValidationError
from asffnet.fusion import (
    ChannelAlign,
    GateGenerator,
    ResampleAlign,
    SimplexWeights,
    ThreeLevelFusion,
    WeightGeneratorSpec,
    check_feature_map,
    compute_gate,
    fuse_dual,
    fuse_three,
    resample_to,
    simplex_from_logits,
)


def _bilinear_oracle(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a (C, H, W) array, edge-clamped."""
    c, h, w = src.shape
    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        y = max((i + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(math.floor(y)), h - 1)
        y1 = min(y0 + 1, h - 1)
        dy = y - y0
        for j in range(out_w):
            x = max((j + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(math.floor(x)), w - 1)
            x1 = min(x0 + 1, w - 1)
            dx = x - x0
            out[:, i, j] = (
                src[:, y0, x0] * (1 - dy) * (1 - dx)
                + src[:, y0, x1] * (1 - dy) * dx
                + src[:, y1, x0] * dy * (1 - dx)
                + src[:, y1, x1] * dy * dx
            )
    return out


# ---------------------------------------------------------------------------
# resample_to
# ---------------------------------------------------------------------------


def test_resample_7_to_14_with_channel_change():
    src = torch.randn(2, 32, 7, 7)
    align = ChannelAlign(32, 16)
    out = resample_to(src, 14, 14, 16, align)
    assert out.shape == (2, 16, 14, 14)


def test_resample_identity_when_shape_matches():
    src = torch.randn(1, 8, 14, 14)
    out = resample_to(src, 14, 14, 8, ChannelAlign(8, 8))
    torch.testing.assert_close(out, src, rtol=0, atol=0)


def test_resample_constant_map_stays_constant():
    src = torch.full((1, 2, 2), 3.25)
    out = resample_to(src, 4, 4, 1, ChannelAlign(1, 1))
    assert out.shape == (1, 4, 4)
    assert torch.all(out == 3.25)


def test_resample_matches_bilinear_oracle():
    g = torch.Generator().manual_seed(0)
    src = torch.randn(3, 3, 5, generator=g, dtype=torch.float64)
    out = resample_to(src, 7, 8, 3)
    expected = _bilinear_oracle(src.numpy(), 7, 8)
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-12)


def test_resample_channel_mismatch_without_align_is_error():
    with pytest.raises(AlignmentError, match="ChannelAlign"):
        resample_to(torch.randn(1, 4, 2, 2), 4, 4, 8)


def test_resample_wrong_align_module_is_error():
    with pytest.raises(AlignmentError):
        resample_to(torch.randn(1, 4, 2, 2), 4, 4, 8, ChannelAlign(3, 8))


@pytest.mark.parametrize("bad", [torch.randn(4, 4), torch.randn(1, 1, 1, 4, 4), torch.zeros(1, 0, 2, 2)])
def test_check_feature_map_rejects_bad_rank_or_empty(bad):
    with pytest.raises(ValidationError):
        check_feature_map(bad)


def test_check_feature_map_rejects_non_finite():
    x = torch.zeros(1, 1, 2, 2)
    x[0, 0, 1, 1] = float("nan")
    with pytest.raises(ValidationError, match="non-finite"):
        check_feature_map(x)


def test_resample_align_module_forward():
    m = ResampleAlign(6, 3)
    out = m(torch.randn(2, 6, 2, 2), (4, 4))
    assert out.shape == (2, 3, 4, 4)


# ---------------------------------------------------------------------------
# compute_gate
# ---------------------------------------------------------------------------


def test_gate_zero_initialised_is_half():
    gen = GateGenerator(4)
    f1, f2 = torch.randn(3, 4, 5, 5), torch.randn(3, 4, 5, 5)
    torch.testing.assert_close(compute_gate(f1, f2, gen), torch.full((3,), 0.5))


@given(st.floats(-50, 50))
def test_gate_equal_logits_give_half(z):
    gen = GateGenerator(2)
    with torch.no_grad():
        gen.out.bias.fill_(z)
    omega = compute_gate(torch.randn(1, 2, 3, 3), torch.randn(1, 2, 3, 3), gen)
    assert abs(omega.item() - 0.5) < 1e-7


def test_gate_matches_hand_rolled_oracle():
    torch.manual_seed(1)
    gen = GateGenerator(3, WeightGeneratorSpec(reduction_units=5)).double()
    with torch.no_grad():
        gen.out.weight.normal_()
        gen.out.bias.normal_()
    f1 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    f2 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    omega = compute_gate(f1, f2, gen).detach().numpy()

    W1, b1 = gen.hidden.weight.detach().numpy(), gen.hidden.bias.detach().numpy()
    W2, b2 = gen.out.weight.detach().numpy(), gen.out.bias.detach().numpy()
    a, b = f1.numpy(), f2.numpy()
    for n in range(2):
        pooled = [a[n, c].sum() / 16 for c in range(3)] + [b[n, c].sum() / 16 for c in range(3)]
        hidden = [max(0.0, sum(W1[u, k] * pooled[k] for k in range(6)) + b1[u]) for u in range(5)]
        z = [sum(W2[o, u] * hidden[u] for u in range(5)) + b2[o] for o in range(2)]
        expected = math.exp(z[0]) / (math.exp(z[0]) + math.exp(z[1]))
        assert abs(omega[n] - expected) < 1e-6


def test_gate_unbatched_returns_scalar():
    gen = GateGenerator(2)
    omega = compute_gate(torch.randn(2, 3, 3), torch.randn(2, 3, 3), gen)
    assert omega.dim() == 0


def test_gate_shape_mismatch_names_both_shapes():
    gen = GateGenerator(2)
    with pytest.raises(AlignmentError, match=r"\(1, 2, 3, 3\).*\(1, 2, 4, 4\)"):
        compute_gate(torch.randn(1, 2, 3, 3), torch.randn(1, 2, 4, 4), gen)


def test_gate_channel_mismatch_is_error():
    gen = GateGenerator(5)
    with pytest.raises(AlignmentError):
        compute_gate(torch.randn(1, 2, 3, 3), torch.randn(1, 2, 3, 3), gen)


def test_weight_generator_spec_units():
    assert WeightGeneratorSpec().units_for(4) == 8
    assert WeightGeneratorSpec().units_for(256) == 64
    assert WeightGeneratorSpec(12).units_for(256) == 12
    with pytest.raises(ValidationError):
        WeightGeneratorSpec(0)
    with pytest.raises(ValidationError):
        WeightGeneratorSpec(output_logits=3)


# ---------------------------------------------------------------------------
# fuse_dual
# ---------------------------------------------------------------------------


def test_fuse_dual_omega_one_is_f1():
    f1, f2 = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    assert torch.equal(fuse_dual(f1, f2, 1.0), f1)


def test_fuse_dual_midpoint():
    out = fuse_dual(torch.full((1, 2, 3, 3), 2.0), torch.zeros(1, 2, 3, 3), 0.5)
    assert torch.all(out == 1.0)


def test_fuse_dual_scalar_oracle():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2))
    out = fuse_dual(torch.from_numpy(a), torch.from_numpy(b), 0.3).numpy()
    for idx in np.ndindex(2, 2, 2):
        assert abs(out[idx] - (0.3 * a[idx] + 0.7 * b[idx])) < 1e-12


def test_fuse_dual_per_sample_weights():
    f1, f2 = torch.ones(2, 1, 2, 2), torch.zeros(2, 1, 2, 2)
    out = fuse_dual(f1, f2, torch.tensor([0.25, 0.75]))
    assert torch.all(out[0] == 0.25) and torch.all(out[1] == 0.75)


@pytest.mark.parametrize("omega", [-0.01, 1.01, float("nan")])
def test_fuse_dual_rejects_out_of_range(omega):
    with pytest.raises(WeightValidationError):
        fuse_dual(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 2), omega)


def test_fuse_dual_shape_mismatch():
    with pytest.raises(AlignmentError):
        fuse_dual(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 3, 3), 0.5)
    with pytest.raises(AlignmentError):
        fuse_dual(torch.zeros(2, 1, 2, 2), torch.zeros(2, 1, 2, 2), torch.tensor([0.1, 0.2, 0.3]))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2**31 - 1))
def test_fuse_dual_within_envelope(omega, seed):
    g = torch.Generator().manual_seed(seed)
    f1 = torch.randn(1, 2, 3, 3, generator=g, dtype=torch.float64)
    f2 = torch.randn(1, 2, 3, 3, generator=g, dtype=torch.float64)
    out = fuse_dual(f1, f2, omega)
    assert torch.all(out >= torch.minimum(f1, f2) - 1e-12)
    assert torch.all(out <= torch.maximum(f1, f2) + 1e-12)


# ---------------------------------------------------------------------------
# fuse_three / simplex
# ---------------------------------------------------------------------------


def test_fuse_three_vertex_is_x1():
    x = [torch.randn(2, 4, 4) for _ in range(3)]
    w = SimplexWeights(torch.ones(4, 4), torch.zeros(4, 4), torch.zeros(4, 4))
    assert torch.equal(fuse_three(*x, w), x[0])


def test_fuse_three_identical_inputs():
    X = torch.randn(2, 3, 3, dtype=torch.float64)
    w = simplex_from_logits(torch.randn(3, 3, 3, dtype=torch.float64))
    torch.testing.assert_close(fuse_three(X, X, X, w), X, rtol=0, atol=1e-12)


def test_fuse_three_scalar_oracle():
    rng = np.random.default_rng(11)
    xs = [rng.normal(size=(2, 3, 3)) for _ in range(3)]
    logits = rng.normal(size=(3, 3, 3))
    w = simplex_from_logits(torch.from_numpy(logits))
    out = fuse_three(*map(torch.from_numpy, xs), w).numpy()
    for c, i, j in np.ndindex(2, 3, 3):
        e = [math.exp(logits[k, i, j]) for k in range(3)]
        coeff = [v / sum(e) for v in e]
        expected = sum(coeff[k] * xs[k][c, i, j] for k in range(3))
        assert abs(out[c, i, j] - expected) < 1e-6


def test_simplex_validate_rejects_bad_weights():
    ones = torch.ones(2, 2)
    with pytest.raises(WeightValidationError, match="sum"):
        SimplexWeights(ones, ones, ones * 0).validate()
    with pytest.raises(WeightValidationError):
        SimplexWeights(ones * 1.5, ones * -0.5, ones * 0).validate()
    with pytest.raises(AlignmentError):
        SimplexWeights(ones, torch.zeros(3, 3), torch.zeros(2, 2)).validate()


def test_fuse_three_weight_grid_mismatch():
    x = torch.zeros(1, 4, 4)
    w = simplex_from_logits(torch.zeros(3, 2, 2))
    with pytest.raises(AlignmentError):
        fuse_three(x, x, x, w)


def test_simplex_from_logits_requires_three_maps():
    with pytest.raises(ValidationError):
        simplex_from_logits(torch.zeros(2, 4, 4))


def test_three_level_module_output_in_envelope():
    torch.manual_seed(0)
    m = ThreeLevelFusion(3)
    xs = [torch.randn(2, 3, 5, 5) for _ in range(3)]
    out = m(*xs)
    stacked = torch.stack(xs)
    assert torch.all(out >= stacked.min(0).values - 1e-5)
    assert torch.all(out <= stacked.max(0).values + 1e-5)
    m.weights(*xs).validate()
