import numpy as np
import pytest
import torch
import torch.nn as nn
from PIL import Image

from asffnet.backbones import BackboneSpec, Classifier, ForwardResult, TapPoint, build_backbone
from asffnet.errors import ShapeError, ValidationError
from asffnet.gradcam import (
    Heatmap,
    colorize,
    gradcam,
    overlay,
    save_heatmap_png,
    save_overlay_png,
    to_display,
    write_record,
)


class PooledConv(Classifier):
    """1x1 conv tap followed by GAP and a dense head."""

    def __init__(self, constant_logits=False):
        super().__init__()
        self.spec = BackboneSpec("lenet5", 8)
        self.conv = nn.Conv2d(3, 2, 1)
        self.fc = nn.Linear(2, 2)
        self.taps = [TapPoint("conv.out", (8, 8), 2)]
        self.constant_logits = constant_logits

    def run(self, x):
        a = self.conv(x)
        if self.constant_logits:
            logits = self.fc.bias.expand(x.shape[0], 2)
        else:
            logits = self.fc(a.mean(dim=(2, 3)))
        return ForwardResult(logits, {"conv.out": a})


def test_gradcam_matches_closed_form():
    # d logit_k / d A_c(i, j) = W[k, c] / (H W), so the channel weights are W[k] / (H W)
    torch.manual_seed(0)
    model = PooledConv().double()
    x = torch.randn(3, 8, 8, dtype=torch.float64)
    hm = gradcam(model, x, 1, "conv.out")
    with torch.no_grad():
        a = model.conv(x[None])[0]
    w = model.fc.weight[1].detach() / 64
    expected = torch.relu((w.view(2, 1, 1) * a).sum(0)).numpy()
    np.testing.assert_allclose(hm.raw, expected, atol=1e-12)
    assert hm.source_layer == "conv.out" and hm.class_index == 1


def test_constant_logit_gives_flagged_zero_map():
    model = PooledConv(constant_logits=True)
    hm = gradcam(model, torch.randn(3, 8, 8), 0)
    assert hm.degenerate
    assert np.all(hm.raw == 0) and np.all(hm.values == 0)


@pytest.mark.parametrize("arch,size", [("asff_resnet50", 64), ("vgg16", 64), ("lenet5", 48)])
def test_heatmap_matches_input_size_and_range(arch, size):
    torch.manual_seed(3)
    model = build_backbone(BackboneSpec(arch, size, 0.0625))
    hm = gradcam(model, torch.randn(3, size, size), 1)
    assert hm.values.shape == (size, size)
    assert hm.raw.min() >= 0
    assert 0.0 <= hm.values.min() and hm.values.max() <= 1.0
    if not hm.degenerate:
        assert hm.values.max() == pytest.approx(1.0)


def test_gradcam_named_aliases_and_errors():
    torch.manual_seed(0)
    model = build_backbone(BackboneSpec("resnet50", 64, 0.0625))
    hm = gradcam(model, torch.randn(3, 64, 64), 0, "conv4_block6_out")
    assert hm.source_layer == "stage4.out"
    with pytest.raises(ValidationError):
        gradcam(model, torch.randn(3, 64, 64), 2)
    with pytest.raises(ValidationError):
        gradcam(model, torch.randn(3, 64, 64), 0, "nope")
    with pytest.raises(ShapeError):
        gradcam(model, torch.randn(2, 3, 64, 64), 0)


def test_gradcam_keeps_training_mode():
    model = build_backbone(BackboneSpec("resnet34", 64, 0.0625))
    model.train()
    gradcam(model, torch.randn(3, 64, 64), 0)
    assert model.training


def _hm(values):
    v = np.asarray(values, dtype=np.float64)
    return Heatmap(v, v, "x", 0, float(v.min()), float(v.max()), bool(v.max() == v.min()))


def test_overlay_small_alpha_approaches_base():
    base = np.random.default_rng(0).integers(0, 256, (5, 5, 3), dtype=np.uint8)
    ov = overlay(base, _hm(np.random.default_rng(1).random((5, 5))), 1e-9)
    assert np.array_equal(ov.image, base)


def test_overlay_zero_heatmap_is_base_tinted_by_zero_colour():
    base = np.full((4, 4, 3), 200, np.uint8)
    alpha = 0.4
    ov = overlay(base, _hm(np.zeros((4, 4))), alpha)
    zero = colorize(np.zeros(1))[0]
    expected = np.rint(0.6 * 200.0 + alpha * zero).astype(np.uint8)
    assert np.all(ov.image == expected)


def test_overlay_errors():
    with pytest.raises(ShapeError):
        overlay(np.zeros((4, 4, 3), np.uint8), _hm(np.zeros((5, 5))))
    with pytest.raises(ValidationError):
        overlay(np.zeros((4, 4, 3), np.uint8), _hm(np.zeros((4, 4))), 1.0)


def test_pngs_and_record_are_byte_identical(tmp_path):
    torch.manual_seed(0)
    model = build_backbone(BackboneSpec("asff_resnet50", 64, 0.0625))
    x = torch.randn(3, 64, 64)
    for name in ("a", "b"):
        hm = gradcam(model, x, 1)
        base = to_display(x, (0.5,) * 3, (0.25,) * 3)
        save_heatmap_png(tmp_path / f"{name}_h.png", hm)
        save_overlay_png(tmp_path / f"{name}_o.png", overlay(base, hm))
        write_record(tmp_path / f"{name}.json", hm.record())
    for suffix in ("_h.png", "_o.png", ".json"):
        assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()
    with Image.open(tmp_path / "a_h.png") as im:
        assert im.mode == "L" and im.size == (64, 64)


def test_to_display_inverts_normalisation():
    rgb = np.random.default_rng(0).integers(0, 256, (4, 4, 3)).astype(np.uint8)
    x = torch.from_numpy(rgb.astype(np.float32) / 255).permute(2, 0, 1)
    z = (x - 0.3) / 0.2
    assert np.array_equal(to_display(z, (0.3,) * 3, (0.2,) * 3), rgb)


def test_heatmap_argmax_row_col():
    v = np.zeros((3, 4))
    v[2, 1] = 1.0
    assert _hm(v).argmax() == (2, 1)
