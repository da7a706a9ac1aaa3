"""Adaptive spatial feature fusion primitives.

Feature maps follow the torch layout ``(N, C, H, W)``. A single unbatched
map ``(C, H, W)`` is accepted wherever a batch is, and returned unbatched.

Two fusion forms are provided:

* dual-branch gating, ``y = f1 * w + f2 * (1 - w)`` with one gate value per
  sample, produced from the concatenated branches by
  GAP -> dense(ReLU) -> dense(2) -> softmax;
* three-level fusion, ``y = a * x1 + b * x2 + c * x3`` with per-location
  coefficients on the probability simplex.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from asffnet.errors import AlignmentError, ValidationError, WeightValidationError

SIMPLEX_TOL = 1e-6


def check_feature_map(x: torch.Tensor, name: str = "feature map") -> torch.Tensor:
    """Validate a feature map and return it in batched ``(N, C, H, W)`` form."""
    if not isinstance(x, torch.Tensor):
        raise ValidationError(f"{name} must be a torch.Tensor, got {type(x).__name__}")
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ValidationError(f"{name} must have rank 3 or 4, got shape {tuple(x.shape)}")
    if min(x.shape[1:]) < 1:
        raise ValidationError(f"{name} has an empty dimension: {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValidationError(f"{name} contains non-finite values")
    return x


def _same_shape(a: torch.Tensor, b: torch.Tensor, names=("f1", "f2")) -> None:
    if a.shape != b.shape:
        raise AlignmentError(
            f"{names[0]} has shape {tuple(a.shape)} but {names[1]} has shape {tuple(b.shape)}"
        )


# ---------------------------------------------------------------------------
# Resampling / alignment
# ---------------------------------------------------------------------------


class ChannelAlign(nn.Module):
    """Learned 1x1 convolution mapping ``in_channels`` to ``out_channels``.

    Identity-initialised when the channel counts match, He-uniform otherwise.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=True)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        with torch.no_grad():
            if self.in_channels == self.out_channels:
                self.conv.weight.zero_()
                idx = torch.arange(self.in_channels)
                self.conv.weight[idx, idx, 0, 0] = 1.0
            else:
                nn.init.kaiming_uniform_(self.conv.weight, nonlinearity="relu")
            self.conv.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


def resample_to(
    source: torch.Tensor,
    target_height: int,
    target_width: int,
    target_channels: int,
    align: ChannelAlign | None = None,
) -> torch.Tensor:
    """Bilinearly resize ``source`` to the target grid, then map its channels.

    ``align`` is required when the channel count changes; when omitted and the
    counts already agree the channel map is the identity.
    """
    unbatched = isinstance(source, torch.Tensor) and source.dim() == 3
    x = check_feature_map(source, "source")
    if min(target_height, target_width, target_channels) < 1:
        raise ValidationError(
            f"target shape must be positive, got {(target_height, target_width, target_channels)}"
        )
    if x.shape[-2:] != (target_height, target_width):
        x = F.interpolate(
            x, size=(target_height, target_width), mode="bilinear", align_corners=False
        )
    if align is not None:
        if align.in_channels != x.shape[1] or align.out_channels != target_channels:
            raise AlignmentError(
                f"channel map is {align.in_channels}->{align.out_channels}, "
                f"needed {x.shape[1]}->{target_channels}"
            )
        x = align(x)
    elif x.shape[1] != target_channels:
        raise AlignmentError(
            f"source has {x.shape[1]} channels, target needs {target_channels}; "
            "pass a ChannelAlign module"
        )
    return x[0] if unbatched else x


class ResampleAlign(nn.Module):
    """Upsample-then-convolve branch that brings a deep map onto a shallow grid."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.align = ChannelAlign(in_channels, out_channels)

    def forward(self, x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        return resample_to(x, size[0], size[1], self.align.out_channels, self.align)


# ---------------------------------------------------------------------------
# Dual-branch gate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightGeneratorSpec:
    """Width of the hidden dense layer of the gate generator.

    ``reduction_units=None`` picks ``max(8, concat_channels // 8)``.
    """

    reduction_units: int | None = None
    output_logits: int = 2

    def __post_init__(self):
        if self.reduction_units is not None and self.reduction_units < 1:
            raise ValidationError(f"reduction_units must be >= 1, got {self.reduction_units}")
        if self.output_logits != 2:
            raise ValidationError("the gate generator always emits 2 logits")

    def units_for(self, branch_channels: int) -> int:
        if self.reduction_units is not None:
            return self.reduction_units
        return max(8, (2 * branch_channels) // 8)


class GateGenerator(nn.Module):
    """concat -> GAP -> dense(units, ReLU) -> dense(2) -> softmax.

    The output layer starts at zero so the untrained gate sits at 0.5.
    """

    def __init__(self, branch_channels: int, spec: WeightGeneratorSpec | None = None):
        super().__init__()
        spec = spec or WeightGeneratorSpec()
        self.branch_channels = branch_channels
        self.units = spec.units_for(branch_channels)
        self.hidden = nn.Linear(2 * branch_channels, self.units)
        self.out = nn.Linear(self.units, 2)
        nn.init.kaiming_uniform_(self.hidden.weight, nonlinearity="relu")
        nn.init.zeros_(self.hidden.bias)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def logits(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([f1, f2], dim=1).mean(dim=(2, 3))
        return self.out(F.relu(self.hidden(pooled)))

    def forward(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(f1, f2), dim=1)[:, 0]


def compute_gate(f1: torch.Tensor, f2_aligned: torch.Tensor, gen: GateGenerator) -> torch.Tensor:
    """Per-sample gate ``omega`` in [0, 1], shape ``(N,)`` (scalar if unbatched)."""
    unbatched = isinstance(f1, torch.Tensor) and f1.dim() == 3
    a = check_feature_map(f1, "f1")
    b = check_feature_map(f2_aligned, "f2_aligned")
    _same_shape(a, b, ("f1", "f2_aligned"))
    if a.shape[1] != gen.branch_channels:
        raise AlignmentError(
            f"gate generator expects {gen.branch_channels} channels per branch, got {a.shape[1]}"
        )
    omega = gen(a, b)
    return omega[0] if unbatched else omega


def fuse_dual(f1: torch.Tensor, f2_aligned: torch.Tensor, omega) -> torch.Tensor:
    """``f1 * omega + f2_aligned * (1 - omega)``.

    ``omega`` may be a python float, a 0-d tensor, or one value per sample.
    """
    if f1.shape != f2_aligned.shape:
        raise AlignmentError(
            f"f1 has shape {tuple(f1.shape)} but f2_aligned has shape {tuple(f2_aligned.shape)}"
        )
    w = torch.as_tensor(omega, dtype=f1.dtype, device=f1.device)
    if not torch.isfinite(w).all() or (w < 0).any() or (w > 1).any():
        raise WeightValidationError("gate weight must lie in [0, 1]")
    if w.dim() == 1:
        if f1.dim() != 4 or w.shape[0] != f1.shape[0]:
            raise AlignmentError(
                f"{w.shape[0]} gate values for feature batch of shape {tuple(f1.shape)}"
            )
        w = w.view(-1, 1, 1, 1)
    elif w.dim() != 0:
        raise WeightValidationError(f"gate must be scalar or per-sample, got shape {tuple(w.shape)}")
    return f1 * w + f2_aligned * (1 - w)


# ---------------------------------------------------------------------------
# Three-level fusion
# ---------------------------------------------------------------------------


@dataclass
class SimplexWeights:
    """Per-location fusion coefficients, each of shape ``(H, W)`` or ``(N, H, W)``."""

    alpha: torch.Tensor
    beta: torch.Tensor
    gamma: torch.Tensor

    def validate(self, tol: float = SIMPLEX_TOL) -> None:
        if not (self.alpha.shape == self.beta.shape == self.gamma.shape):
            raise AlignmentError(
                "alpha, beta, gamma shapes differ: "
                f"{tuple(self.alpha.shape)}, {tuple(self.beta.shape)}, {tuple(self.gamma.shape)}"
            )
        stacked = torch.stack([self.alpha, self.beta, self.gamma])
        if not torch.isfinite(stacked).all():
            raise WeightValidationError("simplex weights contain non-finite values")
        if (stacked < -tol).any() or (stacked > 1 + tol).any():
            raise WeightValidationError("simplex weights must lie in [0, 1]")
        err = (stacked.sum(dim=0) - 1).abs().max().item()
        if err > tol:
            raise WeightValidationError(f"simplex weights sum to 1 only within {err:.3g} (> {tol})")


def simplex_from_logits(logits: torch.Tensor) -> SimplexWeights:
    """Per-location softmax over three logit maps stacked on dim ``-3``.

    ``logits`` is ``(3, H, W)`` or ``(N, 3, H, W)``.
    """
    if logits.shape[-3] != 3:
        raise ValidationError(f"expected 3 logit maps on dim -3, got shape {tuple(logits.shape)}")
    w = torch.softmax(logits, dim=-3)
    return SimplexWeights(w.select(-3, 0), w.select(-3, 1), w.select(-3, 2))


def fuse_three(
    x1: torch.Tensor, x2: torch.Tensor, x3: torch.Tensor, w: SimplexWeights
) -> torch.Tensor:
    """``alpha * x1 + beta * x2 + gamma * x3`` with coefficients broadcast over channels."""
    if not (x1.shape == x2.shape == x3.shape):
        raise AlignmentError(
            f"level shapes differ: {tuple(x1.shape)}, {tuple(x2.shape)}, {tuple(x3.shape)}"
        )
    w.validate()
    if w.alpha.shape[-2:] != x1.shape[-2:]:
        raise AlignmentError(
            f"weights cover {tuple(w.alpha.shape[-2:])} but features are {tuple(x1.shape[-2:])}"
        )
    a, b, c = (t.unsqueeze(-3) for t in (w.alpha, w.beta, w.gamma))
    return a * x1 + b * x2 + c * x3


class ThreeLevelFusion(nn.Module):
    """Learned three-level fusion on features already aligned to one grid.

    Each level gets a 1x1 conv producing one logit map; a per-location softmax
    over the three maps yields the simplex weights.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.level_logits = nn.ModuleList(nn.Conv2d(channels, 1, 1) for _ in range(3))

    def weights(self, x1, x2, x3) -> SimplexWeights:
        logits = torch.cat([conv(x) for conv, x in zip(self.level_logits, (x1, x2, x3))], dim=1)
        return simplex_from_logits(logits)

    def forward(self, x1, x2, x3):
        return fuse_three(x1, x2, x3, self.weights(x1, x2, x3))
