"""Baseline classifiers and the ASFF-augmented ResNet-50.

Every model is an ``nn.Module`` carrying its :class:`BackboneSpec` and a list
of :class:`TapPoint` s. ``model(x)`` returns logits; ``model.run(x)`` also
returns the tap activations (and the gate values for the ASFF model).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from asffnet.errors import ConfigurationError, ShapeError, ValidationError
from asffnet.fusion import GateGenerator, ResampleAlign, WeightGeneratorSpec, compute_gate, fuse_dual

ARCHS = ("lenet5", "vgg16", "resnet34", "resnet50", "resnet101", "asff_resnet50")

RESNET_LAYOUT = {
    "resnet34": ("basic", (3, 4, 6, 3)),
    "resnet50": ("bottleneck", (3, 4, 6, 3)),
    "resnet101": ("bottleneck", (3, 4, 23, 3)),
    "asff_resnet50": ("bottleneck", (3, 4, 6, 3)),
}

VGG16_LAYOUT = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))

LENET_INPUT = 32


@dataclass(frozen=True)
class BackboneSpec:
    arch: str
    input_size: int = 224
    width_multiplier: float = 1.0
    num_classes: int = 2

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.input_size < 1:
            raise ConfigurationError(f"input_size must be positive, got {self.input_size}")
        if self.arch != "lenet5" and self.input_size % 32:
            raise ConfigurationError(
                f"{self.arch} needs input_size divisible by 32, got {self.input_size}"
            )
        if not 0 < self.width_multiplier <= 1:
            raise ConfigurationError(
                f"width_multiplier must be in (0, 1], got {self.width_multiplier}"
            )
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")

    def channels(self, n: int) -> int:
        return max(1, int(n * self.width_multiplier))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TapPoint:
    name: str
    expected_spatial: tuple[int, int]
    channels: int
    aliases: tuple[str, ...] = field(default=())


@dataclass
class ForwardResult:
    logits: torch.Tensor
    taps: dict[str, torch.Tensor]
    omega: torch.Tensor | None = None


def conv_init_(module: nn.Module) -> None:
    """He-uniform conv kernels, Glorot-uniform dense kernels, zero biases."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Classifier(nn.Module):
    spec: BackboneSpec
    taps: list[TapPoint]

    def run(self, x: torch.Tensor) -> ForwardResult:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.run(x).logits

    def tap(self, name: str) -> TapPoint:
        for t in self.taps:
            if name == t.name or name in t.aliases:
                return t
        available = ", ".join(t.name for t in self.taps)
        raise ValidationError(f"no tap named {name!r}; available taps: {available}")

    @property
    def default_cam_layer(self) -> str:
        return self.taps[-1].name


# ---------------------------------------------------------------------------
# ResNet
# ---------------------------------------------------------------------------


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_ch: int, width: int, stride: int = 1):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = nn.Conv2d(in_ch, width, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def residual(self, x):
        return self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))

    def zero_init_residual(self) -> None:
        nn.init.zeros_(self.bn2.weight)
        nn.init.zeros_(self.bn2.bias)

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(self.residual(x) + identity)


class Bottleneck(BasicBlock):
    expansion = 4

    def __init__(self, in_ch: int, width: int, stride: int = 1):
        nn.Module.__init__(self)
        out_ch = width * self.expansion
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def residual(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        return self.bn3(self.conv3(out))

    def zero_init_residual(self) -> None:
        nn.init.zeros_(self.bn3.weight)
        nn.init.zeros_(self.bn3.bias)


class ResNet(Classifier):
    """ResNet with five stride-2 reductions; stages are named ``stage2``..``stage5``.

    With ``zero_init_residual`` the last BN of every residual branch starts at
    zero, so each block is initially the identity (or its projection).
    """

    def __init__(self, spec: BackboneSpec, zero_init_residual: bool = True):
        super().__init__()
        self.spec = spec
        kind, depths = RESNET_LAYOUT[spec.arch]
        block = BasicBlock if kind == "basic" else Bottleneck
        c = spec.channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c(64), 7, 2, 3, bias=False),
            nn.BatchNorm2d(c(64)),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        in_ch = c(64)
        stages = []
        self.taps = []
        for i, (n_blocks, base) in enumerate(zip(depths, (64, 128, 256, 512))):
            stride = 1 if i == 0 else 2
            blocks = []
            for j in range(n_blocks):
                blocks.append(block(in_ch, c(base), stride if j == 0 else 1))
                in_ch = c(base) * block.expansion
            stages.append(nn.Sequential(*blocks))
            level = i + 2
            edge = spec.input_size // (2 ** (level))
            self.taps.append(
                TapPoint(
                    f"stage{level}.out",
                    (edge, edge),
                    in_ch,
                    aliases=(f"conv{level}_block{n_blocks}_out",),
                )
            )
        self.stages = nn.ModuleList(stages)
        self.feature_channels = in_ch
        self.fc = nn.Linear(in_ch, spec.num_classes)
        conv_init_(self)
        if zero_init_residual:
            for stage in self.stages:
                for blk in stage:
                    blk.zero_init_residual()

    def backbone(self, x) -> dict[str, torch.Tensor]:
        x = self.stem(x)
        taps = {}
        for stage, tap in zip(self.stages, self.taps):
            x = stage(x)
            taps[tap.name] = x
        return taps

    def run(self, x):
        taps = self.backbone(x)
        pooled = taps["stage5.out"].mean(dim=(2, 3))
        return ForwardResult(self.fc(pooled), taps)


class ASFFResNet(ResNet):
    """ResNet-50 whose stage-5 output is resampled onto the stage-4 grid and
    blended with it through a learned per-sample gate before the head."""

    def __init__(self, spec: BackboneSpec, gen: WeightGeneratorSpec | None = None):
        super().__init__(spec)
        t4, t5 = self.tap("stage4.out"), self.tap("stage5.out")
        self.resample = ResampleAlign(t5.channels, t4.channels)
        self.gate = GateGenerator(t4.channels, gen)
        self.fc = nn.Linear(t4.channels, spec.num_classes)
        nn.init.xavier_uniform_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)
        self.taps.append(TapPoint("asff.fused", t4.expected_spatial, t4.channels))
        self.feature_channels = t4.channels
        # pin the gate to a constant for ablations / branch-disconnection checks
        self.gate_override: float | None = None

    def run(self, x):
        taps = self.backbone(x)
        f1 = taps["stage4.out"]
        f2 = self.resample(taps["stage5.out"], f1.shape[-2:])
        if self.gate_override is None:
            omega = compute_gate(f1, f2, self.gate)
        else:
            omega = torch.full((f1.shape[0],), float(self.gate_override), dtype=f1.dtype)
        fused = fuse_dual(f1, f2, omega)
        taps["asff.fused"] = fused
        logits = self.fc(fused.mean(dim=(2, 3)))
        return ForwardResult(logits, taps, omega)

    @property
    def default_cam_layer(self) -> str:
        return "stage4.out"

    def fusion_parameter_count(self) -> int:
        return sum(p.numel() for m in (self.resample, self.gate) for p in m.parameters())


# ---------------------------------------------------------------------------
# VGG-16 / LeNet-5
# ---------------------------------------------------------------------------


class VGG16(Classifier):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        c = spec.channels
        in_ch = 3
        stages = []
        self.taps = []
        for i, widths in enumerate(VGG16_LAYOUT):
            layers = []
            for w in widths:
                layers += [nn.Conv2d(in_ch, c(w), 3, 1, 1), nn.ReLU(inplace=True)]
                in_ch = c(w)
            layers.append(nn.MaxPool2d(2, 2))
            stages.append(nn.Sequential(*layers))
            edge = spec.input_size // 2 ** (i + 1)
            self.taps.append(
                TapPoint(f"stage{i + 1}.out", (edge, edge), in_ch, aliases=(f"block{i + 1}_pool",))
            )
        self.stages = nn.ModuleList(stages)
        flat = in_ch * (spec.input_size // 32) ** 2
        hidden = c(4096)
        self.classifier = nn.Sequential(
            nn.Linear(flat, hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(0.5),
            nn.Linear(hidden, hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(0.5),
            nn.Linear(hidden, spec.num_classes),
        )
        conv_init_(self)

    def run(self, x):
        taps = {}
        for stage, tap in zip(self.stages, self.taps):
            x = stage(x)
            taps[tap.name] = x
        return ForwardResult(self.classifier(torch.flatten(x, 1)), taps)


class LeNet5(Classifier):
    """LeNet-5 with a bilinear resize front to 32x32 RGB."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        c = spec.channels
        self.conv1 = nn.Conv2d(3, c(6), 5)
        self.conv2 = nn.Conv2d(c(6), c(16), 5)
        self.fc1 = nn.Linear(c(16) * 25, c(120))
        self.fc2 = nn.Linear(c(120), c(84))
        self.fc3 = nn.Linear(c(84), spec.num_classes)
        self.taps = [
            TapPoint("conv1.out", (14, 14), c(6)),
            TapPoint("conv2.out", (5, 5), c(16)),
        ]
        conv_init_(self)

    def run(self, x):
        if x.shape[-2:] != (LENET_INPUT, LENET_INPUT):
            x = F.interpolate(x, size=(LENET_INPUT, LENET_INPUT), mode="bilinear", align_corners=False)
        a1 = F.avg_pool2d(F.relu(self.conv1(x)), 2)
        a2 = F.avg_pool2d(F.relu(self.conv2(a1)), 2)
        h = F.relu(self.fc2(F.relu(self.fc1(torch.flatten(a2, 1)))))
        return ForwardResult(self.fc3(h), {"conv1.out": a1, "conv2.out": a2})


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_backbone(spec: BackboneSpec, gen: WeightGeneratorSpec | None = None) -> Classifier:
    if spec.arch == "asff_resnet50":
        return build_asff_resnet(spec, gen)
    if spec.arch in RESNET_LAYOUT:
        return ResNet(spec)
    if spec.arch == "vgg16":
        return VGG16(spec)
    return LeNet5(spec)


def build_asff_resnet(spec: BackboneSpec, gen: WeightGeneratorSpec | None = None) -> ASFFResNet:
    if spec.arch != "asff_resnet50":
        raise ConfigurationError(f"build_asff_resnet needs arch 'asff_resnet50', got {spec.arch!r}")
    return ASFFResNet(spec, gen)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def check_batch(model: Classifier, batch: torch.Tensor) -> None:
    if batch.dim() != 4 or batch.shape[1] != 3:
        raise ShapeError(f"expected an (N, 3, H, W) batch, got {tuple(batch.shape)}")
    size = model.spec.input_size
    if batch.shape[-2:] != (size, size):
        raise ShapeError(
            f"model expects {size}x{size} inputs, got {batch.shape[-2]}x{batch.shape[-1]}"
        )


def predict(model: Classifier, batch: torch.Tensor) -> torch.Tensor:
    """Class-probability matrix ``(N, num_classes)`` computed in eval mode."""
    check_batch(model, batch)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return torch.softmax(model(batch), dim=1)
    finally:
        model.train(was_training)


def predicted_labels(probs: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Binary models predict positive when ``p[:, 1] >= threshold``; argmax otherwise."""
    if probs.shape[1] == 2:
        return (probs[:, 1] >= threshold).long()
    return probs.argmax(dim=1)
