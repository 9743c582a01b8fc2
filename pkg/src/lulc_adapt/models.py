"""Translation generators, patch discriminators and segmentation networks.

Tensors are batch-first ``(N, C, H, W)``; images are scaled to ``[-1, 1]``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as nnf
from torch import nn

CHECKPOINT_VERSION = 1
RANGE_TOL = 1e-4


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TranslationModelSpec:
    residual_blocks: int = 9
    discriminator_layers: int = 3
    base_width: int = 64
    n_downsampling: int = 2

    def __post_init__(self):
        if self.residual_blocks < 1 or self.discriminator_layers < 1:
            raise ValueError("residual_blocks and discriminator_layers must be >= 1")
        if self.base_width < 1 or self.n_downsampling < 0:
            raise ValueError("base_width must be >= 1 and n_downsampling >= 0")

    @classmethod
    def preset(cls, name: str) -> "TranslationModelSpec":
        return {"full": cls(), "tiny": cls(residual_blocks=2, discriminator_layers=2, base_width=8)}[name]


@dataclass(frozen=True)
class SegmentationModelSpec:
    variant: str = "v2_like"
    n_classes: int = 7
    backbone_depth: str = "resnet101"
    pretrained_init: bool = False
    base_width: int = 16
    discriminator_width: int = 64

    def __post_init__(self):
        if self.variant not in ("v2_like", "v3plus_like"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.backbone_depth not in ("tiny", "resnet50", "resnet101"):
            raise ValueError(f"unknown backbone {self.backbone_depth!r}")

    @classmethod
    def preset(cls, name: str, variant: str = "v2_like") -> "SegmentationModelSpec":
        if name == "full":
            return cls(variant=variant)
        if name == "tiny":
            return cls(variant=variant, backbone_depth="tiny", base_width=16, discriminator_width=16)
        raise KeyError(name)


@dataclass
class ModelHandles:
    F: nn.Module | None = None
    F_inv: nn.Module | None = None
    D_T: nn.Module | None = None
    D_S: nn.Module | None = None
    M: nn.Module | None = None
    D_out: nn.Module | None = None


def _spec_dict(spec) -> dict:
    return {"type": type(spec).__name__, **dataclasses.asdict(spec)}


# --------------------------------------------------------------------------
# translation


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(width, width, 3), nn.InstanceNorm2d(width), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(width, width, 3), nn.InstanceNorm2d(width),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """Encoder / residual trunk / decoder image translator with tanh output."""

    def __init__(self, spec: TranslationModelSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(3, w, 7), nn.InstanceNorm2d(w), nn.ReLU(True)]
        for i in range(spec.n_downsampling):
            c = w * 2 ** i
            layers += [nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * c), nn.ReLU(True)]
        c = w * 2 ** spec.n_downsampling
        layers += [ResidualBlock(c) for _ in range(spec.residual_blocks)]
        for i in range(spec.n_downsampling):
            layers += [nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1, output_padding=1),
                       nn.InstanceNorm2d(c // 2), nn.ReLU(True)]
            c //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(c, 3, 7), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    @property
    def size_multiple(self) -> int:
        return 2 ** self.spec.n_downsampling

    def forward(self, x):
        h, w = x.shape[-2:]
        m = self.size_multiple
        # reflection padding in the bottleneck needs >= 2 pixels per side
        if h % m or w % m or h // m < 2 or w // m < 2:
            raise ValueError(f"generator input {h}x{w} must be a multiple of {m} and at least {2 * m}")
        return self.net(x)


class PatchDiscriminator(nn.Module):
    """Fully convolutional discriminator producing a grid of realness scores.

    ``n_layers`` stride-2 convolutions followed by a stride-1 block and a
    one-channel stride-1 head, all 4x4 kernels with padding 1.
    """

    def __init__(self, in_channels: int, n_layers: int, base_width: int, norm: bool = True):
        super().__init__()
        self.n_layers = n_layers
        layers = [nn.Conv2d(in_channels, base_width, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        c = base_width
        for i in range(1, n_layers):
            nc = base_width * min(2 ** i, 8)
            layers += [nn.Conv2d(c, nc, 4, 2, 1)]
            if norm:
                layers.append(nn.InstanceNorm2d(nc))
            layers.append(nn.LeakyReLU(0.2, True))
            c = nc
        nc = base_width * min(2 ** n_layers, 8)
        layers += [nn.Conv2d(c, nc, 4, 1, 1)]
        if norm:
            layers.append(nn.InstanceNorm2d(nc))
        layers += [nn.LeakyReLU(0.2, True), nn.Conv2d(nc, 1, 4, 1, 1)]
        self.net = nn.Sequential(*layers)

    def output_size(self, size: int) -> int:
        for _ in range(self.n_layers):
            size = (size + 2 - 4) // 2 + 1
        for _ in range(2):
            size = size + 2 - 4 + 1
        return size

    def forward(self, x):
        h, w = x.shape[-2:]
        if min(self.output_size(h), self.output_size(w)) < 1:
            raise ValueError(f"discriminator input {h}x{w} too small for {self.n_layers} downsampling layers")
        return self.net(x)


def build_translation(spec: TranslationModelSpec, seed: int):
    """Return ``(F, F_inv, D_T, D_S)`` with deterministic initial weights."""
    gen = torch.Generator().manual_seed(seed)
    nets = [ResnetGenerator(spec), ResnetGenerator(spec),
            PatchDiscriminator(3, spec.discriminator_layers, spec.base_width),
            PatchDiscriminator(3, spec.discriminator_layers, spec.base_width)]
    for net in nets:
        _init_normal(net, gen)
    return tuple(nets)


def _init_normal(net: nn.Module, gen: torch.Generator, std: float = 0.02):
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()


# --------------------------------------------------------------------------
# segmentation


def _conv_relu(cin, cout, k=3, stride=1, dilation=1):
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride, padding=dilation * (k // 2), dilation=dilation),
                         nn.ReLU(True))


class TinyBackbone(nn.Module):
    """Shallow stand-in for a dilated ResNet: output stride 4, low-level features at stride 2."""

    min_size = 8

    def __init__(self, width: int):
        super().__init__()
        self.low = nn.Sequential(_conv_relu(3, width), _conv_relu(width, width, stride=2))
        self.high = nn.Sequential(_conv_relu(width, 2 * width, stride=2),
                                  _conv_relu(2 * width, 2 * width, dilation=2))
        self.low_channels, self.out_channels = width, 2 * width

    def forward(self, x):
        low = self.low(x)
        return low, self.high(low)


class ResNetBackbone(nn.Module):
    min_size = 32

    def __init__(self, depth: str, pretrained: bool, output_stride: int):
        super().__init__()
        import torchvision

        dilate = [False, True, True] if output_stride == 8 else [False, False, True]
        ctor = getattr(torchvision.models, depth)
        weights = "IMAGENET1K_V1" if pretrained else None
        net = ctor(weights=weights, replace_stride_with_dilation=dilate)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4
        self.low_channels, self.out_channels = 256, 2048

    def forward(self, x):
        low = self.layer1(self.stem(x))
        return low, self.layer4(self.layer3(self.layer2(low)))


class SummedAtrousClassifier(nn.Module):
    """Parallel dilated 3x3 classifiers whose outputs are summed."""

    def __init__(self, cin, n_classes, rates):
        super().__init__()
        self.branches = nn.ModuleList(nn.Conv2d(cin, n_classes, 3, padding=r, dilation=r) for r in rates)

    def forward(self, x):
        return sum(b(x) for b in self.branches)


class ASPP(nn.Module):
    def __init__(self, cin, cout, rates):
        super().__init__()
        self.branches = nn.ModuleList([_conv_relu(cin, cout, k=1)] +
                                      [_conv_relu(cin, cout, dilation=r) for r in rates])
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(True))
        self.project = _conv_relu(cout * (len(rates) + 2), cout, k=1)

    def forward(self, x):
        feats = [b(x) for b in self.branches]
        feats.append(self.pool(x).expand(-1, -1, *x.shape[-2:]))
        return self.project(torch.cat(feats, 1))


class SegmentationNet(nn.Module):
    """DeepLab-style segmenter returning logits at input resolution."""

    def __init__(self, spec: SegmentationModelSpec):
        super().__init__()
        self.spec = spec
        tiny = spec.backbone_depth == "tiny"
        if tiny:
            self.backbone = TinyBackbone(spec.base_width)
        else:
            stride = 8 if spec.variant == "v2_like" else 16
            self.backbone = ResNetBackbone(spec.backbone_depth, spec.pretrained_init, stride)
        cin = self.backbone.out_channels
        if spec.variant == "v2_like":
            rates = (1, 2, 3, 4) if tiny else (6, 12, 18, 24)
            self.head = SummedAtrousClassifier(cin, spec.n_classes, rates)
        else:
            width = 2 * spec.base_width if tiny else 256
            rates = (1, 2, 3) if tiny else (6, 12, 18)
            low_width = spec.base_width // 2 if tiny else 48
            self.aspp = ASPP(cin, width, rates)
            self.reduce_low = _conv_relu(self.backbone.low_channels, low_width, k=1)
            self.decoder = nn.Sequential(_conv_relu(width + low_width, width), _conv_relu(width, width),
                                         nn.Conv2d(width, spec.n_classes, 1))

    def forward(self, x):
        h, w = x.shape[-2:]
        if min(h, w) < self.backbone.min_size:
            raise ValueError(f"segmenter input {h}x{w} below backbone minimum {self.backbone.min_size}")
        low, high = self.backbone(x)
        if self.spec.variant == "v2_like":
            out = self.head(high)
        else:
            y = nnf.interpolate(self.aspp(high), size=low.shape[-2:], mode="bilinear", align_corners=False)
            out = self.decoder(torch.cat([y, self.reduce_low(low)], 1))
        return nnf.interpolate(out, size=(h, w), mode="bilinear", align_corners=False)


def build_segmenter(spec: SegmentationModelSpec, seed: int):
    """Return ``(M, D_out)``; ``D_out`` scores per-pixel class-probability maps."""
    torch.manual_seed(seed)  # torchvision initializers draw from the global generator
    gen = torch.Generator().manual_seed(seed)
    m = SegmentationNet(spec)
    if spec.backbone_depth == "tiny":
        _init_kaiming(m, gen)
    d_out = _output_discriminator(spec)
    _init_normal(d_out, gen)
    return m, d_out


def _output_discriminator(spec: SegmentationModelSpec) -> PatchDiscriminator:
    n_layers = 2 if spec.backbone_depth == "tiny" else 4
    return PatchDiscriminator(spec.n_classes, n_layers, spec.discriminator_width, norm=False)


def _init_kaiming(net: nn.Module, gen: torch.Generator):
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.weight[0].numel()
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                if mod.bias is not None:
                    mod.bias.zero_()


# --------------------------------------------------------------------------
# forward helpers


def _check_range(batch: torch.Tensor, lo: float, hi: float, what: str):
    if batch.numel() and (batch.min() < lo - RANGE_TOL or batch.max() > hi + RANGE_TOL):
        raise ValueError(f"{what} values must lie in [{lo}, {hi}], got "
                         f"[{float(batch.min()):.4g}, {float(batch.max()):.4g}]")


def translate(F: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    _check_range(batch, -1, 1, "image batch")
    return F(batch)


def segment(M: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    _check_range(batch, -1, 1, "image batch")
    return M(batch)


def discriminate(D: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    return D(batch)


def frozen_forward(module: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Forward with parameters cut from the autograd graph.

    Gradients still flow to ``x`` but never reach the module's parameters.
    """
    params = {k: v.detach() for k, v in module.named_parameters()}
    return torch.func.functional_call(module, params, (x,))


def parameter_digest(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# checkpoints


def save_model(path, module: nn.Module, spec, role: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format_version": CHECKPOINT_VERSION, "role": role, "spec": _spec_dict(spec),
                "state_dict": module.state_dict()}, path)
    return path


def load_model(path, spec=None, role: str | None = None):
    """Rebuild a model from :func:`save_model` output.

    Returns ``(module, spec)``.  If ``spec`` or ``role`` are given they must
    match the stored descriptor.
    """
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
    if role is not None and blob["role"] != role:
        raise CheckpointError(f"{path}: holds {blob['role']!r}, expected {role!r}")
    stored = blob["spec"]
    if spec is not None and _spec_dict(spec) != stored:
        raise CheckpointError(f"{path}: spec mismatch {stored} vs {_spec_dict(spec)}")
    kind = stored.pop("type")
    stored_spec = {"TranslationModelSpec": TranslationModelSpec,
                   "SegmentationModelSpec": SegmentationModelSpec}[kind](**stored)
    module = _build_role(stored_spec, blob["role"])
    module.load_state_dict(blob["state_dict"])
    return module, stored_spec


def _build_role(spec, role: str) -> nn.Module:
    if isinstance(spec, TranslationModelSpec):
        if role in ("F", "F_inv"):
            return ResnetGenerator(spec)
        if role in ("D_T", "D_S"):
            return PatchDiscriminator(3, spec.discriminator_layers, spec.base_width)
    else:
        if role == "M":
            return SegmentationNet(dataclasses.replace(spec, pretrained_init=False))
        if role == "D_out":
            return _output_discriminator(spec)
    raise CheckpointError(f"unknown role {role!r} for {type(spec).__name__}")
