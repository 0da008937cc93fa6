"""Backbone with per-stage taps, regression head, style discriminator and the GRL."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputShapeError

TOY_WIDTHS = (16, 32, 64, 128)
FULL_WIDTHS = (64, 64, 128, 256, 512)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, c):
        ctx.c = c
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.c * grad, None


def grl_apply(x: torch.Tensor, c: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-c`` on the way back."""
    if c < 0:
        raise ConfigError(f"GRL coefficient must be >= 0, got {c}")
    return _GradReverse.apply(x, float(c))


class GradientReversal(nn.Module):
    def __init__(self, c: float = 1.0):
        super().__init__()
        if c < 0:
            raise ConfigError(f"GRL coefficient must be >= 0, got {c}")
        self.c = c

    def forward(self, x):
        return grl_apply(x, self.c)


def _toy_stage(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _resnet18_stages() -> list[nn.Module]:
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    # every stage halves the spatial size: stem conv, then maxpool+layer1, layer2..4
    return [
        nn.Sequential(net.conv1, net.bn1, net.relu),
        nn.Sequential(net.maxpool, net.layer1),
        net.layer2,
        net.layer3,
        net.layer4,
    ]


_RESNET_PREFIXES = {
    "conv1.": "stages.0.0.",
    "bn1.": "stages.0.1.",
    "layer1.": "stages.1.1.",
    "layer2.": "stages.2.",
    "layer3.": "stages.3.",
    "layer4.": "stages.4.",
}


def resnet18_to_backbone_state(state: dict) -> dict:
    """Rename a torchvision ResNet-18 state dict to full-mode ``Backbone`` keys; the fc layer is dropped."""
    out = {}
    for k, v in state.items():
        for src, dst in _RESNET_PREFIXES.items():
            if k.startswith(src):
                out[dst + k[len(src) :]] = v
                break
    return out


class Backbone(nn.Module):
    def __init__(self, mode: str = "toy"):
        super().__init__()
        if mode == "toy":
            widths = TOY_WIDTHS
            cin = 3
            stages = []
            for w in widths:
                stages.append(_toy_stage(cin, w))
                cin = w
        elif mode == "full":
            widths = FULL_WIDTHS
            stages = _resnet18_stages()
        else:
            raise ConfigError(f"unknown backbone mode {mode!r} (expected 'toy' or 'full')")
        self.mode = mode
        self.widths = tuple(widths)
        self.stages = nn.ModuleList(stages)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def _check(self, images: torch.Tensor, tap: int):
        if not 1 <= tap <= self.num_stages:
            raise ConfigError(f"tap {tap} outside 1..{self.num_stages}")
        if images.dim() != 4 or images.shape[1] != 3:
            raise InputShapeError(f"expected (B, 3, S, S) images, got {tuple(images.shape)}")
        h, w = images.shape[2:]
        if h % (2**tap) or w % (2**tap):
            raise InputShapeError(f"spatial size {h}x{w} not divisible by 2^{tap}")

    def forward(self, images: torch.Tensor, tap: int | None = None) -> torch.Tensor:
        tap = self.num_stages if tap is None else tap
        self._check(images, tap)
        x = images
        for stage in self.stages[:tap]:
            x = stage(x)
        return x

    def forward_all(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Outputs of every stage, shallowest first."""
        self._check(images, self.num_stages)
        outs = []
        x = images
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


class RegressionHead(nn.Module):
    """Pooled features -> FC -> ReLU -> FC -> 5 * sigmoid."""

    def __init__(self, in_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or in_dim // 2
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ConfigError(f"head expects {self.in_dim} inputs, got {x.shape[-1]}")
        return 5.0 * torch.sigmoid(self.fc2(F.relu(self.fc1(x)))).squeeze(-1)


class Discriminator(nn.Module):
    def __init__(self, in_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, in_dim // 2)
        self.fc2 = nn.Linear(in_dim // 2, in_dim // 4)
        self.fc3 = nn.Linear(in_dim // 4, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-1] != self.in_dim:
            raise ConfigError(f"discriminator expects {self.in_dim} inputs, got {f.shape[-1]}")
        h = F.relu(self.fc1(f))
        h = F.relu(self.fc2(h))
        return torch.sigmoid(self.fc3(h)).squeeze(-1)


def pool(feat: torch.Tensor) -> torch.Tensor:
    return feat.mean(dim=(2, 3))


class StyleAMNet(nn.Module):
    """Backbone, head and (optional) discriminator trained together.

    ``alignment_space`` fixes the discriminator input: ``"style"`` -> 2C,
    ``"feature"`` -> C (pooled features), ``"none"`` -> no discriminator.
    """

    def __init__(self, mode: str = "toy", alignment_space: str = "style"):
        super().__init__()
        self.backbone = Backbone(mode)
        c = self.backbone.out_channels
        self.head = RegressionHead(c)
        if alignment_space == "style":
            self.discriminator = Discriminator(2 * c)
        elif alignment_space == "feature":
            self.discriminator = Discriminator(c)
        elif alignment_space == "none":
            self.discriminator = None
        else:
            raise ConfigError(f"unknown alignment_space {alignment_space!r}")
        self.mode = mode
        self.alignment_space = alignment_space

    def predict_quality(self, feat: torch.Tensor) -> torch.Tensor:
        return self.head(pool(feat))

    def discriminate(self, f: torch.Tensor, c: float = 1.0) -> torch.Tensor:
        if self.discriminator is None:
            raise ConfigError("model was built without a discriminator")
        return self.discriminator(grl_apply(f, c))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.predict_quality(self.backbone(images))
