"""Network builders for the teacher and the test networks.

Channel tables (32x32 inputs):

==========  ==============================  =======================================
family      default widths                  layout
==========  ==============================  =======================================
cnn3        frepo (128, 256, 512)           3 x [conv3x3-norm-relu-avgpool2] + linear
            mtt (128, 128, 128)
resnet8     (16, 32, 64)                    stem + 3 stages x 1 basic block
resnet18    (64, 128, 256, 512)             stem + 4 stages x 2 basic blocks
resnet50    (64, 128, 256, 512)             stem + [3, 4, 6, 3] bottlenecks (x4 expansion)
vgg11       (64, 128, 256, 256,             8 x [conv3x3-norm-relu], max pool after
            512, 512, 512, 512)             convs 1, 2, 4, 6, 8; linear head
alexnet     (128, 192, 256, 192, 192)       conv5x5, conv5x5, 3 x conv3x3, max pool after
                                            convs 1, 2, 5; linear head
==========  ==============================  =======================================

ReLU everywhere. Conv and linear weights are drawn uniformly in
``+-1/sqrt(fan_in)``; norm scales start at 1 and shifts at 0.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import Tensor, nn

from .errors import ConfigError, ShapeError
from .stochastic_depth import (
    NORM_KINDS,
    BlockKind,
    DropPathController,
    ImprovedShortcut,
    OriginalShortcut,
    ResidualBlock,
    VirtualShortcutBlock,
    check_virtual_shapes,
    make_norm,
    make_shortcut,
)

FAMILIES = ("cnn3", "resnet8", "resnet18", "resnet50", "vgg11", "alexnet")
WIDTH_PROFILES = {"frepo": (128, 256, 512), "mtt": (128, 128, 128)}
DEFAULT_WIDTHS = {
    "cnn3": WIDTH_PROFILES["frepo"],
    "resnet8": (16, 32, 64),
    "resnet18": (64, 128, 256, 512),
    "resnet50": (64, 128, 256, 512),
    "vgg11": (64, 128, 256, 256, 512, 512, 512, 512),
    "alexnet": (128, 192, 256, 192, 192),
}
RESIDUAL_FAMILIES = ("resnet8", "resnet18", "resnet50")
SINGLE_BRANCH_FAMILIES = ("vgg11", "alexnet")


@dataclass
class ArchSpec:
    family: str = "cnn3"
    width_profile: str | list[int] | None = None
    norm: str = "batch"
    shortcut: str = "improved_projection"
    droppath_enabled: bool = False
    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if isinstance(self.width_profile, tuple):
            self.width_profile = list(self.width_profile)
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown architecture family {self.family!r}; expected one of {FAMILIES}")
        if self.family == "cnn3" and self.droppath_enabled:
            raise ConfigError("cnn3 is too shallow for DropPath; set droppath_enabled=false")
        if self.norm not in NORM_KINDS + ("auto",):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.shortcut not in ("original_projection", "improved_projection"):
            raise ConfigError(f"unknown shortcut {self.shortcut!r}")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        self.widths()

    def widths(self) -> tuple[int, ...]:
        wp = self.width_profile
        if wp is None:
            return DEFAULT_WIDTHS[self.family]
        if isinstance(wp, str):
            if self.family != "cnn3" or wp not in WIDTH_PROFILES:
                raise ConfigError(f"width profile {wp!r} only applies to cnn3 ({list(WIDTH_PROFILES)})")
            return WIDTH_PROFILES[wp]
        expected = len(DEFAULT_WIDTHS[self.family])
        if len(wp) != expected:
            raise ConfigError(f"{self.family} needs {expected} widths, got {len(wp)}")
        return tuple(int(w) for w in wp)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


def _conv_bn_relu(cin, cout, kernel, norm, stride=1, pool=None):
    layers = [
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=norm == "none"),
        make_norm(norm, cout),
        nn.ReLU(inplace=True),
    ]
    if pool == "max":
        layers.append(nn.MaxPool2d(2))
    elif pool == "avg":
        layers.append(nn.AvgPool2d(2))
    return nn.Sequential(*layers)


def _basic_block(cin, cout, stride, norm, shortcut, droppath, name):
    main = nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        make_norm(norm, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False),
        make_norm(norm, cout),
    )
    sc = make_shortcut(shortcut, cin, cout, stride, norm)
    return nn.Sequential(ResidualBlock(main, sc, droppath=droppath, name=name), nn.ReLU())


def _bottleneck(cin, planes, stride, norm, shortcut, droppath, name):
    cout = planes * 4
    main = nn.Sequential(
        nn.Conv2d(cin, planes, 1, bias=False),
        make_norm(norm, planes),
        nn.ReLU(inplace=True),
        nn.Conv2d(planes, planes, 3, stride=stride, padding=1, bias=False),
        make_norm(norm, planes),
        nn.ReLU(inplace=True),
        nn.Conv2d(planes, cout, 1, bias=False),
        make_norm(norm, cout),
    )
    sc = make_shortcut(shortcut, cin, cout, stride, norm)
    return nn.Sequential(ResidualBlock(main, sc, droppath=droppath, name=name), nn.ReLU())


def _build_resnet(spec: ArchSpec, norm: str):
    widths = spec.widths()
    c, h, w = spec.input_shape
    if spec.family == "resnet50":
        depths, block, expansion = (3, 4, 6, 3), _bottleneck, 4
    elif spec.family == "resnet18":
        depths, block, expansion = (2, 2, 2, 2), _basic_block, 1
    else:
        depths, block, expansion = (1, 1, 1), _basic_block, 1
    layers = [_conv_bn_relu(c, widths[0], 3, norm)]
    cin = widths[0]
    for s, (width, depth) in enumerate(zip(widths, depths)):
        for b in range(depth):
            stride = 2 if (s > 0 and b == 0) else 1
            layers.append(block(cin, width, stride, norm, spec.shortcut, spec.droppath_enabled, f"stage{s + 1}.block{b + 1}"))
            cin = width * expansion
    features = nn.Sequential(*layers)
    head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(cin, spec.num_classes))
    return features, head


def _single_branch_stages(spec: ArchSpec, norm: str):
    """Per-stage (module, in_channels, out_channels, downsample factor)."""
    widths = spec.widths()
    cin = spec.input_shape[0]
    stages = []
    if spec.family == "vgg11":
        pools = {0, 1, 3, 5, 7}
        for k, width in enumerate(widths):
            pool = "max" if k in pools else None
            stages.append((_conv_bn_relu(cin, width, 3, norm, pool=pool), cin, width, 2 if pool else 1))
            cin = width
    elif spec.family == "alexnet":
        kernels = (5, 5, 3, 3, 3)
        pools = {0, 1, 4}
        for k, (width, kernel) in enumerate(zip(widths, kernels)):
            pool = "max" if k in pools else None
            stages.append((_conv_bn_relu(cin, width, kernel, norm, pool=pool), cin, width, 2 if pool else 1))
            cin = width
    else:  # cnn3
        for width in widths:
            stages.append((_conv_bn_relu(cin, width, 3, norm, pool="avg"), cin, width, 2))
            cin = width
    return stages


def _build_single_branch(spec: ArchSpec, norm: str):
    stages = _single_branch_stages(spec, norm)
    c, h, w = spec.input_shape
    total = math.prod(s[3] for s in stages)
    if h % total or w % total:
        raise ShapeError(f"{spec.family} needs spatial dims divisible by {total}, got {h}x{w}")
    layers = []
    if spec.droppath_enabled:
        # greedy front-to-back pairing; an unpaired trailing stage stays plain
        k = 0
        while k + 1 < len(stages):
            (a, cin, _, sa), (b, _, cout, sb) = stages[k], stages[k + 1]
            stride = sa * sb
            if stride == 1 and cin == cout:
                vsc = nn.Identity()
            else:
                vsc = ImprovedShortcut(cin, cout, stride, norm)
            layers.append(VirtualShortcutBlock(nn.Sequential(a, b), vsc, name=f"pair{k // 2 + 1}"))
            k += 2
        if k < len(stages):
            layers.append(stages[k][0])
    else:
        layers = [s[0] for s in stages]
    features = nn.Sequential(*layers)
    cout = stages[-1][2]
    head = nn.Sequential(nn.Flatten(), nn.Linear(cout * (h // total) * (w // total), spec.num_classes))
    return features, head


def init_parameters(module: nn.Module, generator: torch.Generator):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


class Model(nn.Module):
    """A built network: feature blocks, a linear classifier head, and a DropPath controller.

    The head is never wrapped by DropPath.
    """

    def __init__(self, spec: ArchSpec, features: nn.Module, head: nn.Module, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.features = features
        self.head = head
        self.controller = DropPathController(seed=seed)
        self.stochastic_blocks = []
        for m in self.modules():
            if isinstance(m, VirtualShortcutBlock) or (isinstance(m, ResidualBlock) and m.droppath):
                m.block_index = len(self.stochastic_blocks)
                m.controller = self.controller
                self.stochastic_blocks.append(m)

    @property
    def keep_rate(self) -> float:
        return self.controller.p

    @keep_rate.setter
    def keep_rate(self, p: float):
        if not 0.0 < p <= 1.0:
            raise ConfigError(f"keep rate must lie in (0, 1], got {p}")
        self.controller.p = float(p)

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def block_kinds(self) -> list[tuple[str, BlockKind]]:
        out = []
        for m in self.modules():
            if isinstance(m, (ResidualBlock, VirtualShortcutBlock)):
                out.append((m.block_name, m.block_kind))
        return out

    def forward(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"expected input (batch, {self.spec.input_shape}), got {tuple(x.shape)}")
        logits = self.head(self.features(x))
        if self.training:
            self.controller.step += 1
        return logits


def resolve_norm(spec: ArchSpec, source: str | None) -> ArchSpec:
    """Pick batch norm for FRePo data and instance norm for MTT data when ``norm='auto'``."""
    if spec.norm != "auto":
        return spec
    norm = "instance" if source == "mtt" else "batch"
    return ArchSpec(**{**spec.to_dict(), "norm": norm})


def build_model(spec: ArchSpec, seed: int = 0) -> Model:
    spec.validate()
    norm = "batch" if spec.norm == "auto" else spec.norm
    if spec.family in RESIDUAL_FAMILIES:
        features, head = _build_resnet(spec, norm)
    else:
        features, head = _build_single_branch(spec, norm)
    model = Model(spec, features, head, seed=seed)
    init_parameters(model, torch.Generator().manual_seed(int(seed)))
    if spec.droppath_enabled and spec.family in SINGLE_BRANCH_FAMILIES:
        probe = torch.zeros((2,) + spec.input_shape)
        model.eval()
        x = probe
        for layer in model.features:
            if isinstance(layer, VirtualShortcutBlock):
                check_virtual_shapes(layer, x)
            with torch.no_grad():
                x = layer(x)
        model.train()
    return model


def forward(model: Model, batch: Tensor, mode: str = "inference", p: float = 1.0) -> Tensor:
    """Run ``model`` in the given mode with keep rate ``p`` threaded to every DropPath block."""
    if mode not in ("training", "inference"):
        raise ConfigError(f"mode must be 'training' or 'inference', got {mode!r}")
    model.keep_rate = p
    model.train(mode == "training")
    return model(batch)


def audit_shortcuts(model: nn.Module) -> list[tuple[str, str, tuple[int, int]]]:
    """``(module name, shortcut kind, 1x1 conv stride)`` for every projection shortcut."""
    out = []
    for name, m in model.named_modules():
        if isinstance(m, (ImprovedShortcut, OriginalShortcut)):
            out.append((name, m.kind, tuple(m.conv.stride)))
    return out
