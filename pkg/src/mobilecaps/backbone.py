"""MobileNetV2-style feature extractor built from inverted residual blocks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, ops
from .layers import BatchNorm, Conv2d, DepthwiseConv2d, Module


@dataclass(frozen=True)
class InvertedResidualConfig:
    in_channels: int
    out_channels: int
    expansion_factor: int = 6
    stride: int = 1
    kernel_size: int = 3
    use_batch_norm: bool = True

    def __post_init__(self):
        if self.expansion_factor < 1:
            raise ValueError(f"expansion_factor must be >= 1, got {self.expansion_factor}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def hidden_channels(self) -> int:
        return self.in_channels * self.expansion_factor

    @property
    def has_residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


class InvertedResidual(Module):
    """1x1 expand (+BN, relu6) -> 3x3 depthwise (+BN, relu6) -> 1x1 linear project (+BN).

    With an expansion factor of 1 the expansion conv is skipped, as in MobileNetV2.
    """

    def __init__(self, cfg: InvertedResidualConfig, rng: np.random.Generator):
        self.cfg = cfg
        hidden = cfg.hidden_channels
        bn = cfg.use_batch_norm
        if cfg.expansion_factor != 1:
            self.expand = Conv2d(cfg.in_channels, hidden, 1, rng=rng)
            self.expand_bn = BatchNorm(hidden) if bn else None
        self.depthwise = DepthwiseConv2d(hidden, cfg.kernel_size, cfg.stride, rng=rng)
        self.depthwise_bn = BatchNorm(hidden) if bn else None
        self.project = Conv2d(hidden, cfg.out_channels, 1, rng=rng)
        self.project_bn = BatchNorm(cfg.out_channels) if bn else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.cfg.in_channels:
            raise ValueError(f"block expects {self.cfg.in_channels} input channels, got {x.shape}")
        h = x
        if self.cfg.expansion_factor != 1:
            h = self.expand(h)
            if self.expand_bn is not None:
                h = self.expand_bn(h)
            h = ops.relu6(h)
        h = self.depthwise(h)
        if self.depthwise_bn is not None:
            h = self.depthwise_bn(h)
        h = ops.relu6(h)
        h = self.project(h)
        if self.project_bn is not None:
            h = self.project_bn(h)
        if self.cfg.has_residual:
            h = ops.add(h, x)
        return h


def inverted_residual_forward(x: Tensor, block: InvertedResidual) -> Tensor:
    return block(x)


# (expansion t, output channels c, repeats n, first stride s)
MOBILENET_V2_TABLE = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]


def expand_block_table(stem_channels: int, table, use_batch_norm: bool = True) -> list[InvertedResidualConfig]:
    blocks = []
    c_in = stem_channels
    for t, c, n, s in table:
        for i in range(n):
            blocks.append(InvertedResidualConfig(c_in, c, t, s if i == 0 else 1,
                                                 use_batch_norm=use_batch_norm))
            c_in = c
    return blocks


@dataclass
class BackboneProfile:
    name: str
    input_size: int
    stem_channels: int
    blocks: list[InvertedResidualConfig]
    final_channels: int
    output_grid: int
    use_batch_norm: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> BackboneProfile:
        d = dict(d)
        d["blocks"] = [InvertedResidualConfig(**b) for b in d["blocks"]]
        return cls(**d)

    @property
    def total_stride(self) -> int:
        return 2 * int(np.prod([b.stride for b in self.blocks]))


def paper_profile(use_batch_norm: bool = True) -> BackboneProfile:
    """224x224x3 -> 7x7x1024.

    Standard MobileNetV2 block table up to the 160-channel stage; the final
    320-channel block is dropped and the closing pointwise conv retargeted to
    1024 channels so the feature map reshapes into 392 capsules of width 128.
    """
    table = MOBILENET_V2_TABLE[:-1]
    return BackboneProfile("paper", 224, 32, expand_block_table(32, table, use_batch_norm),
                           1024, 7, use_batch_norm)


def desk_profile(use_batch_norm: bool = True) -> BackboneProfile:
    """32x32x3 -> 4x4x64, small enough to train on one CPU core."""
    table = [(1, 16, 1, 1), (4, 24, 2, 2), (4, 32, 2, 2)]
    return BackboneProfile("desk", 32, 16, expand_block_table(16, table, use_batch_norm),
                           64, 4, use_batch_norm)


PROFILES = {"paper": paper_profile, "desk": desk_profile}


def get_profile(name: str) -> BackboneProfile:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ValueError(f"unknown backbone profile {name!r}; choose from {sorted(PROFILES)}") from None


class Backbone(Module):
    """Stem 3x3/2 conv -> inverted residual blocks -> 1x1 conv to the target width."""

    def __init__(self, profile: BackboneProfile, rng: np.random.Generator):
        expected = profile.input_size // profile.total_stride
        if profile.input_size % profile.total_stride or expected != profile.output_grid:
            raise ValueError(f"profile {profile.name!r}: input {profile.input_size} with total stride "
                             f"{profile.total_stride} does not reach a {profile.output_grid}x"
                             f"{profile.output_grid} grid")
        chans = [profile.stem_channels] + [b.out_channels for b in profile.blocks]
        for prev, b in zip(chans, profile.blocks):
            if b.in_channels != prev:
                raise ValueError(f"profile {profile.name!r}: block expects {b.in_channels} "
                                 f"channels but receives {prev}")
        self.profile = profile
        bn = profile.use_batch_norm
        self.stem = Conv2d(3, profile.stem_channels, 3, stride=2, rng=rng)
        self.stem_bn = BatchNorm(profile.stem_channels) if bn else None
        self.blocks = [InvertedResidual(cfg, rng) for cfg in profile.blocks]
        self.head = Conv2d(chans[-1], profile.final_channels, 1, rng=rng)
        self.head_bn = BatchNorm(profile.final_channels) if bn else None

    @property
    def output_shape(self) -> tuple[int, int, int]:
        g = self.profile.output_grid
        return g, g, self.profile.final_channels

    def __call__(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        if self.stem_bn is not None:
            h = self.stem_bn(h)
        h = ops.relu6(h)
        for block in self.blocks:
            h = block(h)
        h = self.head(h)
        if self.head_bn is not None:
            h = self.head_bn(h)
        return ops.relu6(h)


def build_backbone(profile: BackboneProfile | str, rng: np.random.Generator | None = None) -> Backbone:
    if isinstance(profile, str):
        profile = get_profile(profile)
    return Backbone(profile, rng if rng is not None else np.random.default_rng(0))


class PlainConvStem(Module):
    """Simple conv + BN + relu6 layers reaching the same grid as a backbone profile."""

    def __init__(self, profile: BackboneProfile, rng: np.random.Generator):
        n_down = int(round(np.log2(profile.total_stride)))
        widths = [min(profile.final_channels, 16 * 2 ** i) for i in range(n_down - 1)] + [profile.final_channels]
        self.layers = []
        self.norms = []
        c_in = 3
        for w in widths:
            self.layers.append(Conv2d(c_in, w, 3, stride=2, rng=rng))
            self.norms.append(BatchNorm(w) if profile.use_batch_norm else None)
            c_in = w
        self.profile = profile

    @property
    def output_shape(self) -> tuple[int, int, int]:
        g = self.profile.output_grid
        return g, g, self.profile.final_channels

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for conv, bn in zip(self.layers, self.norms):
            h = conv(h)
            if bn is not None:
                h = bn(h)
            h = ops.relu6(h)
        return h
