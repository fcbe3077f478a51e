"""Spatiotemporal pyramid backbone and the STAN / TAN / SAN / RSTAN variants.

Level 0 is the input clip (13 height channels, 5 frames, full resolution).
Each further level ``l`` is produced by a 2-D conv block applied per frame
(stride-2 first conv, so each spatial side halves and channels grow),
followed by a 3-D temporal conv whenever the temporal schedule shrinks.
Every level then runs its vertical path: optional temporal attention, frames
folded into channels, nearest upsampling to full resolution and a 3x3
conv + batch norm projection to 32 channels. The five projections are
concatenated and, when the variant has it, passed through spatial attention.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import functional as F
from .heads import Heads, PredictionBundle
from .nn import ConvBN, Module, ModuleDict
from .tensor import DimensionError, Tensor, concat, get_default_dtype
from .transformer import AttentionModule

VARIANTS = ("STAN", "TAN", "SAN", "RSTAN")
FIG2_TAM_LEVELS = (0, 1, 2)


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    """Architecture description. ``scale`` divides spatial size and widths."""

    variant: str = "STAN"
    levels: int = 5
    base_size: int = 256
    channels: Tuple[int, ...] = (13, 32, 64, 128, 256)
    temporal: Tuple[int, ...] = (5, 3, 1, 1, 1)
    out_channels: int = 32
    pooled_side: int = 8
    head_hidden: int = 32
    horizon: int = 20
    num_classes: int = 5
    scale: int = 1

    def __post_init__(self):
        self.variant = self.variant.upper()
        self.channels = tuple(int(c) for c in self.channels)
        self.temporal = tuple(int(t) for t in self.temporal)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.levels < 1 or len(self.channels) != self.levels or len(self.temporal) != self.levels:
            raise ConfigError("channels and temporal schedules need one entry per level")
        if any(a < b for a, b in zip(self.temporal, self.temporal[1:])) or self.temporal[-1] != 1:
            raise ConfigError(f"temporal schedule {self.temporal} must be non-increasing and end at 1")
        if self.base_size % self.scale or any(c % self.scale for c in self.channels[1:]):
            raise ConfigError(f"scale {self.scale} must divide base size and level widths")
        if self.size % (2 ** (self.levels - 1)):
            raise ConfigError(f"size {self.size} cannot halve {self.levels - 1} times")
        for s in self.spatial_sizes:
            if s > self.pooled_side and s % self.pooled_side:
                raise ConfigError(f"level size {s} not divisible by pooled side {self.pooled_side}")

    @property
    def size(self) -> int:
        return self.base_size // self.scale

    @property
    def spatial_sizes(self) -> List[int]:
        return [self.size >> l for l in range(self.levels)]

    @property
    def level_channels(self) -> List[int]:
        return [self.channels[0]] + [c // self.scale for c in self.channels[1:]]

    @property
    def tam_levels(self) -> Tuple[int, ...]:
        if self.variant == "SAN":
            return ()
        if self.variant == "RSTAN":
            return tuple(range(self.levels))
        return tuple(l for l in FIG2_TAM_LEVELS if l < self.levels)

    @property
    def has_sam(self) -> bool:
        return self.variant != "TAN"

    @property
    def fused_channels(self) -> int:
        return self.levels * self.out_channels

    def with_variant(self, variant: str) -> "NetworkConfig":
        d = self.to_dict()
        d["variant"] = variant
        return NetworkConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["temporal"] = list(self.temporal)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown network keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def desk(cls, variant: str = "STAN", scale: int = 4) -> "NetworkConfig":
        """Reduced config: 256 / scale cells per side, widths divided by ``scale``."""
        return cls(variant=variant, scale=scale)


class ConvBlock(Module):
    """Two 3x3 conv layers; the first halves each spatial side."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = ConvBN(c_in, c_out, (3, 3), rng, stride=2, padding=1)
        self.conv2 = ConvBN(c_out, c_out, (3, 3), rng, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(self.conv1(x))


class DownLevel(Module):
    def __init__(self, c_in: int, c_out: int, t_in: int, t_out: int, rng: np.random.Generator):
        super().__init__()
        self.block = ConvBlock(c_in, c_out, rng)
        self.t3d = None
        if t_out < t_in:
            self.t3d = ConvBN(c_out, c_out, (t_in - t_out + 1, 3, 3), rng, padding=(0, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        """(B, C, T, H, W) -> (B, C', T', H/2, W/2)."""
        b, c, t, h, w = x.shape
        y = x.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)
        y = self.block(y)
        _, c2, h2, w2 = y.shape
        y = y.reshape(b, t, c2, h2, w2).permute(0, 2, 1, 3, 4)
        return self.t3d(y) if self.t3d is not None else y


class VerticalPath(Module):
    def __init__(self, channels: int, temporal: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.proj = ConvBN(channels * temporal, out_channels, (3, 3), rng, padding=1, activate=False)

    def forward(self, x: Tensor, size: int) -> Tensor:
        b, c, t, h, w = x.shape
        y = x.reshape(b, c * t, h, w)
        if h != size:
            y = F.upsample_nearest(y, (size, size))
        return self.proj(y)


class STANet(Module):
    """Backbone plus heads. Parameter names follow ``level<l>.block.*``,
    ``level<l>.t3d.*``, ``tam.<l>.*``, ``vert<l>.proj.*``, ``sam.*``, ``heads.*``.
    """

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        sizes, chans, temps = cfg.spatial_sizes, cfg.level_channels, cfg.temporal

        def rng(name):
            # keyed by module name so modules shared between variants start identical
            return np.random.default_rng([seed, zlib.crc32(name.encode())])

        for l in range(1, cfg.levels):
            self.add_module(f"level{l}", DownLevel(chans[l - 1], chans[l], temps[l - 1], temps[l],
                                                   rng(f"level{l}")))
        self.tam = ModuleDict({
            str(l): AttentionModule(chans[l], temps[l], sizes[l], sizes[l], rng(f"tam.{l}"),
                                    cfg.pooled_side)
            for l in cfg.tam_levels})
        for l in range(cfg.levels):
            self.add_module(f"vert{l}", VerticalPath(chans[l], temps[l], cfg.out_channels,
                                                     rng(f"vert{l}")))
        self.sam = None
        if cfg.has_sam:
            self.sam = AttentionModule(cfg.fused_channels, 1, sizes[0], sizes[0], rng("sam"),
                                       cfg.pooled_side)
        self.heads = Heads(cfg.fused_channels, cfg.head_hidden, cfg.horizon, cfg.num_classes,
                           rng("heads"))

    def input_tensor(self, frames) -> Tensor:
        """(B, T, H, W, Z) binary frames -> (B, Z, T, H, W) float tensor."""
        data = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
        if data.ndim == 4:
            data = data[None]
        cfg = self.cfg
        expect = (cfg.temporal[0], cfg.size, cfg.size, cfg.channels[0])
        if data.ndim != 5 or data.shape[1:] != expect:
            raise DimensionError(f"expected clip frames (B,) + {expect}, got {data.shape}")
        return Tensor(np.ascontiguousarray(data.transpose(0, 4, 1, 2, 3), dtype=get_default_dtype()))

    def level_features(self, x: Tensor) -> List[Tensor]:
        feats = [x]
        for l in range(1, self.cfg.levels):
            feats.append(getattr(self, f"level{l}")(feats[-1]))
        return feats

    def backbone(self, frames) -> Tensor:
        """Fused (B, levels * 32, H, W) map, channel-first."""
        x = self.input_tensor(frames)
        size = self.cfg.size
        outs = []
        for l, f in enumerate(self.level_features(x)):
            if str(l) in self.tam:
                f = self.tam[l](f)
            outs.append(getattr(self, f"vert{l}")(f, size))
        fused = concat(outs, axis=1)
        if self.sam is not None:
            b, c, h, w = fused.shape
            fused = self.sam(fused.reshape(b, c, 1, h, w)).reshape(b, c, h, w)
        return fused

    def forward(self, frames) -> PredictionBundle:
        bundle = self.heads(self.backbone(frames))
        if np.ndim(frames.data if isinstance(frames, Tensor) else frames) == 4:
            return bundle.squeeze()
        return bundle

    def module_counts(self) -> Dict[str, int]:
        return {"tam": len(self.tam), "sam": int(self.sam is not None)}


def build_network(cfg: NetworkConfig, seed: int = 0) -> STANet:
    return STANet(cfg, seed)


def forward(network: STANet, clip_frames) -> Tensor:
    """Backbone output in channels-last layout: (H, W, 160) or (B, H, W, 160)."""
    fused = network.backbone(clip_frames).permute(0, 2, 3, 1)
    unbatched = np.ndim(clip_frames.data if isinstance(clip_frames, Tensor) else clip_frames) == 4
    return fused.reshape(fused.shape[1:]) if unbatched else fused


def build_variant_suite(cfg: NetworkConfig = None, seed: int = 0) -> Dict[str, STANet]:
    """All four variants from one config and seed."""
    cfg = cfg or NetworkConfig()
    return {v: build_network(cfg.with_variant(v), seed) for v in VARIANTS}
