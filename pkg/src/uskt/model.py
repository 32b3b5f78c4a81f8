"""The U-shaped adapter, encoder stand-in, decoder, and classifier head.

Reference topology for 224x224 input (spatial extents in brackets):

    T[224] -proj-> 12[224] -down-> c0[112] -> c1[56] -> c2[28] -> c3[14]
          -pool-> c3[7] -flatten-> (49, c3) -BiR-SSM-> unflatten c3[7]
          -up x5 (skips: c3[14], c2[28], c1[56], c0[112], proj 12[224])
          -> 12[224] -final conv-> 3[224]

The encoder maps the 3-channel adapter output to D_enc x (hw/32)^2
features consumed by both the classifier head and the deconvolution
decoder that reconstructs a 3 x hw x hw image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Conv2d, ConvTranspose2d, Linear, Module
from .ops import avg_pool2d, bilinear_upsample2x, concat_channels
from .ssm import BiRSSMBlock
from .tensor import Tensor, mean_axes, reshape, silu, transpose
from .tensor import add as t_add

ADAPTER_VARIANTS = ("uskt", "conv1", "conv2", "none")


@dataclass
class USKTConfig:
    """Architecture hyperparameters; defaults give the reference topology."""

    in_bins: int = 5
    proj_channels: int = 12
    down_channels: tuple[int, ...] = (32, 64, 128, 128)
    ssm_layers: int = 1
    state_size: int = 16
    out_channels: int = 3
    input_hw: int = 224
    num_classes: int = 3
    adapter: str = "uskt"
    selective_ssm: bool = False
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    decoder_channels: tuple[int, ...] = (64, 32, 16, 8)

    def __post_init__(self) -> None:
        self.down_channels = tuple(self.down_channels)
        self.encoder_channels = tuple(self.encoder_channels)
        self.decoder_channels = tuple(self.decoder_channels)
        if len(self.down_channels) != 4:
            raise ConfigError(f"down_channels must have 4 entries, got {self.down_channels}")
        if len(self.encoder_channels) != 5:
            raise ConfigError(f"encoder_channels must have 5 entries, got {self.encoder_channels}")
        if len(self.decoder_channels) != 4:
            raise ConfigError(f"decoder_channels must have 4 entries, got {self.decoder_channels}")
        if self.input_hw % 32 != 0 or self.input_hw < 32:
            raise ConfigError(f"input_hw must be a positive multiple of 32, got {self.input_hw}")
        if self.adapter not in ADAPTER_VARIANTS:
            raise ConfigError(f"adapter must be one of {ADAPTER_VARIANTS}, got {self.adapter!r}")
        if self.out_channels != 3:
            raise ConfigError("out_channels is fixed at 3 (encoder expects RGB-like input)")
        if self.ssm_layers < 0:
            raise ConfigError(f"ssm_layers must be >= 0, got {self.ssm_layers}")


# ----------------------------------------------------------------------
# blocks
# ----------------------------------------------------------------------

class DownBlock(Module):
    """Residual downsampling: 3x3 conv, strided 3x3 conv, 1x1 strided skip.

    out = SiLU(conv_s2(SiLU(conv_s1(x))) + skip_s2(x)); halves both
    spatial extents exactly (even extents required).
    """

    def __init__(self, in_channels: int, out_channels: int,
                 rng: np.random.Generator, dtype=np.float32) -> None:
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, stride=1, padding=1, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, stride=2, padding=1, dtype=dtype)
        self.skip = Conv2d(in_channels, out_channels, 1, rng, stride=2, padding=0, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2], x.shape[-1]
        if h % 2 or w % 2:
            raise ShapeError(f"DownBlock: spatial extents must be even, got {h}x{w}")
        main = self.conv2(silu(self.conv1(x)))
        return silu(t_add(main, self.skip(x)))


class UpBlock(Module):
    """Residual upsampling: bilinear x2, 3x3 then 1x1 convs, skip concat, 1x1 fusion."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int,
                 rng: np.random.Generator, dtype=np.float32) -> None:
        self.conv3 = Conv2d(in_channels, in_channels, 3, rng, stride=1, padding=1, dtype=dtype)
        self.conv1 = Conv2d(in_channels, in_channels, 1, rng, dtype=dtype)
        self.fusion = Conv2d(in_channels + skip_channels, out_channels, 1, rng, dtype=dtype)
        self.skip_channels = skip_channels

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        up = bilinear_upsample2x(x)
        expected = up.shape[-2:]
        if skip.shape[-2:] != expected or skip.shape[-3] != self.skip_channels:
            raise ShapeError(
                f"UpBlock: expected skip (..., {self.skip_channels}, {expected[0]}, {expected[1]}), "
                f"got {skip.shape}")
        feat = self.conv1(silu(self.conv3(up)))
        return self.fusion(concat_channels(feat, skip))


def _to_sequence(x: Tensor) -> Tensor:
    """(..., C, H, W) -> (..., H*W, C), row-major over the spatial grid."""
    if x.ndim == 3:
        c, h, w = x.shape
        return transpose(reshape(x, (c, h * w)), (1, 0))
    n, c, h, w = x.shape
    return transpose(reshape(x, (n, c, h * w)), (0, 2, 1))


def _from_sequence(x: Tensor, h: int, w: int) -> Tensor:
    if x.ndim == 2:
        return reshape(transpose(x, (1, 0)), (x.shape[1], h, w))
    return reshape(transpose(x, (0, 2, 1)), (x.shape[0], x.shape[2], h, w))


class USKTAdapter(Module):
    """Projection, four down blocks, BiR-SSM bottleneck, five up blocks."""

    def __init__(self, cfg: USKTConfig, rng: np.random.Generator,
                 dtype=np.float32) -> None:
        c0, c1, c2, c3 = cfg.down_channels
        p = cfg.proj_channels
        self.proj = Conv2d(cfg.in_bins, p, 3, rng, stride=1, padding=1, dtype=dtype)
        self.downs = [DownBlock(p, c0, rng, dtype), DownBlock(c0, c1, rng, dtype),
                      DownBlock(c1, c2, rng, dtype), DownBlock(c2, c3, rng, dtype)]
        self.ssm_blocks = [
            BiRSSMBlock(c3, cfg.state_size, rng, dtype, selective=cfg.selective_ssm)
            for _ in range(cfg.ssm_layers)]
        # skips consumed top-down: c3@hw/16, c2@hw/8, c1@hw/4, c0@hw/2, proj@hw
        self.ups = [UpBlock(c3, c3, c2, rng, dtype), UpBlock(c2, c2, c1, rng, dtype),
                    UpBlock(c1, c1, c0, rng, dtype), UpBlock(c0, c0, p, rng, dtype),
                    UpBlock(p, p, p, rng, dtype)]
        self.final = (Conv2d(p, cfg.out_channels, 3, rng, stride=1, padding=1, dtype=dtype)
                      if p != cfg.out_channels else None)
        self.cfg = cfg

    def forward_stages(self, x: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        hw = self.cfg.input_hw
        if x.shape[-2:] != (hw, hw):
            raise ShapeError(f"USKTAdapter: expected {hw}x{hw} input, got {x.shape}")
        stages: dict[str, Tensor] = {}
        h = self.proj(x)
        stages["proj"] = h
        skips = [h]
        for i, block in enumerate(self.downs):
            h = block(h)
            stages[f"down{i + 1}"] = h
            skips.append(h)
        h = avg_pool2d(h, 2)
        stages["pool"] = h
        side = hw // 32
        if self.ssm_blocks:
            seq = _to_sequence(h)
            stages["seq"] = seq
            for block in self.ssm_blocks:
                seq = block(seq)
            h = _from_sequence(seq, side, side)
        stages["ssm_out"] = h
        for block, skip in zip(self.ups, reversed(skips)):
            h = block(h, skip)
        if self.final is not None:
            h = self.final(h)
        stages["uskt"] = h
        return h, stages

    def __call__(self, x: Tensor) -> Tensor:
        out, _ = self.forward_stages(x)
        return out


class Conv1Adapter(Module):
    """Single 3x3 convolution straight to 3 channels (ablation baseline)."""

    def __init__(self, cfg: USKTConfig, rng: np.random.Generator, dtype=np.float32) -> None:
        self.conv = Conv2d(cfg.in_bins, cfg.out_channels, 3, rng, stride=1, padding=1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Conv2Adapter(Module):
    """Two stacked 3x3 convolutions through the 12-channel projection width."""

    def __init__(self, cfg: USKTConfig, rng: np.random.Generator, dtype=np.float32) -> None:
        self.conv_a = Conv2d(cfg.in_bins, cfg.proj_channels, 3, rng, stride=1, padding=1, dtype=dtype)
        self.conv_b = Conv2d(cfg.proj_channels, cfg.out_channels, 3, rng, stride=1, padding=1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv_b(silu(self.conv_a(x)))


class IdentityAdapter(Module):
    """Pass-through; only valid when the voxel grid already has 3 bins."""

    def __init__(self, cfg: USKTConfig, rng: np.random.Generator, dtype=np.float32) -> None:
        if cfg.in_bins != 3:
            raise ConfigError(f"adapter 'none' requires in_bins == 3, got {cfg.in_bins}")

    def __call__(self, x: Tensor) -> Tensor:
        return x


def build_adapter(cfg: USKTConfig, rng: np.random.Generator, dtype=np.float32) -> Module:
    cls = {"uskt": USKTAdapter, "conv1": Conv1Adapter,
           "conv2": Conv2Adapter, "none": IdentityAdapter}[cfg.adapter]
    return cls(cfg, rng, dtype)


# ----------------------------------------------------------------------
# encoder / decoder / head
# ----------------------------------------------------------------------

class TinyConvEncoder(Module):
    """Five stride-2 conv stages standing in for a pretrained RGB encoder.

    Maps (3, hw, hw) to (D_enc, hw/32, hw/32).  Implements the pluggable
    encoder interface: ``forward`` (via ``__call__``), a ``frozen`` flag,
    and when frozen only bias parameters remain trainable.  Externally
    converted weights can be substituted through the bundle loader.
    """

    def __init__(self, channels: Sequence[int], input_hw: int,
                 rng: np.random.Generator, dtype=np.float32) -> None:
        chain = [3, *channels]
        self.stages = [Conv2d(chain[i], chain[i + 1], 3, rng, stride=2, padding=1, dtype=dtype)
                       for i in range(5)]
        self.input_hw = input_hw
        self.frozen = False

    @property
    def out_channels(self) -> int:
        return self.stages[-1].weight.shape[0]

    def freeze(self) -> None:
        self.frozen = True
        for name, t in self.named_parameters():
            if "bias" not in name:
                t.requires_grad = False

    def unfreeze(self) -> None:
        self.frozen = False
        for _, t in self.named_parameters():
            t.requires_grad = True

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-2:] != (self.input_hw, self.input_hw) or x.shape[-3] != 3:
            raise ShapeError(
                f"TinyConvEncoder: expected (..., 3, {self.input_hw}, {self.input_hw}), got {x.shape}")
        for conv in self.stages:
            x = silu(conv(x))
        return x


class DeconvDecoder(Module):
    """Five stride-2 transposed convolutions back to a 3-channel image."""

    def __init__(self, in_channels: int, channels: Sequence[int],
                 rng: np.random.Generator, dtype=np.float32) -> None:
        chain = [in_channels, *channels, 3]
        self.stages = [ConvTranspose2d(chain[i], chain[i + 1], 4, rng, stride=2, padding=1, dtype=dtype)
                       for i in range(5)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, deconv in enumerate(self.stages):
            x = deconv(x)
            if i + 1 < len(self.stages):
                x = silu(x)
        return x


class ClassifierHead(Module):
    """Global average pool over the spatial grid, then a linear map."""

    def __init__(self, in_channels: int, num_classes: int,
                 rng: np.random.Generator, dtype=np.float32) -> None:
        self.fc = Linear(in_channels, num_classes, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        pooled = mean_axes(x, (-2, -1))
        return self.fc(pooled)


# ----------------------------------------------------------------------
# full model
# ----------------------------------------------------------------------

class USKTModel(Module):
    """Adapter + encoder + decoder + classifier, built from one seed."""

    def __init__(self, cfg: USKTConfig, seed: int = 0, dtype=np.float32) -> None:
        rng = np.random.default_rng([seed, 0xA])
        self.adapter = build_adapter(cfg, rng, dtype)
        self.encoder = TinyConvEncoder(cfg.encoder_channels, cfg.input_hw, rng, dtype)
        self.decoder = DeconvDecoder(self.encoder.out_channels, cfg.decoder_channels, rng, dtype)
        self.head = ClassifierHead(self.encoder.out_channels, cfg.num_classes, rng, dtype)
        self.cfg = cfg

    def forward(self, x: Tensor) -> dict[str, Tensor]:
        x_adapted = self.adapter(x)
        x_enc = self.encoder(x_adapted)
        return {
            "x_uskt": x_adapted,
            "x_enc": x_enc,
            "logits": self.head(x_enc),
            "x_rec": self.decoder(x_enc),
        }

    def __call__(self, x: Tensor) -> dict[str, Tensor]:
        return self.forward(x)

    def set_frozen(self, frozen: bool) -> None:
        if frozen:
            self.encoder.freeze()
        else:
            self.encoder.unfreeze()


def mini_config(**overrides) -> USKTConfig:
    """Miniature configuration used for end-to-end gradient verification."""
    base = dict(in_bins=2, down_channels=(4, 8, 8, 8), ssm_layers=1,
                state_size=2, input_hw=32, num_classes=3,
                encoder_channels=(4, 4, 8, 8, 8), decoder_channels=(4, 4, 4, 4))
    base.update(overrides)
    return USKTConfig(**base)
