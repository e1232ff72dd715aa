"""Content encoder, style affines, and the AdaIN-modulated decoder.

The decoder follows StyleGAN's synthesis blocks with three changes: there
is no mapping network, the learned constant input is replaced by the
content feature map from the encoder, and per-layer noise is dropped.
"""

from __future__ import annotations

from typing import List, NamedTuple, Optional, Sequence, Union

import torch
from torch import nn
import torch.nn.functional as F

from .dataset import GlyphImage, to_storage_space
from .errors import ChannelMismatch, EmptyList, ShapeMismatch
from .separator import (
    LRELU_SLOPE,
    StyleSeparator,
    channel_schedule,
    conv_tower,
    init_conv,
    images_to_tensor,
    n_stages,
)


class AdaINParams(NamedTuple):
    scale: torch.Tensor  # (N, C) or (C,)
    bias: torch.Tensor


def adain(x: torch.Tensor, params: AdaINParams, eps: float = 1e-5) -> torch.Tensor:
    """scale * (x - mean) / (std + eps) + bias, statistics per sample and channel.

    ``std`` is the population standard deviation over the spatial axes.
    """
    scale, bias = params
    if scale.shape[-1] != x.shape[1] or bias.shape[-1] != x.shape[1]:
        raise ChannelMismatch(f"AdaIN params have {scale.shape[-1]} channels, feature map has {x.shape[1]}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = (x - mean).pow(2).mean(dim=(2, 3), keepdim=True)
    # clamp keeps sqrt differentiable for constant channels; inert for var >= 1e-12
    std = var.clamp_min(1e-12).sqrt()
    if scale.dim() == 1:
        scale, bias = scale[None], bias[None]
    return scale[:, :, None, None] * (x - mean) / (std + eps) + bias[:, :, None, None]


class ContentEncoder(nn.Module):
    def __init__(self, resolution: int = 128, base_channels: int = 32, max_channels: int = 512):
        super().__init__()
        self.resolution = resolution
        self.channels = channel_schedule(n_stages(resolution), base_channels, max_channels)
        self.tower = conv_tower(1, self.channels)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or tuple(x.shape[1:]) != (1, self.resolution, self.resolution):
            raise ShapeMismatch(f"expected (N, 1, {self.resolution}, {self.resolution}), got {tuple(x.shape)}")
        return self.tower(x)


def decoder_channels(encoder_channels: Sequence[int]) -> List[int]:
    """Output channels of each up-stage, mirroring the encoder."""
    rev = list(reversed(encoder_channels))
    return rev[1:] + [encoder_channels[0]]


class StyleAffines(nn.Module):
    """One learned affine per decoder layer, StyleFeature -> (scale, bias).

    Scale is produced as ``1 + raw`` so zeroed weights give identity modulation.
    """

    def __init__(self, style_dim: int, layer_channels: Sequence[int], zero_init: bool = False):
        super().__init__()
        self.style_dim = style_dim
        self.layer_channels = list(layer_channels)
        self.layers = nn.ModuleList(nn.Linear(style_dim, 2 * c) for c in layer_channels)
        for lin in self.layers:
            nn.init.zeros_(lin.bias)
            if zero_init:
                nn.init.zeros_(lin.weight)

    def forward(self, style: torch.Tensor) -> List[AdaINParams]:
        if style.shape[-1] != self.style_dim:
            raise ShapeMismatch(f"style feature has {style.shape[-1]} dims, expected {self.style_dim}")
        out = []
        for lin, c in zip(self.layers, self.layer_channels):
            raw = lin(style)
            out.append(AdaINParams(1.0 + raw[..., :c], raw[..., c:]))
        return out


class UpBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = init_conv(nn.Conv2d(in_ch, out_ch, 3, padding=1))
        self.conv2 = init_conv(nn.Conv2d(out_ch, out_ch, 3, padding=1))

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.leaky_relu(self.conv1(x), LRELU_SLOPE)
        return F.leaky_relu(self.conv2(x), LRELU_SLOPE)


class StyleDecoder(nn.Module):
    def __init__(self, encoder_channels: Sequence[int], eps: float = 1e-5):
        super().__init__()
        self.in_channels = encoder_channels[-1]
        self.layer_channels = decoder_channels(encoder_channels)
        self.eps = eps
        prev = self.in_channels
        blocks = []
        for ch in self.layer_channels:
            blocks.append(UpBlock(prev, ch))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.to_image = nn.Conv2d(prev, 1, 1)

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def forward(self, content: torch.Tensor, affines: Sequence[AdaINParams]) -> torch.Tensor:
        if len(affines) != self.n_layers:
            raise ShapeMismatch(f"decoder has {self.n_layers} layers, got {len(affines)} affines")
        if content.shape[1] != self.in_channels:
            raise ShapeMismatch(f"content map has {content.shape[1]} channels, expected {self.in_channels}")
        x = content
        for block, params in zip(self.blocks, affines):
            x = adain(block(x), params, self.eps)
        return torch.tanh(self.to_image(x))


class PlainDecoder(nn.Module):
    """Ablation decoder: style concatenated once at the bottleneck, no AdaIN."""

    def __init__(self, encoder_channels: Sequence[int], style_dim: int):
        super().__init__()
        self.in_channels = encoder_channels[-1]
        self.style_dim = style_dim
        self.layer_channels = decoder_channels(encoder_channels)
        prev = self.in_channels + style_dim
        blocks = []
        for ch in self.layer_channels:
            blocks.append(UpBlock(prev, ch))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.to_image = nn.Conv2d(prev, 1, 1)

    def forward(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        s = style[:, :, None, None].expand(-1, -1, content.shape[2], content.shape[3])
        x = torch.cat([content, s], dim=1)
        for block in self.blocks:
            x = block(x)
        return torch.tanh(self.to_image(x))


class ClassStyleEncoder(nn.Module):
    """Jointly trained style encoder for the no-separator ablation.

    Same tower as the separator but no metric head; it only ever sees
    generator losses and is averaged over the k references.
    """

    def __init__(self, resolution: int = 128, style_dim: int = 256, base_channels: int = 32, max_channels: int = 256):
        super().__init__()
        self.resolution = resolution
        self.style_dim = style_dim
        self.tower = conv_tower(1, channel_schedule(n_stages(resolution), base_channels, max_channels, last=style_dim))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.tower(x).mean(dim=(2, 3))


class Generator(nn.Module):
    """Encoder + decoder (+ affines for the AdaIN decoder)."""

    def __init__(self, resolution: int = 128, style_dim: int = 256, base_channels: int = 32, max_channels: int = 512, plain_decoder: bool = False, zero_init_affines: bool = False):
        super().__init__()
        self.resolution = resolution
        self.style_dim = style_dim
        self.encoder = ContentEncoder(resolution, base_channels, max_channels)
        if plain_decoder:
            self.affines = None
            self.decoder = PlainDecoder(self.encoder.channels, style_dim)
        else:
            self.decoder = StyleDecoder(self.encoder.channels)
            self.affines = StyleAffines(style_dim, self.decoder.layer_channels, zero_init=zero_init_affines)

    @property
    def uses_adain(self) -> bool:
        return self.affines is not None

    def encode_content(self, source: torch.Tensor) -> torch.Tensor:
        return self.encoder(source)

    def style_affines(self, style: torch.Tensor) -> List[AdaINParams]:
        if self.affines is None:
            raise ShapeMismatch("plain decoder has no style affines")
        return self.affines(style)

    def decode(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        if self.affines is None:
            return self.decoder(content, style)
        return self.decoder(content, self.affines(style))

    def forward(self, source: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode_content(source), style)


StyleEncoder = Union[StyleSeparator, ClassStyleEncoder]


def reference_style(style_encoder: StyleEncoder, references: torch.Tensor) -> torch.Tensor:
    """Mean style feature over k references; ``references`` is (N, k, 1, H, W)."""
    if references.dim() != 5:
        raise ShapeMismatch(f"references must be (N, k, 1, H, W), got {tuple(references.shape)}")
    n, k = references.shape[:2]
    if k == 0:
        raise EmptyList("no reference images")
    feats = style_encoder.features(references.reshape(n * k, *references.shape[2:]))
    return feats.view(n, k, -1).mean(dim=1)


def synthesize(source: GlyphImage, references: Sequence[GlyphImage], generator: Generator, style_encoder: StyleEncoder) -> GlyphImage:
    """Render ``source``'s character in the style of ``references``."""
    if not references:
        raise EmptyList("synthesize needs at least one reference")
    dtype = next(generator.parameters()).dtype
    for ref in references:
        if ref.resolution != generator.resolution:
            raise ShapeMismatch(f"reference at {ref.resolution}px, generator expects {generator.resolution}px")
    src = images_to_tensor(source, dtype)
    refs = images_to_tensor(list(references), dtype)[None]
    with torch.no_grad():
        y = generator(src, reference_style(style_encoder, refs))
    pixels = to_storage_space(y[0, 0].numpy()).astype("float32")
    return GlyphImage(pixels=pixels, font_id=references[0].font_id, char_id=source.char_id)
