"""Style separator network.

A stride-2 convolutional tower reduces the glyph to 4x4, global average
pooling gives the style feature (fed to the generator's AdaIN affines) and a
linear head followed by L2 normalization gives the metric embedding used by
the triplet losses.
"""

from __future__ import annotations

import math
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .dataset import GlyphImage, to_model_space
from .errors import EmptyList, ShapeMismatch

LRELU_SLOPE = 0.2


def n_stages(resolution: int, base: int = 4) -> int:
    stages = int(round(math.log2(resolution / base)))
    if base * 2**stages != resolution or stages < 1:
        raise ShapeMismatch(f"resolution {resolution} must be {base} times a power of two")
    return stages


def channel_schedule(stages: int, base_channels: int, max_channels: int, last: int = None) -> List[int]:
    chans = [min(base_channels * 2**i, max_channels) for i in range(stages)]
    if last is not None:
        chans[-1] = last
    return chans


def init_conv(conv: nn.Conv2d) -> nn.Conv2d:
    """He init for leaky ReLU so activations keep unit scale through depth."""
    nn.init.kaiming_normal_(conv.weight, a=LRELU_SLOPE, nonlinearity="leaky_relu")
    nn.init.zeros_(conv.bias)
    return conv


def conv_tower(in_channels: int, channels: Sequence[int]) -> nn.Sequential:
    """Stride-2 3x3 conv stages, each followed by a 3x3 conv, leaky ReLU throughout."""
    layers: List[nn.Module] = []
    prev = in_channels
    for ch in channels:
        layers += [
            init_conv(nn.Conv2d(prev, ch, 3, stride=2, padding=1)),
            nn.LeakyReLU(LRELU_SLOPE),
            init_conv(nn.Conv2d(ch, ch, 3, padding=1)),
            nn.LeakyReLU(LRELU_SLOPE),
        ]
        prev = ch
    return nn.Sequential(*layers)


class StyleSeparator(nn.Module):
    def __init__(self, resolution: int = 128, style_dim: int = 256, embedding_dim: int = 128, base_channels: int = 32, max_channels: int = 256):
        super().__init__()
        self.resolution = resolution
        self.style_dim = style_dim
        self.embedding_dim = embedding_dim
        chans = channel_schedule(n_stages(resolution), base_channels, max_channels, last=style_dim)
        self.tower = conv_tower(1, chans)
        self.head = nn.Linear(style_dim, embedding_dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        _check_image_batch(x, self.resolution)
        return self.tower(x).mean(dim=(2, 3))

    def embed_features(self, feature: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.head(feature), dim=1, eps=1e-12)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return ``(embedding, style_feature)`` for a batch of (N, 1, H, W) images."""
        feature = self.features(x)
        return self.embed_features(feature), feature

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self(x)[0]


def _check_image_batch(x: torch.Tensor, resolution: int) -> None:
    if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != resolution or x.shape[3] != resolution:
        raise ShapeMismatch(f"expected (N, 1, {resolution}, {resolution}) images, got {tuple(x.shape)}")


def images_to_tensor(images: Union[GlyphImage, Sequence[GlyphImage]], dtype=torch.float32) -> torch.Tensor:
    """Stack glyphs into an (N, 1, H, W) model-space tensor."""
    if isinstance(images, GlyphImage):
        images = [images]
    if not images:
        raise EmptyList("no images given")
    arr = to_model_space(np.stack([im.pixels for im in images])[:, None])
    return torch.as_tensor(arr, dtype=dtype)


def encode_style(image: Union[GlyphImage, torch.Tensor], separator: StyleSeparator) -> Tuple[torch.Tensor, torch.Tensor]:
    x = image if isinstance(image, torch.Tensor) else images_to_tensor(image, dtype=next(separator.parameters()).dtype)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    return separator(x)


def mean_style_feature(features: Union[Sequence[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """Elementwise mean over the reference axis (dim 0)."""
    if isinstance(features, torch.Tensor):
        if features.shape[0] == 0:
            raise EmptyList("no style features to average")
        return features.mean(dim=0)
    if len(features) == 0:
        raise EmptyList("no style features to average")
    dims = {tuple(f.shape) for f in features}
    if len(dims) != 1:
        raise ShapeMismatch(f"style features differ in shape: {sorted(dims)}")
    return torch.stack(list(features)).mean(dim=0)
