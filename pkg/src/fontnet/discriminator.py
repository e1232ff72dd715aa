"""Multi-task discriminator: one real/fake logit per font class and per character class."""

from __future__ import annotations

from typing import NamedTuple, Sequence, Tuple, Union

import torch
from torch import nn
import torch.nn.functional as F

from .errors import IndexOutOfRange, ShapeMismatch
from .separator import LRELU_SLOPE, channel_schedule, conv_tower, n_stages


class MultiTaskLogits(NamedTuple):
    style_logits: torch.Tensor  # (N, n_fonts)
    content_logits: torch.Tensor  # (N, n_chars)


class Discriminator(nn.Module):
    def __init__(self, n_style_classes: int, n_content_classes: int, resolution: int = 128, base_channels: int = 32, max_channels: int = 512, hidden: int = 256):
        super().__init__()
        if n_style_classes < 1 or n_content_classes < 1:
            raise ShapeMismatch("discriminator needs at least one class per head")
        self.resolution = resolution
        self.n_style_classes = n_style_classes
        self.n_content_classes = n_content_classes
        chans = channel_schedule(n_stages(resolution), base_channels, max_channels)
        self.trunk = conv_tower(1, chans)
        self.fc = nn.Linear(chans[-1] * 16, hidden)
        self.style_head = nn.Linear(hidden, n_style_classes)
        self.content_head = nn.Linear(hidden, n_content_classes)

    def forward(self, x: torch.Tensor) -> MultiTaskLogits:
        if x.dim() != 4 or tuple(x.shape[1:]) != (1, self.resolution, self.resolution):
            raise ShapeMismatch(f"expected (N, 1, {self.resolution}, {self.resolution}), got {tuple(x.shape)}")
        h = F.leaky_relu(self.fc(self.trunk(x).flatten(1)), LRELU_SLOPE)
        return MultiTaskLogits(self.style_head(h), self.content_head(h))


def discriminate(image: torch.Tensor, discriminator: Discriminator) -> MultiTaskLogits:
    return discriminator(image)


def select_logits(logits: MultiTaskLogits, font_id: Union[int, Sequence[int], torch.Tensor], char_id: Union[int, Sequence[int], torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    """True-class logits. Accepts a single (unbatched) logit pair or a batch."""
    style, content = logits
    single = style.dim() == 1
    if single:
        style, content = style[None], content[None]
    f = torch.as_tensor(font_id, dtype=torch.long).reshape(-1)
    c = torch.as_tensor(char_id, dtype=torch.long).reshape(-1)
    if f.numel() != style.shape[0] or c.numel() != content.shape[0]:
        raise ShapeMismatch("one font_id and one char_id per sample required")
    if (f < 0).any() or (f >= style.shape[1]).any():
        raise IndexOutOfRange(f"font index out of range [0, {style.shape[1]})")
    if (c < 0).any() or (c >= content.shape[1]).any():
        raise IndexOutOfRange(f"char index out of range [0, {content.shape[1]})")
    s = style.gather(1, f[:, None])[:, 0]
    t = content.gather(1, c[:, None])[:, 0]
    if single:
        return s[0], t[0]
    return s, t
