"""Few-shot font synthesis: style separator, AdaIN generator, multi-task discriminator."""

from .dataset import GlyphCorpus, GlyphImage, SyntheticStyleParams, build_split, generate_synthetic_font, render_glyph
from .generator import Generator, adain, synthesize
from .separator import StyleSeparator, encode_style
from .trainer import TrainConfig, TrainState, train

__version__ = "0.1.0"

__all__ = [
    "GlyphCorpus",
    "GlyphImage",
    "SyntheticStyleParams",
    "build_split",
    "generate_synthetic_font",
    "render_glyph",
    "Generator",
    "adain",
    "synthesize",
    "StyleSeparator",
    "encode_style",
    "TrainConfig",
    "TrainState",
    "train",
]
