"""Glyph rendering, corpus registries, splits and batch sampling.

Pixels are stored in [0, 1] with 1.0 = background and 0.0 = full ink.
Models consume ``to_model_space(pixels)`` which maps to [-1, 1].

Three kinds of font source are supported:

* :class:`SyntheticFont` draws a fixed pseudo-alphabet of stroke-composed
  characters with a signed-distance renderer. Output depends only on the
  style parameters, the seed and the resolution.
* :class:`TrueTypeFont` rasterizes a scalable font file through Pillow.
* :class:`PreRenderedFont` reads ``<root>/<font_name>/<codepoint>.png``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .errors import (
    BadResolution,
    ConfigError,
    InsufficientItems,
    InvalidFraction,
    MissingEmbedding,
    MissingGlyph,
    ParamOutOfRange,
)

MIN_RESOLUTION = 32
DEFAULT_RESOLUTION = 128
SYNTHETIC_CODEPOINT_BASE = 0xE000  # private use area
N_PSEUDO_CHARS = 40


@dataclass(frozen=True, eq=False)
class GlyphImage:
    pixels: np.ndarray  # (H, W) float32 in [0, 1]
    font_id: int
    char_id: int

    @property
    def key(self) -> Tuple[int, int]:
        return (self.font_id, self.char_id)

    @property
    def resolution(self) -> int:
        return int(self.pixels.shape[0])


def to_model_space(pixels: np.ndarray) -> np.ndarray:
    return pixels * 2.0 - 1.0


def to_storage_space(values: np.ndarray) -> np.ndarray:
    return np.clip((values + 1.0) * 0.5, 0.0, 1.0)


def _check_resolution(resolution: int) -> int:
    if int(resolution) != resolution or resolution < MIN_RESOLUTION:
        raise BadResolution(f"resolution must be an integer >= {MIN_RESOLUTION}, got {resolution}")
    return int(resolution)


# ---------------------------------------------------------------------------
# Synthetic fonts


@dataclass(frozen=True)
class SyntheticStyleParams:
    stroke_thickness: float = 0.5
    slant: float = 0.0
    serif_length: float = 0.0
    corner_roundness: float = 0.0
    contrast: float = 0.0

    def validate(self) -> "SyntheticStyleParams":
        checks = [
            ("stroke_thickness", 0.0 < self.stroke_thickness <= 1.0),
            ("slant", -0.5 <= self.slant <= 0.5),
            ("serif_length", self.serif_length >= 0.0 and math.isfinite(self.serif_length)),
            ("corner_roundness", 0.0 <= self.corner_roundness <= 1.0),
            ("contrast", 0.0 <= self.contrast <= 1.0),
        ]
        for name, ok in checks:
            if not ok:
                raise ParamOutOfRange(f"{name}={getattr(self, name)!r} is out of range")
        return self

    def as_dict(self) -> Dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


# 3x3 anchor lattice in glyph-box coordinates (x right, y down).
_LATTICE = [(float(c), float(r)) for r in range(3) for c in range(3)]


def _lattice_edges() -> List[Tuple[int, int]]:
    edges = []
    for i in range(9):
        for j in range(i + 1, 9):
            (xi, yi), (xj, yj) = _LATTICE[i], _LATTICE[j]
            dx, dy = abs(xi - xj), abs(yi - yj)
            adjacent = max(dx, dy) == 1
            straight_long = (dx == 0 and dy == 2) or (dy == 0 and dx == 2)
            if adjacent or straight_long:
                edges.append((i, j))
    return edges


def _build_pseudo_alphabet(n_chars: int = N_PSEUDO_CHARS, seed: int = 1729):
    """Fixed list of characters, each a tuple of (start, end, bow_sign) strokes."""
    rng = np.random.default_rng(seed)
    edges = _lattice_edges()
    seen = set()
    alphabet = []
    while len(alphabet) < n_chars:
        n_strokes = int(rng.integers(2, 6))
        picks = rng.choice(len(edges), size=n_strokes, replace=False)
        key = frozenset(int(p) for p in picks)
        if key in seen:
            continue
        seen.add(key)
        total = sum(math.dist(_LATTICE[edges[p][0]], _LATTICE[edges[p][1]]) for p in picks)
        if total < 3.5:
            continue
        signs = rng.choice([-1, 1], size=n_strokes)
        alphabet.append(tuple((edges[p][0], edges[p][1], int(s)) for p, s in zip(sorted(key), signs)))
    return tuple(alphabet)


PSEUDO_ALPHABET = _build_pseudo_alphabet()

_BOX_LO, _BOX_HI = 0.14, 0.86
_BOW_SUBDIV = 8
_PEN_ANGLE = math.pi / 6


def _segment_sdf(px, py, a, b, half_width, roundness):
    """Blend of a capsule (round caps) and a box (square caps) distance field."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    length = math.hypot(dx, dy)
    if length < 1e-12:
        ux, uy = 1.0, 0.0
    else:
        ux, uy = dx / length, dy / length
    rx, ry = px - ax, py - ay
    u = rx * ux + ry * uy
    v = -rx * uy + ry * ux
    along = np.clip(u, 0.0, length)
    capsule = np.sqrt((u - along) ** 2 + v**2) - half_width
    qx = np.abs(u - 0.5 * length) - (0.5 * length + half_width)
    qy = np.abs(v) - half_width
    outside = np.sqrt(np.maximum(qx, 0.0) ** 2 + np.maximum(qy, 0.0) ** 2)
    box = outside + np.minimum(np.maximum(qx, qy), 0.0)
    return roundness * capsule + (1.0 - roundness) * box


class FontSource:
    """Anything that can rasterize characters keyed by codepoint."""

    name: str

    def codepoints(self) -> List[int]:
        raise NotImplementedError

    def has_char(self, codepoint: int) -> bool:
        return codepoint in set(self.codepoints())

    def rasterize(self, codepoint: int, resolution: int) -> np.ndarray:
        raise NotImplementedError


class SyntheticFont(FontSource):
    """Parametric stroke font over :data:`PSEUDO_ALPHABET`.

    ``seed`` perturbs the lattice anchors slightly so two fonts sharing style
    parameters are still distinguishable.
    """

    def __init__(self, params: SyntheticStyleParams, seed: int = 0, name: Optional[str] = None):
        self.params = params.validate()
        self.seed = int(seed)
        self.name = name or f"synthetic_{self.seed}"
        rng = np.random.default_rng(self.seed)
        self._jitter = rng.uniform(-0.02, 0.02, size=(9, 2))

    def codepoints(self) -> List[int]:
        return [SYNTHETIC_CODEPOINT_BASE + i for i in range(len(PSEUDO_ALPHABET))]

    def has_char(self, codepoint: int) -> bool:
        return 0 <= codepoint - SYNTHETIC_CODEPOINT_BASE < len(PSEUDO_ALPHABET)

    def _anchor(self, index: int) -> Tuple[float, float]:
        col, row = _LATTICE[index]
        span = _BOX_HI - _BOX_LO
        x = _BOX_LO + span * col / 2.0 + self._jitter[index, 0]
        y = _BOX_LO + span * row / 2.0 + self._jitter[index, 1]
        return x, y

    def _shear(self, x: float, y: float) -> Tuple[float, float]:
        return x + math.tan(self.params.slant) * (0.5 - y), y

    def segments(self, codepoint: int):
        """Yield (a, b, half_width) line pieces in unit image coordinates."""
        if not self.has_char(codepoint):
            raise MissingGlyph(f"{self.name} has no glyph U+{codepoint:04X}")
        p = self.params
        strokes = PSEUDO_ALPHABET[codepoint - SYNTHETIC_CODEPOINT_BASE]
        base_half = 0.5 * (0.05 + 0.14 * p.stroke_thickness)
        serif_half = 0.5 * (0.035 + 0.07 * p.stroke_thickness)
        # serifs always protrude past the stem they cap
        serif_len = 2.0 * base_half + p.serif_length
        out = []
        for start, end, sign in strokes:
            (ax, ay), (bx, by) = self._anchor(start), self._anchor(end)
            # bowed strokes: quadratic curve with a perpendicular control offset
            mx, my = 0.5 * (ax + bx), 0.5 * (ay + by)
            length = math.hypot(bx - ax, by - ay)
            nx, ny = -(by - ay) / length, (bx - ax) / length
            bow = sign * 0.45 * p.corner_roundness * length
            cx, cy = mx + nx * bow, my + ny * bow
            ts = np.linspace(0.0, 1.0, _BOW_SUBDIV + 1)
            pts = [
                self._shear(
                    (1 - t) ** 2 * ax + 2 * (1 - t) * t * cx + t**2 * bx,
                    (1 - t) ** 2 * ay + 2 * (1 - t) * t * cy + t**2 * by,
                )
                for t in ts
            ]
            for i, (q0, q1) in enumerate(zip(pts[:-1], pts[1:])):
                theta = math.atan2(q1[1] - q0[1], q1[0] - q0[0])
                # broad-nib contrast: thin along the pen angle, thick across it,
                # swelling toward the middle of the stroke
                thin = abs(math.cos(theta - _PEN_ANGLE))
                swell = math.sin(math.pi * (i + 0.5) / _BOW_SUBDIV)
                half = base_half * (1.0 - 0.6 * p.contrast * thin) + p.contrast * (0.15 * (1.0 - thin) + 0.045 * swell)
                out.append((q0, q1, half))
            if p.serif_length > 0:
                for (ex, ey), (fx, fy) in ((pts[0], pts[1]), (pts[-1], pts[-2])):
                    tx, ty = ex - fx, ey - fy
                    tn = math.hypot(tx, ty) or 1.0
                    sx, sy = -ty / tn * 0.5 * serif_len, tx / tn * 0.5 * serif_len
                    out.append(((ex - sx, ey - sy), (ex + sx, ey + sy), serif_half))
        return out

    def rasterize(self, codepoint: int, resolution: int) -> np.ndarray:
        resolution = _check_resolution(resolution)
        centers = (np.arange(resolution, dtype=np.float64) + 0.5) / resolution
        px, py = np.meshgrid(centers, centers)
        sdf = np.full((resolution, resolution), np.inf)
        r = self.params.corner_roundness
        for a, b, half in self.segments(codepoint):
            np.minimum(sdf, _segment_sdf(px, py, a, b, half, r), out=sdf)
        coverage = np.clip(0.5 - sdf * resolution, 0.0, 1.0)
        return (1.0 - coverage).astype(np.float32)


def generate_synthetic_font(style_params: SyntheticStyleParams, seed: int, name: Optional[str] = None) -> SyntheticFont:
    return SyntheticFont(style_params, seed=seed, name=name)


def sample_style_params(rng: np.random.Generator, n: int, min_gap: float = 0.3, max_tries: int = 10000) -> List[SyntheticStyleParams]:
    """Draw ``n`` parameter records pairwise differing by >= ``min_gap`` in some field."""
    chosen: List[np.ndarray] = []
    lo = np.array([0.1, -0.4, 0.0, 0.0, 0.0])
    hi = np.array([1.0, 0.4, 0.35, 1.0, 1.0])
    for _ in range(max_tries):
        if len(chosen) == n:
            break
        cand = rng.uniform(lo, hi)
        if all(np.max(np.abs(cand - c)) >= min_gap for c in chosen):
            chosen.append(cand)
    if len(chosen) < n:
        raise InsufficientItems(f"could not draw {n} style records with gap {min_gap}")
    return [SyntheticStyleParams(*map(float, c)) for c in chosen]


# ---------------------------------------------------------------------------
# Real fonts


class TrueTypeFont(FontSource):
    def __init__(self, path, name: Optional[str] = None, em_fraction: float = 0.8):
        from fontTools.ttLib import TTFont

        self.path = Path(path)
        self.name = name or self.path.stem
        self.em_fraction = em_fraction
        with TTFont(str(self.path), lazy=True) as tt:
            self._cmap = set(tt.getBestCmap() or {})
        self._pil_fonts: Dict[int, ImageFont.FreeTypeFont] = {}

    def codepoints(self) -> List[int]:
        return sorted(self._cmap)

    def has_char(self, codepoint: int) -> bool:
        return codepoint in self._cmap

    def rasterize(self, codepoint: int, resolution: int) -> np.ndarray:
        resolution = _check_resolution(resolution)
        if not self.has_char(codepoint):
            raise MissingGlyph(f"{self.name} has no glyph U+{codepoint:04X}")
        font = self._pil_fonts.get(resolution)
        if font is None:
            font = ImageFont.truetype(str(self.path), size=int(round(resolution * self.em_fraction)))
            self._pil_fonts[resolution] = font
        canvas = Image.new("L", (resolution, resolution), 255)
        draw = ImageDraw.Draw(canvas)
        ch = chr(codepoint)
        left, top, right, bottom = draw.textbbox((0, 0), ch, font=font)
        x = (resolution - (right - left)) / 2.0 - left
        y = (resolution - (bottom - top)) / 2.0 - top
        draw.text((x, y), ch, fill=0, font=font)
        return (np.asarray(canvas, dtype=np.float32) / 255.0)


class PreRenderedFont(FontSource):
    """One directory of ``<codepoint>.png`` files (decimal codepoints)."""

    def __init__(self, directory, name: Optional[str] = None):
        self.directory = Path(directory)
        self.name = name or self.directory.name
        self._files = {}
        for p in self.directory.glob("*.png"):
            try:
                self._files[int(p.stem)] = p
            except ValueError:
                continue

    def codepoints(self) -> List[int]:
        return sorted(self._files)

    def has_char(self, codepoint: int) -> bool:
        return codepoint in self._files

    def rasterize(self, codepoint: int, resolution: int) -> np.ndarray:
        resolution = _check_resolution(resolution)
        if codepoint not in self._files:
            raise MissingGlyph(f"{self.name} has no glyph file for codepoint {codepoint}")
        with Image.open(self._files[codepoint]) as im:
            im = im.convert("L")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.Resampling.LANCZOS)
            return np.asarray(im, dtype=np.float32) / 255.0


def render_glyph(font_source: FontSource, codepoint: int, resolution: int = DEFAULT_RESOLUTION, *, font_id: int = 0, char_id: int = 0) -> GlyphImage:
    resolution = _check_resolution(resolution)
    if not font_source.has_char(codepoint):
        raise MissingGlyph(f"{font_source.name} has no glyph {codepoint}")
    pixels = np.clip(font_source.rasterize(codepoint, resolution), 0.0, 1.0).astype(np.float32)
    pixels.setflags(write=False)
    return GlyphImage(pixels=pixels, font_id=font_id, char_id=char_id)


def save_png(pixels: np.ndarray, path) -> None:
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(str(path), format="PNG", optimize=False)


# ---------------------------------------------------------------------------
# Corpus


class GlyphCorpus:
    """Font and character registries plus a render cache.

    ``font_id`` indexes ``fonts``; ``char_id`` indexes ``codepoints``.
    """

    def __init__(self, fonts: Sequence[FontSource], codepoints: Sequence[int], resolution: int = DEFAULT_RESOLUTION):
        self.fonts = list(fonts)
        self.codepoints = [int(c) for c in codepoints]
        self.resolution = _check_resolution(resolution)
        self._cache: Dict[Tuple[int, int], GlyphImage] = {}
        if not self.fonts or not self.codepoints:
            raise InsufficientItems("corpus needs at least one font and one character")

    @property
    def n_fonts(self) -> int:
        return len(self.fonts)

    @property
    def n_chars(self) -> int:
        return len(self.codepoints)

    @property
    def font_names(self) -> List[str]:
        return [f.name for f in self.fonts]

    def glyph(self, font_id: int, char_id: int) -> GlyphImage:
        key = (int(font_id), int(char_id))
        img = self._cache.get(key)
        if img is None:
            if not (0 <= key[0] < self.n_fonts and 0 <= key[1] < self.n_chars):
                raise MissingGlyph(f"no glyph registered for font_id={key[0]}, char_id={key[1]}")
            img = render_glyph(self.fonts[key[0]], self.codepoints[key[1]], self.resolution, font_id=key[0], char_id=key[1])
            self._cache[key] = img
        return img

    def stack(self, keys: Iterable[Tuple[int, int]]) -> np.ndarray:
        """(N, 1, H, W) float32 array in model space."""
        arr = np.stack([self.glyph(f, c).pixels for f, c in keys])[:, None]
        return to_model_space(arr).astype(np.float32)

    @classmethod
    def synthetic(cls, n_fonts: int, n_chars: int = N_PSEUDO_CHARS, resolution: int = DEFAULT_RESOLUTION, seed: int = 0) -> "GlyphCorpus":
        if not 1 <= n_chars <= len(PSEUDO_ALPHABET):
            raise InsufficientItems(f"n_chars must be in [1, {len(PSEUDO_ALPHABET)}]")
        rng = np.random.default_rng(seed)
        params = sample_style_params(rng, n_fonts)
        font_seeds = rng.integers(0, 2**31 - 1, size=n_fonts)
        fonts = [generate_synthetic_font(p, int(s), name=f"synth{i:03d}") for i, (p, s) in enumerate(zip(params, font_seeds))]
        cps = [SYNTHETIC_CODEPOINT_BASE + i for i in range(n_chars)]
        return cls(fonts, cps, resolution)

    @classmethod
    def from_directory(cls, root, resolution: int = DEFAULT_RESOLUTION) -> "GlyphCorpus":
        """Load the pre-rendered layout; characters are those every font provides."""
        root = Path(root)
        dirs = sorted(p for p in root.iterdir() if p.is_dir())
        fonts = [PreRenderedFont(d) for d in dirs]
        if not fonts:
            raise InsufficientItems(f"no font directories under {root}")
        common = set(fonts[0].codepoints())
        for f in fonts[1:]:
            common &= set(f.codepoints())
        return cls(fonts, sorted(common), resolution)

    @classmethod
    def from_font_files(cls, paths: Sequence, codepoints: Sequence[int], resolution: int = DEFAULT_RESOLUTION) -> "GlyphCorpus":
        fonts = [TrueTypeFont(p) for p in paths]
        for f in fonts:
            missing = [c for c in codepoints if not f.has_char(c)]
            if missing:
                raise MissingGlyph(f"{f.name} lacks {len(missing)} requested characters, e.g. U+{missing[0]:04X}")
        return cls(fonts, codepoints, resolution)

    def write_directory(self, root) -> List[Path]:
        """Export every glyph to the pre-rendered layout."""
        root = Path(root)
        written = []
        for fid, font in enumerate(self.fonts):
            fdir = root / font.name
            fdir.mkdir(parents=True, exist_ok=True)
            for cid, cp in enumerate(self.codepoints):
                path = fdir / f"{cp}.png"
                save_png(self.glyph(fid, cid).pixels, path)
                written.append(path)
        return written


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class DatasetSplit:
    train_fonts: Tuple[int, ...]
    test_fonts: Tuple[int, ...]
    train_chars: Tuple[int, ...]
    test_chars: Tuple[int, ...]
    seed: int = 0

    def to_json(self) -> Dict:
        return {
            "train_fonts": list(self.train_fonts),
            "test_fonts": list(self.test_fonts),
            "train_chars": list(self.train_chars),
            "test_chars": list(self.test_chars),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: Dict) -> "DatasetSplit":
        keys = {"train_fonts", "test_fonts", "train_chars", "test_chars", "seed"}
        if set(data) != keys:
            raise ConfigError(f"split manifest must have exactly the keys {sorted(keys)}")
        split = cls(
            tuple(int(x) for x in data["train_fonts"]),
            tuple(int(x) for x in data["test_fonts"]),
            tuple(int(x) for x in data["train_chars"]),
            tuple(int(x) for x in data["test_chars"]),
            int(data["seed"]),
        )
        if set(split.train_fonts) & set(split.test_fonts) or set(split.train_chars) & set(split.test_chars):
            raise ConfigError("split manifest sets overlap")
        return split

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        return cls.from_json(json.loads(Path(path).read_text()))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def build_split(n_fonts: int, font_train_frac: float, char_ids: Sequence[int], n_train_chars: int, seed: int) -> DatasetSplit:
    if not 0.0 < font_train_frac < 1.0:
        raise InvalidFraction(f"font_train_frac must be in (0, 1), got {font_train_frac}")
    char_ids = list(char_ids)
    n_train_fonts = round_half_up(font_train_frac * n_fonts)
    if n_train_fonts < 1 or n_train_fonts >= n_fonts:
        raise InsufficientItems(f"{n_fonts} fonts cannot be split with fraction {font_train_frac}")
    if not 0 < n_train_chars < len(char_ids):
        raise InsufficientItems(f"n_train_chars must be in (0, {len(char_ids)}), got {n_train_chars}")
    rng = np.random.default_rng(seed)
    font_perm = rng.permutation(n_fonts)
    char_perm = rng.permutation(len(char_ids))
    chars = [char_ids[i] for i in char_perm]
    return DatasetSplit(
        train_fonts=tuple(sorted(int(f) for f in font_perm[:n_train_fonts])),
        test_fonts=tuple(sorted(int(f) for f in font_perm[n_train_fonts:])),
        train_chars=tuple(sorted(chars[:n_train_chars])),
        test_chars=tuple(sorted(chars[n_train_chars:])),
        seed=int(seed),
    )


def all_fonts_split(n_fonts: int, char_ids: Sequence[int], n_train_chars: int, seed: int) -> DatasetSplit:
    """Every font trains; only characters are held out. Used for overfit runs."""
    if n_fonts < 1:
        raise InsufficientItems("need at least one font")
    chars = build_split(2, 0.5, char_ids, n_train_chars, seed)
    return DatasetSplit(tuple(range(n_fonts)), (), chars.train_chars, chars.test_chars, int(seed))


# ---------------------------------------------------------------------------
# Triplets and batches


@dataclass(frozen=True)
class Triplet:
    anchor: GlyphImage
    positive: GlyphImage
    negative: GlyphImage

    def keys(self):
        return self.anchor.key, self.positive.key, self.negative.key


def is_valid_triplet(anchor: Tuple[int, int], positive: Tuple[int, int], negative: Tuple[int, int]) -> bool:
    return anchor[0] == positive[0] and anchor[1] != positive[1] and negative[1] == anchor[1] and negative[0] != anchor[0]


def sample_triplet_keys(split: DatasetSplit, rng: np.random.Generator):
    fonts, chars = split.train_fonts, split.train_chars
    if len(fonts) < 2 or len(chars) < 2:
        raise InsufficientItems("triplets need >= 2 train fonts and >= 2 train chars")
    fa, fn = rng.choice(len(fonts), size=2, replace=False)
    ca, cp = rng.choice(len(chars), size=2, replace=False)
    anchor = (fonts[fa], chars[ca])
    return anchor, (fonts[fa], chars[cp]), (fonts[fn], chars[ca])


def sample_triplet(corpus: GlyphCorpus, split: DatasetSplit, rng: np.random.Generator) -> Triplet:
    a, p, n = sample_triplet_keys(split, rng)
    return Triplet(corpus.glyph(*a), corpus.glyph(*p), corpus.glyph(*n))


def mine_hard_triplets(triplets: Sequence[Triplet], embeddings_by_image: Dict[Tuple[int, int], np.ndarray]) -> List[Triplet]:
    """Keep triplets whose negative sits closer to the anchor than the positive.

    If none qualify, the single triplet with the largest
    ``d(a, p) - d(a, n)`` is returned so a training step never starves.
    """
    if not triplets:
        return []
    margins = []
    for t in triplets:
        try:
            fa, fp, fn = (np.asarray(embeddings_by_image[k], dtype=np.float64) for k in t.keys())
        except KeyError as exc:
            raise MissingEmbedding(f"no embedding for image {exc.args[0]}") from None
        d_ap = float(np.sum((fa - fp) ** 2))
        d_an = float(np.sum((fa - fn) ** 2))
        margins.append((d_an < d_ap, d_ap - d_an))
    kept = [t for t, (hard, _) in zip(triplets, margins) if hard]
    if kept:
        return kept
    best = max(range(len(triplets)), key=lambda i: margins[i][1])
    return [triplets[best]]


@dataclass
class GeneratorBatch:
    sources: List[GlyphImage]
    references: List[List[GlyphImage]]
    ground_truths: List[GlyphImage]
    target_font_ids: List[int] = field(default_factory=list)
    target_char_ids: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sources)


def choose_reference_chars(chars: Sequence[int], target_char: int, k: int, rng: np.random.Generator) -> List[int]:
    """k distinct characters other than the target, reusing only when the pool is too small."""
    pool = [c for c in chars if c != target_char]
    if len(pool) >= k:
        idx = rng.choice(len(pool), size=k, replace=False)
        return [pool[i] for i in idx]
    extra = rng.choice(len(chars), size=k - len(pool), replace=True)
    return pool + [chars[i] for i in extra]


def assemble_generator_batch(corpus: GlyphCorpus, split: DatasetSplit, batch_size: int, k_references: int, content_font_id: int, rng: np.random.Generator) -> GeneratorBatch:
    if content_font_id not in split.train_fonts:
        raise InsufficientItems(f"content font {content_font_id} is not a train font")
    if k_references < 1 or batch_size < 1:
        raise InsufficientItems("batch_size and k_references must be >= 1")
    chars = list(split.train_chars)
    if not chars:
        raise InsufficientItems("no train characters")
    targets = [f for f in split.train_fonts if f != content_font_id] or [content_font_id]
    batch = GeneratorBatch([], [], [])
    for _ in range(batch_size):
        tf = targets[int(rng.integers(len(targets)))]
        tc = chars[int(rng.integers(len(chars)))]
        refs = choose_reference_chars(chars, tc, k_references, rng)
        batch.sources.append(corpus.glyph(content_font_id, tc))
        batch.references.append([corpus.glyph(tf, c) for c in refs])
        batch.ground_truths.append(corpus.glyph(tf, tc))
        batch.target_font_ids.append(tf)
        batch.target_char_ids.append(tc)
    return batch
