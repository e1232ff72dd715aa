"""Metrics and the seen/unseen evaluation protocol.

FID features come from small classifiers trained here on real glyphs of
the corpus (one over characters, one over fonts), not from a pretrained
backbone. mFID(C) groups samples by character, mFID(S) by font.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from scipy.signal import convolve2d

from . import dataset as ds
from .errors import (
    DimMismatch,
    EmptyInput,
    InsufficientClasses,
    InsufficientSamples,
    LabelOutOfRange,
    NotPSD,
    ShapeMismatch,
    TooSmall,
)
from .separator import LRELU_SLOPE

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


# ---------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


_WINDOW = gaussian_window()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatch(f"ssim needs two equal 2-D arrays, got {a.shape} and {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise TooSmall(f"images must be at least {SSIM_WINDOW}px per side")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(x):
        return convolve2d(x, _WINDOW, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Classifiers


class EvalClassifier(nn.Module):
    def __init__(self, n_classes: int, label_kind: str, resolution: int, feature_dim: int = 64, base_channels: int = 16):
        super().__init__()
        if label_kind not in ("content", "style"):
            raise ValueError(f"label_kind must be 'content' or 'style', got {label_kind!r}")
        self.label_kind = label_kind
        self.n_classes = n_classes
        self.resolution = resolution
        layers: List[nn.Module] = []
        prev, ch, size = 1, base_channels, resolution
        while size > 4:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.LeakyReLU(LRELU_SLOPE)]
            prev, ch, size = ch, min(ch * 2, 128), size // 2
        self.trunk = nn.Sequential(*layers)
        self.fc = nn.Linear(prev * size * size, feature_dim)
        self.head = nn.Linear(feature_dim, n_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate features used for FID."""
        return F.leaky_relu(self.fc(self.trunk(x).flatten(1)), LRELU_SLOPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def predict(self, x: torch.Tensor, batch: int = 256) -> np.ndarray:
        with torch.no_grad():
            return np.concatenate([self(x[i : i + batch]).argmax(1).numpy() for i in range(0, len(x), batch)])


def _augment(x: torch.Tensor, gen: torch.Generator, max_shift: int) -> torch.Tensor:
    if max_shift <= 0:
        return x
    pad = F.pad(x, (max_shift,) * 4, value=1.0)
    out = torch.empty_like(x)
    shifts = torch.randint(0, 2 * max_shift + 1, (len(x), 2), generator=gen)
    h, w = x.shape[2:]
    for i, (dy, dx) in enumerate(shifts.tolist()):
        out[i] = pad[i, :, dy : dy + h, dx : dx + w]
    return out


def train_eval_classifier(images: torch.Tensor, labels: Sequence[int], label_kind: str, seed: int = 0, n_classes: Optional[int] = None, steps: int = 600, batch_size: int = 64, lr: float = 2e-3, max_shift: int = 1, noise: float = 0.1) -> EvalClassifier:
    """Fit a classifier on model-space images (N, 1, H, W).

    Training uses small random translations and pixel noise so the
    classifier tolerates the imperfections of synthesized glyphs.
    """
    labels_t = torch.as_tensor(list(labels), dtype=torch.long)
    if len(images) == 0 or len(images) != len(labels_t):
        raise EmptyInput("need one label per image and at least one image")
    classes = int(n_classes if n_classes is not None else int(labels_t.max()) + 1)
    if len(set(labels_t.tolist())) < 2:
        raise InsufficientClasses("classifier training needs at least two classes")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        clf = EvalClassifier(classes, label_kind, images.shape[-1])
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    n = len(images)
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        x = _augment(images[idx], gen, max_shift)
        if noise > 0:
            x = x + noise * torch.randn(x.shape, generator=gen)
        loss = F.cross_entropy(clf(x), labels_t[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    clf.eval()
    return clf


def top1_accuracy(classifier: EvalClassifier, images: torch.Tensor, labels: Sequence[int]) -> float:
    labels = np.asarray(list(labels), dtype=np.int64)
    if len(images) == 0:
        raise EmptyInput("top1_accuracy needs at least one image")
    if len(labels) != len(images):
        raise ShapeMismatch("one label per image required")
    if labels.min() < 0 or labels.max() >= classifier.n_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {classifier.n_classes})")
    pred = classifier.predict(images)
    return 100.0 * float(np.sum(pred == labels)) / len(labels)


@dataclass
class OracleClassifiers:
    content: EvalClassifier
    style: EvalClassifier


def train_oracle_classifiers(corpus: ds.GlyphCorpus, seed: int = 0, fonts: Optional[Sequence[int]] = None, chars: Optional[Sequence[int]] = None, steps: int = 600) -> OracleClassifiers:
    """Content and style classifiers over real glyphs; class index = char_id / font_id."""
    fonts = list(range(corpus.n_fonts)) if fonts is None else list(fonts)
    chars = list(range(corpus.n_chars)) if chars is None else list(chars)
    keys = [(f, c) for f in fonts for c in chars]
    x = torch.from_numpy(corpus.stack(keys))
    content = train_eval_classifier(x, [c for _, c in keys], "content", seed, n_classes=corpus.n_chars, steps=steps)
    style = train_eval_classifier(x, [f for f, _ in keys], "style", seed + 1, n_classes=corpus.n_fonts, steps=steps)
    return OracleClassifiers(content, style)


# ---------------------------------------------------------------------------
# Frechet distance


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _check_psd(cov: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    w = np.linalg.eigvalsh(cov)
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    if w.size and w.min() < -tol * scale:
        raise NotPSD(f"covariance has eigenvalue {w.min():.3g} below the floor tolerance")
    return cov


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """|mu1 - mu2|^2 + Tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2)).

    The trace of the product's square root is taken as Tr((s1 cov2 s1)^(1/2))
    with s1 = cov1^(1/2), a symmetric PSD matrix whose eigenvalues are
    clipped at zero.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, np.float64)), np.atleast_2d(np.asarray(cov2, np.float64))
    d = mu1.shape[0]
    if mu2.shape != (d,) or cov1.shape != (d, d) or cov2.shape != (d, d):
        raise DimMismatch(f"inconsistent dimensions: {mu1.shape}, {cov1.shape}, {mu2.shape}, {cov2.shape}")
    cov1, cov2 = _check_psd(cov1), _check_psd(cov2)
    s1 = _psd_sqrt(cov1)
    inner = s1 @ cov2 @ s1
    eig = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_sqrt = float(np.sum(np.sqrt(np.clip(eig, 0.0, None))))
    diff = mu1 - mu2
    fd = float(diff @ diff) + float(np.trace(cov1) + np.trace(cov2)) - 2.0 * tr_sqrt
    return max(fd, 0.0)


def gaussian_fit(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise InsufficientSamples("need >= 2 feature vectors to estimate a covariance")
    return features.mean(axis=0), np.cov(features, rowvar=False, ddof=1).reshape(features.shape[1], features.shape[1])


def mfid_from_features(generated_by_class: Mapping, real_by_class: Mapping) -> float:
    """Average per-class Frechet distance between feature sets."""
    classes = sorted(generated_by_class)
    if not classes:
        raise EmptyInput("no classes given")
    if set(classes) != set(real_by_class):
        raise InsufficientSamples("generated and real samples cover different classes")
    total = 0.0
    for c in classes:
        g, r = np.asarray(generated_by_class[c]), np.asarray(real_by_class[c])
        if len(g) < 2 or len(r) < 2:
            raise InsufficientSamples(f"class {c} has fewer than 2 samples on one side")
        total += frechet_distance(*gaussian_fit(g), *gaussian_fit(r))
    return total / len(classes)


def classifier_features(classifier: EvalClassifier, images: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        return classifier.features(images).double().numpy()


def mfid(classifier: EvalClassifier, generated_by_class: Mapping[int, torch.Tensor], real_by_class: Mapping[int, torch.Tensor]) -> float:
    gen = {c: classifier_features(classifier, x) for c, x in generated_by_class.items()}
    real = {c: classifier_features(classifier, x) for c, x in real_by_class.items()}
    return mfid_from_features(gen, real)


# ---------------------------------------------------------------------------
# Protocol


@dataclass
class MetricsReport:
    split: str
    ssim: float
    mfid_content: float
    acc_content: float
    mfid_style: float
    acc_style: float
    n_samples: int = 0

    def to_json(self) -> Dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


TABLE_COLUMNS = ("SSIM", "mFID (C)", "Acc (C)", "mFID (S)", "Acc (S)")


def format_table(rows: Sequence[Tuple[str, MetricsReport]]) -> str:
    """Plain-text table with one row per (label, report)."""
    width = max([len(label) for label, _ in rows] + [8])
    lines = [" " * width + "  " + "  ".join(f"{c:>9}" for c in TABLE_COLUMNS)]
    for label, r in rows:
        vals = (f"{r.ssim:.3f}", f"{r.mfid_content:.2f}", f"{r.acc_content:.1f}", f"{r.mfid_style:.2f}", f"{r.acc_style:.1f}")
        lines.append(f"{label:<{width}}  " + "  ".join(f"{v:>9}" for v in vals))
    return "\n".join(lines) + "\n"


def reference_plan(split: ds.DatasetSplit, fonts: Sequence[int], chars: Sequence[int], k: int, seed: int = 0) -> Dict[Tuple[int, int], List[int]]:
    """Reference characters for each (font, char) evaluation item.

    Each font draws one pool of k + 1 seen characters; an item uses the first
    k pool entries that differ from its target character, so a font's
    references stay fixed up to that single swap.
    """
    plan = {}
    train_chars = list(split.train_chars)
    for f in fonts:
        rng = np.random.default_rng([seed, f])
        m = min(k + 1, len(train_chars))
        pool = [train_chars[i] for i in rng.choice(len(train_chars), size=m, replace=False)]
        for c in chars:
            refs = [p for p in pool if p != c][:k]
            while len(refs) < k:
                refs.append(pool[len(refs) % len(pool)])
            plan[(f, c)] = refs
    return plan


def generate_items(model, corpus: ds.GlyphCorpus, items: Sequence[Tuple[int, int]], plan, content_font_id: int, batch: int = 64) -> torch.Tensor:
    """Synthesized glyphs (model space) for (font, char) items."""
    outs = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(items), batch):
            chunk = items[i : i + batch]
            src = torch.from_numpy(corpus.stack([(content_font_id, c) for _, c in chunk]))
            k = len(plan[chunk[0]])
            refs = torch.from_numpy(corpus.stack([(f, r) for f, c in chunk for r in plan[(f, c)]]))
            refs = refs.view(len(chunk), k, *src.shape[1:])
            outs.append(model.synthesize(src, refs))
    model.train()
    return torch.cat(outs)


def compute_metrics(generated: torch.Tensor, real: torch.Tensor, items: Sequence[Tuple[int, int]], classifiers: OracleClassifiers, split_name: str) -> MetricsReport:
    if len(items) == 0:
        raise EmptyInput("no evaluation items")
    gen01 = ds.to_storage_space(generated[:, 0].double().numpy())
    real01 = ds.to_storage_space(real[:, 0].double().numpy())
    ssim_mean = float(np.mean([ssim(g, r) for g, r in zip(gen01, real01)]))
    fonts = np.array([f for f, _ in items])
    chars = np.array([c for _, c in items])

    def grouped(labels):
        return {int(v): torch.from_numpy(np.flatnonzero(labels == v)) for v in np.unique(labels)}

    by_char, by_font = grouped(chars), grouped(fonts)
    mfid_c = mfid(classifiers.content, {c: generated[i] for c, i in by_char.items()}, {c: real[i] for c, i in by_char.items()})
    mfid_s = mfid(classifiers.style, {f: generated[i] for f, i in by_font.items()}, {f: real[i] for f, i in by_font.items()})
    return MetricsReport(
        split=split_name,
        ssim=ssim_mean,
        mfid_content=mfid_c,
        acc_content=top1_accuracy(classifiers.content, generated, chars),
        mfid_style=mfid_s,
        acc_style=top1_accuracy(classifiers.style, generated, fonts),
        n_samples=len(items),
    )


def evaluate(model, corpus: ds.GlyphCorpus, split: ds.DatasetSplit, char_set: str, k_references: int, content_font_id: int, classifiers: OracleClassifiers, fonts: Optional[Sequence[int]] = None, seed: int = 0) -> MetricsReport:
    """Synthesize every (font, char) pair of the chosen character set from the content font.

    ``fonts`` defaults to the split's test fonts.
    """
    if char_set not in ("seen", "unseen"):
        raise ValueError(f"char_set must be 'seen' or 'unseen', got {char_set!r}")
    chars = list(split.train_chars if char_set == "seen" else split.test_chars)
    fonts = list(split.test_fonts if fonts is None else fonts)
    if not chars or not fonts:
        raise EmptyInput(f"nothing to evaluate: {len(fonts)} fonts, {len(chars)} {char_set} chars")
    items = [(f, c) for f in fonts for c in chars]
    plan = reference_plan(split, fonts, chars, k_references, seed)
    generated = generate_items(model, corpus, items, plan, content_font_id)
    real = torch.from_numpy(corpus.stack(items))
    return compute_metrics(generated, real, items, classifiers, char_set)


def emit_sample_grid(model, corpus: ds.GlyphCorpus, split: ds.DatasetSplit, fonts: Sequence[int], chars: Sequence[int], k_references: int, content_font_id: int, path, seed: int = 0) -> np.ndarray:
    """Write a PNG with a generated row and a ground-truth row per font.

    Returns the grid as a [0, 1] float array (before 8-bit quantization).
    """
    fonts, chars = list(fonts), list(chars)
    if not chars or not fonts:
        raise EmptyInput("sample grid needs at least one font and one character")
    items = [(f, c) for f in fonts for c in chars]
    plan = reference_plan(split, fonts, chars, k_references, seed)
    generated = ds.to_storage_space(generate_items(model, corpus, items, plan, content_font_id)[:, 0].numpy())
    res = corpus.resolution
    grid = np.ones((2 * len(fonts) * res, len(chars) * res), dtype=np.float32)
    for n, (f, c) in enumerate(items):
        row, col = divmod(n, len(chars))
        grid[2 * row * res : (2 * row + 1) * res, col * res : (col + 1) * res] = generated[n]
        grid[(2 * row + 1) * res : (2 * row + 2) * res, col * res : (col + 1) * res] = corpus.glyph(f, c).pixels
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.save_png(grid, path)
    return grid


def reconstruction_l1(model, corpus: ds.GlyphCorpus, split: ds.DatasetSplit, fonts: Sequence[int], chars: Sequence[int], k_references: int, content_font_id: int, seed: int = 0) -> float:
    """Mean model-space L1 between synthesized and ground-truth glyphs over fonts x chars."""
    items = [(f, c) for f in fonts for c in chars]
    if not items:
        raise EmptyInput("no items to reconstruct")
    plan = reference_plan(split, fonts, chars, k_references, seed)
    generated = generate_items(model, corpus, items, plan, content_font_id)
    return float((generated - torch.from_numpy(corpus.stack(items))).abs().mean())
