"""Alternating discriminator / generator+separator optimization.

Each step:

1. sample a generator batch, per-item style negatives and 4x batch_size
   candidate triplets; keep the hard ones under the current separator;
2. discriminator update on ground truth (real) vs synthesized (fake) glyphs,
   with an R1 penalty on the real inputs;
3. generator + separator update on adversarial, L1 and the two triplet
   losses with the discriminator frozen.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import dataset as ds
from .discriminator import Discriminator, select_logits
from .errors import ConfigError, InsufficientItems, NonFinite, NonFiniteLoss, UnknownVariant
from .generator import ClassStyleEncoder, Generator, reference_style
from .objectives import (
    LossReport,
    LossWeights,
    adv_losses,
    gen_style_triplet_loss,
    l1_loss,
    r1_penalty,
    total_generator_objective,
    triplet_loss,
)
from .separator import StyleSeparator

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_separator", "plain_decoder")


@dataclass
class TrainConfig:
    # model
    resolution: int = 128
    embedding_dim: int = 128
    style_dim: int = 256
    base_channels: int = 32
    max_channels: int = 512
    # optimization
    batch_size: int = 8
    k_references: int = 8
    steps: int = 10000
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_sep: float = 2e-4
    betas: Tuple[float, float] = (0.0, 0.99)
    sep_betas: Tuple[float, float] = (0.9, 0.99)
    r1_gamma: float = 1.0
    alpha: float = 0.2
    lambda_l1: float = 1.0
    lambda_gstyle: float = 1.0
    lambda_encstyle: float = 1.0
    seed: int = 0
    ablation: str = "full"
    mining_factor: int = 4
    # data
    dataset: str = "synthetic"  # "synthetic" | "directory" | "fonts"
    data_dir: Optional[str] = None
    font_files: List[str] = field(default_factory=list)
    codepoints: List[int] = field(default_factory=list)
    n_fonts: int = 8
    n_chars: int = 40
    data_seed: int = 0
    font_train_frac: float = 0.75  # 1.0 trains on every font, holding out characters only
    n_train_chars: int = 32
    split_seed: int = 0
    split_manifest: Optional[str] = None
    content_font: Optional[int] = None
    # bookkeeping
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.sep_betas = tuple(float(b) for b in self.sep_betas)
        self.validate()

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_l1, self.lambda_gstyle, self.lambda_encstyle)

    def validate(self) -> "TrainConfig":
        if self.ablation not in ABLATIONS:
            raise UnknownVariant(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        positive = ["resolution", "embedding_dim", "style_dim", "base_channels", "max_channels", "batch_size", "k_references", "lr_g", "lr_d", "lr_sep", "alpha", "mining_factor"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("steps and checkpoint_every must be >= 0")
        if self.r1_gamma < 0:
            raise ConfigError("r1_gamma must be >= 0")
        for name in ("betas", "sep_betas"):
            pair = getattr(self, name)
            if len(pair) != 2 or not all(0 <= b < 1 for b in pair):
                raise ConfigError(f"{name} must be two values in [0, 1), got {pair}")
        self.weights  # validates lambdas
        if self.dataset not in ("synthetic", "directory", "fonts"):
            raise ConfigError(f"unknown dataset kind {self.dataset!r}")
        if self.dataset == "directory" and not self.data_dir:
            raise ConfigError("dataset 'directory' needs data_dir")
        if self.dataset == "fonts" and not (self.font_files and self.codepoints):
            raise ConfigError("dataset 'fonts' needs font_files and codepoints")
        if not 0 < self.font_train_frac <= 1:
            raise ConfigError("font_train_frac must be in (0, 1]")
        return self

    def to_dict(self) -> Dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["sep_betas"] = list(self.sep_betas)
        return d

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)


# ---------------------------------------------------------------------------
# Model assembly


class FontNetModel(nn.Module):
    """The networks of one variant, keyed by checkpoint group name."""

    def __init__(self, variant: str, generator: Generator, style_encoder: nn.Module, discriminator: Discriminator):
        super().__init__()
        self.variant = variant
        self.generator = generator
        self.style_encoder = style_encoder
        self.discriminator = discriminator

    @property
    def has_separator(self) -> bool:
        return isinstance(self.style_encoder, StyleSeparator)

    def parameter_groups(self) -> Dict[str, nn.Module]:
        groups: Dict[str, nn.Module] = {}
        groups["separator" if self.has_separator else "style_encoder"] = self.style_encoder
        groups["generator_encoder"] = self.generator.encoder
        groups["generator_decoder"] = self.generator.decoder
        if self.generator.affines is not None:
            groups["style_affines"] = self.generator.affines
        groups["discriminator"] = self.discriminator
        return groups

    def style_features(self, references: torch.Tensor) -> torch.Tensor:
        """Mean reference style; the separator is detached from generator losses."""
        feats = reference_style(self.style_encoder, references)
        return feats.detach() if self.has_separator else feats

    def synthesize(self, sources: torch.Tensor, references: torch.Tensor) -> torch.Tensor:
        return self.generator(sources, self.style_features(references))


def build_ablation(config: TrainConfig, n_style_classes: int, n_content_classes: int) -> FontNetModel:
    if config.ablation not in ABLATIONS:
        raise UnknownVariant(f"unknown ablation {config.ablation!r}")
    c = config
    generator = Generator(c.resolution, c.style_dim, c.base_channels, c.max_channels, plain_decoder=c.ablation == "plain_decoder")
    if c.ablation == "no_separator":
        style_encoder = ClassStyleEncoder(c.resolution, c.style_dim, c.base_channels, c.max_channels)
    else:
        style_encoder = StyleSeparator(c.resolution, c.style_dim, c.embedding_dim, c.base_channels, c.max_channels)
    disc = Discriminator(n_style_classes, n_content_classes, c.resolution, c.base_channels, c.max_channels)
    return FontNetModel(c.ablation, generator, style_encoder, disc)


# ---------------------------------------------------------------------------
# Data


def build_corpus(config: TrainConfig) -> ds.GlyphCorpus:
    if config.dataset == "synthetic":
        return ds.GlyphCorpus.synthetic(config.n_fonts, config.n_chars, config.resolution, seed=config.data_seed)
    if config.dataset == "directory":
        return ds.GlyphCorpus.from_directory(config.data_dir, config.resolution)
    return ds.GlyphCorpus.from_font_files(config.font_files, config.codepoints, config.resolution)


def build_config_split(config: TrainConfig, corpus: ds.GlyphCorpus) -> ds.DatasetSplit:
    if config.split_manifest:
        return ds.DatasetSplit.load(config.split_manifest)
    chars = list(range(corpus.n_chars))
    if config.font_train_frac >= 1.0:
        return ds.all_fonts_split(corpus.n_fonts, chars, config.n_train_chars, config.split_seed)
    return ds.build_split(corpus.n_fonts, config.font_train_frac, chars, config.n_train_chars, config.split_seed)


@dataclass
class StepInputs:
    batch: ds.GeneratorBatch
    triplets: List[ds.Triplet]
    negatives: List[Optional[ds.GlyphImage]]


def mine_step_triplets(state: "TrainState") -> List[ds.Triplet]:
    """Sample mining_factor * batch_size candidates and keep up to batch_size hard ones."""
    cfg, split = state.config, state.split
    if len(split.train_fonts) < 2 or len(split.train_chars) < 2:
        return []
    n = cfg.mining_factor * cfg.batch_size
    cands = [ds.sample_triplet(state.corpus, split, state.rng) for _ in range(n)]
    if not state.model.has_separator:
        return []
    keys = sorted({k for t in cands for k in t.keys()})
    with torch.no_grad():
        emb = state.model.style_encoder.embed(state.tensor(keys)).numpy()
    mined = ds.mine_hard_triplets(cands, dict(zip(keys, emb)))
    return mined[: cfg.batch_size]


def prepare_step(state: "TrainState") -> StepInputs:
    """Draw everything one step consumes, in a fixed order from the state's rng."""
    cfg, split = state.config, state.split
    batch = ds.assemble_generator_batch(state.corpus, split, cfg.batch_size, cfg.k_references, state.content_font, state.rng)
    negatives: List[Optional[ds.GlyphImage]] = []
    for tf, tc in zip(batch.target_font_ids, batch.target_char_ids):
        others = [f for f in split.train_fonts if f != tf]
        negatives.append(state.corpus.glyph(others[int(state.rng.integers(len(others)))], tc) if others else None)
    triplets = mine_step_triplets(state)
    return StepInputs(batch, triplets, negatives)


# ---------------------------------------------------------------------------
# State and checkpoints


def _adam(params, lr, betas):
    return torch.optim.Adam(params, lr=lr, betas=betas)


class TrainState:
    def __init__(self, config: TrainConfig, corpus: Optional[ds.GlyphCorpus] = None, split: Optional[ds.DatasetSplit] = None):
        self.config = config
        self.corpus = corpus if corpus is not None else build_corpus(config)
        self.split = split if split is not None else build_config_split(config, self.corpus)
        self.content_font = config.content_font if config.content_font is not None else self.split.train_fonts[0]
        if self.content_font not in self.split.train_fonts:
            raise ConfigError(f"content font {self.content_font} is not a train font")
        self.style_classes = {f: i for i, f in enumerate(self.split.train_fonts)}
        self.content_classes = {c: i for i, c in enumerate(self.split.train_chars)}
        torch.manual_seed(config.seed)
        self.model = build_ablation(config, len(self.style_classes), len(self.content_classes))
        betas = config.betas
        self.opt_g = _adam(self.model.generator.parameters(), config.lr_g, betas)
        # the hinge losses are zero on most steps once margins are met; with
        # beta1 = 0 the first gradient after a quiet spell moves every weight ~10 lr
        self.opt_sep = _adam(self.model.style_encoder.parameters(), config.lr_sep, config.sep_betas)
        self.opt_d = _adam(self.model.discriminator.parameters(), config.lr_d, betas)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0

    def tensor(self, keys: Sequence[Tuple[int, int]]) -> torch.Tensor:
        return torch.from_numpy(self.corpus.stack(keys))

    def images(self, glyphs: Sequence[ds.GlyphImage]) -> torch.Tensor:
        return self.tensor([g.key for g in glyphs])

    def optimizers(self) -> Dict[str, torch.optim.Optimizer]:
        return {"generator": self.opt_g, "style_encoder": self.opt_sep, "discriminator": self.opt_d}

    def state_dict(self) -> Dict:
        return {
            **{name: m.state_dict() for name, m in self.model.parameter_groups().items()},
            "optimizers": {k: o.state_dict() for k, o in self.optimizers().items()},
            "step": self.step,
            "rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "split": self.split.to_json(),
            "content_font": self.content_font,
        }

    def load_state_dict(self, state: Dict) -> None:
        for name, module in self.model.parameter_groups().items():
            module.load_state_dict(state[name])
        for k, opt in self.optimizers().items():
            opt.load_state_dict(state["optimizers"][k])
        self.step = int(state["step"])
        self.rng.bit_generator.state = state["rng"]
        torch.set_rng_state(state["torch_rng"])

    def save(self, path) -> Path:
        """Write the binary checkpoint plus a JSON config sidecar next to it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)
        sidecar = {"config": self.config.to_dict(), "step": self.step, "variant": self.config.ablation, "groups": sorted(self.model.parameter_groups())}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path, corpus: Optional[ds.GlyphCorpus] = None, config: Optional[TrainConfig] = None) -> "TrainState":
        path = Path(path)
        if config is None:
            sidecar = json.loads(path.with_suffix(".json").read_text())
            config = TrainConfig.from_dict(sidecar["config"])
        data = torch.load(path, map_location="cpu", weights_only=False)
        split = ds.DatasetSplit.from_json(data["split"])
        cfg = dataclasses.replace(config, content_font=int(data["content_font"]))
        state = cls(cfg, corpus=corpus, split=split)
        state.load_state_dict(data)
        return state


def params_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Steps


def _set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def discriminator_step(state: TrainState, sources, refs, gt, font_cls, char_cls) -> Tuple[float, float]:
    model, cfg = state.model, state.config
    with torch.no_grad():
        fake = model.synthesize(sources, refs)
    real = gt.detach().requires_grad_(cfg.r1_gamma > 0)
    real_s, real_c = select_logits(model.discriminator(real), font_cls, char_cls)
    fake_s, fake_c = select_logits(model.discriminator(fake), font_cls, char_cls)
    d_style, _ = adv_losses(real_s, fake_s)
    d_content, _ = adv_losses(real_c, fake_c)
    adv_d = 0.5 * (d_style + d_content)
    r1 = r1_penalty(real_s + real_c, real, cfg.r1_gamma) if cfg.r1_gamma > 0 else adv_d.new_zeros(())
    state.opt_d.zero_grad(set_to_none=True)
    (adv_d + r1).backward()
    state.opt_d.step()
    return adv_d.item(), r1.item()


def generator_step(state: TrainState, inputs: StepInputs, sources, refs, gt, font_cls, char_cls):
    model, cfg = state.model, state.config
    weights = cfg.weights
    _set_requires_grad(model.discriminator, False)
    try:
        fake = model.synthesize(sources, refs)
        fake_s, fake_c = select_logits(model.discriminator(fake), font_cls, char_cls)
        adv_g = 0.5 * (adv_losses(fake_s.detach(), fake_s)[1] + adv_losses(fake_c.detach(), fake_c)[1])
        l1 = l1_loss(gt, fake)
        zero = l1.new_zeros(())
        g_style, enc_style = zero, zero
        if model.has_separator:
            sep = model.style_encoder
            idx = [i for i, n in enumerate(inputs.negatives) if n is not None]
            if idx:
                positives = state.images([inputs.batch.references[i][0] for i in idx])
                negatives = state.images([inputs.negatives[i] for i in idx])
                g_style = gen_style_triplet_loss(sep.embed(fake[idx]), sep.embed(positives), sep.embed(negatives), cfg.alpha)
            if inputs.triplets:
                n = len(inputs.triplets)
                imgs = state.tensor([k for t in inputs.triplets for k in t.keys()])
                emb = sep.embed(imgs).view(n, 3, -1)
                enc_style = triplet_loss(emb[:, 0], emb[:, 1], emb[:, 2], cfg.alpha)
        total = total_generator_objective(adv_g, l1, g_style, enc_style, weights)
        state.opt_g.zero_grad(set_to_none=True)
        state.opt_sep.zero_grad(set_to_none=True)
        total.backward()
        state.opt_g.step()
        state.opt_sep.step()
    finally:
        _set_requires_grad(model.discriminator, True)
    return tuple(t.detach().item() for t in (adv_g, l1, g_style, enc_style, total))


def train_step(state: TrainState, inputs: Optional[StepInputs] = None, dump_dir=None) -> LossReport:
    """One D update followed by one G+separator update."""
    if inputs is None:
        inputs = prepare_step(state)
    b = inputs.batch
    sources = state.images(b.sources)
    gt = state.images(b.ground_truths)
    k = len(b.references[0])
    refs = state.images([r for item in b.references for r in item]).view(len(b), k, *gt.shape[1:])
    font_cls = torch.tensor([state.style_classes[f] for f in b.target_font_ids])
    char_cls = torch.tensor([state.content_classes[c] for c in b.target_char_ids])

    try:
        adv_d, r1 = discriminator_step(state, sources, refs, gt, font_cls, char_cls)
        adv_g, l1, g_style, enc_style, total = generator_step(state, inputs, sources, refs, gt, font_cls, char_cls)
    except NonFinite as exc:
        _abort(state, state.step + 1, {"error": str(exc)}, dump_dir)
    state.step += 1
    report = LossReport(state.step, adv_d, adv_g, l1, g_style, enc_style, total, r1)
    if not report.is_finite():
        _abort(state, state.step, report.as_dict(), dump_dir)
    return report


def _abort(state: TrainState, step: int, details: Dict, dump_dir) -> None:
    dump = None
    if dump_dir is not None:
        dump = Path(dump_dir) / f"nonfinite_step{step:06d}.pt"
        dump.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"details": details, "state": state.state_dict()}, dump)
    raise NonFiniteLoss(f"non-finite loss at step {step}: {details}", dump)


LOG_KEYS = ("step", "adv_d", "adv_g", "l1", "g_style", "enc_style", "total_g")


def train(config: TrainConfig, out_dir=None, resume=None, corpus: Optional[ds.GlyphCorpus] = None, callback: Optional[Callable[[TrainState, LossReport], None]] = None) -> TrainState:
    """Run to ``config.steps``; writes ``train_log.jsonl`` and checkpoints under ``out_dir``.

    With ``resume`` (a checkpoint path) training continues from the saved
    step and appends to the existing log.
    """
    torch.use_deterministic_algorithms(True)
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        state = TrainState.load(resume, corpus=corpus, config=config)
    else:
        state = TrainState(config, corpus=corpus)
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        if resume is None:
            log_path.write_text("")
        else:
            _truncate_log(log_path, state.step)
        log_file = log_path.open("a")
    try:
        while state.step < config.steps:
            report = train_step(state, dump_dir=out)
            if log_file is not None:
                rec = report.as_dict()
                log_file.write(json.dumps({k: rec[k] for k in LOG_KEYS}) + "\n")
                log_file.flush()
            if callback is not None:
                callback(state, report)
            if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                state.save(out / f"checkpoint_{state.step:06d}.pt")
            if state.step % 100 == 0:
                log.info("step %d l1=%.4f adv_d=%.4f adv_g=%.4f", state.step, report.l1, report.adv_d, report.adv_g)
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        state.save(out / "checkpoint_final.pt")
    return state


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        path.write_text("")
        return
    lines = [ln for ln in path.read_text().splitlines() if ln.strip() and json.loads(ln)["step"] <= step]
    path.write_text("".join(ln + "\n" for ln in lines))
