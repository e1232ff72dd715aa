"""Command-line entry point: ``fontnet <command> ...``.

Exit codes: 0 success, 2 usage/config/IO problems, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import typing
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import dataset as ds
from . import evaluation as ev
from .errors import ConfigError, FontNetError, NonFiniteLoss
from .generator import synthesize
from .trainer import ABLATIONS, TrainConfig, TrainState, train

log = logging.getLogger("fontnet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


@dataclass
class RunConfig:
    """Training config plus run-level options, loaded from one flat JSON object."""

    train: TrainConfig
    out_dir: str = "runs/fontnet"
    eval_fonts: str = "auto"  # "test" | "train" | "auto"
    eval_char_sets: List[str] = field(default_factory=lambda: ["seen", "unseen"])
    classifier_seed: int = 0
    classifier_steps: int = 600
    grid_chars: int = 10

    RUN_KEYS = ("out_dir", "eval_fonts", "eval_char_sets", "classifier_seed", "classifier_steps", "grid_chars")

    @classmethod
    def from_dict(cls, data: Dict) -> "RunConfig":
        data = dict(data)
        run = {k: data.pop(k) for k in cls.RUN_KEYS if k in data}
        cfg = cls(train=TrainConfig.from_dict(data), **run)
        return cfg.validate()

    def to_dict(self) -> Dict:
        d = self.train.to_dict()
        d.update({k: getattr(self, k) for k in self.RUN_KEYS})
        return d

    def validate(self) -> "RunConfig":
        if self.eval_fonts not in ("test", "train", "auto"):
            raise ConfigError(f"eval_fonts must be test, train or auto, got {self.eval_fonts!r}")
        bad = [c for c in self.eval_char_sets if c not in ("seen", "unseen")]
        if bad or not self.eval_char_sets:
            raise ConfigError(f"eval_char_sets must be a non-empty subset of seen/unseen, got {self.eval_char_sets}")
        if self.classifier_steps <= 0 or self.grid_chars <= 0:
            raise ConfigError("classifier_steps and grid_chars must be positive")
        self.train.validate()
        t = self.train
        if t.dataset == "directory" and not Path(t.data_dir).is_dir():
            raise ConfigError(f"data_dir {t.data_dir} is not a directory")
        missing = [f for f in (t.font_files if t.dataset == "fonts" else []) if not Path(f).is_file()]
        if missing:
            raise ConfigError(f"font files not found: {missing}")
        if t.split_manifest and not Path(t.split_manifest).is_file():
            raise ConfigError(f"split manifest {t.split_manifest} not found")
        return self


# ---------------------------------------------------------------------------
# argument plumbing


def _field_type(f: dataclasses.Field):
    hint = typing.get_type_hints(TrainConfig)[f.name]
    origin = typing.get_origin(hint)
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    if origin in (list, List, tuple, typing.Tuple):
        return (args[0] if args else str), "+"
    if origin is typing.Union and args:
        return args[0], None
    return hint, None


def add_config_overrides(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for f in dataclasses.fields(TrainConfig):
        typ, nargs = _field_type(f)
        group.add_argument("--" + f.name.replace("_", "-"), dest="ov_" + f.name, type=typ, nargs=nargs, default=None)
    group.add_argument("--out-dir", dest="ov_out_dir", default=None)


def collect_overrides(args) -> Dict:
    return {k[3:]: v for k, v in vars(args).items() if k.startswith("ov_") and v is not None}


def default_seed(value: Optional[int]) -> int:
    if value is not None:
        return value
    env = os.environ.get("FONTNET_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"FONTNET_SEED must be an integer, got {env!r}") from None


def load_run_config(path: Optional[str], overrides: Dict) -> RunConfig:
    data: Dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    data.update(overrides)
    if "seed" not in data and os.environ.get("FONTNET_SEED") is not None:
        data["seed"] = default_seed(None)
    try:
        return RunConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _eval_fonts(run: RunConfig, state: TrainState) -> List[int]:
    split = state.split
    kind = run.eval_fonts
    if kind == "auto":
        kind = "test" if split.test_fonts else "train"
    if kind == "test":
        return list(split.test_fonts)
    return [f for f in split.train_fonts if f != state.content_font] or list(split.train_fonts)


def evaluate_state(run: RunConfig, state: TrainState, classifiers: ev.OracleClassifiers, char_sets=None) -> Dict[str, ev.MetricsReport]:
    fonts = _eval_fonts(run, state)
    out = {}
    for cs in char_sets or run.eval_char_sets:
        out[cs] = ev.evaluate(state.model, state.corpus, state.split, cs, state.config.k_references, state.content_font, classifiers, fonts=fonts, seed=run.classifier_seed)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    seed = default_seed(args.seed)
    corpus = ds.GlyphCorpus.synthetic(args.n_fonts, args.n_chars, args.resolution, seed=seed)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = corpus.write_directory(out)
        manifest = {
            "seed": seed,
            "resolution": corpus.resolution,
            "fonts": [{"name": f.name, "seed": f.seed, "params": f.params.as_dict()} for f in corpus.fonts],
            "codepoints": corpus.codepoints,
        }
        (out / "fonts.json").write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        print(f"error: cannot write corpus to {out}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {len(written)} glyphs: {corpus.n_fonts} fonts x {corpus.n_chars} chars at {corpus.resolution}px -> {out}")
    return EXIT_OK


def cmd_prepare_split(args) -> int:
    seed = default_seed(args.seed)
    if args.data_dir:
        corpus = ds.GlyphCorpus.from_directory(args.data_dir, args.resolution)
        n_fonts, n_chars = corpus.n_fonts, corpus.n_chars
    else:
        n_fonts, n_chars = args.n_fonts, args.n_chars
    split = ds.build_split(n_fonts, args.font_train_frac, list(range(n_chars)), args.n_train_chars, seed)
    try:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        split.save(args.out)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"split: {len(split.train_fonts)} train / {len(split.test_fonts)} test fonts, {len(split.train_chars)} seen / {len(split.test_chars)} unseen chars -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_run_config(args.config, collect_overrides(args))
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
    state = train(run.train, out_dir=out, resume=args.resume)
    print(f"trained {state.step} steps -> {out / 'checkpoint_final.pt'}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    state = TrainState.load(args.checkpoint)
    ref_font = ds.PreRenderedFont(args.reference_dir)
    cps = ref_font.codepoints()
    if not cps:
        print(f"error: no reference glyphs in {args.reference_dir}", file=sys.stderr)
        return EXIT_USAGE
    try:
        char_id = state.corpus.codepoints.index(args.source_char)
    except ValueError:
        print(f"error: codepoint {args.source_char} is not in the training corpus", file=sys.stderr)
        return EXIT_USAGE
    if len(cps) < args.k:
        warnings.warn(f"only {len(cps)} reference glyphs available, using all of them")
    refs = [ds.render_glyph(ref_font, cp, state.corpus.resolution, font_id=-1, char_id=-1) for cp in cps[: args.k]]
    source = state.corpus.glyph(state.content_font, char_id)
    out = synthesize(source, refs, state.model.generator, state.model.style_encoder)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ds.save_png(out.pixels, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _classifiers_for(state: TrainState, seed: int, steps: int) -> ev.OracleClassifiers:
    return ev.train_oracle_classifiers(state.corpus, seed=seed, steps=steps)


def cmd_evaluate(args) -> int:
    state = TrainState.load(args.checkpoint)
    if args.split_manifest:
        state.split = ds.DatasetSplit.load(args.split_manifest)
    run = RunConfig(train=state.config, eval_fonts=args.fonts, classifier_seed=default_seed(args.seed), classifier_steps=args.classifier_steps).validate()
    classifiers = _classifiers_for(state, run.classifier_seed, run.classifier_steps)
    char_sets = ["seen", "unseen"] if args.char_set == "both" else [args.char_set]
    reports = evaluate_state(run, state, classifiers, char_sets)
    out = Path(args.out_json)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {cs: r.to_json() for cs, r in reports.items()}
    out.write_text(json.dumps(payload, indent=2) + "\n")
    table = ev.format_table([(f"{cs} characters", r) for cs, r in reports.items()])
    out.with_suffix(".txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def run_ablation(run: RunConfig) -> Dict[str, Dict[str, ev.MetricsReport]]:
    """Train and evaluate every variant; classifiers are shared across variants."""
    out = Path(run.out_dir)
    results = {}
    classifiers = None
    for variant in ABLATIONS:
        cfg = dataclasses.replace(run.train, ablation=variant)
        state = train(cfg, out_dir=out / variant)
        if classifiers is None:
            classifiers = _classifiers_for(state, run.classifier_seed, run.classifier_steps)
        results[variant] = evaluate_state(run, state, classifiers)
    return results


ABLATION_LABELS = {"no_separator": "w/o separator", "plain_decoder": "w/o AdaIN decoder", "full": "proposed"}


def cmd_ablate(args) -> int:
    run = load_run_config(args.config, collect_overrides(args))
    results = run_ablation(run)
    out = Path(run.out_dir)
    blocks = []
    for cs in run.eval_char_sets:
        title = f"{cs} characters during training"
        blocks.append(title + "\n" + ev.format_table([(ABLATION_LABELS[v], results[v][cs]) for v in ("no_separator", "plain_decoder", "full")]))
    text = "\n".join(blocks)
    (out / "ablation.txt").write_text(text)
    (out / "ablation.json").write_text(json.dumps({v: {cs: r.to_json() for cs, r in rs.items()} for v, rs in results.items()}, indent=2) + "\n")
    print(text, end="")
    return EXIT_OK


def cmd_grid(args) -> int:
    state = TrainState.load(args.checkpoint)
    fonts = args.fonts if args.fonts else [f for f in state.split.train_fonts if f != state.content_font] + list(state.split.test_fonts)
    chars = args.chars if args.chars is not None else list(state.split.test_chars or state.split.train_chars)
    ev.emit_sample_grid(state.model, state.corpus, state.split, fonts, chars, args.k, state.content_font, args.out, seed=default_seed(args.seed))
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fontnet", description="Few-shot font synthesis with a triplet-trained style separator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="render a procedural synthetic corpus to <out>/<font>/<codepoint>.png")
    s.add_argument("--n-fonts", type=int, default=8)
    s.add_argument("--n-chars", type=int, default=ds.N_PSEUDO_CHARS)
    s.add_argument("--resolution", type=int, default=ds.DEFAULT_RESOLUTION)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("prepare-split", help="write a font/character split manifest")
    s.add_argument("--data-dir", default=None)
    s.add_argument("--n-fonts", type=int, default=8)
    s.add_argument("--n-chars", type=int, default=ds.N_PSEUDO_CHARS)
    s.add_argument("--resolution", type=int, default=ds.DEFAULT_RESOLUTION)
    s.add_argument("--font-train-frac", type=float, default=0.75)
    s.add_argument("--n-train-chars", type=int, required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare_split)

    s = sub.add_parser("train", help="train one model variant")
    s.add_argument("--config", default=None)
    s.add_argument("--resume", default=None, help="checkpoint to continue from")
    add_config_overrides(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", help="render one character in the style of a reference directory")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--source-char", type=lambda v: int(v, 0), required=True, help="codepoint, e.g. 0xE003 or 57347")
    s.add_argument("--reference-dir", required=True)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("evaluate", help="SSIM / mFID / accuracy on seen or unseen characters")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split-manifest", default=None)
    s.add_argument("--char-set", choices=["seen", "unseen", "both"], default="both")
    s.add_argument("--fonts", choices=["test", "train", "auto"], default="auto")
    s.add_argument("--classifier-steps", type=int, default=600)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out-json", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="train and evaluate full / no_separator / plain_decoder")
    s.add_argument("--config", default=None)
    add_config_overrides(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("grid", help="write a generated-vs-ground-truth sample grid")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--fonts", type=int, nargs="+", default=None)
    s.add_argument("--chars", type=int, nargs="+", default=None)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_grid)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"error: {exc}" + (f" (state dumped to {exc.dump_path})" if exc.dump_path else ""), file=sys.stderr)
        return EXIT_NUMERIC
    except (FontNetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
