"""Command-line entry point: ``regionvqa <command> [flags]``.

Exit status: 0 on success, 1 on invalid input (flags, config, files),
2 when a run fails (divergence, failing gradient check, other errors).
"""

from __future__ import annotations

import argparse
import inspect
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .data import SPLITS, SyntheticSpec, generate_synthetic_dataset, load_answer_vocab, load_scenes, load_split
from .errors import ConfigurationError, DimensionError, FormatError
from .estimators import BanVQAClassifier, ProbabilityAveragingEnsemble, RegionFeatureExtractor, VqaPipeline
from .io import coerce_fields, format_kv, read_kv, write_kv, write_region_features

log = logging.getLogger("regionvqa")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
SECTIONS = ("data.", "detector.", "vqa.")


class UsageError(Exception):
    """Bad command-line usage; reported with the usage text."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --- configuration ------------------------------------------------------------------------------

def _coerce_like(raw: str, default: Any, key: str) -> Any:
    try:
        if raw.lower() == "none":
            return None
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, (tuple, list)):
            kind = type(default[0]) if default else str
            return tuple(kind(p.strip()) for p in raw.split(",") if p.strip())
        if default is None:
            for kind in (int, float):
                try:
                    return kind(raw)
                except ValueError:
                    pass
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from exc


def estimator_kwargs(cls, values: dict[str, str], prefix: str) -> dict[str, Any]:
    """Constructor arguments for ``cls`` from ``prefix``-ed config keys, converted
    to the type of each parameter's default."""
    defaults = {n: p.default for n, p in inspect.signature(cls.__init__).parameters.items() if n != "self"}
    out = {}
    for key, raw in values.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in defaults or name == "answer_vocab":
            raise ConfigurationError(f"unknown config key {key!r}")
        out[name] = _coerce_like(raw, defaults[name], key)
    return out


def load_config(path) -> dict[str, str]:
    if path is None:
        return {}
    values = read_kv(path)
    for key in values:
        if not key.startswith(SECTIONS):
            raise ConfigurationError(f"config key {key!r} must start with one of {', '.join(SECTIONS)}")
    return values


def build_estimators(values: dict[str, str], vocab: Sequence[str], seed: int | None):
    ext = RegionFeatureExtractor(**estimator_kwargs(RegionFeatureExtractor, values, "detector."))
    clf = BanVQAClassifier(answer_vocab=list(vocab), **estimator_kwargs(BanVQAClassifier, values, "vqa."))
    if seed is not None:
        ext.set_params(random_state=seed)
        clf.set_params(random_state=seed)
    return ext, clf


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"missing required flag --{name}")


def _checkpoint_paths(raw: str) -> list[Path]:
    paths = [Path(p.strip()) for p in raw.split(",") if p.strip()]
    if not paths:
        raise UsageError("--checkpoints needs at least one path")
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"checkpoint not found: {p}")
    return paths


# --- commands -------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    _require(args, "config", "out")
    values = read_kv(args.config)
    plain = {k[len("data."):] if k.startswith("data.") else k: v for k, v in values.items()}
    unknown = sorted(set(plain) - set(SyntheticSpec.field_names()))
    if unknown:
        raise ConfigurationError(f"unknown spec keys: {', '.join(unknown)}")
    fields = coerce_fields(SyntheticSpec, plain)
    if args.seed is not None:
        fields["seed"] = args.seed
    spec = SyntheticSpec(**fields)
    out = generate_synthetic_dataset(spec, args.out)
    print(f"wrote dataset to {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    _require(args, "data", "out")
    scenes = load_scenes(args.data)
    if args.split is not None:
        wanted = {e.image_id for e in load_split(args.data, args.split, scenes)}
        scenes = {k: v for k, v in scenes.items() if k in wanted}
    if args.checkpoints is not None:
        paths = _checkpoint_paths(args.checkpoints)
        if len(paths) != 1:
            raise UsageError("extract takes a single checkpoint")
        extractor = VqaPipeline.load(paths[0]).extractor_
    else:
        values = load_config(args.config)
        extractor = RegionFeatureExtractor(**estimator_kwargs(RegionFeatureExtractor, values, "detector."))
        if args.seed is not None:
            extractor.set_params(random_state=args.seed)
        extractor.fit([])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = sorted(scenes)
    for image_id, regions in zip(ids, extractor.transform([scenes[i] for i in ids])):
        write_region_features(out / f"{image_id:06d}.rvqf", regions)
        for w in regions.warnings:
            log.warning("image %d: %s", image_id, w)
    print(f"wrote {len(ids)} feature files to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "data", "out")
    values = load_config(args.config)
    vocab = load_answer_vocab(args.data)
    ext, clf = build_estimators(values, vocab, args.seed)
    examples = load_split(args.data, args.split or "train")
    pipe = VqaPipeline(ext, clf).fit(examples)
    pipe.save(args.out)
    for epoch, loss in enumerate(pipe.classifier_.loss_curve_, 1):
        print(f"epoch {epoch:3d} loss {loss:.6f}")
    acc = pipe.classifier_.train_accuracy_
    if acc is not None:
        print(f"train accuracy {100 * acc:.2f}")
    print(f"checkpoint {args.out}")
    return EXIT_OK


def _report(args, model, examples) -> int:
    from .training import evaluate, format_table

    report = evaluate(model, examples)
    print(format_table([({}, report)]), end="")
    if args.out is not None:
        write_kv(args.out, report.to_kv())
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "checkpoints", "data")
    paths = _checkpoint_paths(args.checkpoints)
    if len(paths) != 1:
        raise UsageError("eval takes a single checkpoint; use ensemble for several")
    return _report(args, VqaPipeline.load(paths[0]), load_split(args.data, args.split or "val"))


def cmd_ensemble(args) -> int:
    _require(args, "checkpoints", "data")
    members = [VqaPipeline.load(p) for p in _checkpoint_paths(args.checkpoints)]
    ens = ProbabilityAveragingEnsemble(members).fit([])
    return _report(args, ens, load_split(args.data, args.split or "val"))


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_results, run_suite

    results = run_suite(instances=args.instances, seed=args.seed or 0)
    text = format_results(results)
    print(text, end="")
    if args.out is not None:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def cmd_ablation(args) -> int:
    from .ablation import ablation_table, run_ablation, toy_classifier, toy_extractor

    _require(args, "data")
    values = load_config(args.config)
    vocab = load_answer_vocab(args.data)
    ext = toy_extractor(**estimator_kwargs(RegionFeatureExtractor, values, "detector."))
    clf = toy_classifier(vocab, **estimator_kwargs(BanVQAClassifier, values, "vqa."))
    results = run_ablation(load_split(args.data, "train"), load_split(args.data, args.split or "val"), vocab,
                           seed=args.seed or 0, extractor=ext, classifier=clf)
    text = ablation_table(results)
    print(text, end="")
    if args.out is not None:
        rows = {}
        for labels, report in results:
            rows.update(report.to_kv(prefix=f"{labels['Model']}."))
        Path(args.out).write_text(format_kv(rows), encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "write a synthetic dataset from a spec file"),
    "extract": (cmd_extract, "write region features (RVQF) for dataset images"),
    "train": (cmd_train, "train a detector + fusion pipeline and save an RVQW checkpoint"),
    "eval": (cmd_eval, "score one checkpoint on a split"),
    "ensemble": (cmd_ensemble, "score the probability average of several checkpoints"),
    "gradcheck": (cmd_gradcheck, "run the finite-difference gradient suite"),
    "ablation": (cmd_ablation, "train and score the toy ablation rows plus their ensemble"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regionvqa", description="Region-feature VQA toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="override every seed")
        p.add_argument("--out", help="output path")
        if name not in ("gen-data", "gradcheck"):
            p.add_argument("--data", help="dataset directory written by gen-data")
            p.add_argument("--split", choices=SPLITS, help="dataset split")
        if name in ("extract", "eval", "ensemble"):
            p.add_argument("--checkpoints", help="checkpoint path(s), comma separated")
        if name == "gradcheck":
            p.add_argument("--instances", type=int, default=100, help="random instances per case")
    return parser


def run_command(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except UsageError as exc:
        print(f"regionvqa {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigurationError, FormatError, DimensionError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"regionvqa {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported as a run failure
        log.debug("run failed", exc_info=True)
        print(f"regionvqa {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


def main() -> None:
    sys.exit(run_command())
