"""Command-line entry point for the full experiment lifecycle.

Commands: generate-data, train-generator, train, evaluate, ablate.
Exit codes: 0 success, 2 config/validation error, 3 I/O error,
4 output exists without --overwrite, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .ablation import run_ablation, table_from_runs
from .architectures import Variant
from .checkpoints import load_generator_checkpoint, load_model_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, config_keys, format_config, load_config
from .phantoms import generate_dataset, load_dataset
from .shape_generator import prepare_generator_cases
from .trainer import NumericError, split_cases
from .viz import write_overlays
from .volumes import DGMVError, Modality

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_EXISTS = 4
EXIT_NUMERIC = 5


class ExistsError(RuntimeError):
    pass


def _keys_epilog(sections) -> str:
    keys = [k for k in config_keys() if k.split(".")[0] in sections]
    return "config keys read by this command:\n  " + "\n  ".join(keys)


def _add_common(parser: argparse.ArgumentParser, *, config_required: bool = False):
    parser.add_argument("--config", help="experiment config file (flat key = value)", required=config_required)
    parser.add_argument("--seed", type=int, help="override the relevant rng seed")
    parser.add_argument("--out", required=True, help="output directory or file")
    parser.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    parser.add_argument("--deterministic", action="store_true", help="force deterministic numerics")


def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.deterministic:
        config.train_deterministic = True
    return config


def _require_new(path: Path, overwrite: bool, what: str):
    if path.exists() and not overwrite:
        raise ExistsError(f"{what} already exists at {path}; pass --overwrite to replace it")


def _data_manifest(config: ExperimentConfig, args) -> Path:
    data = getattr(args, "data", None) or config.paths_data
    if not data:
        raise ConfigError("no dataset given: set paths.data in the config or pass --data", key="paths.data")
    path = Path(data)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    return path


def cmd_generate_data(args) -> int:
    config = _load(args)
    if args.seed is not None:
        config.phantom_rng_seed = args.seed
    out = Path(args.out)
    _require_new(out / "manifest.csv", args.overwrite, "dataset manifest")
    manifest = generate_dataset(config.phantom_config(), out)
    print(manifest)
    return EXIT_OK


def cmd_train_generator(args) -> int:
    config = _load(args)
    if args.seed is not None:
        config.train_rng_seed = args.seed
    out = Path(args.out)
    _require_new(out / "generator", args.overwrite, "generator run")
    manifest = _data_manifest(config, args)
    cases = load_dataset(manifest, Modality.HIGH_CONTRAST)
    prep = config.preprocessor()
    model = config.generator_model(seed=args.seed)
    model.fit(prepare_generator_cases(cases, prep))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "fold_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "reconstruction_dsc"])
        for fold, dsc in enumerate(model.fold_dsc_):
            writer.writerow([fold, repr(dsc)])
    checkpoint = save_checkpoint(
        model.net_,
        out / "generator",
        spec=model.net_.spec,
        extra={"modality": Modality.HIGH_CONTRAST.value, "fold_dsc": model.fold_dsc_},
    )
    print(checkpoint)
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load(args)
    if args.seed is not None:
        config.train_rng_seed = args.seed
    out = Path(args.out)
    _require_new(out / "run.json", args.overwrite, "training run")
    manifest = _data_manifest(config, args)
    variant = Variant(config.model_variant)
    generator = None
    if variant is Variant.DGMNET:
        gen_path = args.generator or config.paths_generator
        if not gen_path:
            raise ConfigError(
                "the dgmnet variant needs a trained generator: run train-generator first and "
                "pass --generator <checkpoint dir> (or set paths.generator)",
                key="paths.generator",
            )
        generator = load_generator_checkpoint(gen_path)
    modality = Modality(args.modality)
    cases = load_dataset(manifest, modality)
    train_cases, val_cases = split_cases(cases, config.train_validation_fraction, config.train_rng_seed)
    segmenter = config.segmenter(generator=generator, out_dir=out)
    segmenter.fit(train_cases, val_cases=val_cases)
    record = segmenter.run_record_
    print(f"best epoch {record.best_epoch}: validation DSC {record.best_val_dsc:.4f}")
    print(out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _load(args)
    out = Path(args.out)
    _require_new(out / "metrics.csv", args.overwrite, "evaluation report")
    manifest = _data_manifest(config, args)
    model = load_model_checkpoint(args.checkpoint)
    cases = load_dataset(manifest, Modality(args.modality))
    if args.split != "all":
        if not args.split_file:
            raise ConfigError("--split requires --split-file (the splits.csv of a run)", key="split")
        roles = {}
        with open(args.split_file, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                roles[row[0]] = row[1]
        cases = [c for c in cases if roles.get(c.case_id) == args.split]
        if not cases:
            raise ConfigError(f"no cases with role '{args.split}' in {args.split_file}", key="split")
    prep = config.preprocessor()
    from .metrics import evaluate_cases

    report = evaluate_cases(model, cases, prep)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    count = write_overlays(model, cases, prep, out / "overlays")
    print(report.format_table())
    print(f"{count} overlay images in {out / 'overlays'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load(args)
    out = Path(args.out)
    if args.from_runs:
        table = table_from_runs(args.from_runs)
        out.mkdir(parents=True, exist_ok=True)
        table.write(out)
        print(table.format_text())
        return EXIT_OK
    _require_new(out / "table.csv", args.overwrite, "ablation table")
    manifest = _data_manifest(config, args)
    table = run_ablation(manifest, config, seed=args.seed, out_dir=out)
    print(table.format_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgmnet",
        description="Two-modality phantom segmentation benchmark with a frozen generative shape decoder.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "generate-data",
        help="write a deterministic phantom dataset",
        epilog=_keys_epilog({"phantom"}),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    _add_common(p)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser(
        "train-generator",
        help="cross-validate and train the frozen shape decoder on high-contrast cases",
        epilog=_keys_epilog({"preprocess", "model", "generator", "train", "paths"}),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    _add_common(p)
    p.add_argument("--data", help="dataset manifest (overrides paths.data)")
    p.set_defaults(func=cmd_train_generator)

    p = sub.add_parser(
        "train",
        help="train one segmentation variant end to end",
        epilog=_keys_epilog({"preprocess", "model", "generator", "loss", "train", "paths"}),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    _add_common(p)
    p.add_argument("--data", help="dataset manifest (overrides paths.data)")
    p.add_argument("--generator", help="generator checkpoint dir (dgmnet variant)")
    p.add_argument(
        "--modality",
        choices=[m.value for m in Modality],
        default=Modality.LOW_CONTRAST.value,
        help="which modality to train on",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "evaluate",
        help="evaluate a checkpoint and emit metrics plus contour overlays",
        epilog=_keys_epilog({"preprocess", "paths"}),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    _add_common(p)
    p.add_argument("--data", help="dataset manifest (overrides paths.data)")
    p.add_argument("--checkpoint", required=True, help="model checkpoint directory")
    p.add_argument("--split", choices=["all", "train", "val", "test"], default="all")
    p.add_argument("--split-file", help="splits.csv from a run directory")
    p.add_argument(
        "--modality",
        choices=[m.value for m in Modality],
        default=Modality.LOW_CONTRAST.value,
    )
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "ablate",
        help="run the full five-variant comparison on a shared split",
        epilog=_keys_epilog({"preprocess", "model", "generator", "loss", "train", "paths"}),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    _add_common(p)
    p.add_argument("--data", help="dataset manifest (overrides paths.data)")
    p.add_argument("--from-runs", help="rebuild the table from a finished ablation directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("default-config", help="print the default configuration file")
    p.set_defaults(func=lambda args: print(format_config(ExperimentConfig()), end="") or EXIT_OK)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or EXIT_OK
    except ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        print(f"config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExistsError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_EXISTS
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DGMVError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
