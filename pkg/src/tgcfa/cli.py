"""Command line entry point: ``tgcfa <command> ...``.

Exit codes: 0 success, 1 validation error (bad input, missing file,
unknown domain), 2 runtime error. Artifacts are written under a
``.partial`` name and renamed only on success.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import shutil
import sys
from pathlib import Path

import yaml

from . import report as report_mod
from .errors import FormatError, ManifestViolation, TGCFAError, ValidationError
from .harness import ExperimentConfig, evaluate, run_trend_study, train
from .synthdom import DatasetConfig, build_from_config
from .textbank import build_table, load_descriptions, make_provider, packaged_descriptions, save_table

logger = logging.getLogger("tgcfa")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _partial(path: Path) -> Path:
    return path.with_name(path.name + ".partial")


@contextlib.contextmanager
def _atomic_file(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = _partial(path)
    yield tmp
    tmp.replace(path)


@contextlib.contextmanager
def _atomic_dir(path):
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        raise ValidationError(f"output directory {path} is not empty; clear it first")
    tmp = _partial(path)
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    yield tmp
    if path.exists():
        path.rmdir()
    tmp.rename(path)


def _load_mapping(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    text = path.read_text()
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ValidationError(f"{path}: cannot parse: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: top level must be a mapping")
    return doc


def _require(args, name: str, flag: str):
    value = getattr(args, name, None)
    if value is None:
        raise ValidationError(f"{flag} is required")
    return value


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_embed_text(args) -> int:
    source = args.descriptions
    path = Path(source)
    if not path.exists() and source in ("synth", "abdomen"):
        path = packaged_descriptions(source)
    dset = load_descriptions(path)
    provider = make_provider(args.provider, dim=args.dim, seed=_seed(args, 0),
                             import_path=args.import_file, model_name=args.model)
    table = build_table(dset, provider, normalize_variants=args.normalize_variants)
    out = Path(_require(args, "out", "--out"))
    with _atomic_file(out) as tmp:
        save_table(table, tmp)
    print(f"wrote {table.n}x{table.k} embedding table to {out} ({table.encoder_fingerprint})")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    doc = _load_mapping(args.config) if args.config else {}
    seed = _seed(args, doc.pop("seed", 0))
    config = DatasetConfig.from_dict(doc)
    for name in ("n_train", "n_val", "n_test"):
        if getattr(args, name) is not None:
            setattr(config, name, getattr(args, name))
    out = Path(_require(args, "out", "--out"))
    with _atomic_dir(out) as tmp:
        manifest = build_from_config(config, tmp, seed)
    counts = {s: len(manifest.select(s)) for s in ("train", "val", "test")}
    print(f"wrote dataset to {out}: {counts} (source {config.source}, targets {list(config.targets)})")
    return EXIT_OK


def _experiment_config(args) -> ExperimentConfig:
    doc = _load_mapping(args.config) if args.config else {}
    cfg = ExperimentConfig.from_dict(doc)
    overrides = {
        "data_dir": args.data,
        "table_path": args.table,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "neg_margin": args.neg_margin,
        "align_weight": args.align_weight,
        "reduce": args.reduce,
    }
    cfg = cfg.replace(**{k: v for k, v in overrides.items() if v is not None})
    if args.no_align:
        cfg = cfg.replace(use_align=False)
    if args.exclude_background:
        cfg = cfg.replace(include_background=False)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    out = Path(_require(args, "out", "--out"))
    with _atomic_dir(out) as tmp:
        record = train(cfg.replace(out_dir=str(tmp)))
        # paths inside the record should name the final directory
        if record.checkpoint:
            record.checkpoint = str(out / Path(record.checkpoint).name)
        record.config["out_dir"] = str(out)
        record.save(tmp / "run.json")
    val = record.final.get("val", {}).get("mean_foreground")
    print(f"trained {len(record.epochs)} epoch(s) in {record.wall_clock:.1f}s; "
          f"best epoch {record.best_epoch}; source val Dice {val}; checkpoint {record.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    data = args.data or ExperimentConfig().resolved_data_dir()
    reports = evaluate(args.checkpoint, data, args.domains, args.split)
    for domain, rep in reports.items():
        per = " ".join(f"{v:6.2f}" for v in rep.per_class)
        print(f"{domain:>12}  mean fg {rep.mean_foreground:6.2f}  per class [{per}]")
    out = getattr(args, "out", None)
    if out:
        with _atomic_file(out) as tmp:
            tmp.write_text(json.dumps({d: r.to_dict() for d, r in reports.items()}, indent=2) + "\n")
    return EXIT_OK


def cmd_trend(args) -> int:
    cfg = _experiment_config(args)
    out = Path(_require(args, "out", "--out"))
    with _atomic_dir(out) as tmp:
        summary = run_trend_study(cfg, args.seeds, tmp)
        for run in summary["runs"]:
            for arm in ("baseline", "tgcfa"):
                run[arm]["run_dir"] = str(out / Path(run[arm]["run_dir"]).name)
        (tmp / "trend.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(report_mod.render_text(summary), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    study = report_mod.load_study(args.run_dir)
    text = report_mod.render_csv(study) if args.format == "csv" else report_mod.render_text(study)
    print(text, end="")
    out = Path(getattr(args, "out", None) or Path(args.run_dir) / "report")
    out.mkdir(parents=True, exist_ok=True)
    table_name = "summary.csv" if args.format == "csv" else "summary.txt"
    with _atomic_file(out / table_name) as tmp:
        tmp.write_text(text)
    for path in report_mod.write_plots(study, out):
        print(f"wrote {path}")
    return EXIT_OK


def _seed(args, default):
    value = getattr(args, "seed", None)
    return default if value is None else value


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master random seed")
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML or JSON config file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log progress to stderr")

    parser = _Parser(prog="tgcfa", description="Text-guided contrastive feature alignment toolkit.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("embed-text", parents=[common], help="build a label embedding table")
    p.add_argument("--descriptions", required=True,
                   help="description JSON file, or a packaged set name (synth, abdomen)")
    p.add_argument("--provider", choices=("stub", "import", "pretrained"), default="stub",
                   help="text encoder provider")
    p.add_argument("--import-file", help="embedding export for --provider import")
    p.add_argument("--model", default="openai/clip-vit-base-patch32",
                   help="local model name for --provider pretrained")
    p.add_argument("--dim", type=int, default=64, help="stub embedding dimension")
    p.add_argument("--normalize-variants", action="store_true",
                   help="L2-normalise each variant embedding before averaging")
    p.set_defaults(func=cmd_embed_text)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic benchmark")
    p.add_argument("--n-train", type=int, help="training scenes (source domain)")
    p.add_argument("--n-val", type=int, help="validation scenes (source domain)")
    p.add_argument("--n-test", type=int, help="test scenes per domain")
    p.set_defaults(func=cmd_gen_data)

    def experiment_flags(p):
        p.add_argument("--data", help="dataset directory (default $TGCFA_DATA_DIR)")
        p.add_argument("--table", help="embedding table written by embed-text")
        p.add_argument("--epochs", type=int, help="training epochs")
        p.add_argument("--batch-size", type=int, help="batch size")
        p.add_argument("--lr", type=float, help="initial learning rate")
        p.add_argument("--neg-margin", type=float, help="push-term margin in [-1, 1]; 1 is the literal form")
        p.add_argument("--align-weight", type=float, help="weight on the alignment loss")
        p.add_argument("--reduce", choices=("mean", "sum"), help="reduction over feature cells")
        p.add_argument("--no-align", action="store_true", help="train the segmentation-only baseline")
        p.add_argument("--exclude-background", action="store_true",
                       help="leave the background label out of the alignment sets")

    p = sub.add_parser("train", parents=[common], help="train on the source domain")
    experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="per-domain Dice of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--data", help="dataset directory (default $TGCFA_DATA_DIR)")
    p.add_argument("--domains", nargs="+", help="domains to evaluate (default: all)")
    p.add_argument("--split", default="test", help="manifest split to evaluate")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trend", parents=[common], help="paired baseline vs alignment study")
    experiment_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="seeds (at least 3)")
    p.set_defaults(func=cmd_trend)

    p = sub.add_parser("report", parents=[common], help="tables and plots for a trend study")
    p.add_argument("--run-dir", required=True, help="directory written by the trend command")
    p.add_argument("--format", choices=("text", "csv"), default="text", help="table format")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "config"):
        args.config = None
    if getattr(args, "verbose", False):
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (ValidationError, FormatError, ManifestViolation, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TGCFAError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
