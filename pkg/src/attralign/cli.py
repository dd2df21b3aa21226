"""Command-line entry point: describe, split, train, eval, ablate, report.

Everything but the verb, config path, and ``--set`` overrides lives in
declarative config files.  Each command writes a run manifest (config hash,
seeds, artifact paths, effective config) into its output directory and
refuses to clobber an existing run unless ``--force`` is given.

Exit codes: 0 ok, 1 validation failure, 2 runtime failure, 3 external
service failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import from_raw_dict, load_config
from .datasets import DatasetManifest, FoldAssignment, class_id_for, split_folds
from .describer import GenerationJob, default_template, describe_all
from .errors import AttralignError, ConfigError, ServiceError
from .evaluation import AblationVariant, EvalReport, evaluate_fold, run_ablation
from .reporting import save_ablation_report, save_eval_report
from .serialization import load_checkpoint
from .training import prepare_run, train_stage1, train_stage2

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_SERVICE = 3


def _parse_overrides(pairs: list[str] | None) -> dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(pair, "override must look like key=value")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value
    return overrides


def _write_run_manifest(out_dir: Path, verb: str, payload: dict, force: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"run_manifest_{verb}.json"
    if path.exists() and not force:
        raise ConfigError(str(path), "run manifest exists, use --force to re-run")
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _guard_existing(out_dir: Path, verb: str, force: bool) -> None:
    path = out_dir / f"run_manifest_{verb}.json"
    if path.exists() and not force:
        raise ConfigError(str(path), "run manifest exists, use --force to re-run")


def cmd_describe(args) -> int:
    classes: list[tuple[str, str]] = []
    seen = set()
    with Path(args.classes).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "class" not in reader.fieldnames:
            raise ConfigError(args.classes, "classes CSV needs a 'class' column")
        for row in reader:
            cid = class_id_for(args.dataset_tag, row["class"])
            if cid not in seen:
                seen.add(cid)
                classes.append((cid, row["class"]))
    if not classes:
        raise ConfigError(args.classes, "no classes found")
    template = default_template(include_definition=args.include_definition)
    job = GenerationJob(
        classes=tuple(classes),
        model_name=args.model,
        cache_path=Path(args.cache),
        max_retries=args.max_retries,
    )
    store = describe_all(job, template)
    out_dir = Path(args.cache).resolve().parent
    _write_run_manifest(
        out_dir,
        "describe",
        {
            "verb": "describe",
            "model": args.model,
            "classes": len(classes),
            "entries": len(store),
            "artifacts": {"cache": str(Path(args.cache).resolve())},
        },
        force=True,  # describe is idempotent through its cache
    )
    logger.info("described %d classes into %s", len(store), args.cache)
    return EXIT_OK


def cmd_split(args) -> int:
    out_path = Path(args.out)
    _guard_existing(out_path.resolve().parent, "split", args.force)
    manifest = DatasetManifest.from_csv(args.manifest, args.dataset_tag)
    assignment = split_folds(manifest.class_counts, k=args.k, seed=args.seed)
    assignment.to_json(out_path)
    _write_run_manifest(
        out_path.resolve().parent,
        "split",
        {
            "verb": "split",
            "seeds": {"split": args.seed},
            "k": args.k,
            "classes": len(assignment.fold_of),
            "artifacts": {"assignment": str(out_path.resolve())},
        },
        force=True,  # guarded above
    )
    logger.info("wrote fold assignment for %d classes to %s", len(assignment.fold_of), args.out)
    return EXIT_OK


def _corpus_artifacts(ctx, out_dir: Path) -> dict[str, str]:
    manifest_path = out_dir / "manifest.csv"
    store_path = out_dir / "descriptions.jsonl"
    folds_path = out_dir / "fold_assignment.json"
    ctx.manifest.to_csv(manifest_path, names=ctx.class_names)
    ctx.store.save_jsonl(store_path)
    ctx.assignment.to_json(folds_path)
    return {
        "manifest": str(manifest_path),
        "descriptions": str(store_path),
        "fold_assignment": str(folds_path),
    }


def cmd_train(args) -> int:
    overrides = _parse_overrides(args.set)
    config, effective = load_config(args.config, overrides)
    out_dir = Path(config.output_dir)
    _guard_existing(out_dir, "train", args.force)
    ctx = prepare_run(config)
    artifacts = _corpus_artifacts(ctx, out_dir)

    if args.stage in ("1", "all"):
        train_stage1(ctx, out_dir=out_dir)
        artifacts["stage1"] = str(out_dir / "stage1.ckpt")
    if args.stage in ("2", "all"):
        stage1_path = Path(args.stage1_checkpoint or out_dir / "stage1.ckpt")
        if not stage1_path.exists():
            raise ConfigError(str(stage1_path), "stage-1 checkpoint not found; run --stage 1 first")
        stage1 = load_checkpoint(stage1_path)
        train_stage2(ctx, stage1, out_dir=out_dir)
        artifacts["stage2"] = str(out_dir / "stage2.ckpt")

    _write_run_manifest(
        out_dir,
        "train",
        {
            "verb": "train",
            "stage": args.stage,
            "config_hash": config.config_hash(),
            "seeds": effective["seeds"],
            "effective_config": {k: v for k, v in effective.items() if k != "output_dir"},
            "artifacts": artifacts,
        },
        force=True,  # guarded above
    )
    logger.info("training done; artifacts under %s", out_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    overrides = _parse_overrides(args.set)
    config, effective = load_config(args.config, overrides)
    out_dir = Path(config.output_dir)
    _guard_existing(out_dir, "eval", args.force)
    ckpt_path = Path(args.checkpoint or out_dir / "stage2.ckpt")
    if not ckpt_path.exists():
        raise ConfigError(str(ckpt_path), "checkpoint not found")
    checkpoint = load_checkpoint(ckpt_path)
    ctx = prepare_run(config)
    report = evaluate_fold(ctx, checkpoint)
    artifacts = save_eval_report(report, out_dir)
    _write_run_manifest(
        out_dir,
        "eval",
        {
            "verb": "eval",
            "config_hash": config.config_hash(),
            "seeds": effective["seeds"],
            "effective_config": {k: v for k, v in effective.items() if k != "output_dir"},
            "artifacts": artifacts,
        },
        force=True,
    )
    print(f"fold {config.eval_fold} accuracy: {report.mean_accuracy:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    suite_path = Path(args.suite)
    try:
        suite = yaml.safe_load(suite_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(str(suite_path), "suite file not found") from None
    for key in ("base_config", "output_dir", "seeds", "variants"):
        if key not in suite:
            raise ConfigError(f"suite.{key}", "missing required key")
    base_path = (suite_path.parent / suite["base_config"]).resolve()
    try:
        base_raw = yaml.safe_load(base_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(str(base_path), "base config not found") from None
    from_raw_dict(base_raw)  # validate the base before sweeping
    variants = [
        AblationVariant(name=v["name"], overrides=dict(v.get("overrides") or {}))
        for v in suite["variants"]
    ]
    out_dir = Path(suite["output_dir"])
    _guard_existing(out_dir, "ablate", args.force)
    report = run_ablation(base_raw, variants, seeds=list(suite["seeds"]))
    artifacts = save_ablation_report(report, out_dir)
    _write_run_manifest(
        out_dir,
        "ablate",
        {
            "verb": "ablate",
            "axis": report.axis,
            "seeds": report.seeds,
            "variants": [v.name for v in variants],
            "artifacts": artifacts,
        },
        force=True,
    )
    from .reporting import ablation_rows, render_text_table

    headers, rows = ablation_rows(report)
    print(render_text_table(headers, rows), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    rendered = []
    eval_json = run_dir / "eval_report.json"
    ablation_json = run_dir / "ablation.json"
    if eval_json.exists():
        report = EvalReport.from_json(eval_json.read_text(encoding="utf-8"))
        save_eval_report(report, run_dir)
        rendered.append("eval")
    if ablation_json.exists():
        from .evaluation import AblationReport, AblationRow

        data = json.loads(ablation_json.read_text(encoding="utf-8"))
        report = AblationReport(
            axis=data["axis"],
            rows=[AblationRow(**r) for r in data["rows"]],
            seeds=data["seeds"],
            base_config=data["base_config"],
        )
        save_ablation_report(report, run_dir)
        rendered.append("ablation")
    if not rendered:
        raise ConfigError(str(run_dir), "no eval_report.json or ablation.json found")
    print(f"rendered {', '.join(rendered)} artifacts under {run_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attralign", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("describe", help="generate class descriptions via the chat service")
    p.add_argument("--classes", required=True, help="manifest CSV listing the classes")
    p.add_argument("--cache", required=True, help="JSON-lines description cache")
    p.add_argument("--model", required=True, help="chat model name")
    p.add_argument("--dataset-tag", default="dataset")
    p.add_argument("--include-definition", action="store_true")
    p.add_argument("--max-retries", type=int, default=5)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("split", help="write a balanced class-disjoint fold assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset-tag", default="dataset")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="run the two-stage training pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", choices=["1", "2", "all"], default="all")
    p.add_argument("--stage1-checkpoint", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="zero-shot evaluation of a trained checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a single-axis ablation suite")
    p.add_argument("--suite", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="re-render tables and figures for a run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("validation: %s", exc)
        return EXIT_VALIDATION
    except ServiceError as exc:
        logger.error("service: %s", exc)
        return EXIT_SERVICE
    except AttralignError as exc:
        logger.error("runtime: %s", exc)
        return EXIT_RUNTIME
    except Exception:  # noqa: BLE001
        logger.exception("unexpected failure")
        return EXIT_RUNTIME


def main() -> None:
    raise SystemExit(dispatch())
