"""Command-line entry point: ``tsgraph <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import schemas
from .data import SynthSpec, cohort_to_dense, synth_generate, write_csv
from .experiments import ablate, default_flag_sets, explain, ood_run
from .model import ABLATION_FLAGS
from .train import Checkpoint, TrainConfig, evaluate, load_cohort, summarize_seeds, train

log = logging.getLogger("tsgraph")


def _write_json(path: Path, doc, schema: str | None = None):
    if schema is not None:
        schemas.validate(doc, schema)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1))


def _load_config(path, data_dir=None) -> TrainConfig:
    doc = schemas.load_json(path, "train_config") if path else {}
    cfg = TrainConfig.from_dict(doc)
    if data_dir is not None:
        cfg.data = {**cfg.data, "source": "csv", "dir": str(data_dir)}
    return cfg


def cmd_synth_gen(args) -> int:
    spec = SynthSpec.from_dict(schemas.load_json(args.spec, "synth_spec") if args.spec else {})
    cohort = synth_generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "series.csv", cohort_to_dense(cohort), out / "statics.csv")
    _write_json(out / "spec.json", spec.to_dict(), "synth_spec")
    print(f"wrote {len(cohort)} patients to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.data)
    if cfg.data.get("source") == "csv" and "length" not in cfg.data:
        cfg.data["length"] = cfg.synth.length
    cohort = load_cohort(cfg)
    seeds = cfg.seeds if args.all_seeds else [cfg.seed]
    out = Path(args.out)
    scores = []
    for seed in seeds:
        run_cfg = cfg.with_seed(seed)
        res = train(run_cfg, cohort, progress=args.verbose)
        run_dir = out if len(seeds) == 1 else out / f"seed_{seed}"
        res.checkpoint.save(run_dir / "checkpoint")
        _write_json(run_dir / "history.json", res.history)
        if res.best_val is not None:
            _write_json(run_dir / "validation_metrics.json", res.best_val.to_dict(), "metrics_report")
            scores.append(res.best_val.balanced_accuracy)
        print(f"seed {seed}: best epoch {res.best_epoch}, validation balanced accuracy "
              f"{res.best_val.balanced_accuracy if res.best_val else float('nan'):.4f}")
    if len(scores) > 1:
        _write_json(out / "summary.json", summarize_seeds(scores))
    return 0


def _checkpoint_cohort(ck: Checkpoint, data_dir=None):
    cfg = TrainConfig.from_dict(ck.config)
    if data_dir is not None:
        cfg.data = {**cfg.data, "source": "csv", "dir": str(data_dir)}
    return load_cohort(cfg)


def cmd_evaluate(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    cohort = _checkpoint_cohort(ck, args.data)
    split = ck.extra.get("split")
    if split is None:
        raise SystemExit("checkpoint carries no split; retrain or pass a checkpoint written by `train`")
    report = evaluate(ck, cohort, split[args.split])
    doc = report.to_dict()
    schemas.validate(doc, "metrics_report")
    if args.out:
        _write_json(Path(args.out), doc)
    print(json.dumps(doc, indent=1))
    return 0


def cmd_explain(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    cohort = _checkpoint_cohort(ck, args.data)
    exp = explain(ck, cohort, args.out, smooth_sigma=args.smooth, per_label=not args.overall_only)
    print("top features:", ", ".join(exp.overall.top))
    for c, rep in enumerate(exp.per_label):
        print(f"label {c}:", ", ".join(rep.top[:3]))
    return 0


def _parse_flags(text: str | None) -> list[tuple[str, ...]]:
    if not text:
        return default_flag_sets()
    flags = [f.strip().upper() for f in text.split(",") if f.strip()]
    bad = set(flags) - set(ABLATION_FLAGS)
    if bad:
        raise SystemExit(f"unknown ablation flag(s): {', '.join(sorted(bad))}")
    return [()] + [(f,) for f in flags]


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config, args.data)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    table = ablate(cfg, _parse_flags(args.flags), seeds, split=args.split)
    print(table.to_text())
    if args.out:
        _write_json(Path(args.out), table.to_dict(), "ablation_table")
    return 0


def cmd_ood(args) -> int:
    cfg = _load_config(args.config, args.data)
    groups = schemas.load_json(args.groups, "groups")
    rows = ood_run(cfg, groups)
    doc = [r.to_dict() for r in rows]
    for r in rows:
        print(f"{r.name}: in-distribution {r.in_distribution:.4f}, OOD {r.ood:.4f} (n={r.n_ood})")
    if args.out:
        _write_json(Path(args.out), doc, "ood_table")
    return 0


def cmd_schema(args) -> int:
    print(json.dumps(schemas.SCHEMAS[args.name], indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsgraph", description="Dynamic-graph multivariate time-series classifier")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-gen", help="write a synthetic planted cohort as CSV")
    s.add_argument("--spec", help="SynthSpec JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("train", help="train and save the best-validation checkpoint")
    s.add_argument("--config", help="TrainConfig JSON (defaults if omitted)")
    s.add_argument("--data", help="directory with series.csv and statics.csv; synthetic data if omitted")
    s.add_argument("--out", required=True)
    s.add_argument("--all-seeds", action="store_true", help="train every seed listed in the config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="metrics of a checkpoint on one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=["train", "validation", "test"], default="test")
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("explain", help="importance heatmaps, window graphs, top features")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data")
    s.add_argument("--smooth", type=float, default=None, metavar="SIGMA",
                   help="Gaussian smoothing along windows, e.g. 0.6")
    s.add_argument("--overall-only", action="store_true")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("ablate", help="Ref versus each module removed, on identical seeds")
    s.add_argument("--config")
    s.add_argument("--flags", help=f"comma list from {','.join(ABLATION_FLAGS)} (all if omitted)")
    s.add_argument("--seeds", help="comma list; the config's seeds if omitted")
    s.add_argument("--split", choices=["validation", "test"], default="test")
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("ood", help="train without each subgroup and score it out of distribution")
    s.add_argument("--config")
    s.add_argument("--groups", required=True, help="JSON object of name -> predicate")
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ood)

    s = sub.add_parser("schema", help="print a published JSON schema")
    s.add_argument("name", choices=sorted(schemas.SCHEMAS))
    s.set_defaults(func=cmd_schema)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
