"""Command-line entry point: ``protoground <verb> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import AblationFlags, RunConfig
from .scenes import SPLITS, build_dataset, generate_scene, split_seeds, write_manifest

log = logging.getLogger("protoground")

_SPLIT_SIZE_FIELD = {
    "train": "n_train",
    "val-standard": "n_val",
    "test-standard": "n_test",
    "test-openvocab": "n_openvocab",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML file with RunConfig fields")
    for f in dataclasses.fields(RunConfig):
        if f.name in ("seed", "ablation"):
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=type(f.default), default=None)
    for f in dataclasses.fields(AblationFlags):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, action=argparse.BooleanOptionalAction, default=None)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for name in [*(f.name for f in dataclasses.fields(RunConfig)), *AblationFlags.__dataclass_fields__]:
        if name in ("ablation",):
            continue
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return cfg.replace(**overrides)


def cmd_generate_data(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        n = getattr(cfg, _SPLIT_SIZE_FIELD[split])
        samples = (generate_scene(s, split) for s in split_seeds(split, n, cfg.data_seed))
        write_manifest(out / f"manifest_{split}.jsonl", samples)
        print(f"{split}: {n} samples -> {out / f'manifest_{split}.jsonl'}")
    return 0


def cmd_train(args) -> int:
    from .pipeline import train

    cfg = _config_from_args(args).replace(seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    _, report = train(cfg, out_dir=out)
    print(json.dumps(report.final, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    from .pipeline import TrainedModel, evaluate

    trained = TrainedModel.load(args.run)
    cfg = trained.config
    ds = build_dataset(args.split, getattr(cfg, _SPLIT_SIZE_FIELD[args.split]), cfg.data_seed)
    result = evaluate(trained.model, ds, args.out or args.run)
    print(json.dumps(result.metrics(), indent=2))
    return 0


def cmd_sweep(args) -> int:
    from .pipeline import sweep

    cfg = _config_from_args(args).replace(seed=args.seed)
    rows = sweep(cfg, args.axis, args.values, out_dir=args.out)
    for v, rep in rows:
        print(args.axis, v, json.dumps({k: m["accuracy"] for k, m in rep.final.items()}))
    return 0


def cmd_export_heatmaps(args) -> int:
    from .heatmaps import export_heatmaps
    from .pipeline import TrainedModel

    trained = TrainedModel.load(args.run)
    cfg = trained.config
    ds = build_dataset(args.split, getattr(cfg, _SPLIT_SIZE_FIELD[args.split]), cfg.data_seed)
    paths = export_heatmaps(trained.model, ds, range(min(args.count, len(ds))), args.out)
    print(f"wrote {len(paths)} samples to {args.out}")
    return 0


def cmd_baseline(args) -> int:
    from .pipeline import random_box_baseline

    cfg = _config_from_args(args)
    ds = build_dataset(args.split, getattr(cfg, _SPLIT_SIZE_FIELD[args.split]), cfg.data_seed)
    print(json.dumps({"split": args.split, "random_box_accuracy": random_box_baseline(ds)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoground", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate-data", help="write per-split seed manifests")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one model and evaluate all splits")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a saved run on one split")
    p.add_argument("--run", required=True, help="directory written by `train`")
    p.add_argument("--split", choices=SPLITS, default="test-standard")
    p.add_argument("--out", help="where to write predictions/metrics (default: the run directory)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train once per value of bank size or regression layers")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--axis", choices=("bank_size", "layers"), required=True)
    p.add_argument("--values", type=int, nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-heatmaps", help="coefficient and word-weight images for a saved run")
    p.add_argument("--run", required=True)
    p.add_argument("--split", choices=SPLITS, default="val-standard")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_heatmaps)

    p = sub.add_parser("baseline", help="random-box accuracy on a split")
    _add_config_flags(p)
    p.add_argument("--split", choices=SPLITS, default="val-standard")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
