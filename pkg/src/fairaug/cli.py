"""Command-line workflows: ``prepare`` -> ``train`` -> ``evaluate`` -> ``report``.

Configuration precedence is command-line flags, then the ``--config`` JSON
file, then the preset. The effective configuration is written to
``config.json`` in every output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .dataset import (
    DatasetError,
    assign_groups,
    binarize,
    build_dataset,
    kcore_filter,
    load_attributes,
    load_dataset,
    load_ratings,
    save_dataset,
    split,
)
from .metrics import DEFAULT_KS, evaluate, js_report
from .trainer import CheckpointError, ConfigError, TrainConfig, TrainingDiverged, load_model, read_manifest, train

logger = logging.getLogger("fairaug")

DATA_KEYS = ("threshold", "kcore", "split", "split_scope", "group_mapping", "ratings_format",
             "users_format", "attribute_column")

PRESETS = {
    "movielens": {
        "threshold": 3.0, "kcore": 0, "split": "ratio_80_20", "split_scope": "per_user",
        "group_mapping": {"F": 0, "M": 1}, "attribute_column": 1,
        "mask_ratio": 0.3,
    },
    "lastfm": {
        "threshold": 0.0, "kcore": 10, "split": "ratio_70_10_20", "split_scope": "per_user",
        "group_mapping": {"f": 0, "m": 1}, "attribute_column": 1,
        "mask_ratio": 0.3,
    },
    "custom": {
        "threshold": 3.0, "kcore": 0, "split": "ratio_80_20", "split_scope": "per_user",
        "group_mapping": {"0": 0, "1": 1}, "attribute_column": 1,
    },
}


def data_root() -> Path | None:
    root = os.environ.get("FDA_DATA_DIR")
    return Path(root) if root else None


def resolve_path(p: str | os.PathLike | None) -> Path | None:
    """Existing paths as given; otherwise try them under ``$FDA_DATA_DIR``."""
    if p is None:
        return data_root()
    path = Path(p)
    if not path.exists() and not path.is_absolute() and data_root() is not None:
        alt = data_root() / path
        if alt.exists():
            return alt
    return path


def guess_format(path: Path) -> str:
    return "movielens_dat" if path.suffix == ".dat" else "tsv"


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def effective_config(args) -> dict:
    preset = getattr(args, "preset", None) or "custom"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = {"preset": preset}
    cfg.update(PRESETS[preset])
    file_cfg = load_config_file(getattr(args, "config", None))
    if "preset" in file_cfg and getattr(args, "preset", None) is None:
        cfg.update(PRESETS[file_cfg["preset"]])
    cfg.update(file_cfg)
    for key, val in overrides(args).items():
        cfg[key] = val
    return cfg


def overrides(args) -> dict:
    out = {}
    mapping = {
        "seed": "seed", "mask_ratio": "mask_ratio", "epsilon": "epsilon",
        "warmup_epochs": "warmup_epochs", "epochs": "epochs", "batch_size": "batch_size",
        "backbone": "backbone", "threshold": "threshold", "kcore": "kcore", "split": "split",
        "lr": "lr", "inner_lr": "inner_lr", "inner_steps": "inner_steps", "eval_every": "eval_every",
    }
    for attr, key in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            out[key] = val
    if getattr(args, "fda", None) is not None:
        out["fda"] = args.fda == "on"
    if getattr(args, "k", None):
        out["ks"] = list(args.k)
    return out


def train_config_from(cfg: dict) -> TrainConfig:
    keys = set(TrainConfig.__dataclass_fields__)
    unknown = set(cfg) - keys - set(DATA_KEYS) - {"preset"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    tc = TrainConfig.from_dict({k: v for k, v in cfg.items() if k in keys})
    if not tc.fda:
        tc.mask_ratio = 0.0
    return tc


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_prepare(args) -> int:
    cfg = effective_config(args)
    cfg.setdefault("seed", 0)
    ratings_path = resolve_path(args.ratings)
    users_path = resolve_path(args.users)
    for label, p in (("ratings", ratings_path), ("attribute", users_path)):
        if p is None or not p.exists():
            raise DatasetError(f"{label} file not found: {p}")
    rfmt = cfg.get("ratings_format") or guess_format(ratings_path)
    ufmt = cfg.get("users_format") or guess_format(users_path)

    raw = load_ratings(ratings_path, rfmt)
    pairs = binarize(raw, float(cfg["threshold"]))
    if cfg.get("kcore"):
        pairs = kcore_filter(pairs, int(cfg["kcore"]))
    if not pairs:
        raise DatasetError("no interactions left after binarization/filtering")
    part = split(pairs, cfg["split"], int(cfg["seed"]), cfg.get("split_scope", "per_user"))
    profiles = load_attributes(users_path, ufmt, int(cfg.get("attribute_column", 1)))
    users = sorted({u for u, _ in part.train})
    labels = assign_groups(profiles, cfg["group_mapping"], users)
    ds = build_dataset(part, labels)

    out = Path(args.out)
    manifest = {
        "preset": cfg["preset"], "seed": int(cfg["seed"]), "threshold": float(cfg["threshold"]),
        "kcore": int(cfg.get("kcore") or 0), "split": cfg["split"], "split_scope": cfg.get("split_scope"),
        "group_mapping": cfg["group_mapping"], "raw_records": len(raw), "positive_pairs": len(pairs),
        "sources": {"ratings": ratings_path.name, "users": users_path.name},
    }
    info = save_dataset(ds, out, manifest)
    write_json(out / "config.json", cfg)
    print(f"prepared {out}: M={info['num_users']} N={info['num_items']} "
          f"train={info['counts']['train']} validation={info['counts']['validation']} test={info['counts']['test']}")
    return 0


def cmd_train(args) -> int:
    cfg = effective_config(args)
    tc = train_config_from(cfg)
    tc.validate()
    data_dir = resolve_path(args.data)
    if data_dir is None:
        raise ConfigError("no dataset directory: pass --data or set FDA_DATA_DIR")
    ds, manifest = load_dataset(data_dir)
    indptr, _ = ds.train_csr()
    rankable = ds.num_items - int(np.diff(indptr).max())
    for k in tc.ks:
        if k > rankable:
            raise ConfigError(f"K={k} exceeds the {rankable} items rankable for the heaviest user")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    effective = {**cfg, **tc.to_dict()}
    write_json(out / "config.json", effective)
    try:
        _, log = train(ds, tc, checkpoint_dir=out, resume=args.resume, dataset_manifest=manifest)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    last = log.records[-1]
    print(f"trained {tc.epochs} epochs -> {out} (final outer loss {last['outer_loss']:.5f})")
    return 0


def write_metrics_csv(path: Path, results: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "hr", "ndcg", "dp", "eo"])
        for k in sorted(results):
            r = results[k]
            w.writerow([k, repr(r["hr"]), repr(r["ndcg"]), repr(r["dp"]), repr(r["eo"])])


def read_metrics_csv(path) -> dict:
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out[int(row["k"])] = {m: float(row[m]) for m in ("hr", "ndcg", "dp", "eo")}
    return out


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    ckpt_manifest = read_manifest(ckpt)
    data_dir = resolve_path(args.data)
    if data_dir is None:
        raise ConfigError("no dataset directory: pass --data or set FDA_DATA_DIR")
    ds, _ = load_dataset(data_dir)
    ks = tuple(args.k) if args.k else tuple(ckpt_manifest["config"].get("ks", DEFAULT_KS))
    E = load_model(ckpt, ds)
    results = evaluate(E, ds, ks)
    out = Path(args.out) if args.out else ckpt
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", results)
    write_json(out / "js_report.json", js_report(E, ds, ks))
    # no paths here: identical runs in different directories must produce identical files
    model = "best_embeddings.bin" if (ckpt / "best_embeddings.bin").exists() else "embeddings.bin"
    write_json(out / "eval_config.json", {"model": model, "dataset": ckpt_manifest["dataset"], "ks": list(ks)})
    for k in ks:
        r = results[k]
        print(f"K={k:<3d} HR={r['hr']:.4f} NDCG={r['ndcg']:.4f} DP={r['dp']:.4f} EO={r['eo']:.4f}")
    return 0


def compare(tables: list[dict]) -> list[dict]:
    base = tables[0]
    ks = sorted(base)
    for t in tables[1:]:
        if sorted(t) != ks:
            raise ValueError("metrics files have different K lists")
    rows = []
    for k in ks:
        for m in ("hr", "ndcg", "dp", "eo"):
            row = {"k": k, "metric": m, "values": [t[k][m] for t in tables]}
            b = base[k][m]
            row["deltas"] = [t[k][m] - b for t in tables[1:]]
            row["relative"] = [(t[k][m] - b) / b if b else 0.0 for t in tables[1:]]
            rows.append(row)
    return rows


def cmd_report(args) -> int:
    if len(args.metrics) < 2:
        raise ConfigError("report needs at least two metrics.csv files")
    tables = [read_metrics_csv(p) for p in args.metrics]
    names = args.names or [Path(p).parent.name or Path(p).stem for p in args.metrics]
    rows = compare(tables)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["k", "metric"] + [f"value[{n}]" for n in names]
    header += [f"delta[{n}]" for n in names[1:]] + [f"rel[{n}]" for n in names[1:]]
    with open(out / "comparison.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r["k"], r["metric"], *map(repr, r["values"]), *map(repr, r["deltas"]),
                        *map(repr, r["relative"])])
    lines = [f"{'K':>3} {'metric':<6} " + " ".join(f"{n[:12]:>12}" for n in names)
             + "".join(f" {'d:' + n[:10]:>12} {'rel':>8}" for n in names[1:])]
    for r in rows:
        line = f"{r['k']:>3} {r['metric']:<6} " + " ".join(f"{v:12.4f}" for v in r["values"])
        line += "".join(f" {d:+12.4f} {rel:+8.2%}" for d, rel in zip(r["deltas"], r["relative"]))
        lines.append(line)
    text = "\n".join(lines) + "\n"
    (out / "comparison.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairaug", description="Fairness-aware recommendation via data augmentation")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1 for bit-exact runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pp = sub.add_parser("prepare", help="binarize, filter, split and label a raw rating log")
    pp.add_argument("--ratings", required=True)
    pp.add_argument("--users", required=True, help="user attribute file")
    pp.add_argument("--preset", choices=sorted(PRESETS))
    pp.add_argument("--config")
    pp.add_argument("--seed", type=int)
    pp.add_argument("--threshold", type=float)
    pp.add_argument("--kcore", type=int)
    pp.add_argument("--split", choices=["ratio_80_20", "ratio_70_10_20"])
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_prepare)

    pt = sub.add_parser("train", help="train a baseline or augmented model")
    pt.add_argument("--data", help="prepared dataset directory (default $FDA_DATA_DIR)")
    pt.add_argument("--preset", choices=sorted(PRESETS))
    pt.add_argument("--config")
    pt.add_argument("--seed", type=int)
    pt.add_argument("--fda", choices=["on", "off"])
    pt.add_argument("--mask-ratio", type=float)
    pt.add_argument("--epsilon", type=float)
    pt.add_argument("--warmup-epochs", type=int)
    pt.add_argument("--epochs", type=int)
    pt.add_argument("--batch-size", type=int)
    pt.add_argument("--lr", type=float)
    pt.add_argument("--inner-lr", type=float)
    pt.add_argument("--inner-steps", type=int)
    pt.add_argument("--eval-every", type=int)
    pt.add_argument("--backbone", choices=["mf", "graph"])
    pt.add_argument("--k", type=int, nargs="+")
    pt.add_argument("--resume", action="store_true")
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("evaluate", help="write metrics.csv and js_report.json for a checkpoint")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data")
    pe.add_argument("--k", type=int, nargs="+")
    pe.add_argument("--out")
    pe.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("report", help="compare two or more metrics.csv files against the first")
    pr.add_argument("metrics", nargs="+")
    pr.add_argument("--names", nargs="+")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "report" and args.names and len(args.names) != len(args.metrics):
        parser.error("--names needs one name per metrics file")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
