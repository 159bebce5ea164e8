"""Command-line entry point: ingest, train, build-store, predict, evaluate, ablate, synth."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import data as D
from .ablation import GRID_KEYS, ablation_run, grid_sweep
from .config import ConfigError, dataclass_from_kv, dataclass_to_kv, format_kv, read_kv_file
from .encoder import Vocabulary
from .evaluation import align_gold, evaluate_probabilities, threshold_sweep
from .knn import KnnConfig, build_datastore, load_datastore, save_datastore
from .training import (LOG_COLUMNS, TrainConfig, load_checkpoint, predict_ensemble,
                       save_checkpoint, train_kfold)

logger = logging.getLogger("lak")

RUN_SUBDIRS = ("checkpoints", "stores", "predictions", "reports", "logs")
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


@dataclass(frozen=True)
class RunConfig(TrainConfig):
    data_dir: str = "data"
    out_dir: str = "run"
    splits: str = "training,validation"
    split: str = "test"
    eval_split: str = "validation"
    k: int = 8
    tau: float = 1.0
    lam: float = 0.3
    threshold: float = 0.5
    macro_mode: str = "all"
    blend_after_average: bool = False
    designated_fold: int = 0
    jobs: int = 1
    seeds: str = "0,1,2"

    def train_config(self) -> TrainConfig:
        return TrainConfig(**dataclass_to_kv(self, _TRAIN_KEYS))

    def knn_config(self) -> KnnConfig:
        return KnnConfig(self.k, self.tau, self.lam)


# file/flag spelling -> field name
_ALIASES = {"lambda": "lam", "tau_prime": "tau_prime"}
_REVERSE = {"lam": "lambda"}


def _canon(key: str) -> str:
    key = key.replace("-", "_")
    return _ALIASES.get(key, key)


def resolve_config(config_path: Optional[str], overrides: Dict[str, object]) -> RunConfig:
    """defaults < LAK_SEED env < config file < command-line flags."""
    values: Dict[str, object] = {}
    if os.environ.get("LAK_SEED"):
        values["seed"] = os.environ["LAK_SEED"]
    if config_path:
        values.update({_canon(k): v for k, v in read_kv_file(config_path).items()})
    values.update({k: v for k, v in overrides.items() if v is not None})
    return dataclass_from_kv(RunConfig, values)


def write_resolved(cfg: RunConfig, command: str) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    kv = {_REVERSE.get(k, k): v for k, v in dataclasses.asdict(cfg).items()}
    with open(os.path.join(cfg.out_dir, f"config.{command}.txt"), "w", encoding="utf-8") as handle:
        handle.write(format_kv(kv))


def run_dirs(out_dir: str) -> Dict[str, str]:
    dirs = {name: os.path.join(out_dir, name) for name in RUN_SUBDIRS}
    for path in dirs.values():
        os.makedirs(path, exist_ok=True)
    return dirs


# --- data loading ------------------------------------------------------------

def split_paths(data_dir: str, split: str):
    args = os.path.join(data_dir, f"arguments-{split}.tsv")
    labels = os.path.join(data_dir, f"labels-{split}.tsv")
    if not os.path.exists(args):
        raise FileNotFoundError(f"missing arguments file {args}")
    return args, labels if os.path.exists(labels) else None


def load_split(data_dir: str, split: str, categories: Optional[Sequence[str]] = None) -> D.Dataset:
    args, labels = split_paths(data_dir, split)
    return D.load_dataset(args, labels, categories)


def load_training_data(cfg: RunConfig) -> D.Dataset:
    names = [s.strip() for s in cfg.splits.split(",") if s.strip()]
    first = load_split(cfg.data_dir, names[0])
    parts = [first] + [load_split(cfg.data_dir, s, first.categories) for s in names[1:]]
    merged = D.merge_datasets(parts)
    missing = merged.missing_labels()
    if missing:
        raise ValueError(f"training data has {len(missing)} unlabeled records, e.g. {missing[:5]}")
    return merged


def ckpt_path(dirs, fold):
    return os.path.join(dirs["checkpoints"], f"fold-{fold}.ckpt")


def store_path(dirs, fold):
    return os.path.join(dirs["stores"], f"fold-{fold}.dstore")


def read_fold_file(path: str) -> Dict[str, int]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing fold assignment {path}; run 'train' first")
    with open(path, encoding="utf-8") as handle:
        next(handle)
        return {arg_id: int(f) for arg_id, f in (line.rstrip("\n").split("\t") for line in handle)}


def training_portions(cfg: RunConfig, dirs) -> List[D.Dataset]:
    dataset = load_training_data(cfg)
    folds = read_fold_file(os.path.join(dirs["checkpoints"], "folds.tsv"))
    count = max(folds.values()) + 1
    return [dataset.subset([i for i, r in enumerate(dataset.records) if folds.get(r.id) != f])
            for f in range(count)]


def write_probabilities(path: str, ids, categories, probs) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\t".join([D.ID_COLUMN, *categories]) + "\n")
        for arg_id, row in zip(ids, probs):
            handle.write("\t".join([arg_id, *(f"{p:.8f}" for p in row)]) + "\n")


def read_probabilities(path: str):
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().rstrip("\n").split("\t")
        if header[0] != D.ID_COLUMN:
            raise D.SchemaError(f"{path}: first column must be {D.ID_COLUMN!r}")
        ids, rows = [], []
        for lineno, line in enumerate(handle, 2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(header):
                raise ValueError(f"{path}: row {lineno} has {len(parts)} fields, expected {len(header)}")
            ids.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    return ids, tuple(header[1:]), np.asarray(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)


# --- commands ----------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, out=None) -> D.Dataset:
    out = out or sys.stdout
    dataset = load_split(cfg.data_dir, cfg.split)
    dataset.texts()  # rendering rejects empty conclusions/premises
    out.write(f"records\t{len(dataset)}\n")
    out.write(f"labeled\t{len(dataset) - len(dataset.missing_labels())}\n")
    if dataset.labels:
        Y = np.asarray([dataset.labels[i] for i in dataset.ids if i in dataset.labels], dtype=np.float64)
        for name, rate in zip(dataset.categories, Y.mean(0)):
            out.write(f"prevalence\t{name}\t{rate:.4f}\n")
    return dataset


def cmd_train(cfg: RunConfig) -> List[str]:
    dirs = run_dirs(cfg.out_dir)
    write_resolved(cfg, "train")
    dataset = load_training_data(cfg)
    tcfg = cfg.train_config()
    assign = D.fold_assignment(len(dataset), tcfg.folds, tcfg.seed)
    with open(os.path.join(dirs["checkpoints"], "folds.tsv"), "w", encoding="utf-8") as handle:
        handle.write(f"{D.ID_COLUMN}\tfold\n")
        for r, f in zip(dataset.records, assign):
            handle.write(f"{r.id}\t{f}\n")
    ckpts = train_kfold(dataset, tcfg, jobs=cfg.jobs)
    for ck in ckpts:
        with open(os.path.join(dirs["logs"], f"train-fold-{ck.fold}.tsv"), "w", encoding="utf-8") as log:
            _write_history(log, ck.history)
    paths = []
    for ck in ckpts:
        path = ckpt_path(dirs, ck.fold)
        save_checkpoint(ck, path)
        Vocabulary(ck.vocab).save(os.path.join(dirs["checkpoints"], f"vocab-fold-{ck.fold}.txt"))
        logger.info("fold %d: best holdout macro-F1 %.4f at epoch %d", ck.fold, ck.best_metric, ck.best_epoch)
        paths.append(path)
    return paths


def _write_history(log, history):
    log.write("\t".join(LOG_COLUMNS) + "\n")
    for row in history:
        log.write("\t".join([str(int(row["epoch"]))] + [f"{row[c]:.6f}" for c in LOG_COLUMNS[1:]]) + "\n")


def _load_checkpoints(dirs) -> list:
    folds = read_fold_file(os.path.join(dirs["checkpoints"], "folds.tsv"))
    count = max(folds.values()) + 1
    out = []
    for f in range(count):
        path = ckpt_path(dirs, f)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing checkpoint {path}")
        out.append(load_checkpoint(path))
    return out


def cmd_build_store(cfg: RunConfig) -> List[str]:
    dirs = run_dirs(cfg.out_dir)
    write_resolved(cfg, "build-store")
    ckpts = _load_checkpoints(dirs)
    portions = training_portions(cfg, dirs)
    paths = []
    for f, (ck, train) in enumerate(zip(ckpts, portions)):
        store = build_datastore(ck.build_model(), train, ck.checksum)
        save_datastore(store, store_path(dirs, f))
        paths.append(store_path(dirs, f))
    if cfg.blend_after_average:
        ck = ckpts[cfg.designated_fold]
        full = build_datastore(ck.build_model(), load_training_data(cfg), ck.checksum)
        path = os.path.join(dirs["stores"], "full.dstore")
        save_datastore(full, path)
        paths.append(path)
    return paths


def cmd_predict(cfg: RunConfig) -> np.ndarray:
    dirs = run_dirs(cfg.out_dir)
    write_resolved(cfg, "predict")
    ckpts = _load_checkpoints(dirs)
    categories = ckpts[0].categories
    dataset = load_split(cfg.data_dir, cfg.split, categories)
    knn = cfg.knn_config()
    stores, full = None, None
    if knn.blend > 0:
        if cfg.blend_after_average:
            ck = ckpts[cfg.designated_fold]
            full = load_datastore(os.path.join(dirs["stores"], "full.dstore"), ck.config.d, categories, ck.checksum)
        else:
            stores = []
            for f, ck in enumerate(ckpts):
                path = store_path(dirs, f)
                if not os.path.exists(path):
                    raise FileNotFoundError(f"missing datastore {path}; run 'build-store' first")
                stores.append(load_datastore(path, ck.config.d, categories, ck.checksum))
    probs = predict_ensemble(ckpts, stores, dataset, knn, cfg.blend_after_average, full, cfg.designated_fold)
    write_probabilities(os.path.join(dirs["predictions"], f"probabilities-{cfg.split}.tsv"),
                        dataset.ids, categories, probs)
    binary = (probs >= cfg.threshold).astype(int)
    D.write_labels_tsv({i: tuple(row) for i, row in zip(dataset.ids, binary)}, categories,
                       os.path.join(dirs["predictions"], f"labels-{cfg.split}.tsv"), ids=dataset.ids)
    return probs


def cmd_evaluate(cfg: RunConfig, predictions: Optional[str] = None, sweep: bool = False, out=None):
    out = out or sys.stdout
    dirs = run_dirs(cfg.out_dir)
    write_resolved(cfg, "evaluate")
    path = predictions or os.path.join(dirs["predictions"], f"probabilities-{cfg.split}.tsv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing predictions {path}")
    ids, categories, probs = read_probabilities(path)
    _, labels_path = split_paths(cfg.data_dir, cfg.split)
    if labels_path is None:
        raise FileNotFoundError(f"no gold labels for split {cfg.split!r} in {cfg.data_dir}")
    gold = align_gold(ids, D.parse_labels_tsv(labels_path, categories))
    report = evaluate_probabilities(probs, gold, categories, cfg.threshold, cfg.macro_mode)
    report.write(os.path.join(dirs["reports"], f"eval-{cfg.split}"))
    out.write(f"macro_precision\t{report.macro_precision:.4f}\nmacro_recall\t{report.macro_recall:.4f}\n"
              f"macro_f1\t{report.macro_f1:.4f}\n")
    if sweep:
        with open(os.path.join(dirs["reports"], f"sweep-{cfg.split}.tsv"), "w", encoding="utf-8") as handle:
            handle.write("threshold\tmacro_f1\n")
            for t, f1 in threshold_sweep(probs, gold):
                handle.write(f"{t:.2f}\t{f1:.6f}\n")
    return report


def parse_grid(items: Sequence[str]) -> Dict[str, List[float]]:
    grid = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"grid entry must look like key=v1,v2: {item!r}")
        key, vals = item.split("=", 1)
        key = key.strip()
        if key not in GRID_KEYS:
            raise ConfigError(f"unknown grid key {key!r}; expected one of {', '.join(GRID_KEYS)}")
        grid[key] = [int(v) if key == "k" else float(v) for v in vals.split(",") if v.strip()]
    return grid


def cmd_ablate(cfg: RunConfig, grid: Optional[Dict[str, List[float]]] = None):
    dirs = run_dirs(cfg.out_dir)
    write_resolved(cfg, "ablate")
    # the evaluation split is held out even if it is listed among the training splits
    kept = [s for s in cfg.splits.split(",") if s.strip() and s.strip() != cfg.eval_split]
    if not kept:
        raise ValueError(f"no training splits left after holding out {cfg.eval_split!r}")
    train = load_training_data(dataclasses.replace(cfg, splits=",".join(kept)))
    holdout = load_split(cfg.data_dir, cfg.eval_split, train.categories)
    seeds = [int(s) for s in cfg.seeds.split(",") if s.strip()]
    if grid:
        table = grid_sweep(train, holdout, cfg.train_config(), cfg.knn_config(), grid, seeds, cfg.threshold)
        name = "grid.tsv"
    else:
        table = ablation_run(train, holdout, cfg.train_config(), cfg.knn_config(), seeds, cfg.threshold)
        name = "ablation.tsv"
    with open(os.path.join(dirs["reports"], name), "w", encoding="utf-8") as handle:
        handle.write(table.to_tsv())
    return table


def cmd_synth(args) -> None:
    ds = D.synth_dataset(args.seed, args.size, args.num_labels, args.vocab_size,
                         positive_rate=args.positive_rate, mode=args.mode)
    if args.holdout_fraction > 0:
        folds = max(2, int(round(1 / args.holdout_fraction)))
        train, hold = D.kfold_split(ds, folds, args.seed)[0]
        D.write_dataset(train, args.out_dir, "training")
        D.write_dataset(hold, args.out_dir, "validation")
    else:
        D.write_dataset(ds, args.out_dir, "training")


# --- argument parsing --------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.add_argument("--config", help="flat key = value file")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p):
    p.add_argument("--splits", help="comma-separated labeled splits merged for training")
    p.add_argument("--folds", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--tau-prime", type=float)
    p.add_argument("--attention-scale", choices=("da", "sqrt_da"))
    p.add_argument("--w-mode", choices=("per-label", "literal-scalar"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--jobs", type=int)


def _knn_flags(p):
    p.add_argument("--k", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--blend-after-average", action="store_const", const=True, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lak", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a split and print counts and label prevalence")
    _common(p)
    p.add_argument("--split")

    p = sub.add_parser("train", help="K-fold training")
    _common(p)
    _model_flags(p)

    p = sub.add_parser("build-store", help="one datastore per fold checkpoint")
    _common(p)
    p.add_argument("--splits")
    p.add_argument("--blend-after-average", action="store_const", const=True, default=None)

    p = sub.add_parser("predict", help="ensemble prediction with KNN blending")
    _common(p)
    _knn_flags(p)
    p.add_argument("--split")

    p = sub.add_parser("evaluate", help="precision/recall/macro-F1 report")
    _common(p)
    p.add_argument("--split")
    p.add_argument("--threshold", type=float)
    p.add_argument("--predictions", help="probabilities TSV (default: run predictions)")
    p.add_argument("--sweep", action="store_true", help="also report F1 over thresholds 0.1-0.9")

    p = sub.add_parser("ablate", help="four-row ablation table or a hyperparameter grid")
    _common(p)
    _model_flags(p)
    _knn_flags(p)
    p.add_argument("--eval-split")
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                   help=f"sweep one of {', '.join(GRID_KEYS)}; repeatable")

    p = sub.add_parser("synth", help="write a synthetic corpus in the TSV schema")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--size", type=int, default=200)
    p.add_argument("--num-labels", type=int, default=20)
    p.add_argument("--vocab-size", type=int, default=50)
    p.add_argument("--positive-rate", type=float, default=0.15)
    p.add_argument("--mode", choices=("keyword", "neighbor-signal"), default="keyword")
    p.add_argument("--holdout-fraction", type=float, default=0.2)
    return parser


_NON_CONFIG = {"command", "config", "verbose", "predictions", "sweep", "grid"}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            cmd_synth(args)
            return 0
        overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
        cfg = resolve_config(args.config, overrides)
        if args.command == "ingest":
            cmd_ingest(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "build-store":
            cmd_build_store(cfg)
        elif args.command == "predict":
            cmd_predict(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.predictions, args.sweep)
        elif args.command == "ablate":
            table = cmd_ablate(cfg, parse_grid(args.grid))
            sys.stdout.write(table.to_tsv())
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
