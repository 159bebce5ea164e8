"""Ablation grid: {mean-pool baseline, label attention} x {model only, + contrastive KNN}."""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset
from .evaluation import evaluate_probabilities
from .knn import KnnConfig, blend, build_datastore, knn_predict
from .training import Checkpoint, TrainConfig, train_fold

logger = logging.getLogger(__name__)

# name -> (model variant, uses KNN)
VARIANT_ROWS = (
    ("baseline", "baseline", False),
    ("multi-attention", "multi-attention", False),
    ("baseline+KNN", "baseline", True),
    ("multi-attention+KNN", "multi-attention", True),
)

GRID_KEYS = ("lambda", "k", "tau", "gamma")


@dataclass
class AblationRow:
    name: str
    precision: float
    recall: float
    f1: float
    per_seed_f1: List[float]
    settings: Dict[str, object] = field(default_factory=dict)


@dataclass
class AblationTable:
    rows: List[AblationRow]
    config: Dict[str, object]
    seeds: List[int]

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_tsv(self) -> str:
        setting_keys = sorted({k for r in self.rows for k in r.settings})
        lines = ["\t".join(["model", "precision", "recall", "f1", "f1_per_seed", *setting_keys])]
        for r in self.rows:
            lines.append("\t".join([r.name, f"{r.precision:.4f}", f"{r.recall:.4f}", f"{r.f1:.4f}",
                                    ",".join(f"{x:.4f}" for x in r.per_seed_f1),
                                    *(str(r.settings.get(k, "")) for k in setting_keys)]))
        lines.append("# config: " + json.dumps(self.config, sort_keys=True))
        lines.append("# seeds: " + ",".join(str(s) for s in self.seeds))
        return "\n".join(lines) + "\n"


class _ModelCache:
    """Train each (variant, gamma, seed) once; KNN settings only change inference."""

    def __init__(self, train: Dataset, holdout: Dataset, config: TrainConfig):
        self.train, self.holdout, self.config = train, holdout, config
        self._models: Dict[Tuple, Tuple[Checkpoint, np.ndarray, np.ndarray]] = {}
        self._stores: Dict[Tuple, object] = {}

    def outputs(self, variant: str, gamma: float, seed: int):
        key = (variant, gamma, seed)
        if key not in self._models:
            cfg = self.config.replace(variant=variant, gamma=gamma, seed=seed)
            logger.info("ablation: training %s gamma=%g seed=%d", variant, gamma, seed)
            ckpt = train_fold(self.train, self.holdout, cfg)
            probs, reps = ckpt.build_model().predict(self.holdout.texts())
            self._models[key] = (ckpt, probs.numpy().astype(np.float64), reps.numpy().astype(np.float64))
        return self._models[key]

    def store(self, variant: str, gamma: float, seed: int):
        key = (variant, gamma, seed)
        if key not in self._stores:
            ckpt = self.outputs(variant, gamma, seed)[0]
            self._stores[key] = build_datastore(ckpt.build_model(), self.train, ckpt.checksum)
        return self._stores[key]

    def predict(self, variant: str, gamma: float, seed: int, knn: Optional[KnnConfig]) -> np.ndarray:
        _, probs, reps = self.outputs(variant, gamma, seed)
        if knn is None or knn.blend == 0:
            return probs
        store = self.store(variant, gamma, seed)
        return blend(knn_predict(reps, store, min(knn.k, len(store)), knn.temperature), probs, knn.blend)


def _score(cache: _ModelCache, variant, gamma, seeds, knn, threshold):
    gold = cache.holdout.label_matrix()
    reports = [evaluate_probabilities(cache.predict(variant, gamma, s, knn), gold, threshold=threshold)
               for s in seeds]
    return (float(np.mean([r.macro_precision for r in reports])),
            float(np.mean([r.macro_recall for r in reports])),
            float(np.mean([r.macro_f1 for r in reports])),
            [r.macro_f1 for r in reports])


def ablation_run(train: Dataset, holdout: Dataset, config: TrainConfig, knn: KnnConfig,
                 seeds: Sequence[int] = (0, 1, 2), threshold: float = 0.5,
                 cache: Optional[_ModelCache] = None) -> AblationTable:
    """Mean holdout scores over ``seeds`` for the four ablation rows.

    Model-only rows train without the contrastive term; the KNN rows train with
    ``config.gamma`` and blend with ``knn.blend``.
    """
    if knn.blend == 0:
        raise ValueError("ablation needs lambda > 0 for the KNN rows")
    cache = cache or _ModelCache(train, holdout, config)
    rows = []
    for name, variant, use_knn in VARIANT_ROWS:
        gamma = config.gamma if use_knn else 0.0
        p, r, f, per_seed = _score(cache, variant, gamma, seeds, knn if use_knn else None, threshold)
        settings = {"variant": variant, "gamma": gamma, "lambda": knn.blend if use_knn else 0.0}
        if use_knn:
            settings.update(k=knn.k, tau=knn.temperature)
        rows.append(AblationRow(name, p, r, f, per_seed, settings))
    echo = {**dataclasses.asdict(config), "k": knn.k, "tau": knn.temperature, "lambda": knn.blend,
            "threshold": threshold}
    return AblationTable(rows, echo, list(seeds))


def grid_sweep(train: Dataset, holdout: Dataset, config: TrainConfig, knn: KnnConfig,
               grid: Mapping[str, Sequence], seeds: Sequence[int] = (0, 1, 2),
               threshold: float = 0.5, variant: str = "multi-attention") -> AblationTable:
    """One row per cell of the cartesian product over ``lambda``, ``k``, ``tau``, ``gamma``."""
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    base = {"lambda": knn.blend, "k": knn.k, "tau": knn.temperature, "gamma": config.gamma}
    axes = [list(grid.get(k, [base[k]])) for k in GRID_KEYS]
    cache = _ModelCache(train, holdout, config)
    rows = []
    for lam, k, tau, gamma in itertools.product(*axes):
        cell = KnnConfig(int(k), float(tau), float(lam))
        p, r, f, per_seed = _score(cache, variant, float(gamma), seeds, cell, threshold)
        settings = {"variant": variant, "lambda": float(lam), "k": int(k), "tau": float(tau), "gamma": float(gamma)}
        name = f"{variant} lambda={lam} k={k} tau={tau} gamma={gamma}"
        rows.append(AblationRow(name, p, r, f, per_seed, settings))
    return AblationTable(rows, {**dataclasses.asdict(config), "grid": {k: list(v) for k, v in grid.items()}},
                         list(seeds))
