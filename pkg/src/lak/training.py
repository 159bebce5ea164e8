"""Mini-batch training with BCE + contrastive loss, checkpoints and the K-fold ensemble."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import multiprocessing
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
import torch

from .attention import label_weights, weighted_bce
from .config import dataclass_from_kv, format_kv, parse_kv_text
from .contrastive import contrastive_loss, total_loss
from .data import Dataset, kfold_split
from .encoder import Vocabulary, pad_batch, tokenize
from .evaluation import evaluate_probabilities
from .knn import CompatibilityError, Datastore, KnnConfig, blend, knn_predict
from .model import LabelAttentionClassifier, ModelSpec

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"LAKCHKPT"
CKPT_VERSION = 1
LOG_COLUMNS = ("epoch", "bce", "con", "total", "precision", "recall", "macro_f1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.1
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0
    folds: int = 6
    gamma: float = 0.1
    tau_prime: float = 1.0
    squared_distance: bool = False
    w_mode: str = "per-label"
    bce_reduction: str = "sum"
    patience: int = 10
    clip_norm: float = 5.0
    d: int = 64
    heads: int = 4
    layers: int = 1
    max_len: int = 128
    vocab_size: int = 20000
    variant: str = "multi-attention"
    attention_scale: str = "da"
    use_positions: bool = True
    classifier_bias: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("epochs", "batch_size", "folds", "d", "heads", "max_len", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for the contrastive loss")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.lr <= 0 or self.tau_prime <= 0 or self.gamma < 0 or self.patience < 1:
            raise ValueError("lr, tau_prime must be > 0, gamma >= 0, patience >= 1")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.w_mode not in ("per-label", "literal-scalar"):
            raise ValueError(f"unknown w_mode {self.w_mode!r}")
        self.model_spec()

    def model_spec(self) -> ModelSpec:
        return ModelSpec(d=self.d, heads=self.heads, layers=self.layers, max_len=self.max_len,
                         variant=self.variant, attention_scale=self.attention_scale,
                         use_positions=self.use_positions, classifier_bias=self.classifier_bias,
                         dtype=self.dtype)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    """Everything needed to rebuild a trained fold model without outside context."""

    tensors: Dict[str, np.ndarray]
    config: TrainConfig
    categories: Tuple[str, ...]
    vocab: Tuple[str, ...]
    fold: int = 0
    best_metric: float = 0.0
    best_epoch: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            arr = self.tensors[name]
            h.update(f"{name}:{arr.dtype.str}:{arr.shape}".encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("\x1f".join(self.categories).encode())
        h.update("\x1f".join(self.vocab).encode())
        return h.hexdigest()

    def build_model(self) -> LabelAttentionClassifier:
        model = LabelAttentionClassifier(Vocabulary(self.vocab), self.categories, self.config.model_spec())
        state = {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k != "label_weights"}
        model.load_state_dict(state)
        model.eval()
        return model


def _state_arrays(model: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    layout, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        layout.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                       "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": format_kv(dataclasses.asdict(ckpt.config)),
        "categories": list(ckpt.categories),
        "vocab": list(ckpt.vocab),
        "fold": ckpt.fold,
        "best_metric": ckpt.best_metric,
        "best_epoch": ckpt.best_epoch,
        "history": ckpt.history,
        "tensors": layout,
    }
    head = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    payload = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(head)) + head + b"".join(blobs)
    with open(path, "wb") as handle:
        handle.write(payload)
        handle.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as handle:
        raw = handle.read()
    fixed = len(CKPT_MAGIC) + struct.calcsize("<IQ")
    if len(raw) < fixed + 4 or raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise ValueError(f"{path}: checkpoint checksum mismatch, file is corrupted")
    version, head_len = struct.unpack("<IQ", payload[len(CKPT_MAGIC):fixed])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(payload[fixed:fixed + head_len].decode("utf-8"))
    data = payload[fixed + head_len:]
    tensors = {}
    for t in header["tensors"]:
        chunk = data[t["offset"]:t["offset"] + t["nbytes"]]
        if len(chunk) != t["nbytes"]:
            raise ValueError(f"{path}: truncated tensor {t['name']}")
        tensors[t["name"]] = np.frombuffer(chunk, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
    config = dataclass_from_kv(TrainConfig, parse_kv_text(header["config"], path))
    return Checkpoint(tensors, config, tuple(header["categories"]), tuple(header["vocab"]),
                      header["fold"], header["best_metric"], header["best_epoch"], header["history"])


# --- optimisation ------------------------------------------------------------

def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr)
    if config.optimizer == "momentum":
        return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    return torch.optim.Adam(params, lr=config.lr)


def batch_losses(model: LabelAttentionClassifier, batch, Y: torch.Tensor, pos_weight: torch.Tensor,
                 config: TrainConfig) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``(bce, con, total)`` for one batch. With gamma 0 the contrastive term is logged but detached."""
    probs, Z = model(batch)
    if not bool(torch.isfinite(probs).all()):
        # parameters already blew up; report instead of tripping the NaN guard in weighted_bce
        nan = probs.new_tensor(float("nan"))
        return nan, nan, nan
    bce = weighted_bce(probs, Y, pos_weight, config.bce_reduction)
    if config.gamma > 0:
        con = contrastive_loss(Z, Y, config.tau_prime, config.squared_distance)
        return bce, con, total_loss(bce, con, config.gamma)
    with torch.no_grad():
        con = contrastive_loss(Z.detach(), Y, config.tau_prime, config.squared_distance)
    return bce, con, bce


def training_step(model, optimizer, batch, Y, pos_weight, config: TrainConfig):
    optimizer.zero_grad()
    bce, con, total = batch_losses(model, batch, Y, pos_weight, config)
    if not torch.isfinite(total):
        return bce, con, total
    total.backward()
    if config.clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
    optimizer.step()
    return bce, con, total


def build_vocabulary(train: Dataset, config: TrainConfig) -> Vocabulary:
    seqs = [tokenize(t) for t in train.texts()] + [tokenize(c) for c in train.categories]
    return Vocabulary.build(seqs, max_size=config.vocab_size)


def init_model(train: Dataset, config: TrainConfig) -> LabelAttentionClassifier:
    return LabelAttentionClassifier(build_vocabulary(train, config), train.categories,
                                    config.model_spec(), seed=config.seed)


def _holdout_scores(model, holdout: Optional[Dataset]):
    if holdout is None or len(holdout) == 0:
        return None
    probs, _ = model.predict(holdout.texts())
    rep = evaluate_probabilities(probs.numpy(), holdout.label_matrix())
    return rep.macro_precision, rep.macro_recall, rep.macro_f1


def train_fold(train: Dataset, holdout: Optional[Dataset], config: TrainConfig, fold: int = 0,
               log: Optional[TextIO] = None) -> Checkpoint:
    """Train one model and return the epoch with the best holdout macro-F1.

    Without a holdout the last epoch is kept and scored on the training set.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if holdout is not None and set(train.ids) & set(holdout.ids):
        raise ValueError("training and holdout sets overlap")
    torch.manual_seed(config.seed)
    model = init_model(train, config)
    dtype = config.model_spec().torch_dtype
    Y_all = train.label_matrix()
    weights = label_weights(Y_all, config.w_mode)
    pos_weight = torch.tensor(weights, dtype=dtype)
    Y_all = torch.tensor(Y_all, dtype=dtype)
    ids = [model.vocab.ids(tokenize(t)) for t in train.texts()]
    optimizer = make_optimizer(model.parameters(), config)
    rng = np.random.default_rng(config.seed)

    if log is not None:
        log.write("\t".join(LOG_COLUMNS) + "\n")
    best = (-math.inf, 0, None)
    history = []
    stale = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        sums = np.zeros(3)
        order = rng.permutation(len(ids))
        for b_idx, start in enumerate(range(0, len(order), config.batch_size)):
            rows = order[start:start + config.batch_size]
            batch = pad_batch([ids[i] for i in rows], config.max_len)
            parts = training_step(model, optimizer, batch, Y_all[rows], pos_weight, config)
            if not all(torch.isfinite(p) for p in parts):
                raise TrainingDivergedError(
                    f"fold {fold} epoch {epoch} batch {b_idx}: non-finite loss "
                    f"(bce={parts[0].item()}, con={parts[1].item()}, total={parts[2].item()})")
            sums += [p.item() for p in parts]
        scores = _holdout_scores(model, holdout)
        if scores is None:
            scores = _holdout_scores(model, train)
        row = dict(zip(LOG_COLUMNS, [epoch, *(float(x) for x in sums), *(float(x) for x in scores)]))
        history.append(row)
        if log is not None:
            log.write("\t".join([str(epoch)] + [f"{row[c]:.6f}" for c in LOG_COLUMNS[1:]]) + "\n")
        if holdout is None or len(holdout) == 0:
            best = (scores[2], epoch, _state_arrays(model))
            continue
        if scores[2] > best[0]:
            best = (scores[2], epoch, _state_arrays(model))
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("fold %d: early stop at epoch %d (best %d)", fold, epoch, best[1])
                break

    tensors = dict(best[2])
    tensors["label_weights"] = weights
    return Checkpoint(tensors, config, train.categories, tuple(model.vocab.tokens), fold,
                      float(best[0]), best[1], history)


def _train_fold_job(args):
    train, holdout, config, fold = args
    return train_fold(train, holdout, config, fold)


def train_kfold(dataset: Dataset, config: TrainConfig, jobs: int = 1) -> List[Checkpoint]:
    """One independently trained checkpoint per K-fold split."""
    splits = kfold_split(dataset, config.folds, config.seed)
    work = [(train, hold, config, f) for f, (train, hold) in enumerate(splits)]
    if jobs <= 1:
        return [_train_fold_job(w) for w in work]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
        return list(pool.map(_train_fold_job, work))


# --- inference ---------------------------------------------------------------

def predict_ensemble(checkpoints: Sequence[Checkpoint], stores: Optional[Sequence[Optional[Datastore]]],
                     dataset: Dataset, knn: KnnConfig, blend_after_average: bool = False,
                     full_store: Optional[Datastore] = None, designated_fold: int = 0) -> np.ndarray:
    """Average fold predictions, each blended with its own datastore's KNN vote.

    With ``blend_after_average`` the model probabilities are averaged first
    and blended once against ``full_store`` queried with the designated fold's
    representations.
    """
    if not checkpoints:
        raise ValueError("no checkpoints")
    texts = dataset.texts()
    use_knn = knn.blend > 0
    if use_knn and not blend_after_average:
        if stores is None or len(stores) != len(checkpoints) or any(s is None for s in stores):
            raise CompatibilityError("every checkpoint needs a datastore when lambda > 0")
    if use_knn and blend_after_average and full_store is None:
        raise CompatibilityError("blend-after-average needs a full-data datastore")

    outputs, model_probs, designated_reps = [], [], None
    for f, ckpt in enumerate(checkpoints):
        model = ckpt.build_model()
        probs, reps = model.predict(texts)
        probs = probs.numpy().astype(np.float64)
        if blend_after_average:
            model_probs.append(probs)
            if f == designated_fold:
                designated_reps = reps.numpy().astype(np.float64)
                if use_knn:
                    full_store.check_compatible(ckpt.config.d, ckpt.categories, ckpt.checksum)
            continue
        if use_knn:
            store = stores[f]
            store.check_compatible(ckpt.config.d, ckpt.categories, ckpt.checksum)
            knn_probs = knn_predict(reps.numpy().astype(np.float64), store, knn.k, knn.temperature)
            probs = blend(knn_probs, probs, knn.blend)
        outputs.append(probs)

    if blend_after_average:
        mean = np.mean(model_probs, axis=0)
        if not use_knn:
            return mean
        knn_probs = knn_predict(designated_reps, full_store, knn.k, knn.temperature)
        return blend(knn_probs, mean, knn.blend)
    return np.mean(outputs, axis=0)
