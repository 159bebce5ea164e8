"""Training-set datastore, exact nearest-neighbour label voting and the model/KNN blend."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

MAGIC = b"LAKDSTOR"
FORMAT_VERSION = 1


class CompatibilityError(ValueError):
    """A datastore does not match the model it is being used with."""


class DatastoreFormatError(ValueError):
    """A datastore file is truncated, corrupted or of an unknown version."""


@dataclass(frozen=True)
class KnnConfig:
    k: int = 8
    temperature: float = 1.0
    blend: float = 0.3

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("KNN temperature must be > 0")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError("blend lambda must be in [0, 1]")


@dataclass(frozen=True, eq=False)
class Datastore:
    keys: np.ndarray  # [N, d] float32
    values: np.ndarray  # [N, l] uint8
    categories: Tuple[str, ...]
    model_checksum: str = ""

    def __post_init__(self):
        keys = np.ascontiguousarray(self.keys, dtype=np.float32)
        values = np.ascontiguousarray(self.values, dtype=np.uint8)
        if keys.ndim != 2 or values.ndim != 2 or keys.shape[0] != values.shape[0]:
            raise ValueError(f"bad datastore shapes: keys {keys.shape}, values {values.shape}")
        if values.shape[1] != len(self.categories):
            raise ValueError("label width does not match category count")
        if not np.isfinite(keys).all():
            raise ValueError("non-finite datastore key")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "categories", tuple(self.categories))

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Datastore)
                and self.keys.shape == other.keys.shape
                and self.keys.tobytes() == other.keys.tobytes()
                and self.values.tobytes() == other.values.tobytes()
                and self.values.shape == other.values.shape
                and self.categories == other.categories
                and self.model_checksum == other.model_checksum)

    def check_compatible(self, dim: int, categories: Sequence[str], model_checksum: Optional[str] = None) -> None:
        problems = []
        if dim != self.dim:
            problems.append(f"dimension {self.dim} != model dimension {dim}")
        if tuple(categories) != self.categories:
            problems.append("category order differs")
        if model_checksum is not None and self.model_checksum and model_checksum != self.model_checksum:
            problems.append("built by a different model")
        if problems:
            raise CompatibilityError(
                f"datastore incompatible with model ({'; '.join(problems)}): "
                f"store checksum {self.model_checksum or '<none>'}, model checksum {model_checksum or '<none>'}")


def build_datastore(model, training_set, model_checksum: str = "", batch_size: int = 64) -> Datastore:
    """Represent every training document with frozen weights and pair it with its labels."""
    missing = training_set.missing_labels()
    if missing:
        raise ValueError(f"unlabeled records in datastore training set: {missing[:10]}")
    reps = model.represent(training_set.texts(), batch_size=batch_size)
    return Datastore(reps.detach().cpu().numpy().astype(np.float32), training_set.label_matrix(),
                     training_set.categories, model_checksum)


def _distances(queries: np.ndarray, keys: np.ndarray, chunk_elems: int = 1 << 23) -> np.ndarray:
    keys64 = keys.astype(np.float64)
    out = np.empty((queries.shape[0], keys.shape[0]))
    step = max(1, chunk_elems // max(1, keys.size))
    for start in range(0, queries.shape[0], step):
        diff = keys64[None, :, :] - queries[start:start + step, None, :]
        out[start:start + step] = np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))
    return out


def knn_search(Z: np.ndarray, store: Datastore, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Exact scan for the ``k`` nearest keys of each query row; ties go to the lower index."""
    if len(store) == 0:
        raise ValueError("empty datastore")
    if not 1 <= k <= len(store):
        raise ValueError(f"k={k} outside [1, {len(store)}]")
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[1] != store.dim:
        raise CompatibilityError(f"query dimension {Z.shape[1]} != datastore dimension {store.dim}")
    dist = _distances(Z, store.keys)
    idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(dist, idx, axis=1)


def neighbor_weights(distances: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of ``-distance / temperature`` along the last axis."""
    if temperature <= 0:
        raise ValueError("KNN temperature must be > 0")
    logits = -np.asarray(distances, dtype=np.float64) / temperature
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def knn_predict(Z: np.ndarray, store: Datastore, k: int, temperature: float) -> np.ndarray:
    """Distance-weighted vote of neighbour label vectors. ``[d] -> [l]`` or ``[q, d] -> [q, l]``."""
    single = np.ndim(Z) == 1
    idx, dist = knn_search(Z, store, k)
    alpha = neighbor_weights(dist, temperature)
    pred = np.einsum("qk,qkl->ql", alpha, store.values[idx].astype(np.float64))
    return pred[0] if single else pred


def blend(knn_probs, model_probs, lam: float) -> np.ndarray:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"blend lambda {lam} outside [0, 1]")
    knn_probs = np.asarray(knn_probs, dtype=np.float64)
    model_probs = np.asarray(model_probs, dtype=np.float64)
    if lam == 0.0:
        return model_probs.copy()
    if lam == 1.0:
        return knn_probs.copy()
    return lam * knn_probs + (1.0 - lam) * model_probs


# --- persistence -------------------------------------------------------------

def _pack_str(s: str, width: str = "<H") -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(width, len(raw)) + raw


def save_datastore(store: Datastore, path: str) -> None:
    d, l = store.dim, len(store.categories)
    header = bytearray(MAGIC)
    header += struct.pack("<IIIQ", FORMAT_VERSION, d, l, len(store))
    header += _pack_str(store.model_checksum)
    for name in store.categories:
        header += _pack_str(name)
    entry = np.dtype([("h", "<f4", (d,)), ("y", "u1", (l,))])
    body = np.empty(len(store), dtype=entry)
    body["h"] = store.keys
    body["y"] = store.values
    payload = bytes(header) + body.tobytes()
    with open(path, "wb") as handle:
        handle.write(payload)
        handle.write(struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatastoreFormatError("truncated datastore file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DatastoreFormatError(f"bad string in header: {exc}") from None


def load_datastore(path: str, dim: Optional[int] = None, categories: Optional[Sequence[str]] = None,
                   model_checksum: Optional[str] = None) -> Datastore:
    """Read a datastore file; with ``dim``/``categories`` given, also check it fits the model."""
    with open(path, "rb") as handle:
        raw = handle.read()
    if len(raw) < len(MAGIC) + 4 or raw[:len(MAGIC)] != MAGIC:
        raise DatastoreFormatError(f"{path}: not a datastore file")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise DatastoreFormatError(f"{path}: checksum mismatch, file is corrupted")
    r = _Reader(payload)
    r.take(len(MAGIC))
    version, d, l, n = r.unpack("<IIIQ")
    if version != FORMAT_VERSION:
        raise DatastoreFormatError(f"{path}: unsupported datastore version {version}")
    checksum = r.string()
    names = tuple(r.string() for _ in range(l))
    entry = np.dtype([("h", "<f4", (d,)), ("y", "u1", (l,))])
    body = r.take(entry.itemsize * n)
    if r.pos != len(payload):
        raise DatastoreFormatError(f"{path}: trailing bytes after entries")
    arr = np.frombuffer(body, dtype=entry, count=n)
    store = Datastore(arr["h"].astype(np.float32), arr["y"].astype(np.uint8), names, checksum)
    if dim is not None or categories is not None:
        store.check_compatible(store.dim if dim is None else dim,
                               store.categories if categories is None else categories, model_checksum)
    return store
