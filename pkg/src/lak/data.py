"""Argument/label TSV ingestion, input templating, K-fold splits and synthetic corpora."""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

ID_COLUMN = "Argument ID"
ARGUMENT_COLUMNS = ("Argument ID", "Conclusion", "Stance", "Premise")

VALUE_CATEGORIES = (
    "Self-direction: thought",
    "Self-direction: action",
    "Stimulation",
    "Hedonism",
    "Achievement",
    "Power: dominance",
    "Power: resources",
    "Face",
    "Security: personal",
    "Security: societal",
    "Tradition",
    "Conformity: rules",
    "Conformity: interpersonal",
    "Humility",
    "Benevolence: caring",
    "Benevolence: dependability",
    "Universalism: concern",
    "Universalism: nature",
    "Universalism: tolerance",
    "Universalism: objectivity",
)

LabelVector = Tuple[int, ...]


class SchemaError(ValueError):
    """A TSV file is missing a required column."""


class Stance(str, enum.Enum):
    IN_FAVOR_OF = "in favor of"
    AGAINST = "against"

    @classmethod
    def parse(cls, raw: str) -> "Stance":
        value = " ".join(raw.strip().lower().split())
        for member in cls:
            if member.value == value:
                return member
        raise ValueError(f"unknown stance {raw!r}")


@dataclass(frozen=True)
class ArgumentRecord:
    id: str
    conclusion: str
    stance: Stance
    premise: str


@dataclass(frozen=True)
class Dataset:
    records: Tuple[ArgumentRecord, ...]
    labels: Dict[str, LabelVector] = field(default_factory=dict)
    categories: Tuple[str, ...] = VALUE_CATEGORIES

    def __post_init__(self):
        seen = set()
        for record in self.records:
            if not record.id:
                raise ValueError("empty argument id")
            if record.id in seen:
                raise ValueError(f"duplicate argument id {record.id!r}")
            seen.add(record.id)
        stray = [key for key in self.labels if key not in seen]
        if stray:
            raise ValueError(f"labels for unknown argument ids: {stray[:10]}")
        width = len(self.categories)
        for key, vec in self.labels.items():
            if len(vec) != width:
                raise ValueError(f"label vector for {key!r} has length {len(vec)}, expected {width}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> List[str]:
        return [r.id for r in self.records]

    @property
    def num_labels(self) -> int:
        return len(self.categories)

    @property
    def is_fully_labeled(self) -> bool:
        return all(r.id in self.labels for r in self.records)

    def missing_labels(self) -> List[str]:
        return [r.id for r in self.records if r.id not in self.labels]

    def texts(self) -> List[str]:
        return [render_template(r) for r in self.records]

    def label_matrix(self) -> np.ndarray:
        """Labels as a ``[N, l]`` uint8 matrix in record order; every record must be labeled."""
        missing = self.missing_labels()
        if missing:
            raise ValueError(f"{len(missing)} records have no labels, e.g. {missing[:5]}")
        if not self.records:
            return np.zeros((0, self.num_labels), dtype=np.uint8)
        return np.asarray([self.labels[r.id] for r in self.records], dtype=np.uint8)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        records = tuple(self.records[i] for i in indices)
        labels = {r.id: self.labels[r.id] for r in records if r.id in self.labels}
        return Dataset(records, labels, self.categories)

    def with_labels(self, labels: Dict[str, LabelVector], categories: Sequence[str]) -> "Dataset":
        return Dataset(self.records, dict(labels), tuple(categories))


def merge_datasets(parts: Sequence[Dataset]) -> Dataset:
    if not parts:
        raise ValueError("nothing to merge")
    categories = parts[0].categories
    records: List[ArgumentRecord] = []
    labels: Dict[str, LabelVector] = {}
    for part in parts:
        if part.categories != categories:
            raise ValueError("cannot merge datasets with different category orders")
        records.extend(part.records)
        labels.update(part.labels)
    return Dataset(tuple(records), labels, categories)


def _read_rows(path: str) -> Tuple[List[str], List[Tuple[int, List[str]]]]:
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected a header row") from None
        rows = [(reader.line_num, row) for row in reader if row]
    if header and header[0].startswith("\ufeff"):
        header[0] = header[0][1:]
    return [h.strip() for h in header], rows


def _column_index(header: List[str], name: str, path: str) -> int:
    try:
        return header.index(name)
    except ValueError:
        raise SchemaError(f"{path}: missing column {name!r}") from None


def parse_arguments_tsv(path: str, categories: Sequence[str] = VALUE_CATEGORIES) -> Dataset:
    """Read an arguments file (``Argument ID, Conclusion, Stance, Premise``) into a records-only Dataset."""
    header, rows = _read_rows(path)
    cols = [_column_index(header, name, path) for name in ARGUMENT_COLUMNS]
    records = []
    for line, row in rows:
        if len(row) < len(header):
            raise ValueError(f"{path}: row {line} has {len(row)} fields, expected {len(header)}")
        arg_id, conclusion, stance, premise = (row[c] for c in cols)
        try:
            parsed = Stance.parse(stance)
        except ValueError as exc:
            raise ValueError(f"{path}: row {line}: {exc}") from None
        records.append(ArgumentRecord(arg_id, conclusion, parsed, premise))
    return Dataset(tuple(records), {}, tuple(categories))


def read_label_header(path: str) -> Tuple[str, ...]:
    """Category names in the column order of a labels file."""
    header, _ = _read_rows(path)
    _column_index(header, ID_COLUMN, path)
    return tuple(h for h in header if h != ID_COLUMN)


def parse_labels_tsv(path: str, categories: Optional[Sequence[str]] = None) -> Dict[str, LabelVector]:
    """Read a labels file into ``id -> LabelVector`` in the order given by ``categories``.

    With ``categories=None`` the file's own column order is used.
    """
    header, rows = _read_rows(path)
    id_col = _column_index(header, ID_COLUMN, path)
    if categories is None:
        categories = [h for h in header if h != ID_COLUMN]
    cols = [_column_index(header, name, path) for name in categories]
    labels: Dict[str, LabelVector] = {}
    for line, row in rows:
        if len(row) < len(header):
            raise ValueError(f"{path}: row {line} has {len(row)} fields, expected {len(header)}")
        values = []
        for name, c in zip(categories, cols):
            cell = row[c].strip()
            if cell not in ("0", "1"):
                raise ValueError(f"{path}: row {line}, column {name!r}: cell {cell!r} is not 0/1")
            values.append(int(cell))
        arg_id = row[id_col]
        if arg_id in labels:
            raise ValueError(f"{path}: row {line}: duplicate argument id {arg_id!r}")
        labels[arg_id] = tuple(values)
    return labels


def load_dataset(arguments_path: str, labels_path: Optional[str] = None,
                 categories: Optional[Sequence[str]] = None) -> Dataset:
    """Arguments plus (optional) labels. Category order defaults to the labels header."""
    if labels_path is not None and categories is None:
        categories = read_label_header(labels_path)
    if categories is None:
        categories = VALUE_CATEGORIES
    dataset = parse_arguments_tsv(arguments_path, categories)
    if labels_path is None:
        return dataset
    return dataset.with_labels(parse_labels_tsv(labels_path, categories), categories)


def _check_field(value: str, what: str) -> str:
    if "\t" in value or "\n" in value or "\r" in value:
        raise ValueError(f"{what} contains a tab or newline: {value!r}")
    return value


def write_arguments_tsv(dataset: Dataset, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write("\t".join(ARGUMENT_COLUMNS) + "\n")
        for r in dataset.records:
            fields = (r.id, r.conclusion, r.stance.value, r.premise)
            handle.write("\t".join(_check_field(f, "field") for f in fields) + "\n")


def write_labels_tsv(labels: Dict[str, LabelVector], categories: Sequence[str], path: str,
                     ids: Optional[Sequence[str]] = None) -> None:
    """Write labels in the ingestion schema; ``ids`` fixes row order (default: dict order)."""
    ids = list(labels) if ids is None else list(ids)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write("\t".join([ID_COLUMN, *(_check_field(c, "category") for c in categories)]) + "\n")
        for arg_id in ids:
            handle.write("\t".join([arg_id, *(str(int(v)) for v in labels[arg_id])]) + "\n")


def write_dataset(dataset: Dataset, directory: str, split: str) -> Tuple[str, str]:
    os.makedirs(directory, exist_ok=True)
    args_path = os.path.join(directory, f"arguments-{split}.tsv")
    labels_path = os.path.join(directory, f"labels-{split}.tsv")
    write_arguments_tsv(dataset, args_path)
    write_labels_tsv(dataset.labels, dataset.categories, labels_path,
                     ids=[r.id for r in dataset.records if r.id in dataset.labels])
    return args_path, labels_path


def render_template(record: ArgumentRecord) -> str:
    """Join stance, conclusion and premise into one sentence."""
    if not record.conclusion:
        raise ValueError(f"{record.id}: empty conclusion")
    if not record.premise:
        raise ValueError(f"{record.id}: empty premise")
    verb = "agree" if record.stance is Stance.IN_FAVOR_OF else "disagree"
    return f"I {verb} that {record.conclusion}, because {record.premise}"


def kfold_split(dataset: Dataset, folds: int, seed: int) -> List[Tuple[Dataset, Dataset]]:
    """Shuffle once with ``seed`` and cut into ``folds`` near-equal holdout portions.

    Each portion keeps the dataset's original record order.
    """
    return [(dataset.subset(train), dataset.subset(hold))
            for train, hold in kfold_indices(len(dataset), folds, seed)]


def kfold_indices(size: int, folds: int, seed: int) -> List[Tuple[List[int], List[int]]]:
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    if folds > size:
        raise ValueError(f"folds ({folds}) exceeds record count ({size})")
    order = np.random.default_rng(seed).permutation(size)
    parts = [sorted(int(i) for i in part) for part in np.array_split(order, folds)]
    out = []
    for f, hold in enumerate(parts):
        held = set(hold)
        out.append(([i for i in range(size) if i not in held], hold))
    return out


def fold_assignment(size: int, folds: int, seed: int) -> List[int]:
    """Holdout fold index of every record."""
    assign = [0] * size
    for f, (_, hold) in enumerate(kfold_indices(size, folds, seed)):
        for i in hold:
            assign[i] = f
    return assign


# --- synthetic corpora -------------------------------------------------------

def synth_categories(num_labels: int) -> Tuple[str, ...]:
    if num_labels == len(VALUE_CATEGORIES):
        return VALUE_CATEGORIES
    return tuple(f"label {j}" for j in range(num_labels))


def keyword_groups(num_labels: int, per_label: int = 3) -> List[List[str]]:
    return [[f"kw{j}{chr(ord('a') + g)}" for g in range(per_label)] for j in range(num_labels)]


def synth_dataset(seed: int, size: int, num_labels: int, vocab_size: int,
                  positive_rate: float = 0.15, mode: str = "keyword",
                  neighbor_fraction: float = 0.3, keywords_per_label: int = 1,
                  filler_length: int = 8, family_size: int = 4) -> Dataset:
    """Generate a labeled corpus in the argument schema.

    ``keyword`` mode: label j is active iff one of label j's keywords occurs in
    the premise; everything else is filler drawn from ``vocab_size`` words.

    ``neighbor-signal`` mode: a ``neighbor_fraction`` share of the documents
    carry no keywords at all. They come in families of near-duplicates (one
    filler word swapped per member) sharing a random label vector, so their
    labels are only recoverable from similar training instances.
    """
    if min(size, num_labels, vocab_size, keywords_per_label, filler_length, family_size) <= 0:
        raise ValueError("all counts must be positive")
    if not 0.0 <= positive_rate <= 1.0:
        raise ValueError("positive_rate must be in [0, 1]")
    if mode not in ("keyword", "neighbor-signal"):
        raise ValueError(f"unknown synthetic mode {mode!r}")

    rng = np.random.default_rng(seed)
    groups = keyword_groups(num_labels, keywords_per_label)
    filler = [f"w{i}" for i in range(vocab_size)]
    n_family_docs = int(round(size * neighbor_fraction)) if mode == "neighbor-signal" else 0
    stances = (Stance.IN_FAVOR_OF, Stance.AGAINST)

    def words(n):
        return [filler[i] for i in rng.integers(0, vocab_size, size=n)]

    records, labels = [], {}
    for i in range(size - n_family_docs):
        active = rng.random(num_labels) < positive_rate
        premise = words(filler_length)
        for j in np.flatnonzero(active):
            kw = groups[j][rng.integers(0, keywords_per_label)]
            premise.insert(int(rng.integers(0, len(premise) + 1)), kw)
        arg_id = f"S{seed}-{i:05d}"
        records.append(ArgumentRecord(arg_id, " ".join(words(4)), stances[rng.integers(0, 2)],
                                      " ".join(premise)))
        labels[arg_id] = tuple(int(a) for a in active)

    family_proto, family_labels = None, None
    for m in range(n_family_docs):
        if m % family_size == 0:
            family_proto = words(filler_length + 4)
            family_labels = tuple(int(a) for a in rng.random(num_labels) < positive_rate)
        premise = list(family_proto)
        premise[int(rng.integers(0, len(premise)))] = filler[int(rng.integers(0, vocab_size))]
        arg_id = f"S{seed}-{size - n_family_docs + m:05d}"
        records.append(ArgumentRecord(arg_id, " ".join(family_proto[:4]), Stance.IN_FAVOR_OF,
                                      " ".join(premise)))
        labels[arg_id] = family_labels

    order = rng.permutation(len(records))
    records = [records[i] for i in order]
    return Dataset(tuple(records), labels, synth_categories(num_labels))
