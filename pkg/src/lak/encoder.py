"""Tokenization, vocabulary and a small trainable transformer encoder.

The downstream label-attention head only needs token states ``H`` and a
validity mask, so any encoder satisfying :class:`EncoderAdapter` can be
dropped in (e.g. a wrapped pretrained model).
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, List, Optional, Protocol, Sequence, Tuple, runtime_checkable

import torch
import torch.nn as nn
import torch.nn.functional as F

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace and split off every punctuation character."""
    if not text:
        raise ValueError("cannot tokenize empty text")
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token <-> id map with ``<pad>`` at 0 and ``<unk>`` at 1."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:2] != [PAD, UNK]:
            raise ValueError("vocabulary must start with <pad>, <unk>")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, token_seqs: Iterable[Sequence[str]], max_size: Optional[int] = None,
              min_count: int = 1) -> "Vocabulary":
        counts = Counter(t for seq in token_seqs for t in seq)
        ranked = sorted((t for t, c in counts.items() if c >= min_count and t not in (PAD, UNK)),
                        key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - 2)]
        return cls([PAD, UNK, *ranked])

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def ids(self, tokens: Sequence[str]) -> List[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            for tok in self.tokens:
                handle.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as handle:
            return cls([line.rstrip("\n") for line in handle])


@dataclass
class EncodedBatch:
    token_ids: torch.Tensor  # [b, n_max] long
    mask: torch.Tensor  # [b, n_max] bool, True = real token
    lengths: List[int]


def pad_batch(id_seqs: Sequence[Sequence[int]], max_len: Optional[int] = None) -> EncodedBatch:
    if not id_seqs:
        raise ValueError("empty batch")
    seqs = [list(s)[:max_len] if max_len else list(s) for s in id_seqs]
    lengths = [len(s) for s in seqs]
    if min(lengths) == 0:
        raise ValueError("empty document in batch")
    n_max = max(lengths)
    ids = torch.full((len(seqs), n_max), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    mask = torch.arange(n_max)[None, :] < torch.tensor(lengths)[:, None]
    return EncodedBatch(ids, mask, lengths)


def sinusoidal_positions(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    rate = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    table = torch.zeros(n, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * rate)
    table[:, 1::2] = torch.cos(pos * rate)[:, : d // 2]
    return table.to(dtype)


def uniform_init_(tensor: torch.Tensor, fan_in: int, generator: torch.Generator) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.copy_((torch.rand(tensor.shape, generator=generator, dtype=torch.float64) * 2 - 1) * bound)
    return tensor


def _param(shape, fan_in, generator, dtype):
    return nn.Parameter(uniform_init_(torch.empty(shape, dtype=dtype), fan_in, generator))


class SelfAttentionLayer(nn.Module):
    """Post-norm transformer block: masked multi-head self-attention, then a GELU feed-forward."""

    def __init__(self, d: int, heads: int, generator: torch.Generator, dtype=torch.float32):
        super().__init__()
        if d % heads:
            raise ValueError(f"hidden size {d} not divisible by {heads} heads")
        self.heads = heads
        self.w_q = _param((d, d), d, generator, dtype)
        self.w_k = _param((d, d), d, generator, dtype)
        self.w_v = _param((d, d), d, generator, dtype)
        self.w_o = _param((d, d), d, generator, dtype)
        self.ff_in = _param((d, 2 * d), d, generator, dtype)
        self.ff_in_bias = nn.Parameter(torch.zeros(2 * d, dtype=dtype))
        self.ff_out = _param((2 * d, d), 2 * d, generator, dtype)
        self.ff_out_bias = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.norm1 = nn.LayerNorm(d, dtype=dtype)
        self.norm2 = nn.LayerNorm(d, dtype=dtype)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        da = d // self.heads

        def heads(t):
            return t.view(b, n, self.heads, da).transpose(1, 2)

        q, k, v = heads(x @ self.w_q), heads(x @ self.w_k), heads(x @ self.w_v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(da)
        scores = scores.masked_fill(~mask[:, None, None, :], -1e9)
        mixed = (scores.softmax(-1) @ v).transpose(1, 2).reshape(b, n, d) @ self.w_o
        x = self.norm1(x + mixed)
        ff = F.gelu(x @ self.ff_in + self.ff_in_bias) @ self.ff_out + self.ff_out_bias
        return self.norm2(x + ff)


@runtime_checkable
class EncoderAdapter(Protocol):
    """Anything that maps raw texts to token states and a validity mask."""

    hidden_size: int

    def encode(self, texts: Sequence[str]) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return ``H`` of shape ``[b, n_max, d]`` and a bool mask ``[b, n_max]``."""
        ...


class TinyEncoder(nn.Module):
    """Token embedding + sinusoidal positions + ``layers`` self-attention blocks.

    ``layers=0`` reduces to embedding (+ position) lookup.
    """

    def __init__(self, vocab: Vocabulary, d: int = 64, heads: int = 4, layers: int = 1,
                 max_len: int = 128, use_positions: bool = True, seed: int = 0,
                 dtype=torch.float32, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.vocab = vocab
        self.hidden_size = d
        self.max_len = max_len
        self.use_positions = use_positions
        gen = generator if generator is not None else torch.Generator().manual_seed(seed)
        self.embedding = nn.Parameter(
            (torch.randn(len(vocab), d, generator=gen, dtype=torch.float64) * 0.5).to(dtype))
        self.layers = nn.ModuleList(SelfAttentionLayer(d, heads, gen, dtype) for _ in range(layers))
        self.register_buffer("positions", sinusoidal_positions(max_len, d, dtype), persistent=False)

    def batch(self, texts: Sequence[str]) -> EncodedBatch:
        return pad_batch([self.vocab.ids(tokenize(t)) for t in texts], self.max_len)

    def forward(self, batch: EncodedBatch) -> torch.Tensor:
        ids = batch.token_ids
        h = self.embedding[ids]
        if self.use_positions:
            h = h + self.positions[: ids.shape[1]]
        for layer in self.layers:
            h = layer(h, batch.mask)
        return h

    def encode(self, texts: Sequence[str]) -> Tuple[torch.Tensor, torch.Tensor]:
        batch = self.batch(texts)
        return self(batch), batch.mask


def encode_batch(token_seqs: Sequence[Sequence[str]], encoder: TinyEncoder) -> Tuple[torch.Tensor, torch.Tensor]:
    """Encode pre-tokenized documents; returns ``(H, mask)``."""
    if any(len(seq) == 0 for seq in token_seqs):
        raise ValueError("empty document in batch")
    batch = pad_batch([encoder.vocab.ids(seq) for seq in token_seqs], encoder.max_len)
    return encoder(batch), batch.mask


@torch.no_grad()
def init_label_matrix(category_names: Sequence[str], encoder: EncoderAdapter) -> torch.Tensor:
    """Row j is the mean over token positions of the encoded category name j."""
    if not category_names:
        raise ValueError("no category names")
    h, mask = encoder.encode(list(category_names))
    m = mask.to(h.dtype)[..., None]
    return (h * m).sum(1) / m.sum(1)
