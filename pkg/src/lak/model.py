"""Encoder + classification head, with the hyperparameters needed to rebuild it."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Sequence, Tuple, Union

import torch
import torch.nn as nn

from .attention import LabelAttentionHead, MeanPoolHead
from .encoder import EncodedBatch, TinyEncoder, Vocabulary, init_label_matrix

VARIANTS = ("multi-attention", "baseline")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModelSpec:
    d: int = 64
    heads: int = 4
    layers: int = 1
    max_len: int = 128
    variant: str = "multi-attention"
    attention_scale: str = "da"
    use_positions: bool = True
    classifier_bias: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


class LabelAttentionClassifier(nn.Module):
    """Tiny encoder followed by either the label-attention head or the mean-pool baseline."""

    def __init__(self, vocab: Vocabulary, categories: Sequence[str], spec: ModelSpec = ModelSpec(),
                 seed: int = 0):
        super().__init__()
        self.spec = spec
        self.categories = tuple(categories)
        gen = torch.Generator().manual_seed(seed)
        dtype = spec.torch_dtype
        self.encoder = TinyEncoder(vocab, spec.d, spec.heads, spec.layers, spec.max_len,
                                   spec.use_positions, dtype=dtype, generator=gen)
        if spec.variant == "multi-attention":
            label_init = init_label_matrix(self.categories, self.encoder)
            self.head = LabelAttentionHead(label_init, spec.heads, spec.attention_scale,
                                           spec.classifier_bias, generator=gen)
        else:
            self.head = MeanPoolHead(len(self.categories), spec.d, spec.classifier_bias,
                                     generator=gen, dtype=dtype)

    @property
    def vocab(self) -> Vocabulary:
        return self.encoder.vocab

    def batch(self, texts: Sequence[str]) -> EncodedBatch:
        return self.encoder.batch(texts)

    def forward(self, batch: Union[EncodedBatch, Sequence[str]]) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return per-label probabilities ``[b, l]`` and document representations ``[b, d]``."""
        if not isinstance(batch, EncodedBatch):
            batch = self.batch(batch)
        return self.head(self.encoder(batch), batch.mask)

    @torch.no_grad()
    def predict(self, texts: Sequence[str], batch_size: int = 64) -> Tuple[torch.Tensor, torch.Tensor]:
        """Frozen-weight probabilities and representations for any number of texts."""
        was_training = self.training
        self.eval()
        probs, reps = [], []
        for start in range(0, len(texts), batch_size):
            p, z = self(self.batch(texts[start:start + batch_size]))
            probs.append(p)
            reps.append(z)
        self.train(was_training)
        if not probs:
            d, l = self.spec.d, len(self.categories)
            empty = torch.zeros(0, l, dtype=self.spec.torch_dtype)
            return empty, torch.zeros(0, d, dtype=self.spec.torch_dtype)
        return torch.cat(probs), torch.cat(reps)

    def represent(self, texts: Sequence[str], batch_size: int = 64) -> torch.Tensor:
        return self.predict(texts, batch_size)[1]
