"""Label-specific multi-head attention, document pooling, classifier and weighted BCE.

Shapes use a leading batch axis ``b`` where present: token states ``H`` are
``[b, n, d]``, the label matrix ``C`` is ``[l, d]``. Row-vector convention
throughout, so ``Q = C @ W_q``.
"""

from __future__ import annotations

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .encoder import uniform_init_

MASK_FILL = -1e9
PROB_EPS = 1e-7


def project_qkv(C: torch.Tensor, H: torch.Tensor, W_q: torch.Tensor, W_k: torch.Tensor,
                W_v: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if C.shape[-1] != H.shape[-1] or W_q.shape != (C.shape[-1], C.shape[-1]):
        raise ValueError(f"shape mismatch: C {tuple(C.shape)}, H {tuple(H.shape)}, W_q {tuple(W_q.shape)}")
    return C @ W_q, H @ W_k, H @ W_v


def split_heads(x: torch.Tensor, heads: int) -> List[torch.Tensor]:
    """Contiguous column slices ``[..., m, d] -> heads x [..., m, d/heads]``."""
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ValueError(f"hidden size {d} not divisible by {heads} heads")
    da = d // heads
    return [x[..., i * da:(i + 1) * da] for i in range(heads)]


def merge_heads(parts: Sequence[torch.Tensor]) -> torch.Tensor:
    """Inverse of :func:`split_heads`."""
    return torch.cat(list(parts), dim=-1)


def attention_scores(Q_i: torch.Tensor, K_i: torch.Tensor, mask: torch.Tensor,
                     scale: str = "da") -> torch.Tensor:
    """Row-wise softmax over ``Q_i K_i^T / s`` with padded key positions suppressed.

    ``scale="da"`` divides by the head width, ``"sqrt_da"`` by its square root.
    ``mask`` is boolean over key positions and broadcasts against the score
    tensor's leading axes.
    """
    da = Q_i.shape[-1]
    if scale == "da":
        s = float(da)
    elif scale == "sqrt_da":
        s = math.sqrt(da)
    else:
        raise ValueError(f"unknown attention scale {scale!r}")
    if not bool(mask.any(-1).all()):
        raise ValueError("every key position is masked")
    raw = Q_i @ K_i.transpose(-1, -2) / s
    return raw.masked_fill(~mask[..., None, :], MASK_FILL).softmax(-1)


def attend_and_concat(scores: Sequence[torch.Tensor], V: Sequence[torch.Tensor],
                      W_O: torch.Tensor) -> torch.Tensor:
    """Per-head ``score_i @ V_i``, concatenated along features, times ``W_O``: ``[.., l, d]``."""
    if len(scores) != len(V):
        raise ValueError(f"{len(scores)} score heads but {len(V)} value heads")
    for s_i, v_i in zip(scores, V):
        if s_i.shape[-1] != v_i.shape[-2]:
            raise ValueError(f"shape mismatch: scores {tuple(s_i.shape)}, V {tuple(v_i.shape)}")
    return merge_heads([s_i @ v_i for s_i, v_i in zip(scores, V)]) @ W_O


def pool_document(attention: torch.Tensor) -> torch.Tensor:
    """Average the label-view rows: ``[.., l, d] -> [.., d]``."""
    return attention.mean(-2)


def classify(Z: torch.Tensor, W_1: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    logits = Z @ W_1.T
    if bias is not None:
        logits = logits + bias
    return torch.sigmoid(logits)


def weighted_bce(probs: torch.Tensor, targets: torch.Tensor, pos_weight: torch.Tensor,
                 reduction: str = "sum") -> torch.Tensor:
    """Positive-weighted binary cross-entropy on probabilities clamped to ``[eps, 1 - eps]``."""
    if torch.isnan(probs).any() or torch.isnan(targets).any():
        raise ValueError("NaN in weighted_bce inputs")
    p = probs.clamp(PROB_EPS, 1 - PROB_EPS)
    y = targets.to(p.dtype)
    per = -(pos_weight * y * torch.log(p) + (1 - y) * torch.log1p(-p))
    if reduction == "sum":
        return per.sum()
    if reduction == "mean":
        return per.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def label_weights(Y: np.ndarray, mode: str = "per-label", clip: Tuple[float, float] = (0.1, 100.0)) -> np.ndarray:
    """Per-label positive-class weights from a training label matrix ``[N, l]``.

    ``per-label``: negatives/positives. ``literal-scalar``: the single global
    positives/negatives ratio broadcast to every label. Undefined ratios give 1.
    """
    Y = np.asarray(Y, dtype=np.float64)
    pos = Y.sum(0)
    neg = Y.shape[0] - pos
    if mode == "per-label":
        w = np.divide(neg, pos, out=np.ones_like(pos), where=pos > 0)
        w[pos == 0] = 1.0
    elif mode == "literal-scalar":
        total_pos, total_neg = pos.sum(), neg.sum()
        ratio = total_pos / total_neg if total_neg > 0 and total_pos > 0 else 1.0
        w = np.full_like(pos, ratio)
    else:
        raise ValueError(f"unknown w-mode {mode!r}")
    return np.clip(w, *clip)


class LabelAttentionHead(nn.Module):
    """Label queries attend over token states; pooled views feed a sigmoid classifier."""

    def __init__(self, label_init: torch.Tensor, heads: int = 4, scale: str = "da",
                 classifier_bias: bool = False, generator: Optional[torch.Generator] = None):
        super().__init__()
        l, d = label_init.shape
        if d % heads:
            raise ValueError(f"hidden size {d} not divisible by {heads} heads")
        gen = generator if generator is not None else torch.Generator().manual_seed(0)
        dtype = label_init.dtype
        self.heads = heads
        self.scale = scale
        self.C = nn.Parameter(label_init.detach().clone())
        self.W_q = nn.Parameter(uniform_init_(torch.empty(d, d, dtype=dtype), d, gen))
        self.W_k = nn.Parameter(uniform_init_(torch.empty(d, d, dtype=dtype), d, gen))
        self.W_v = nn.Parameter(uniform_init_(torch.empty(d, d, dtype=dtype), d, gen))
        self.W_O = nn.Parameter(uniform_init_(torch.empty(d, d, dtype=dtype), d, gen))
        self.W_1 = nn.Parameter(uniform_init_(torch.empty(l, d, dtype=dtype), d, gen))
        self.bias = nn.Parameter(torch.zeros(l, dtype=dtype)) if classifier_bias else None

    def represent(self, H: torch.Tensor, mask: torch.Tensor, return_scores: bool = False):
        """``H [b, n, d]``, bool ``mask [b, n]`` -> ``Z [b, d]`` (and scores ``[b, h, l, n]``)."""
        Q, K, V = project_qkv(self.C, H, self.W_q, self.W_k, self.W_v)
        Qs, Ks, Vs = (split_heads(t, self.heads) for t in (Q, K, V))
        scores = [attention_scores(q, k, mask, self.scale) for q, k in zip(Qs, Ks)]
        Z = pool_document(attend_and_concat(scores, Vs, self.W_O))
        return (Z, torch.stack(scores, dim=1)) if return_scores else Z

    def forward(self, H: torch.Tensor, mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        Z = self.represent(H, mask)
        return classify(Z, self.W_1, self.bias), Z


class MeanPoolHead(nn.Module):
    """Ablation baseline: masked mean of token states straight into the classifier."""

    def __init__(self, num_labels: int, d: int, classifier_bias: bool = False,
                 generator: Optional[torch.Generator] = None, dtype=torch.float32):
        super().__init__()
        gen = generator if generator is not None else torch.Generator().manual_seed(0)
        self.W_1 = nn.Parameter(uniform_init_(torch.empty(num_labels, d, dtype=dtype), d, gen))
        self.bias = nn.Parameter(torch.zeros(num_labels, dtype=dtype)) if classifier_bias else None

    def represent(self, H: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        m = mask.to(H.dtype)[..., None]
        return (H * m).sum(-2) / m.sum(-2)

    def forward(self, H: torch.Tensor, mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        Z = self.represent(H, mask)
        return classify(Z, self.W_1, self.bias), Z


def single_head_reference(C, H, mask, W_q, W_k, W_v, W_O, scale="da"):
    """Plain single-head label attention over ``H [b, n, d]``, no head split/merge. Pins ``heads=1``."""
    Q, K, V = C @ W_q, H @ W_k, H @ W_v
    s = float(Q.shape[-1]) if scale == "da" else math.sqrt(Q.shape[-1])
    raw = (Q @ K.transpose(-1, -2) / s).masked_fill(~mask[:, None, :], MASK_FILL)
    return (raw.softmax(-1) @ V @ W_O).mean(-2)
