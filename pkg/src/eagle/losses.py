"""Grounding objective: instance contrastive loss plus per-class sigmoid BCE.

The two terms are summed with no weighting. Class scores use the match
orientation, ``s_j = sigmoid(sig_scale * <phi, t_j> + sig_bias)``, so the true
class is pushed towards 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from . import numeric as nc

BCE_CLAMP = 1e-7


@dataclass
class ClassVocabulary:
    """Current prompt embeddings ``(K, E)`` for every training class."""

    text_embeddings: torch.Tensor
    names: list[str] | None = None

    def __post_init__(self):
        if self.text_embeddings.ndim != 2 or self.text_embeddings.shape[0] < 2:
            raise ValueError("class vocabulary needs a (K, E) matrix with K >= 2")

    @property
    def K(self) -> int:
        return self.text_embeddings.shape[0]


@dataclass
class LossBreakdown:
    l_ins: torch.Tensor
    l_ce: torch.Tensor
    total: torch.Tensor

    def floats(self) -> tuple[float, float, float]:
        return float(self.l_ins.detach()), float(self.l_ce.detach()), float(self.total.detach())


def _as_emb(vocab):
    return vocab.text_embeddings if isinstance(vocab, ClassVocabulary) else vocab


def instance_contrastive_loss(pooled: torch.Tensor, vocab, targets, logit_scale) -> torch.Tensor:
    """Mean K-way softmax cross-entropy of pooled embeddings against all class prompts.

    ``logit_scale`` is the log temperature-inverse; logits are
    ``exp(logit_scale) * cosine``.
    """
    txt = _as_emb(vocab)
    pooled = pooled.reshape(-1, txt.shape[1])
    targets = torch.as_tensor(targets).reshape(-1)
    logits = torch.exp(torch.as_tensor(logit_scale, dtype=txt.dtype)).reshape(()) * (pooled @ txt.T)
    nc.check_finite(logits, "instance_contrastive_loss logits")
    lp = nc.log_softmax(logits, dim=1)
    return -lp[torch.arange(lp.shape[0]), targets].mean()


def class_scores(pooled: torch.Tensor, vocab, sig_scale: float = 10.0, sig_bias: float = 0.0) -> torch.Tensor:
    return nc.sigmoid(sig_scale * (pooled @ _as_emb(vocab).T) + sig_bias)


def multiclass_bce_loss(scores: torch.Tensor, target_class, K: int | None = None) -> torch.Tensor:
    """Per-item ``-(1/K) sum_j [c_j log s_j + (1-c_j) log(1-s_j)]``, averaged over items."""
    scores = scores.reshape(-1, scores.shape[-1])
    if K is not None and scores.shape[-1] != K:
        raise ValueError(f"got {scores.shape[-1]} scores for a vocabulary of {K} classes")
    targets = torch.as_tensor(target_class).reshape(-1)
    s = scores.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    onehot = torch.zeros_like(s)
    onehot[torch.arange(s.shape[0]), targets] = 1.0
    per_item = -(onehot * nc.log(s) + (1 - onehot) * nc.log(1 - s)).mean(dim=1)
    return per_item.mean()


def total_loss(pooled: torch.Tensor, targets, vocab, logit_scale, sig_scale=10.0, sig_bias=0.0) -> LossBreakdown:
    l_ins = instance_contrastive_loss(pooled, vocab, targets, logit_scale)
    l_ce = multiclass_bce_loss(class_scores(pooled, vocab, sig_scale, sig_bias), targets, _as_emb(vocab).shape[0])
    return LossBreakdown(l_ins, l_ce, l_ins + l_ce)
