"""Compatibility (contrastive), generator and discriminator objectives.

Each loss has a vectorized torch implementation used for training and a
plain-Python reference (``naive_*``) that loops over indices; tests check
one against the other.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

PROB_EPS = 1e-7
EQ2_VARIANTS = ("as_written", "second_term_on_target")


@dataclass
class LossConfig:
    tau: float = 0.2
    lambda1: float = 0.05
    lambda2: float = 0.05
    eq2_variant: str = "as_written"
    both_orders: bool = True  # False halves the compatibility sum

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("loss.tau must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss.lambda1 and loss.lambda2 must be >= 0")
        if self.eq2_variant not in EQ2_VARIANTS:
            raise ValueError(f"loss.eq2_variant must be one of {EQ2_VARIANTS}")


@dataclass(frozen=True)
class PairIndex:
    """Ordered positive pairs (i, j), i != j, both directions listed."""

    pairs: tuple

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(i), int(j)) for i, j in self.pairs))
        for i, j in self.pairs:
            if i == j:
                raise ValueError(f"positive pair ({i}, {j}) pairs a patch with itself")

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[int]]) -> "PairIndex":
        """All ordered pairs within each group of batch indices."""
        return cls(tuple((i, j) for g in groups for i in g for j in g if i != j))

    def validate(self, batch_size: int, person_ids=None) -> None:
        seen = set(self.pairs)
        for i, j in self.pairs:
            if not (0 <= i < batch_size and 0 <= j < batch_size):
                raise ValueError(f"pair ({i}, {j}) out of range for batch of {batch_size}")
            if (j, i) not in seen:
                raise ValueError(f"pair ({i}, {j}) listed without its reverse")
            if person_ids is not None and person_ids[i] != person_ids[j]:
                raise ValueError(f"pair ({i}, {j}) crosses persons")

    def __len__(self):
        return len(self.pairs)

    def tensors(self):
        idx = torch.tensor(self.pairs, dtype=torch.long).reshape(-1, 2)
        return idx[:, 0], idx[:, 1]


def cosine_similarity(u, v) -> float:
    u = [float(a) for a in u]
    v = [float(b) for b in v]
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    c = sum(a * b for a, b in zip(u, v)) / (nu * nv)
    return max(-1.0, min(1.0, c))


def similarity_logits(embeddings: torch.Tensor, tau: float) -> torch.Tensor:
    z = F.normalize(embeddings, dim=1, eps=1e-12)
    return z @ z.T / tau


def compatibility_loss(embeddings: torch.Tensor, pair_index: PairIndex, tau: float = 0.2,
                       both_orders: bool = True) -> torch.Tensor:
    """Sum over positive pairs of -log softmax of the pair's cosine logit.

    The softmax for anchor i runs over every k != i in the batch, the positive
    included.
    """
    if len(pair_index) == 0:
        raise ValueError("compatibility_loss needs at least one positive pair")
    n = embeddings.shape[0]
    logits = similarity_logits(embeddings, tau)
    self_mask = torch.eye(n, dtype=torch.bool, device=embeddings.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    log_prob = torch.log_softmax(logits, dim=1)
    i, j = pair_index.tensors()
    loss = -log_prob[i, j].sum()
    return loss if both_orders else 0.5 * loss


def naive_compatibility_loss(embeddings, pairs, tau: float = 0.2) -> float:
    """Double-loop reference: no matrix ops, every similarity recomputed."""
    rows = [[float(x) for x in row] for row in embeddings]
    total = 0.0
    for i, j in pairs:
        denom = 0.0
        for k in range(len(rows)):
            if k != i:
                denom += math.exp(cosine_similarity(rows[i], rows[k]) / tau)
        num = math.exp(cosine_similarity(rows[i], rows[j]) / tau)
        total += -math.log(num / denom)
    return total


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def generator_loss(comp_loss: torch.Tensor, disc_out_source: torch.Tensor,
                   disc_out_target: torch.Tensor, config: LossConfig) -> torch.Tensor:
    ps = _clamp(disc_out_source)
    first = -config.lambda1 * torch.log(ps).sum()
    if config.eq2_variant == "as_written":
        second = -config.lambda2 * torch.log1p(-ps).sum()
    else:
        pt = _clamp(disc_out_target)
        second = -config.lambda2 * torch.log1p(-pt).sum()
    return comp_loss + first + second


def discriminator_loss(disc_out_target: torch.Tensor, disc_out_source: torch.Tensor) -> torch.Tensor:
    """Sum-form binary cross-entropy; target labelled 1, source labelled 0."""
    pt = _clamp(disc_out_target)
    ps = _clamp(disc_out_source)
    return -torch.log(pt).sum() - torch.log1p(-ps).sum()


def naive_generator_loss(comp_loss: float, d_src, d_tgt, config: LossConfig) -> float:
    clamp = lambda p: min(max(float(p), PROB_EPS), 1.0 - PROB_EPS)  # noqa: E731
    total = float(comp_loss)
    for p in d_src:
        total -= config.lambda1 * math.log(clamp(p))
    second = d_src if config.eq2_variant == "as_written" else d_tgt
    for p in second:
        total -= config.lambda2 * math.log(1.0 - clamp(p))
    return total


def naive_discriminator_loss(d_tgt, d_src) -> float:
    clamp = lambda p: min(max(float(p), PROB_EPS), 1.0 - PROB_EPS)  # noqa: E731
    return (-sum(math.log(clamp(p)) for p in d_tgt)
            - sum(math.log(1.0 - clamp(p)) for p in d_src))
