"""ID (cross-entropy), batch-hard triplet and ArcFace loss heads.

Identity and triplet terms attach to each of the three fused embeddings
(d_full, z_ft, z_fl); the weighted sum is the training objective.  All
functions are pure in their tensor inputs and differentiable, so they can
be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn.functional as F

HEADS = ("d_full", "z_ft", "z_fl")
LOSS_KINDS = ("id", "triplet")

# Cosines are clamped away from +-1 before arccos to keep gradients finite.
_COS_EPS = 1e-7


def _default_head_weights() -> dict[str, dict[str, float]]:
    return {head: {kind: 1.0 for kind in LOSS_KINDS} for head in HEADS}


@dataclass(frozen=True)
class LossConfig:
    triplet_margin: float = 0.3
    arcface_scale: float = 30.0
    arcface_margin: float = 0.5  # radians
    head_weights: Mapping[str, Mapping[str, float]] = field(
        default_factory=_default_head_weights
    )
    use_arcface: bool = False

    def __post_init__(self):
        if self.arcface_scale <= 0:
            raise ValueError("arcface_scale must be positive")
        if not 0.0 <= self.arcface_margin < torch.pi / 2:
            raise ValueError("arcface_margin must lie in [0, pi/2)")
        if self.triplet_margin < 0:
            raise ValueError("triplet_margin must be non-negative")

    def weight(self, head: str, kind: str) -> float:
        return float(self.head_weights.get(head, {}).get(kind, 0.0))


@dataclass
class LossBreakdown:
    """Per-head unweighted terms plus the weighted scalar total."""

    terms: dict[str, torch.Tensor]
    total: torch.Tensor

    def scalars(self) -> dict[str, float]:
        out = {key: float(val.detach()) for key, val in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def id_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log softmax probability of the true class."""
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(
            f"labels must lie in [0, {logits.shape[1]}), got "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return F.cross_entropy(logits, labels)


def pairwise_distances(embeddings: torch.Tensor) -> torch.Tensor:
    """Euclidean distance matrix with a zero-safe sqrt."""
    prod = embeddings @ embeddings.t()
    sq = prod.diagonal()
    d2 = (sq.unsqueeze(1) - 2.0 * prod + sq.unsqueeze(0)).clamp(min=0.0)
    zero_mask = d2 == 0.0
    d2 = d2 + zero_mask.to(d2.dtype) * 1e-16
    return d2.sqrt() * (~zero_mask).to(d2.dtype)


def triplet_batch_hard(embeddings: torch.Tensor, labels: torch.Tensor,
                       margin: float) -> torch.Tensor:
    """Per-anchor hinge on hardest-positive minus hardest-negative distance.

    Requires a PK-style batch: every label occurs at least twice and at
    least two distinct labels are present.
    """
    labels = labels.view(-1)
    uniq, counts = labels.unique(return_counts=True)
    if len(uniq) < 2:
        raise ValueError("triplet loss needs at least 2 distinct labels in batch")
    for lab, count in zip(uniq.tolist(), counts.tolist()):
        if count < 2:
            raise ValueError(
                f"label {lab} has only {count} sample(s) in batch; "
                "batch-hard mining needs at least 2"
            )
    dist = pairwise_distances(embeddings)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos_mask = same & ~eye
    neg_mask = ~same

    hardest_pos = dist.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    hardest_neg = dist.masked_fill(~neg_mask, float("inf")).min(dim=1).values
    return F.relu(hardest_pos - hardest_neg + margin).mean()


def arcface_logits(embeddings: torch.Tensor, class_weights: torch.Tensor,
                   labels: torch.Tensor, s: float, m: float) -> torch.Tensor:
    """Scaled cosine logits with an additive angular margin on the true class.

    logit[i][c] = s * cos(theta_ic + m * [c == label_i]).  Past the point
    where theta + m would wrap around pi, the standard linear fallback
    cos(theta) - m*sin(m) keeps the penalty monotone.
    """
    emb_norms = embeddings.norm(dim=1, keepdim=True)
    w_norms = class_weights.norm(dim=1, keepdim=True)
    if (emb_norms == 0).any():
        raise ValueError("zero-norm embedding cannot be angle-normalized")
    if (w_norms == 0).any():
        raise ValueError("zero-norm class weight row")
    cos = (embeddings / emb_norms) @ (class_weights / w_norms).t()
    logits = s * cos
    if m == 0.0:
        return logits
    idx = torch.arange(len(labels), device=embeddings.device)
    cos_true = cos[idx, labels].clamp(-1.0 + _COS_EPS, 1.0 - _COS_EPS)
    theta = torch.acos(cos_true)
    phi = torch.where(
        theta + m <= torch.pi,
        torch.cos(theta + m),
        cos_true - m * torch.sin(torch.tensor(m, dtype=cos_true.dtype)),
    )
    logits = logits.clone()
    logits[idx, labels] = s * phi
    return logits


def total_loss(embeddings, labels: torch.Tensor,
               class_weights: Mapping[str, torch.Tensor],
               config: LossConfig) -> LossBreakdown:
    """Weighted sum of ID and triplet terms over the three embedding heads.

    ``embeddings`` carries batched d_full / z_ft / z_fl attributes (an
    EmbeddingSet); ``class_weights`` maps each head to its C x E classifier
    weight matrix, reused as the ArcFace class-centre matrix when enabled.
    """
    terms: dict[str, torch.Tensor] = {}
    total = None
    for head in HEADS:
        emb = getattr(embeddings, head) if hasattr(embeddings, head) \
            else embeddings[head]
        weight_mat = class_weights[head]
        if config.use_arcface:
            logits = arcface_logits(emb, weight_mat, labels,
                                    config.arcface_scale, config.arcface_margin)
        else:
            logits = F.linear(emb, weight_mat)
        terms[f"{head}_id"] = id_loss(logits, labels)
        terms[f"{head}_triplet"] = triplet_batch_hard(
            emb, labels, config.triplet_margin)
        contribution = (
            config.weight(head, "id") * terms[f"{head}_id"]
            + config.weight(head, "triplet") * terms[f"{head}_triplet"]
        )
        total = contribution if total is None else total + contribution
    return LossBreakdown(terms=terms, total=total)
