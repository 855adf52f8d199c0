"""Loss components and their weighted combination.

Four pieces per training step: a hardest-in-batch triplet loss on the
descriptors, binary cross-entropy on the classifier logits, and one
feature-guidance term per spectrum pulling the metric stack's maps toward
the descriptor stack's maps (and vice versa — no stop-gradient on either
side). The total is ``descriptor + alpha * metric + beta * (guide_a +
guide_b)`` with both weights defaulting to 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, DivergenceError, MiningError, NumericDomainError, ShapeError
from .mining import distance_matrix, hard_negative_indices

DESCRIPTOR_LOSS_VARIANTS = ("hardest_triplet", "hynet_hybrid")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # weight of the classifier loss
    beta: float = 1.0  # weight of the feature-guidance pair

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step scalar record; ``total`` is recombined from the reported
    Python floats so the linear relation holds exactly in the log."""

    descriptor: float
    metric: float
    guide_a: float
    guide_b: float
    total: float

    CSV_HEADER = "L_d,L_m,L_fg_v,L_fg_n,L_total"

    @classmethod
    def combine(cls, descriptor, metric, guide_a, guide_b, weights: LossWeights) -> "LossBreakdown":
        d, m, ga, gb = (
            float(v.detach()) if torch.is_tensor(v) else float(v)
            for v in (descriptor, metric, guide_a, guide_b)
        )
        return cls(d, m, ga, gb, d + weights.alpha * m + weights.beta * (ga + gb))

    def csv_row(self) -> str:
        return f"{self.descriptor:.10g},{self.metric:.10g},{self.guide_a:.10g},{self.guide_b:.10g},{self.total:.10g}"


def descriptor_loss(
    desc_a: torch.Tensor,
    desc_b: torch.Tensor,
    variant: str = "hardest_triplet",
    margin: float = 1.0,
    matrix: torch.Tensor | None = None,
    hybrid_weight: float = 2.0,
) -> torch.Tensor:
    """Triplet loss over a batch of aligned descriptor pairs.

    Anchors are the spectrum-A descriptors; the positive is the aligned
    spectrum-B descriptor and the negative is the hardest off-diagonal
    spectrum-B descriptor from the same distance matrix the classifier's
    miner uses (pass ``matrix`` to reuse it).

    ``hardest_triplet`` penalizes ``margin + d_pos - d_neg`` when positive.
    ``hynet_hybrid`` runs the same triplet on a blended similarity,
    ``hybrid_weight * cosine + (2 - distance)``; the blend weight is
    configurable because published values vary across implementations.
    """
    if variant not in DESCRIPTOR_LOSS_VARIANTS:
        raise ConfigError(f"descriptor loss variant must be one of {DESCRIPTOR_LOSS_VARIANTS}")
    if desc_a.shape != desc_b.shape or desc_a.dim() != 2:
        raise ShapeError(
            f"descriptor batches must be matching [N, D], got {tuple(desc_a.shape)} "
            f"and {tuple(desc_b.shape)}"
        )
    n = desc_a.shape[0]
    if n < 2:
        raise MiningError(f"descriptor loss needs at least 2 pairs for negatives, got {n}")
    if matrix is None:
        matrix = distance_matrix(desc_b, desc_a)
    neg_idx = torch.as_tensor(hard_negative_indices(matrix), device=desc_a.device)
    anchors = torch.arange(n, device=desc_a.device)
    d_pos = matrix[anchors, anchors]
    d_neg = matrix[neg_idx, anchors]
    if variant == "hardest_triplet":
        return F.relu(margin + d_pos - d_neg).mean()
    # blended-similarity triplet: larger similarity = better match, so the
    # hinge flips sides relative to the distance form
    cos_pos = (desc_a * desc_b).sum(dim=1)
    cos_neg = (desc_a * desc_b[neg_idx]).sum(dim=1)
    s_pos = hybrid_weight * cos_pos + (2.0 - d_pos)
    s_neg = hybrid_weight * cos_neg + (2.0 - d_neg)
    return F.relu(margin + s_neg - s_pos).mean()


def metric_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy from raw logits (numerically stable form)."""
    if logits.shape != labels.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    labels = labels.to(logits.dtype)
    if not bool(((labels == 0) | (labels == 1)).all()):
        raise NumericDomainError("metric labels must be exactly 0 or 1")
    return F.binary_cross_entropy_with_logits(logits, labels)


def feature_guided_loss(maps: torch.Tensor, other_maps: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the Euclidean norm of the flattened
    per-sample difference. Gradients flow to both arguments."""
    if maps.shape != other_maps.shape:
        raise ShapeError(
            f"feature map batches differ in shape: {tuple(maps.shape)} vs {tuple(other_maps.shape)}"
        )
    return (maps - other_maps).flatten(1).norm(p=2, dim=1).mean()


def total_loss(
    descriptor: torch.Tensor,
    metric: torch.Tensor,
    guide_a: torch.Tensor,
    guide_b: torch.Tensor,
    weights: LossWeights = LossWeights(),
    step: int | None = None,
) -> torch.Tensor:
    """Weighted sum of the four components.

    A non-finite component aborts with a divergence error naming the
    component (and the training step when the caller supplies one) —
    training never continues silently past a NaN/inf.
    """
    parts = {
        "descriptor": descriptor,
        "metric": metric,
        "guide_a": guide_a,
        "guide_b": guide_b,
    }
    for name, value in parts.items():
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise DivergenceError(component=name, step=step)
    return descriptor + weights.alpha * metric + weights.beta * (guide_a + guide_b)
