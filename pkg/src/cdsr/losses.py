"""Training objectives: InfoNCE domain alignment, in-sequence feedback triplet
contrast, softmax cross-entropy heads and their weighted total."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

# incremented whenever a loss is skipped for lack of in-batch negatives
SKIPS: Counter = Counter()


@dataclass(frozen=True)
class LossWeights:
    mu1: float = 0.5
    mu2: float = 0.5
    tau: float = 0.1
    alpha: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.mu1 < 0 or self.mu2 < 0 or self.alpha < 0:
            raise ValueError("mu1, mu2 and alpha must be non-negative")


@dataclass
class PooledViews:
    """Per-user pooled encodings, each ``(n_users, d)``.

    ``single_X`` pools the single-domain encoder output, ``cross_X`` pools the
    domain-X positions of the cross-domain encoder output.
    """

    single_A: torch.Tensor
    single_B: torch.Tensor
    cross_A: torch.Tensor
    cross_B: torch.Tensor
    present_A: torch.Tensor
    present_B: torch.Tensor


def mean_pool(E: torch.Tensor, index_subset) -> tuple[torch.Tensor, bool]:
    """Mean of the selected rows; an empty subset yields ``(zeros, True)``."""
    idx = torch.as_tensor(list(index_subset), dtype=torch.long)
    L = E.shape[0]
    if idx.numel() and (idx.min() < 0 or idx.max() >= L):
        raise IndexError(f"row index out of range for {L} rows: {idx.tolist()}")
    if idx.numel() == 0:
        return E.new_zeros(E.shape[1]), True
    return E[idx].mean(dim=0), False


def masked_mean(E: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched mean over rows where ``mask`` is set. ``E`` is ``(B, L, d)``."""
    w = mask.to(E.dtype).unsqueeze(-1)
    count = w.sum(dim=1)
    pooled = (E * w).sum(dim=1) / count.clamp(min=1)
    return pooled, count.squeeze(-1) == 0


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("non-finite embedding passed to a loss")


def domain_alignment_loss(cross: torch.Tensor, single: torch.Tensor, tau: float,
                          present: torch.Tensor | None = None) -> torch.Tensor:
    """Two-direction in-batch InfoNCE for one domain, averaged over users.

    Row ``u`` of ``cross`` and ``single`` is the positive pair; every other
    present user's counterpart is a negative. The denominator includes the
    positive term.
    """
    _check_finite(cross, single)
    if present is not None:
        cross, single = cross[present], single[present]
    n = cross.shape[0]
    if n < 2:
        SKIPS["alignment"] += 1
        return cross.new_zeros(())
    sim = cross @ single.T / tau
    target = torch.arange(n, device=cross.device)
    return F.cross_entropy(sim, target) + F.cross_entropy(sim.T, target)


def alignment_loss(views: PooledViews, tau: float) -> torch.Tensor:
    return (domain_alignment_loss(views.cross_A, views.single_A, tau, views.present_A)
            + domain_alignment_loss(views.cross_B, views.single_B, tau, views.present_B))


def feedback_contrast_loss(E: torch.Tensor, pos_idx, neg_idx, alpha: float = 1.0) -> torch.Tensor:
    """Triplet hinge pulling positive-feedback rows toward the positive centroid
    and away from the negative centroid. Zero if either group is empty."""
    pos = torch.as_tensor(list(pos_idx), dtype=torch.long)
    neg = torch.as_tensor(list(neg_idx), dtype=torch.long)
    if pos.numel() == 0 or neg.numel() == 0:
        return E.new_zeros(())
    e = E[pos]
    c_pos = e.mean(dim=0)
    c_neg = E[neg].mean(dim=0)
    d_pos = ((e - c_pos) ** 2).sum(dim=-1)
    d_neg = ((e - c_neg) ** 2).sum(dim=-1)
    return torch.clamp(d_pos - d_neg + alpha, min=0).sum()


def feedback_contrast_batch(E: torch.Tensor, feedbacks: torch.Tensor, valid: torch.Tensor,
                            alpha: float = 1.0) -> torch.Tensor:
    """Per-sequence :func:`feedback_contrast_loss` for a padded ``(B, L, d)`` batch."""
    pos = valid & (feedbacks > 0)
    neg = valid & (feedbacks < 0)
    c_pos, no_pos = masked_mean(E, pos)
    c_neg, no_neg = masked_mean(E, neg)
    d_pos = ((E - c_pos.unsqueeze(1)) ** 2).sum(dim=-1)
    d_neg = ((E - c_neg.unsqueeze(1)) ** 2).sum(dim=-1)
    hinge = torch.clamp(d_pos - d_neg + alpha, min=0) * pos.to(E.dtype)
    per_seq = hinge.sum(dim=1)
    return torch.where(no_pos | no_neg, torch.zeros_like(per_seq), per_seq)


def recommendation_loss(rep: torch.Tensor, head, target: int) -> torch.Tensor:
    """Negative log-softmax probability of ``target`` under ``head(rep)``."""
    n_items = head.out_features if hasattr(head, "out_features") else head(rep).shape[-1]
    if not 0 <= int(target) < n_items:
        raise IndexError(f"target {target} outside catalog of {n_items} items")
    logits = head(rep)
    return torch.logsumexp(logits, dim=-1) - logits[..., int(target)]


def total_loss(single_A, single_B, cross_A, cross_B, align, cont, weights: LossWeights):
    return single_A + single_B + cross_A + cross_B + weights.mu1 * align + weights.mu2 * cont
