"""Alignment losses between multimodal and visual embeddings.

All losses take a multimodal batch M, a visual batch V of equal shape and an
integer identity vector. Rows are L2-normalized internally, so similarities
are cosines. Positives of sample i are the indices sharing its identity,
the sample itself included.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

LOSS_TERMS = ("con", "tri", "sim")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    margin: float = 0.3
    eps: float = 1e-8
    terms: tuple[str, ...] = LOSS_TERMS

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        unknown = set(self.terms) - set(LOSS_TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        if not self.terms:
            raise ValueError("at least one loss term required")


def _check(m: torch.Tensor, v: torch.Tensor, ids: torch.Tensor) -> None:
    if m.ndim != 2 or m.shape != v.shape:
        raise ValueError(f"M and V must be equal [N, d], got {tuple(m.shape)} "
                         f"and {tuple(v.shape)}")
    if m.shape[0] == 0:
        raise ValueError("empty batch")
    if ids.shape != (m.shape[0],):
        raise ValueError("ids must be [N]")


def _pos_mask(ids: torch.Tensor) -> torch.Tensor:
    return ids.unsqueeze(0) == ids.unsqueeze(1)


def contrastive_loss(m: torch.Tensor, v: torch.Tensor, ids: torch.Tensor,
                     tau: float = 0.07) -> torch.Tensor:
    """Identity-level contrast: all same-identity visuals in the numerator.

    loss_i = -log( sum_{j in Pos(i)} exp(m_i . v_j / tau)
                 / sum_k           exp(m_i . v_k / tau) )
    """
    _check(m, v, ids)
    sim = F.normalize(m, dim=-1) @ F.normalize(v, dim=-1).t() / tau
    pos = _pos_mask(ids)
    all_lse = torch.logsumexp(sim, dim=1)
    pos_lse = torch.logsumexp(sim.masked_fill(~pos, float("-inf")), dim=1)
    return (all_lse - pos_lse).mean()


def triplet_loss(m: torch.Tensor, v: torch.Tensor, ids: torch.Tensor,
                 margin: float = 0.3) -> torch.Tensor:
    """Bidirectional hardest-pair hinge on cosine distance.

    Per anchor, the hardest positive is the farthest same-identity sample of
    the other modality and the hardest negative the closest other-identity
    sample. Anchors without a negative contribute zero. Averaged over both
    directions and the batch.
    """
    _check(m, v, ids)
    dist = 1.0 - F.normalize(v, dim=-1) @ F.normalize(m, dim=-1).t()  # d(v_i, m_j)
    pos = _pos_mask(ids)
    has_neg = (~pos).any(dim=1)

    def directional(d: torch.Tensor) -> torch.Tensor:
        hardest_pos = d.masked_fill(~pos, float("-inf")).max(dim=1).values
        hardest_neg = d.masked_fill(pos, float("inf")).min(dim=1).values
        hinge = torch.relu(hardest_pos - hardest_neg + margin)
        return torch.where(has_neg, hinge, torch.zeros_like(hinge))

    v2m = directional(dist)
    m2v = directional(dist.t())  # d(m_i, v_j) by symmetry of the cosine
    return (v2m + m2v).sum() / (2 * m.shape[0])


def similarity_distribution_loss(m: torch.Tensor, v: torch.Tensor,
                                 ids: torch.Tensor, tau: float = 0.07,
                                 eps: float = 1e-8) -> torch.Tensor:
    """KL between predicted similarity rows and the identity distribution.

    The target row for sample i is uniform over its positives. Predicted
    rows are temperature softmaxes of cross-modal cosines, taken in both
    directions; the epsilon keeps the log of the hard target finite.
    """
    _check(m, v, ids)
    labels = _pos_mask(ids).to(m.dtype)
    p = labels / labels.sum(dim=1, keepdim=True)
    log_p = torch.log(p + eps)
    sim = F.normalize(v, dim=-1) @ F.normalize(m, dim=-1).t() / tau

    def directional(s: torch.Tensor) -> torch.Tensor:
        q = s.softmax(dim=1)
        return (q * (torch.log(q) - log_p)).sum(dim=1)

    return (directional(sim) + directional(sim.t())).sum() / m.shape[0]


def total_loss(m_explicit: torch.Tensor, m_implicit: torch.Tensor,
               v: torch.Tensor, ids: torch.Tensor,
               config: LossConfig = LossConfig()) -> tuple[torch.Tensor, dict[str, float]]:
    """Sum of the enabled terms, each averaged over the two prompt branches.

    Returns (scalar loss, per-term breakdown for logging).
    """
    branches = (m_explicit, m_implicit)
    parts: dict[str, torch.Tensor] = {}
    if "con" in config.terms:
        parts["con"] = sum(
            contrastive_loss(mb, v, ids, tau=config.tau) for mb in branches) / 2
    if "tri" in config.terms:
        parts["tri"] = sum(
            triplet_loss(mb, v, ids, margin=config.margin) for mb in branches) / 2
    if "sim" in config.terms:
        parts["sim"] = sum(
            similarity_distribution_loss(mb, v, ids, tau=config.tau, eps=config.eps)
            for mb in branches) / 2
    total = sum(parts.values())
    return total, {k: float(t.detach()) for k, t in parts.items()}
