"""Sharpens per-target visual embeddings against the rest of the batch.

Patch tokens first pass a rowwise refiner (a small conv pair sliding along
the channel axis plus a residual bottleneck MLP). The pooled embedding then
gets a residual adapter, and each target aggregates its most dissimilar
batch mates into a difference feature that is blended back in. The blend
makes embeddings of near-duplicate targets easier to tell apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

COSINE_EPS = 1e-12


class TokenRefiner(nn.Module):
    """Rowwise refinement of patch tokens, shape preserving.

    Each token is treated as a 1-channel signal over its d channels and runs
    through two small convolutions (1 -> 4 -> 1 channels, kernel 3, ReLU
    between), then through a residual bottleneck MLP (d -> d/4 -> d).
    """

    def __init__(self, d: int):
        super().__init__()
        hidden = max(d // 4, 1)
        self.conv1 = nn.Conv1d(1, 4, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(4, 1, kernel_size=3, padding=1)
        self.bottleneck = nn.Sequential(
            nn.Linear(d, hidden), nn.ReLU(), nn.Linear(hidden, d))

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (refined tokens [b, l, d], pooled [b, d])."""
        b, l, d = tokens.shape
        rows = tokens.reshape(b * l, 1, d)
        rows = self.conv2(torch.relu(self.conv1(rows))).squeeze(1)
        refined = (rows + self.bottleneck(rows)).reshape(b, l, d)
        return refined, refined.mean(dim=1)


class VisualFeatureAdapter(nn.Module):
    """Residual adapter on the pooled embedding: x + LN(ReLU(W x))."""

    def __init__(self, d: int):
        super().__init__()
        self.w = nn.Linear(d, d, bias=False)
        self.ln = nn.LayerNorm(d)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return pooled + self.ln(torch.relu(self.w(pooled)))


def cosine_distance_matrix(x: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """Pairwise 1 - cosine over batch rows; diagonal forced to zero."""
    norm = x / x.norm(dim=-1, keepdim=True).clamp_min(eps)
    d = (1.0 - norm @ norm.t()).clamp(0.0, 2.0)
    return d.fill_diagonal_(0.0)


def top_k_select(distances: torch.Tensor, features: torch.Tensor,
                 k: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Most dissimilar batch mates of every row, self excluded.

    k clamps to b - 1; with b == 1 the selection is empty. Ties resolve to
    the lower index so the selection is deterministic.

    Returns (scores [b, k'], samples [b, k', d], indices [b, k']).
    """
    b, d = features.shape
    if distances.shape != (b, b):
        raise ValueError("distance matrix and features disagree on batch size")
    k_eff = min(k, b - 1)
    if k_eff <= 0:
        empty = features.new_zeros((b, 0))
        return empty, features.new_zeros((b, 0, d)), torch.zeros(b, 0, dtype=torch.long)
    masked = distances.clone()
    masked.fill_diagonal_(float("-inf"))  # never pick self
    order = torch.argsort(-masked, dim=1, stable=True)
    idx = order[:, :k_eff]
    scores = torch.gather(distances, 1, idx)
    samples = features[idx]
    return scores, samples, idx


class DiscriminativeAggregator(nn.Module):
    """Blend softmax-weighted dissimilar samples back into each embedding.

    The weighted sum is scaled per channel by a learnable vector (ones at
    init), concatenated with the adapted embedding, mapped back to width d
    and added with a small residual coefficient.
    """

    def __init__(self, d: int, alpha: float = 0.2):
        super().__init__()
        self.alpha = alpha
        self.channel_scale = nn.Parameter(torch.ones(d))
        self.out = nn.Linear(2 * d, d)

    def forward(self, scores: torch.Tensor, samples: torch.Tensor,
                adapted: torch.Tensor) -> torch.Tensor:
        if scores.shape[1] == 0:
            diff = torch.zeros_like(adapted)
        else:
            w = scores.softmax(dim=1)
            diff = self.channel_scale * (w.unsqueeze(-1) * samples).sum(dim=1)
        return self.alpha * self.out(torch.cat([diff, adapted], dim=-1)) + adapted


class FeatureAugmentor(nn.Module):
    """Refiner, adapter and aggregation under one roof."""

    def __init__(self, d: int, k: int = 5, alpha: float = 0.2):
        super().__init__()
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.refiner = TokenRefiner(d)
        self.adapter = VisualFeatureAdapter(d)
        self.aggregator = DiscriminativeAggregator(d, alpha=alpha)

    def refine(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.refiner(tokens)

    def discriminate(self, pooled: torch.Tensor) -> torch.Tensor:
        """Pooled refined tokens -> final detection-side embeddings [b, d]."""
        adapted = self.adapter(pooled)
        distances = cosine_distance_matrix(adapted)
        scores, samples, _ = top_k_select(distances, adapted, self.k)
        return self.aggregator(scores, samples, adapted)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        _, pooled = self.refine(tokens)
        return self.discriminate(pooled)
