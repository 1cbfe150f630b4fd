"""Conditions prompt embeddings on the target's visual features.

Both prompt branches follow the same path: a linear adapter per branch, an
interaction step that lets each attribute embedding attend over the target's
refined visual tokens, and a fusion step that collapses the attribute axis
into one embedding per target. The explicit branch additionally receives a
correction vector computed from the global visual class embedding, which
compensates text rendered from noisy motion estimates.

Every operation is per target: batch entries never mix here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

N_EXPLICIT = 3
N_IMPLICIT = 4

FUSION_STRATEGIES = ("weighted", "concat", "self_attention")
INTERACTION_STRATEGIES = ("cross_attention", "concat", "add")


@dataclass(frozen=True)
class ModulatorConfig:
    d: int
    n_visual_tokens: int
    n_heads: int = 4
    fusion: str = "weighted"
    interaction: str = "cross_attention"
    use_corrector: bool = True

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError("head count must divide the embedding width")
        if self.fusion not in FUSION_STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.fusion!r}")
        if self.interaction not in INTERACTION_STRATEGIES:
            raise ValueError(f"unknown interaction strategy {self.interaction!r}")


class AttributeAdapter(nn.Module):
    """Lightweight linear map applied to each sentence embedding of a branch."""

    def __init__(self, d: int, n_attributes: int):
        super().__init__()
        self.n_attributes = n_attributes
        self.linear = nn.Linear(d, d)

    def forward(self, eos: torch.Tensor) -> torch.Tensor:
        if eos.ndim != 3 or eos.shape[1] != self.n_attributes:
            raise ValueError(f"expected [b, {self.n_attributes}, d], "
                             f"got {tuple(eos.shape)}")
        return self.linear(eos)


class MotionNoiseCorrector(nn.Module):
    """Visual class embedding -> additive correction for explicit attributes.

    Four Linear-ReLU-LayerNorm blocks along d -> 2d -> 2d -> d -> d. The same
    correction vector is added to every explicit attribute embedding of a
    target.
    """

    def __init__(self, d: int):
        super().__init__()
        dims = [d, 2 * d, 2 * d, d, d]
        blocks = []
        for din, dout in zip(dims[:-1], dims[1:]):
            blocks += [nn.Linear(din, dout), nn.ReLU(), nn.LayerNorm(dout)]
        self.net = nn.Sequential(*blocks)

    def forward(self, cls_final: torch.Tensor) -> torch.Tensor:
        return self.net(cls_final)


class CrossModalInteraction(nn.Module):
    """Single-layer multi-head cross-attention, text residual.

    Queries are attribute embeddings plus a learnable positional table P_Q
    (owned by the caller, one per branch); keys are visual tokens plus the
    shared table P_K; values are the raw visual tokens.
    """

    def __init__(self, d: int, n_visual_tokens: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.p_k = nn.Parameter(torch.empty(n_visual_tokens, d))
        nn.init.normal_(self.p_k, std=0.02)

    def forward(self, attrs: torch.Tensor, visual_tokens: torch.Tensor,
                p_q: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (fused [b, n, d], attention [b, heads, n, l])."""
        b, n, d = attrs.shape
        l = visual_tokens.shape[1]
        if p_q.shape != (n, d):
            raise ValueError(f"positional table must be [{n}, {d}]")
        q = self.wq(attrs + p_q)
        k = self.wk(visual_tokens + self.p_k)
        v = self.wv(visual_tokens)
        q = q.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        return attrs + self.out(y), att


class ConcatInteraction(nn.Module):
    """Concatenate each attribute with the pooled visual feature, then a
    linear fuse, a projection back to width d, and one refining linear."""

    def __init__(self, d: int):
        super().__init__()
        self.fuse = nn.Linear(2 * d, 2 * d)
        self.proj = nn.Linear(2 * d, d)
        self.refine = nn.Linear(d, d)

    def forward(self, attrs: torch.Tensor, visual_tokens: torch.Tensor) -> torch.Tensor:
        pooled = visual_tokens.mean(dim=1, keepdim=True)
        x = torch.cat([attrs, pooled.expand_as(attrs)], dim=-1)
        return attrs + self.refine(torch.relu(self.proj(torch.relu(self.fuse(x)))))


class AddInteraction(nn.Module):
    """Add the pooled visual feature through a three-layer linear net."""

    def __init__(self, d: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))

    def forward(self, attrs: torch.Tensor, visual_tokens: torch.Tensor) -> torch.Tensor:
        pooled = visual_tokens.mean(dim=1)
        return attrs + self.net(pooled).unsqueeze(1)


class ImportanceWeightedFusion(nn.Module):
    """Softmax-weighted sum over the attribute axis.

    A width-to-scalar map scores each attribute embedding, scores soften into
    weights across attributes, and the weighted sum passes through one more
    linear map. Both maps are bias-free.
    """

    def __init__(self, d: int):
        super().__init__()
        self.w1 = nn.Linear(d, 1, bias=False)
        self.w2 = nn.Linear(d, d, bias=False)

    def forward(self, fused: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (embedding [b, d], weights [b, n])."""
        att = self.w1(fused)                       # [b, n, 1]
        w = att.softmax(dim=1)
        return self.w2((w * fused).sum(dim=1)), w.squeeze(-1)


class ConcatFusion(nn.Module):
    """Flatten the attribute axis and map back to width d."""

    def __init__(self, d: int, n_attributes: int):
        super().__init__()
        self.n_attributes = n_attributes
        self.linear = nn.Linear(n_attributes * d, d)

    def forward(self, fused: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = fused.shape
        if n != self.n_attributes:
            raise ValueError(f"expected {self.n_attributes} attributes, got {n}")
        uniform = torch.full((b, n), 1.0 / n, device=fused.device, dtype=fused.dtype)
        return self.linear(fused.reshape(b, n * d)), uniform


class SelfAttentionFusion(nn.Module):
    """One self-attention layer over the attribute axis, then mean pooling."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        from .encoder import SelfAttention
        self.attn = SelfAttention(d, n_heads)

    def forward(self, fused: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, _ = fused.shape
        y = fused + self.attn(fused)
        uniform = torch.full((b, n), 1.0 / n, device=fused.device, dtype=fused.dtype)
        return y.mean(dim=1), uniform


@dataclass
class ModulatorOutputs:
    explicit: torch.Tensor        # [b, d]
    implicit: torch.Tensor        # [b, d]
    weights_explicit: torch.Tensor
    weights_implicit: torch.Tensor


class PromptModulator(nn.Module):
    """Both prompt branches from adapter to fused per-target embedding.

    The interaction weights, the key positional table and the fusion head are
    shared between branches; adapters and the query positional tables are
    branch-specific because the branches differ in attribute count.
    """

    def __init__(self, config: ModulatorConfig):
        super().__init__()
        self.config = config
        d = config.d
        self.adapter_explicit = AttributeAdapter(d, N_EXPLICIT)
        self.adapter_implicit = AttributeAdapter(d, N_IMPLICIT)
        self.corrector = MotionNoiseCorrector(d) if config.use_corrector else None

        if config.interaction == "cross_attention":
            self.interaction = CrossModalInteraction(
                d, config.n_visual_tokens, config.n_heads)
            self.p_q_explicit = nn.Parameter(torch.empty(N_EXPLICIT, d))
            self.p_q_implicit = nn.Parameter(torch.empty(N_IMPLICIT, d))
            nn.init.normal_(self.p_q_explicit, std=0.02)
            nn.init.normal_(self.p_q_implicit, std=0.02)
        elif config.interaction == "concat":
            self.interaction = ConcatInteraction(d)
        else:
            self.interaction = AddInteraction(d)

        if config.fusion == "weighted":
            self.fusion_explicit = ImportanceWeightedFusion(d)
            self.fusion_implicit = self.fusion_explicit  # shared head
        elif config.fusion == "concat":
            self.fusion_explicit = ConcatFusion(d, N_EXPLICIT)
            self.fusion_implicit = ConcatFusion(d, N_IMPLICIT)
        else:
            self.fusion_explicit = SelfAttentionFusion(d, config.n_heads)
            self.fusion_implicit = self.fusion_explicit

    def _interact(self, attrs: torch.Tensor, visual_tokens: torch.Tensor,
                  p_q: torch.Tensor | None) -> torch.Tensor:
        if self.config.interaction == "cross_attention":
            fused, _ = self.interaction(attrs, visual_tokens, p_q)
            return fused
        return self.interaction(attrs, visual_tokens)

    def forward(self, eos_explicit: torch.Tensor, eos_implicit: torch.Tensor,
                cls_final: torch.Tensor, visual_tokens: torch.Tensor) -> ModulatorOutputs:
        a_exp = self.adapter_explicit(eos_explicit)
        a_imp = self.adapter_implicit(eos_implicit)
        if self.corrector is not None:
            a_exp = a_exp + self.corrector(cls_final).unsqueeze(1)

        p_q_exp = getattr(self, "p_q_explicit", None)
        p_q_imp = getattr(self, "p_q_implicit", None)
        t_exp = self._interact(a_exp, visual_tokens, p_q_exp)
        t_imp = self._interact(a_imp, visual_tokens, p_q_imp)

        e_exp, w_exp = self.fusion_explicit(t_exp)
        e_imp, w_imp = self.fusion_implicit(t_imp)
        return ModulatorOutputs(explicit=e_exp, implicit=e_imp,
                                weights_explicit=w_exp, weights_implicit=w_imp)
