"""Learnable appearance prompts: soft tokens plus textual inversion.

Each target gets four part-focused sentences sharing one batch of learnable
soft tokens and one appearance slot:

    "[X]1[X]2[X]3[X]4 head [S*]."

The slot content is not a vocabulary word: a small inversion network maps
the visual class state of a chosen encoder layer into the text embedding
space, and the result overwrites the slot's hidden state before that layer
runs. One network is shared across all inject layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoder import EncoderConfig

PART_WORDS = ("head", "body", "arms", "legs")


@dataclass(frozen=True)
class ImplicitPromptSet:
    sentences: tuple[str, ...]

    def __post_init__(self):
        if len(self.sentences) != len(PART_WORDS):
            raise ValueError(f"expected {len(PART_WORDS)} sentences")


def build_implicit_sentences(soft_prompt_len: int = 4) -> ImplicitPromptSet:
    if soft_prompt_len < 1:
        raise ValueError("soft_prompt_len must be >= 1")
    prefix = "".join(f"[X]{k}" for k in range(1, soft_prompt_len + 1))
    return ImplicitPromptSet(tuple(
        f"{prefix} {part} [S*]." for part in PART_WORDS))


class SoftPrompt(nn.Module):
    """Shared learnable soft tokens substituted for the [X]k placeholders."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.tokens = nn.Parameter(
            torch.empty(config.soft_prompt_len, config.d_joint))
        nn.init.normal_(self.tokens, std=0.02)

    def forward(self) -> torch.Tensor:
        return self.tokens


class TextualInversionNet(nn.Module):
    """Visual class state -> pseudo-token in the text embedding space.

    A two-layer perceptron with ReLU at the visual class width, followed by a
    projection to the joint width. The same network serves every inject
    layer, producing one pseudo-token batch per layer.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        c, d = config.d_vis_cls, config.d_joint
        self.d_vis_cls = c
        self.mlp = nn.Sequential(nn.Linear(c, c), nn.ReLU(), nn.Linear(c, c))
        self.proj = nn.Linear(c, d)

    def invert(self, cls_state: torch.Tensor) -> torch.Tensor:
        if cls_state.shape[-1] != self.d_vis_cls:
            raise ValueError(f"expected width {self.d_vis_cls}, "
                             f"got {cls_state.shape[-1]}")
        return self.proj(self.mlp(cls_state))

    def forward(self, cls_per_layer: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        return {layer: self.invert(state) for layer, state in cls_per_layer.items()}
