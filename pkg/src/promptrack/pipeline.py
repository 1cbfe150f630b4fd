"""End-to-end embedding model: crops and prompt text in, embeddings out.

For a batch of targets the model produces three aligned embeddings per
target: the fused explicit-prompt embedding, the fused implicit-prompt
embedding and the augmented visual embedding. Training pulls the prompt
embeddings toward the visual embedding of the same identity; tracking
compares them across frames.

The text tower stays frozen; soft tokens, the inversion net, adapters,
modulator, augmentor and the whole visual tower train.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
from torch.nn import functional

from .augmentor import FeatureAugmentor
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import (EncoderConfig, PromptTokenizer, ToyTextEncoder,
                      ToyVisualEncoder)
from .explicit_prompts import MotionAttributes, render_explicit_prompts
from .implicit_prompts import (PART_WORDS, SoftPrompt, TextualInversionNet,
                               build_implicit_sentences)
from .modulator import ModulatorConfig, PromptModulator


@dataclass(frozen=True)
class PipelineConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: str = "weighted"
    interaction: str = "cross_attention"
    use_corrector: bool = True
    k: int = 5
    alpha: float = 0.2

    def __post_init__(self):
        # fail at config time, not at model construction
        from .modulator import FUSION_STRATEGIES, INTERACTION_STRATEGIES
        if self.fusion not in FUSION_STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.fusion!r}")
        if self.interaction not in INTERACTION_STRATEGIES:
            raise ValueError(f"unknown interaction strategy {self.interaction!r}")
        if self.k < 1:
            raise ValueError("k must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        enc = dict(d["encoder"])
        enc["inject_layers"] = tuple(enc["inject_layers"])
        rest = {k: v for k, v in d.items() if k != "encoder"}
        return PipelineConfig(encoder=EncoderConfig(**enc), **rest)


@dataclass
class EmbedderOutputs:
    explicit: torch.Tensor  # [b, d_joint]
    implicit: torch.Tensor  # [b, d_joint]
    visual: torch.Tensor    # [b, d_joint]


class MultimodalEmbedder(nn.Module):
    def __init__(self, config: PipelineConfig = PipelineConfig()):
        super().__init__()
        self.config = config
        enc = config.encoder
        self.tokenizer = PromptTokenizer(enc)
        self.visual = ToyVisualEncoder(enc)
        self.text = ToyTextEncoder(enc)
        self.soft_prompt = SoftPrompt(enc)
        self.ti_net = TextualInversionNet(enc)
        self.modulator = PromptModulator(ModulatorConfig(
            d=enc.d_joint, n_visual_tokens=ToyVisualEncoder.N_TOKENS,
            n_heads=enc.n_heads, fusion=config.fusion,
            interaction=config.interaction, use_corrector=config.use_corrector))
        self.augmentor = FeatureAugmentor(enc.d_joint, k=config.k, alpha=config.alpha)

        # the text tower holds frozen backbone weights; everything that
        # conditions or reads it stays trainable
        for p in self.text.parameters():
            p.requires_grad_(False)

        ids, eos, slots = self.tokenizer.tokenize_batch(
            list(build_implicit_sentences(enc.soft_prompt_len).sentences))
        self.register_buffer("_imp_ids", ids, persistent=False)
        self.register_buffer("_imp_eos", eos, persistent=False)
        self.register_buffer("_imp_slots", slots, persistent=False)

    @property
    def n_parts(self) -> int:
        return len(PART_WORDS)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def encode_explicit(self, target_ids, attrs: list[MotionAttributes]) -> torch.Tensor:
        sentences = []
        for tid, a in zip(target_ids, attrs):
            sentences.extend(render_explicit_prompts(int(tid), a).sentences)
        ids, eos, _ = self.tokenizer.tokenize_batch(sentences)
        out = self.text(ids, eos)
        return out.eos_embedding.reshape(len(attrs), 3, -1)

    def encode_implicit(self, pseudo: dict[int, torch.Tensor]) -> torch.Tensor:
        b = next(iter(pseudo.values())).shape[0]
        p = self.n_parts
        ids = self._imp_ids.repeat(b, 1)
        eos = self._imp_eos.repeat(b)
        slots = self._imp_slots.repeat(b)
        injected = {layer: t.repeat_interleave(p, dim=0) for layer, t in pseudo.items()}
        out = self.text(ids, eos, slot_positions=slots, injected=injected,
                        soft_prompt=self.soft_prompt())
        return out.eos_embedding.reshape(b, p, -1)

    def pseudo_tokens(self, crops: torch.Tensor) -> dict[int, torch.Tensor]:
        return self.ti_net(self.visual(crops).cls_per_layer)

    def forward(self, crops: torch.Tensor, target_ids,
                attrs: list[MotionAttributes]) -> EmbedderOutputs:
        b = crops.shape[0]
        if len(target_ids) != b or len(attrs) != b:
            raise ValueError("crops, ids and attributes must agree in length")
        vis = self.visual(crops)
        tokens, pooled = self.augmentor.refine(vis.tokens)

        eos_exp = self.encode_explicit(target_ids, attrs)
        eos_imp = self.encode_implicit(self.ti_net(vis.cls_per_layer))
        mod = self.modulator(eos_exp, eos_imp, vis.cls_final, tokens)

        visual_emb = self.augmentor.discriminate(pooled)
        # unit-length contract at the model boundary: similarity scores
        # downstream (losses, matching, evaluation) are all cosine based
        return EmbedderOutputs(
            explicit=functional.normalize(mod.explicit, dim=-1),
            implicit=functional.normalize(mod.implicit, dim=-1),
            visual=functional.normalize(visual_emb, dim=-1))

    def detection_embeddings(self, crops: torch.Tensor) -> torch.Tensor:
        """Visual-only path for identity-free detections."""
        vis = self.visual(crops)
        _, pooled = self.augmentor.refine(vis.tokens)
        return functional.normalize(self.augmentor.discriminate(pooled), dim=-1)


def model_arrays(model: MultimodalEmbedder) -> dict[str, np.ndarray]:
    return {name: t.detach().cpu().numpy().astype(np.float32)
            for name, t in model.state_dict().items()}


def save_model(path, model: MultimodalEmbedder, extra_meta: dict | None = None,
               extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    arrays = model_arrays(model)
    if extra_arrays:
        overlap = set(arrays) & set(extra_arrays)
        if overlap:
            raise ValueError(f"extra arrays collide with model keys: {sorted(overlap)}")
        arrays.update(extra_arrays)
    meta = {"pipeline": model.config.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, arrays, meta)


def load_model(path) -> tuple[MultimodalEmbedder, dict, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint.

    Returns (model, meta, leftover arrays not part of the module state).
    """
    arrays, meta = load_checkpoint(path)
    model = MultimodalEmbedder(PipelineConfig.from_dict(meta["pipeline"]))
    state = model.state_dict()
    missing = [k for k in state if k not in arrays]
    if missing:
        raise ValueError(f"checkpoint lacks arrays: {missing[:5]}")
    model.load_state_dict({k: torch.from_numpy(arrays[k].copy()) for k in state})
    leftover = {k: v for k, v in arrays.items() if k not in state}
    return model, meta, leftover
