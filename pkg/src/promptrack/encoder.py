"""Toy two-tower encoder with the ports the tracking pipeline needs.

The visual tower is a 4-block strided convolutional patchifier followed by
two transformer blocks; it reports patch tokens and a class embedding in the
joint space plus the per-layer class states used for textual inversion. The
text tower is an embedding table with a stack of lightweight causal
transformer layers; hidden states at a marked slot position can be replaced
with externally computed pseudo-tokens before chosen layers run.

Both towers are sized for desk-scale experiments. Loading real pretrained
backbone weights is declared but unsupported in this build.
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .datamodel import CROP_HEIGHT, CROP_WIDTH, CropBatch

PAD_ID = 0
EOS_ID = 1
SLOT_ID = 2
SOFT_BASE = 3  # soft-prompt placeholder ids occupy [SOFT_BASE, SOFT_BASE + M)

_TOKEN_RE = re.compile(r"\[x\]\d+|\[s\*\]|\d+(?:\.\d+)?|[a-z]+")


@dataclass(frozen=True)
class EncoderConfig:
    d_joint: int = 16
    d_vis_cls: int = 24
    n_text_layers: int = 8
    n_vis_layers: int = 2
    inject_layers: tuple[int, ...] = (5, 8)
    vocab_size: int = 4096
    text_len: int = 24
    n_heads: int = 4
    soft_prompt_len: int = 4

    def __post_init__(self):
        if min(self.d_joint, self.d_vis_cls, self.n_text_layers,
               self.n_vis_layers, self.n_heads, self.soft_prompt_len) < 1:
            raise ValueError("all encoder dimensions must be positive")
        if self.d_joint % self.n_heads or self.d_vis_cls % self.n_heads:
            raise ValueError("head count must divide d_joint and d_vis_cls")
        for layer in self.inject_layers:
            if not 1 <= layer <= self.n_text_layers:
                raise ValueError(f"inject layer {layer} outside 1..{self.n_text_layers}")
        if self.vocab_size <= SOFT_BASE + self.soft_prompt_len + 8:
            raise ValueError("vocab too small for the reserved ids")
        if self.text_len < 8:
            raise ValueError("text_len must be >= 8")

    @property
    def n_reserved(self) -> int:
        return SOFT_BASE + self.soft_prompt_len


# dims mirroring a CLIP ViT-B/16 deployment, for reference and docs
CLIP_SCALE = EncoderConfig(
    d_joint=512, d_vis_cls=768, n_text_layers=12, n_vis_layers=12,
    inject_layers=(5, 8), vocab_size=49408, text_len=77, n_heads=8)


@dataclass(frozen=True)
class TokenizedPrompt:
    ids: np.ndarray          # [text_len] int64, PAD-filled tail
    eos_position: int
    slot_position: int | None  # position of [S*], if any


@dataclass
class VisualOutputs:
    tokens: torch.Tensor                      # [b, l, d_joint]
    cls_final: torch.Tensor                   # [b, d_joint]
    cls_per_layer: dict[int, torch.Tensor]    # inject layer -> [b, d_vis_cls]


@dataclass
class TextOutputs:
    token_states: torch.Tensor   # [b, text_len, d_joint]
    eos_embedding: torch.Tensor  # [b, d_joint]
    hidden: list[torch.Tensor] = field(default_factory=list)  # per layer, optional


class PromptTokenizer:
    """Deterministic hashing tokenizer for the fixed prompt grammar.

    Sentences are lowercased and split into words, decimal numbers and the
    special markers [X]k / [S*]. Words and numbers hash into the open vocab
    range; the markers map to reserved ids. One EOS is appended and the row
    is PAD-filled to the configured length.
    """

    def __init__(self, config: EncoderConfig):
        self.config = config
        self._span = config.vocab_size - config.n_reserved

    def _word_id(self, word: str) -> int:
        return self.config.n_reserved + zlib.crc32(word.encode()) % self._span

    def tokenize(self, sentence: str) -> TokenizedPrompt:
        words = _TOKEN_RE.findall(sentence.lower())
        if not words:
            raise ValueError(f"nothing to tokenize in {sentence!r}")
        ids: list[int] = []
        slot = None
        for w in words:
            if w == "[s*]":
                if slot is not None:
                    raise ValueError("more than one [S*] marker")
                slot = len(ids)
                ids.append(SLOT_ID)
            elif w.startswith("[x]"):
                k = int(w[3:])
                if not 1 <= k <= self.config.soft_prompt_len:
                    raise ValueError(f"soft placeholder {w!r} exceeds length "
                                     f"{self.config.soft_prompt_len}")
                ids.append(SOFT_BASE + k - 1)
            else:
                ids.append(self._word_id(w))
        if len(ids) > self.config.text_len - 1:
            raise ValueError(f"prompt longer than {self.config.text_len - 1} tokens")
        eos = len(ids)
        ids.append(EOS_ID)
        ids += [PAD_ID] * (self.config.text_len - len(ids))
        return TokenizedPrompt(ids=np.array(ids, dtype=np.int64),
                               eos_position=eos, slot_position=slot)

    def tokenize_batch(self, sentences: list[str]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (ids [b, L], eos_positions [b], slot_positions [b]); a row
        without a slot marker carries -1."""
        rows = [self.tokenize(s) for s in sentences]
        ids = torch.from_numpy(np.stack([r.ids for r in rows]))
        eos = torch.tensor([r.eos_position for r in rows], dtype=torch.long)
        slots = torch.tensor(
            [-1 if r.slot_position is None else r.slot_position for r in rows],
            dtype=torch.long)
        return ids, eos, slots


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (b, n, self.n_heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        att = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if causal:
            mask = torch.triu(torch.ones(n, n, dtype=torch.bool, device=x.device), 1)
            att = att.masked_fill(mask, float("-inf"))
        att = att.softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class TransformerBlock(nn.Module):
    """Pre-norm block: attention and a 2x-wide GELU MLP, both residual."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), causal=causal)
        return x + self.mlp(self.ln2(x))


class ToyVisualEncoder(nn.Module):
    """Strided conv patchifier over 256x128 crops plus transformer blocks.

    The transformer runs at width d_vis_cls; tokens and the class state are
    projected to the joint width at the end. Class states for the configured
    text inject layers all come from the final block, a declared
    simplification of per-layer taps at this scale.
    """

    N_TOKENS = 8  # 256x128 through strides 4,4,2,2 leaves a 4x2 grid

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config.d_vis_cls
        # GELU here: the stack must survive large early updates, and a
        # saturated ReLU conv would stop responding to its input for good
        self.patchify = nn.Sequential(
            nn.Conv2d(3, 8, kernel_size=4, stride=4), nn.GELU(),
            nn.Conv2d(8, 16, kernel_size=4, stride=4), nn.GELU(),
            nn.Conv2d(16, c, kernel_size=2, stride=2), nn.GELU(),
            nn.Conv2d(c, c, kernel_size=2, stride=2))
        # orthogonal, bias-free convs keep the crop signal from washing out
        # before the transformer; default init buries it under bias structure
        for m in self.patchify:
            if isinstance(m, nn.Conv2d):
                nn.init.orthogonal_(m.weight.flatten(1), gain=math.sqrt(2.0))
                nn.init.zeros_(m.bias)
        self.patch_norm = nn.LayerNorm(c)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c))
        self.pos_embed = nn.Parameter(torch.empty(1, self.N_TOKENS + 1, c))
        nn.init.normal_(self.pos_embed, std=0.01)
        nn.init.normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(c, config.n_heads) for _ in range(config.n_vis_layers))
        self.ln_final = nn.LayerNorm(c)
        self.proj = nn.Linear(c, config.d_joint, bias=False)

    def forward(self, crops: torch.Tensor) -> VisualOutputs:
        if crops.ndim != 4 or crops.shape[1:] != (3, CROP_HEIGHT, CROP_WIDTH):
            raise ValueError(f"expected [b, 3, {CROP_HEIGHT}, {CROP_WIDTH}] crops, "
                             f"got {tuple(crops.shape)}")
        b = crops.shape[0]
        x = self.patchify(crops)                      # [b, c, 4, 2]
        x = self.patch_norm(x.flatten(2).transpose(1, 2))  # [b, 8, c]
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.ln_final(x)
        cls_state = x[:, 0]                           # [b, d_vis_cls]
        tokens = self.proj(x[:, 1:])
        cls_final = self.proj(cls_state)
        cls_per_layer = {layer: cls_state for layer in self.config.inject_layers}
        return VisualOutputs(tokens=tokens, cls_final=cls_final,
                             cls_per_layer=cls_per_layer)


class ToyTextEncoder(nn.Module):
    """Causal transformer over hashed prompt tokens.

    `soft_prompt` vectors, when given, replace the embedding-table rows of
    the reserved placeholder ids. `injected` maps a 1-based layer index to a
    [b, d_joint] pseudo-token batch that overwrites the hidden state at each
    row's slot position before that layer runs.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.d_joint
        self.token_embed = nn.Embedding(config.vocab_size, d)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        self.pos_embed = nn.Parameter(torch.empty(config.text_len, d))
        nn.init.normal_(self.pos_embed, std=0.01)
        self.layers = nn.ModuleList(
            TransformerBlock(d, config.n_heads) for _ in range(config.n_text_layers))
        self.ln_final = nn.LayerNorm(d)

    def forward(self, token_ids: torch.Tensor, eos_positions: torch.Tensor,
                slot_positions: torch.Tensor | None = None,
                injected: dict[int, torch.Tensor] | None = None,
                soft_prompt: torch.Tensor | None = None,
                return_hidden: bool = False) -> TextOutputs:
        if token_ids.ndim != 2 or token_ids.shape[1] != self.config.text_len:
            raise ValueError(f"expected [b, {self.config.text_len}] token ids")
        b = token_ids.shape[0]
        if injected:
            bad = set(injected) - set(self.config.inject_layers)
            if bad:
                raise ValueError(f"injection at layers {sorted(bad)} not in "
                                 f"configured {self.config.inject_layers}")
            if slot_positions is None or bool((slot_positions < 0).any()):
                raise ValueError("injections require a slot position in every row")

        h = self.token_embed(token_ids)
        if soft_prompt is not None:
            m = soft_prompt.shape[0]
            for k in range(m):
                mask = token_ids == (SOFT_BASE + k)
                if mask.any():
                    h = torch.where(mask.unsqueeze(-1), soft_prompt[k], h)
        h = h + self.pos_embed

        rows = torch.arange(b, device=h.device)
        hidden: list[torch.Tensor] = []
        for i, layer in enumerate(self.layers, start=1):
            if injected and i in injected:
                h = h.clone()
                h[rows, slot_positions] = injected[i]
            h = layer(h, causal=True)
            if return_hidden:
                hidden.append(h)
        h = self.ln_final(h)
        eos_embedding = h[rows, eos_positions]
        return TextOutputs(token_states=h, eos_embedding=eos_embedding, hidden=hidden)


def crops_to_tensor(batch: CropBatch | np.ndarray) -> torch.Tensor:
    """uint8 HWC crops -> float CHW in [0, 1]."""
    arr = batch.crops if isinstance(batch, CropBatch) else batch
    t = torch.from_numpy(np.ascontiguousarray(arr)).float().div_(255.0)
    return t.permute(0, 3, 1, 2)


def load_pretrained_backbone(name: str):
    """Port for real CLIP-scale weights. Not available at desk scale."""
    raise NotImplementedError(
        f"pretrained backbone loading ({name!r}) is unsupported in this build")
