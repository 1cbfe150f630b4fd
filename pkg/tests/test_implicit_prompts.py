"""Learnable prompt sentences, soft tokens and the inversion network."""

import pytest
import torch

from promptrack.encoder import EncoderConfig
from promptrack.implicit_prompts import (PART_WORDS, SoftPrompt,
                                         TextualInversionNet,
                                         build_implicit_sentences)


class TestSentences:
    def test_exact_default_sentences(self):
        ps = build_implicit_sentences()
        assert ps.sentences == (
            "[X]1[X]2[X]3[X]4 head [S*].",
            "[X]1[X]2[X]3[X]4 body [S*].",
            "[X]1[X]2[X]3[X]4 arms [S*].",
            "[X]1[X]2[X]3[X]4 legs [S*].",
        )

    def test_prefix_tracks_length(self):
        ps = build_implicit_sentences(soft_prompt_len=2)
        assert ps.sentences[0] == "[X]1[X]2 head [S*]."

    def test_one_sentence_per_part(self):
        ps = build_implicit_sentences()
        for part, s in zip(PART_WORDS, ps.sentences):
            assert f" {part} " in s

    def test_length_validation(self):
        with pytest.raises(ValueError):
            build_implicit_sentences(soft_prompt_len=0)


class TestSoftPrompt:
    def test_shape_and_trainability(self):
        cfg = EncoderConfig(d_joint=8, n_heads=2, soft_prompt_len=3)
        sp = SoftPrompt(cfg)
        assert sp().shape == (3, 8)
        assert sp.tokens.requires_grad


class TestTextualInversion:
    def test_shared_across_layers(self):
        """One network maps every layer's class state; same input, same output."""
        cfg = EncoderConfig(d_joint=8, d_vis_cls=12, n_heads=2)
        torch.manual_seed(0)
        ti = TextualInversionNet(cfg)
        cls = torch.randn(5, 12)
        out = ti({3: cls, 7: cls.clone()})
        assert set(out) == {3, 7}
        assert torch.equal(out[3], out[7])
        assert out[3].shape == (5, 8)

    def test_width_validation(self):
        cfg = EncoderConfig(d_joint=8, d_vis_cls=12, n_heads=2)
        ti = TextualInversionNet(cfg)
        with pytest.raises(ValueError, match="width"):
            ti.invert(torch.randn(2, 8))
