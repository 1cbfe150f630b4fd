"""End-to-end embedder: branch plumbing, contracts, persistence."""

import numpy as np
import pytest
import torch

from promptrack.checkpoint import load_checkpoint, save_checkpoint
from promptrack.encoder import crops_to_tensor
from promptrack.explicit_prompts import MotionAttributes
from promptrack.losses import LossConfig, total_loss
from promptrack.pipeline import (MultimodalEmbedder, PipelineConfig,
                                 load_model, save_model)

from conftest import SMALL_ENCODER


def fake_inputs(rng, b=4):
    crops = crops_to_tensor(
        rng.integers(0, 256, size=(b, 256, 128, 3)).astype(np.uint8))
    ids = list(range(1, b + 1))
    attrs = [MotionAttributes(score=0.9, speed=float(i), depth=50.0 + i)
             for i in range(b)]
    return crops, ids, attrs


class TestForward:
    def test_shapes_and_unit_norms(self, small_model, rng):
        crops, ids, attrs = fake_inputs(rng)
        out = small_model(crops, ids, attrs)
        d = small_model.config.encoder.d_joint
        for emb in (out.explicit, out.implicit, out.visual):
            assert emb.shape == (4, d)
            np.testing.assert_allclose(emb.detach().norm(dim=-1), 1.0,
                                       atol=1e-5)

    def test_deterministic(self, small_model, rng):
        crops, ids, attrs = fake_inputs(rng)
        a = small_model(crops, ids, attrs)
        b = small_model(crops, ids, attrs)
        assert torch.equal(a.explicit, b.explicit)
        assert torch.equal(a.implicit, b.implicit)
        assert torch.equal(a.visual, b.visual)

    def test_length_mismatch_rejected(self, small_model, rng):
        crops, ids, attrs = fake_inputs(rng)
        with pytest.raises(ValueError, match="agree in length"):
            small_model(crops, ids[:-1], attrs)

    def test_identity_feeds_explicit_branch_only(self, small_model, rng):
        """Renaming a target rewrites its sentences; appearance prompts and
        the visual path never see the id."""
        crops, ids, attrs = fake_inputs(rng)
        base = small_model(crops, ids, attrs)
        renamed = small_model(crops, [90 + i for i in ids], attrs)
        assert not torch.allclose(base.explicit, renamed.explicit)
        assert torch.equal(base.implicit, renamed.implicit)
        assert torch.equal(base.visual, renamed.visual)

    def test_crops_feed_every_branch(self, small_model, rng):
        crops, ids, attrs = fake_inputs(rng)
        other = crops + 0.1
        base = small_model(crops, ids, attrs)
        moved = small_model(other, ids, attrs)
        assert not torch.allclose(base.implicit, moved.implicit)
        assert not torch.allclose(base.visual, moved.visual)

    def test_detection_embeddings(self, small_model, rng):
        crops, _, _ = fake_inputs(rng, b=3)
        emb = small_model.detection_embeddings(crops)
        assert emb.shape == (3, SMALL_ENCODER.d_joint)
        np.testing.assert_allclose(emb.detach().norm(dim=-1), 1.0, atol=1e-5)


class TestTrainability:
    def test_text_tower_frozen(self, small_model):
        assert all(not p.requires_grad for p in small_model.text.parameters())
        trainable = small_model.trainable_parameters()
        assert len(trainable) > 0
        text_params = {id(p) for p in small_model.text.parameters()}
        assert all(id(p) not in text_params for p in trainable)

    def test_all_trainables_reached_by_loss(self, rng):
        """One backward pass touches every trainable parameter."""
        torch.manual_seed(1)
        model = MultimodalEmbedder(PipelineConfig(encoder=SMALL_ENCODER, k=2))
        crops, ids, attrs = fake_inputs(rng, b=4)
        out = model(crops, [1, 1, 2, 2], attrs)
        loss, _ = total_loss(out.explicit, out.implicit, out.visual,
                             torch.tensor([1, 1, 2, 2]), LossConfig())
        loss.backward()
        named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        missing = [n for n, p in named if p.grad is None]
        assert missing == []
        total_norm = sum(float(p.grad.norm()) for _, p in named)
        assert total_norm > 0


class TestPersistence:
    def test_round_trip_preserves_outputs(self, small_model, rng, tmp_path):
        crops, ids, attrs = fake_inputs(rng)
        want = small_model(crops, ids, attrs)
        path = tmp_path / "model.ckpt"
        save_model(path, small_model, extra_meta={"epoch_done": 2})
        loaded, meta, leftover = load_model(path)
        assert meta["epoch_done"] == 2
        assert leftover == {}
        got = loaded(crops, ids, attrs)
        np.testing.assert_allclose(got.explicit.detach(),
                                   want.explicit.detach(), atol=1e-6)
        np.testing.assert_allclose(got.visual.detach(),
                                   want.visual.detach(), atol=1e-6)

    def test_config_round_trip(self, small_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_model(path, small_model)
        loaded, _, _ = load_model(path)
        assert loaded.config == small_model.config

    def test_missing_array_rejected(self, small_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_model(path, small_model)
        arrays, meta = load_checkpoint(path)
        key = next(iter(small_model.state_dict()))
        del arrays[key]
        save_checkpoint(path, arrays, meta)
        with pytest.raises(ValueError, match="lacks"):
            load_model(path)

    def test_extra_array_collision_rejected(self, small_model, tmp_path):
        key = next(iter(small_model.state_dict()))
        with pytest.raises(ValueError, match="collide"):
            save_model(tmp_path / "m.ckpt", small_model,
                       extra_arrays={key: np.zeros(2, dtype=np.float32)})

    def test_leftover_arrays_returned(self, small_model, tmp_path):
        path = tmp_path / "m.ckpt"
        extra = {"opt/x": np.arange(3, dtype=np.float32)}
        save_model(path, small_model, extra_arrays=extra)
        _, _, leftover = load_model(path)
        assert set(leftover) == {"opt/x"}
        np.testing.assert_array_equal(leftover["opt/x"], extra["opt/x"])
