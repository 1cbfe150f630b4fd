"""Schedule, splits, batching, the audit, and end-to-end determinism."""

import math

import numpy as np
import pytest
import torch

from promptrack.datamodel import SynthSpec, generate_synthetic_sequence
from promptrack.losses import LossConfig
from promptrack.pipeline import MultimodalEmbedder, PipelineConfig
from promptrack.training import (TrainConfig, build_datasets, build_optimizer,
                                 evaluate_model, lr_for_epoch,
                                 optimizer_covers_trainables, pk_batches,
                                 run_ablation, train)

from conftest import SMALL_ENCODER

TINY_LOSS = LossConfig(tau=0.3, eps=1e-3)
TINY_TRAIN = TrainConfig(epochs=3, batch_size=8, q_per_identity=4,
                         base_lr=5e-3, warmup_lr=5e-4, warmup_epochs=1,
                         seed=3, loss=TINY_LOSS)


@pytest.fixture(scope="module")
def tiny():
    """(frames, gt, train_set, holdout) for a 3-identity sequence."""
    frames, gt = generate_synthetic_sequence(
        SynthSpec(n_targets=3, n_frames=10, seed=3, name="tiny"))
    train_set, holdout = build_datasets(frames, gt, holdout_fraction=0.2,
                                        seed=3)
    return frames, gt, train_set, holdout


def tiny_model():
    torch.manual_seed(3)
    return MultimodalEmbedder(PipelineConfig(encoder=SMALL_ENCODER, k=2))


class TestSchedule:
    CFG = TrainConfig(epochs=20, warmup_epochs=4, base_lr=1e-2,
                      warmup_lr=1e-3, seed=0)

    def test_warmup_is_constant(self):
        for e in range(4):
            assert lr_for_epoch(e, self.CFG) == 1e-3

    def test_cosine_anchor_points(self):
        assert lr_for_epoch(4, self.CFG) == 1e-2
        mid = lr_for_epoch(12, self.CFG)
        assert abs(mid - 5e-3) < 1e-15
        assert 0 < lr_for_epoch(19, self.CFG) < lr_for_epoch(18, self.CFG)

    def test_monotone_after_warmup(self):
        lrs = [lr_for_epoch(e, self.CFG) for e in range(4, 20)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))


class TestDatasets:
    def test_frame_boundary_split(self, tiny):
        _, _, train_set, holdout = tiny
        assert len(train_set) == 3 * 8 and len(holdout) == 3 * 2
        assert set(train_set.ids) == set(holdout.ids) == {1, 2, 3}
        last_train = {tid: 0 for tid in (1, 2, 3)}
        for s in train_set.samples:
            last_train[s.obs.id] = max(last_train[s.obs.id], s.obs.frame)
        for s in holdout.samples:
            assert s.obs.frame > last_train[s.obs.id]

    def test_speed_semantics(self, tiny):
        """First sample of each identity has speed zero; none are negative."""
        _, _, train_set, _ = tiny
        seen: set[int] = set()
        for s in train_set.samples:
            if s.obs.id not in seen:
                assert s.attrs.speed == 0.0
                seen.add(s.obs.id)
            assert s.attrs.speed >= 0.0

    def test_attr_noise_touches_train_only(self, tiny):
        frames, gt, _, _ = tiny
        clean_t, clean_h = build_datasets(frames, gt, holdout_fraction=0.2,
                                          seed=3)
        noisy_t, noisy_h = build_datasets(frames, gt, holdout_fraction=0.2,
                                          attr_noise_std=0.5, seed=3)
        assert any(a.attrs.depth != b.attrs.depth
                   for a, b in zip(clean_t.samples, noisy_t.samples))
        assert all(a.attrs == b.attrs
                   for a, b in zip(clean_h.samples, noisy_h.samples))

    def test_crop_cache_and_augment_path(self, tiny):
        _, _, train_set, _ = tiny
        base = train_set.base_crops()
        assert base.shape == (len(train_set), 256, 128, 3)
        idx = np.array([0, 1])
        plain = train_set.crops_for(idx, augment=False, rng=None)
        assert np.array_equal(plain, base[idx])
        aug = train_set.crops_for(idx, augment=True,
                                  rng=np.random.default_rng(0))
        assert aug.shape == (2, 256, 128, 3)


class TestBatching:
    def test_balanced_batches(self, tiny, rng):
        _, _, train_set, _ = tiny
        batches = pk_batches(train_set.ids, TINY_TRAIN, rng)
        want_batches = math.ceil(len(train_set) / 8)
        assert len(batches) == want_batches
        for idx in batches:
            assert len(idx) == 8
            _, counts = np.unique(train_set.ids[idx], return_counts=True)
            assert all(c == TINY_TRAIN.q_per_identity for c in counts)

    def test_deterministic_under_seed(self, tiny):
        _, _, train_set, _ = tiny
        a = pk_batches(train_set.ids, TINY_TRAIN, np.random.default_rng(9))
        b = pk_batches(train_set.ids, TINY_TRAIN, np.random.default_rng(9))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_few_identities_shrink_p(self, rng):
        ids = np.array([1] * 6 + [2] * 6)
        cfg = TrainConfig(epochs=2, batch_size=16, q_per_identity=4, seed=0,
                          base_lr=1e-3, warmup_lr=1e-4, warmup_epochs=1)
        batches = pk_batches(ids, cfg, rng)
        for idx in batches:
            assert len(idx) == 8  # p clamps to the two available identities


class TestOptimizerAudit:
    def test_clean_build_passes(self):
        model = tiny_model()
        ok, problems = optimizer_covers_trainables(
            model, build_optimizer(model, TINY_TRAIN))
        assert ok and problems == []

    def test_missing_parameter_detected(self):
        model = tiny_model()
        params = model.trainable_parameters()
        opt = torch.optim.SGD(params[:-1], lr=1e-3)
        ok, problems = optimizer_covers_trainables(model, opt)
        assert not ok
        assert any(p.startswith("missing") for p in problems)

    def test_duplicate_parameter_detected(self):
        model = tiny_model()
        params = model.trainable_parameters()
        with pytest.warns(UserWarning, match="duplicate"):
            opt = torch.optim.SGD(params + [params[0]], lr=1e-3)
        ok, problems = optimizer_covers_trainables(model, opt)
        assert not ok and "duplicate parameter in optimizer" in problems


class TestTrainLoop:
    def test_deterministic_runs(self, tiny, tmp_path):
        _, _, train_set, _ = tiny
        results = []
        for name in ("a", "b"):
            model = tiny_model()
            r = train(model, train_set, None, TINY_TRAIN,
                      checkpoint_path=tmp_path / f"{name}.ckpt")
            results.append(r)
        assert results[0].history == results[1].history
        assert ((tmp_path / "a.ckpt").read_bytes()
                == (tmp_path / "b.ckpt").read_bytes())

    def test_resume_matches_straight_run(self, tiny, tmp_path):
        """Two epochs plus two resumed epochs equal four straight ones."""
        _, _, train_set, _ = tiny
        cfg4 = TrainConfig(epochs=4, batch_size=8, q_per_identity=4,
                           base_lr=5e-3, warmup_lr=5e-4, warmup_epochs=1,
                           seed=3, loss=TINY_LOSS)
        cfg2 = TrainConfig(epochs=2, batch_size=8, q_per_identity=4,
                           base_lr=5e-3, warmup_lr=5e-4, warmup_epochs=1,
                           seed=3, loss=TINY_LOSS)
        straight = train(tiny_model(), train_set, None, cfg4,
                         checkpoint_path=tmp_path / "straight.ckpt")
        train(tiny_model(), train_set, None, cfg2,
              checkpoint_path=tmp_path / "resumed.ckpt")
        resumed = train(tiny_model(), train_set, None, cfg4,
                        checkpoint_path=tmp_path / "resumed.ckpt", resume=True)
        assert straight.history == resumed.history
        assert ((tmp_path / "straight.ckpt").read_bytes()
                == (tmp_path / "resumed.ckpt").read_bytes())

    def test_resume_requires_path(self, tiny):
        _, _, train_set, _ = tiny
        with pytest.raises(ValueError, match="resume"):
            train(tiny_model(), train_set, None, TINY_TRAIN, resume=True)

    def test_history_entries(self, tiny):
        _, _, train_set, holdout = tiny
        r = train(tiny_model(), train_set, holdout, TINY_TRAIN)
        assert [h["epoch"] for h in r.history] == [0, 1, 2]
        for h in r.history:
            assert set(h) == {"epoch", "lr", "loss", "terms", "holdout"}
            assert set(h["terms"]) == {"con", "tri", "sim"}
            assert {row["threshold"] for row in h["holdout"]["per_threshold"]} \
                == set(TINY_TRAIN.thresholds)

    def test_evaluate_model_deterministic(self, tiny):
        _, _, _, holdout = tiny
        model = tiny_model()
        a = evaluate_model(model, holdout)
        b = evaluate_model(model, holdout)
        assert a == b


class TestAblation:
    def test_reuse_skips_training(self, tiny):
        frames, gt, _, _ = tiny
        canned = {"per_threshold": [], "consistency": {}}
        out = run_ablation(
            frames, gt, PipelineConfig(encoder=SMALL_ENCODER, k=2),
            TINY_TRAIN,
            cells=[("con", {}, ("con",)), ("canned", {}, ("con",))],
            reuse={"canned": canned})
        assert out[1]["reused"] and out[1]["report"] is canned
        assert not out[0]["reused"]
        assert out[0]["report"]["per_threshold"]

    def test_config_validation(self):
        with pytest.raises(ValueError, match="warmup"):
            TrainConfig(epochs=5, warmup_epochs=5)
        with pytest.raises(ValueError, match="multiple"):
            TrainConfig(epochs=10, batch_size=10, q_per_identity=4)
        with pytest.raises(ValueError, match="grad_clip"):
            TrainConfig(epochs=10, grad_clip=-1.0)
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig(epochs=500)
