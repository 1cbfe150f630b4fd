"""Training loop for the embedding model on tracking sequences.

Batches are drawn identity-balanced (P identities x Q instances), the
optimizer is SGD with momentum, and the learning rate holds at a warmup
value before decaying along a cosine from the base value. The text tower
never trains; everything else does.

Runs are deterministic: per-epoch sampling and augmentation generators are
derived from (seed, epoch), so a resumed run continues exactly where the
checkpoint stopped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .datamodel import Frame, Observation, crop_and_resize
from .encoder import crops_to_tensor
from .evaluation import DEFAULT_THRESHOLDS, evaluate_embeddings
from .explicit_prompts import MotionAttributes, compute_depth, compute_speed
from .losses import LossConfig, total_loss
from .pipeline import (MultimodalEmbedder, PipelineConfig, load_model,
                       model_arrays, save_model)

MAX_EPOCHS = 100


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    base_lr: float = 2e-5
    warmup_lr: float = 2e-6
    warmup_epochs: int = 5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    q_per_identity: int = 4
    holdout_fraction: float = 0.25
    augment: bool = True
    attr_noise_std: float = 0.0
    grad_clip: float = 1.0  # global norm; 0 disables
    seed: int = 7
    loss: LossConfig = field(default_factory=LossConfig)
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        if not 1 <= self.epochs <= MAX_EPOCHS:
            raise ValueError(f"epochs must lie in 1..{MAX_EPOCHS}")
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup must end before the last epoch")
        if self.batch_size % self.q_per_identity:
            raise ValueError("batch_size must be a multiple of q_per_identity")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in (0, 1)")
        if self.base_lr <= 0 or self.warmup_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be non-negative")


def lr_for_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Constant warmup, then cosine decay from base_lr to zero."""
    if epoch < cfg.warmup_epochs:
        return cfg.warmup_lr
    t = (epoch - cfg.warmup_epochs) / max(cfg.epochs - cfg.warmup_epochs, 1)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class TrainSample:
    obs: Observation
    frame: Frame
    attrs: MotionAttributes


class PromptDataset:
    """Crop + identity + motion attributes per ground-truth observation."""

    def __init__(self, samples: list[TrainSample]):
        if not samples:
            raise ValueError("empty dataset")
        self.samples = samples
        self._base_crops: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> np.ndarray:
        return np.array([s.obs.id for s in self.samples], dtype=np.int64)

    def base_crops(self) -> np.ndarray:
        if self._base_crops is None:
            self._base_crops = np.stack([
                crop_and_resize(s.frame, s.obs) for s in self.samples])
        return self._base_crops

    def crops_for(self, indices: np.ndarray, augment: bool,
                  rng: np.random.Generator | None) -> np.ndarray:
        if not augment:
            return self.base_crops()[indices]
        return np.stack([
            crop_and_resize(self.samples[i].frame, self.samples[i].obs,
                            augment=True, rng=rng) for i in indices])


def build_datasets(frames: list[Frame], gt: dict[int, list[Observation]],
                   holdout_fraction: float = 0.25, attr_noise_std: float = 0.0,
                   seed: int = 7) -> tuple[PromptDataset, PromptDataset]:
    """Split ground truth into train/holdout sets of prompt samples.

    The split cuts each identity's trajectory at a frame boundary, so every
    identity appears on both sides. Attribute noise, when requested,
    perturbs speed and depth of the training samples only.
    """
    frame_by_index = {f.index: f for f in frames}
    by_id: dict[int, list[Observation]] = {}
    for f in sorted(gt):
        for o in gt[f]:
            by_id.setdefault(o.id, []).append(o)

    rng = np.random.default_rng(seed)
    train: list[TrainSample] = []
    holdout: list[TrainSample] = []
    for tid, obs_list in sorted(by_id.items()):
        cut = max(1, int(round(len(obs_list) * (1.0 - holdout_fraction))))
        prev: Observation | None = None
        for i, obs in enumerate(obs_list):
            frame = frame_by_index[obs.frame]
            speed = compute_speed(prev, obs) if prev is not None else 0.0
            depth = compute_depth(frame, obs)
            is_train = i < cut
            if is_train and attr_noise_std > 0.0:
                speed = max(0.0, speed + rng.normal(0.0, attr_noise_std))
                depth = depth + rng.normal(0.0, attr_noise_std)
            sample = TrainSample(obs=obs, frame=frame, attrs=MotionAttributes(
                score=obs.score, speed=speed, depth=depth))
            (train if is_train else holdout).append(sample)
            prev = obs
    return PromptDataset(train), PromptDataset(holdout)


def pk_batches(ids: np.ndarray, cfg: TrainConfig,
               rng: np.random.Generator) -> list[np.ndarray]:
    """Identity-balanced batch index lists covering roughly one epoch."""
    unique = np.unique(ids)
    p = max(1, min(cfg.batch_size // cfg.q_per_identity, len(unique)))
    per_id = {int(t): np.flatnonzero(ids == t) for t in unique}
    n_batches = max(1, math.ceil(len(ids) / (p * cfg.q_per_identity)))

    batches = []
    pool = rng.permutation(unique)
    pos = 0
    for _ in range(n_batches):
        if pos + p > len(pool):
            pool = rng.permutation(unique)
            pos = 0
        chosen = pool[pos:pos + p]
        pos += p
        idx = np.concatenate([
            rng.choice(per_id[int(t)], size=cfg.q_per_identity,
                       replace=len(per_id[int(t)]) < cfg.q_per_identity)
            for t in chosen])
        batches.append(idx)
    return batches


def build_optimizer(model: MultimodalEmbedder, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.trainable_parameters(), lr=cfg.warmup_lr,
                           momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def optimizer_covers_trainables(model: MultimodalEmbedder,
                                opt: torch.optim.Optimizer) -> tuple[bool, list[str]]:
    """Audit: every trainable parameter sits in exactly one optimizer slot."""
    in_opt: list[int] = []
    for group in opt.param_groups:
        in_opt.extend(id(p) for p in group["params"])
    trainable = {id(p): name for name, p in model.named_parameters() if p.requires_grad}
    problems = []
    if len(in_opt) != len(set(in_opt)):
        problems.append("duplicate parameter in optimizer")
    missing = set(trainable) - set(in_opt)
    problems += [f"missing: {trainable[i]}" for i in missing]
    extra = set(in_opt) - set(trainable)
    problems += [f"not trainable but in optimizer: {i}" for i in extra]
    return not problems, problems


def evaluate_model(model: MultimodalEmbedder, dataset: PromptDataset,
                   thresholds=DEFAULT_THRESHOLDS) -> dict:
    """Embed a dataset in one deterministic pass and score it."""
    model.eval()
    crops = crops_to_tensor(dataset.base_crops())
    ids = dataset.ids
    attrs = [s.attrs for s in dataset.samples]
    with torch.no_grad():
        out = model(crops, ids.tolist(), attrs)
    model.train()
    return evaluate_embeddings(out.explicit.numpy(), out.implicit.numpy(),
                               out.visual.numpy(), ids, thresholds=thresholds)


@dataclass
class TrainResult:
    model: MultimodalEmbedder
    history: list[dict]


def _epoch_rng(seed: int, epoch: int, salt: int) -> np.random.Generator:
    return np.random.default_rng((seed * 1_000_003 + epoch) * 31 + salt)


def train(model: MultimodalEmbedder, train_set: PromptDataset,
          holdout: PromptDataset | None, cfg: TrainConfig,
          checkpoint_path=None, resume: bool = False) -> TrainResult:
    """Run (or continue) training; optionally checkpoint at the end.

    With resume=True the checkpoint at checkpoint_path is loaded first and
    training continues from its recorded epoch; history appends.
    """
    history: list[dict] = []
    start_epoch = 0
    opt = build_optimizer(model, cfg)

    if resume:
        if checkpoint_path is None:
            raise ValueError("resume requires a checkpoint path")
        loaded, meta, leftover = load_model(checkpoint_path)
        model.load_state_dict(loaded.state_dict())
        start_epoch = int(meta["epoch_done"])
        history = list(meta.get("history", []))
        named = dict(model.named_parameters())
        for name, param in named.items():
            key = f"opt/{name}"
            if key in leftover and param.requires_grad:
                opt.state[param] = {
                    "momentum_buffer": torch.from_numpy(leftover[key].copy())}

    ok, problems = optimizer_covers_trainables(model, opt)
    if not ok:
        raise RuntimeError(f"optimizer audit failed: {problems}")

    ids = train_set.ids
    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_for_epoch(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr

        batch_rng = _epoch_rng(cfg.seed, epoch, salt=1)
        aug_rng = _epoch_rng(cfg.seed, epoch, salt=2)
        losses = []
        term_sums: dict[str, float] = {}
        for idx in pk_batches(ids, cfg, batch_rng):
            crops = crops_to_tensor(train_set.crops_for(idx, cfg.augment, aug_rng))
            batch_ids = ids[idx]
            attrs = [train_set.samples[i].attrs for i in idx]
            out = model(crops, batch_ids.tolist(), attrs)
            loss, terms = total_loss(out.explicit, out.implicit, out.visual,
                                     torch.from_numpy(batch_ids), cfg.loss)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, ids {batch_ids.tolist()}")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.trainable_parameters(),
                                               cfg.grad_clip)
            opt.step()
            losses.append(float(loss.detach()))
            for k, v in terms.items():
                term_sums[k] = term_sums.get(k, 0.0) + v

        entry = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)),
                 "terms": {k: v / len(losses) for k, v in term_sums.items()}}
        if holdout is not None:
            report = evaluate_model(model, holdout, thresholds=cfg.thresholds)
            entry["holdout"] = {"per_threshold": report["per_threshold"],
                                "consistency": report["consistency"]}
        history.append(entry)

    model.eval()
    if checkpoint_path is not None:
        named = dict(model.named_parameters())
        opt_arrays = {}
        for name, param in named.items():
            state = opt.state.get(param)
            if state and "momentum_buffer" in state and state["momentum_buffer"] is not None:
                opt_arrays[f"opt/{name}"] = state["momentum_buffer"].numpy()
        save_model(checkpoint_path, model,
                   extra_meta={"epoch_done": cfg.epochs, "history": history},
                   extra_arrays=opt_arrays)
    return TrainResult(model=model, history=history)


def run_ablation(frames: list[Frame], gt: dict[int, list[Observation]],
                 pipeline_cfg: PipelineConfig, train_cfg: TrainConfig,
                 cells: list[tuple[str, dict, tuple[str, ...]]],
                 reuse: dict[str, dict] | None = None) -> list[dict]:
    """Train one model per grid cell under a shared seed and report each.

    A cell is (name, pipeline config overrides, loss terms). `reuse` maps
    cell names to already computed reports, letting callers skip cells.
    """
    train_set, holdout = build_datasets(
        frames, gt, holdout_fraction=train_cfg.holdout_fraction,
        attr_noise_std=train_cfg.attr_noise_std, seed=train_cfg.seed)
    results = []
    for name, overrides, terms in cells:
        if reuse and name in reuse:
            results.append({"cell": name, "report": reuse[name], "reused": True})
            continue
        cell_pipeline = replace(pipeline_cfg, **overrides) if overrides else pipeline_cfg
        cell_train = replace(train_cfg, loss=replace(train_cfg.loss, terms=terms))
        torch.manual_seed(cell_train.seed)
        model = MultimodalEmbedder(cell_pipeline)
        train(model, train_set, None, cell_train)
        report = evaluate_model(model, holdout, thresholds=cell_train.thresholds)
        results.append({"cell": name, "report": report, "reused": False})
    return results
