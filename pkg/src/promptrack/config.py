"""One JSON config tree for every CLI entry point.

Precedence: built-in defaults < config file < EPIP_* environment variables
< --set key=value flags. Unknown keys anywhere are rejected by name, and a
short hash of the resolved config is stamped into every output so results
can be traced back to their exact settings.

Environment variables address leaves by their dotted path with dots turned
into underscores, e.g. EPIP_LOSS_TAU=0.05 for loss.tau.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from .association import AssociationConfig
from .datamodel import SynthSpec
from .encoder import EncoderConfig
from .losses import LossConfig
from .pipeline import PipelineConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 2 in the CLI."""


DEFAULTS: dict = {
    "seed": 7,
    "jobs": 1,
    "paths": {
        "data_root": "data",
        "out_dir": "runs",
        "checkpoint": "",
    },
    "encoder": {
        "d_joint": 16,
        "d_vis_cls": 24,
        "n_text_layers": 8,
        "n_vis_layers": 2,
        "inject_layers": [5, 8],
        "vocab_size": 4096,
        "text_len": 24,
        "n_heads": 4,
        "soft_prompt_len": 4,
    },
    "fusion": {"strategy": "weighted"},
    "interaction": {"strategy": "cross_attention"},
    "modulator": {"corrector": True},
    "augmentor": {"k": 5, "alpha": 0.2},
    "loss": {
        "tau": 0.07,
        "margin": 0.3,
        "eps": 1e-8,
        "terms": ["con", "tri", "sim"],
    },
    "train": {
        "epochs": 40,
        "batch_size": 16,
        "base_lr": 2e-5,
        "warmup_lr": 2e-6,
        "warmup_epochs": 5,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "q_per_identity": 4,
        "holdout_fraction": 0.25,
        "augment": True,
        "attr_noise_std": 0.0,
        "grad_clip": 1.0,
    },
    "assoc": {
        "mode": "baseline",
        "embeddings": "oracle",
        "high_score_thr": 0.6,
        "low_score_thr": 0.1,
        "iou_gate": 0.3,
        "tr_gate": 0.4,
        "fr_weight": 0.5,
        "max_lost_frames": 30,
        "n_init": 2,
        "ema_momentum": 0.9,
    },
    "synth": {
        "name": "synth-01",
        "n_targets": 5,
        "n_frames": 100,
        "width": 320,
        "height": 240,
        "motion": "linear",
        "box_width": 36.0,
        "box_height": 60.0,
        "speed": 4.0,
        "det_jitter": 0.0,
        "occlusion_target": 0,
        "occlusion_start": 40,
        "occlusion_end": 60,
    },
    "eval": {"thresholds": [0.5, 0.6, 0.7, 0.8]},
}


def _merge(base: dict, user: dict, prefix: str = "") -> None:
    for key, value in user.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        current = base[key]
        if isinstance(current, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be an object")
            _merge(current, value, prefix=f"{path}.")
            continue
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"config key {path} must be a boolean")
        elif isinstance(current, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key {path} must be a number")
        elif isinstance(current, str):
            if not isinstance(value, str):
                raise ConfigError(f"config key {path} must be a string")
        elif isinstance(current, list):
            if not isinstance(value, list):
                raise ConfigError(f"config key {path} must be a list")
        base[key] = value


def _leaf_paths(tree: dict, prefix: str = "") -> list[str]:
    out = []
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            out.extend(_leaf_paths(value, prefix=f"{path}."))
        else:
            out.append(path)
    return out


def _set_path(tree: dict, path: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # unquoted strings are fine on the command line
    node: dict = {}
    cursor = node
    parts = path.split(".")
    for part in parts[:-1]:
        cursor[part] = {}
        cursor = cursor[part]
    cursor[parts[-1]] = value
    _merge(tree, node)


def load_config(config_path=None, overrides: list[str] | None = None,
                env: dict | None = None) -> dict:
    """Resolve the effective config from all sources, validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config root must be an object")
        _merge(cfg, user)

    env = os.environ if env is None else env
    env_map = {f"EPIP_{p.replace('.', '_').upper()}": p for p in _leaf_paths(DEFAULTS)}
    for var, path in sorted(env_map.items()):
        if var in env:
            _set_path(cfg, path, env[var])

    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        _set_path(cfg, key.strip(), raw)
    return cfg


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# typed views


def encoder_config(cfg: dict) -> EncoderConfig:
    e = cfg["encoder"]
    try:
        return EncoderConfig(
            d_joint=int(e["d_joint"]), d_vis_cls=int(e["d_vis_cls"]),
            n_text_layers=int(e["n_text_layers"]), n_vis_layers=int(e["n_vis_layers"]),
            inject_layers=tuple(int(x) for x in e["inject_layers"]),
            vocab_size=int(e["vocab_size"]), text_len=int(e["text_len"]),
            n_heads=int(e["n_heads"]), soft_prompt_len=int(e["soft_prompt_len"]))
    except ValueError as err:
        raise ConfigError(f"encoder: {err}") from None


def pipeline_config(cfg: dict) -> PipelineConfig:
    try:
        return PipelineConfig(
            encoder=encoder_config(cfg),
            fusion=cfg["fusion"]["strategy"],
            interaction=cfg["interaction"]["strategy"],
            use_corrector=bool(cfg["modulator"]["corrector"]),
            k=int(cfg["augmentor"]["k"]), alpha=float(cfg["augmentor"]["alpha"]))
    except ValueError as err:
        raise ConfigError(str(err)) from None


def loss_config(cfg: dict) -> LossConfig:
    l = cfg["loss"]
    try:
        return LossConfig(tau=float(l["tau"]), margin=float(l["margin"]),
                          eps=float(l["eps"]), terms=tuple(l["terms"]))
    except ValueError as err:
        raise ConfigError(f"loss: {err}") from None


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(
            epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
            base_lr=float(t["base_lr"]), warmup_lr=float(t["warmup_lr"]),
            warmup_epochs=int(t["warmup_epochs"]), momentum=float(t["momentum"]),
            weight_decay=float(t["weight_decay"]),
            q_per_identity=int(t["q_per_identity"]),
            holdout_fraction=float(t["holdout_fraction"]),
            augment=bool(t["augment"]), attr_noise_std=float(t["attr_noise_std"]),
            grad_clip=float(t["grad_clip"]),
            seed=int(cfg["seed"]), loss=loss_config(cfg),
            thresholds=tuple(float(x) for x in cfg["eval"]["thresholds"]))
    except ValueError as err:
        raise ConfigError(f"train: {err}") from None


def assoc_config(cfg: dict) -> AssociationConfig:
    a = cfg["assoc"]
    try:
        return AssociationConfig(
            high_score_thr=float(a["high_score_thr"]),
            low_score_thr=float(a["low_score_thr"]),
            iou_gate=float(a["iou_gate"]), tr_gate=float(a["tr_gate"]),
            fr_weight=float(a["fr_weight"]),
            max_lost_frames=int(a["max_lost_frames"]), n_init=int(a["n_init"]),
            ema_momentum=float(a["ema_momentum"]))
    except ValueError as err:
        raise ConfigError(f"assoc: {err}") from None


def synth_spec(cfg: dict) -> SynthSpec:
    s = cfg["synth"]
    try:
        return SynthSpec(
            n_targets=int(s["n_targets"]), n_frames=int(s["n_frames"]),
            width=int(s["width"]), height=int(s["height"]), motion=s["motion"],
            seed=int(cfg["seed"]), box_width=float(s["box_width"]),
            box_height=float(s["box_height"]), speed=float(s["speed"]),
            det_jitter=float(s["det_jitter"]),
            occlusion_target=int(s["occlusion_target"]),
            occlusion_start=int(s["occlusion_start"]),
            occlusion_end=int(s["occlusion_end"]), name=s["name"])
    except ValueError as err:
        raise ConfigError(f"synth: {err}") from None
