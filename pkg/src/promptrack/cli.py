"""Command line entry point.

Subcommands: gen-synth | train | ablate | track | eval. All of them read
one JSON config (see config.DEFAULTS), overridable with repeated
--set key=value flags and EPIP_* environment variables. Exit codes:
0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .association import (ModelEmbeddingProvider, OracleEmbeddingProvider,
                          MODES, track_sequence, write_event_log)
from .config import (ConfigError, assoc_config, config_hash, load_config,
                     pipeline_config, synth_spec, train_config)
from .datamodel import (generate_synthetic_sequence, load_sequence,
                        parse_mot_file, save_sequence, write_mot_file)
from .evaluation import (aggregate_equal_weight, evaluate_embeddings,
                         mot_metrics, render_threshold_table)
from .pipeline import MultimodalEmbedder, load_model
from .training import build_datasets, evaluate_model, run_ablation, train

ABLATION_AXES = ("loss", "fusion", "interaction", "inject")


def _manifest(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg["seed"],
            "version": __version__}


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _sequence_dirs(data_root: str) -> list[Path]:
    root = Path(data_root)
    if (root / "gt" / "gt.txt").exists():
        return [root]
    found = sorted(p for p in root.glob("*") if (p / "gt" / "gt.txt").exists())
    if not found:
        raise ConfigError(f"paths.data_root has no sequences: {root}")
    return found


def _single_sequence(data_root: str) -> Path:
    seqs = _sequence_dirs(data_root)
    if len(seqs) > 1:
        raise ConfigError(
            f"paths.data_root must point at one sequence, found {len(seqs)}")
    return seqs[0]


def _load_embedder(cfg: dict) -> MultimodalEmbedder:
    path = cfg["paths"]["checkpoint"]
    if not path:
        raise ConfigError("paths.checkpoint required when assoc.embeddings=model")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    model, _, _ = load_model(path)
    return model


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise RuntimeError(f"{path} exists; pass --force to overwrite")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(cfg: dict, args: argparse.Namespace) -> int:
    spec = synth_spec(cfg)
    out = Path(cfg["paths"]["out_dir"]) / spec.name
    _refuse_overwrite(out / "gt" / "gt.txt", args.force)
    frames, gt = generate_synthetic_sequence(spec)
    save_sequence(frames, gt, out)
    _write_json(out / "sequence.json", {
        **_manifest(cfg), "sequence": spec.name, "motion": spec.motion,
        "n_frames": spec.n_frames, "n_targets": spec.n_targets})
    print(f"[gen-synth] {out}: {spec.n_frames} frames, "
          f"{spec.n_targets} targets ({spec.motion})")
    return 0


def cmd_train(cfg: dict, args: argparse.Namespace) -> int:
    seq = _single_sequence(cfg["paths"]["data_root"])
    tcfg = train_config(cfg)
    out_dir = Path(cfg["paths"]["out_dir"])
    ckpt = Path(cfg["paths"]["checkpoint"] or out_dir / "model.ckpt")
    if not args.resume:
        _refuse_overwrite(ckpt, args.force)

    frames, gt = load_sequence(seq, with_images=True)
    train_set, holdout = build_datasets(
        frames, gt, holdout_fraction=tcfg.holdout_fraction,
        attr_noise_std=tcfg.attr_noise_std, seed=tcfg.seed)
    torch.manual_seed(tcfg.seed)
    model = MultimodalEmbedder(pipeline_config(cfg))
    result = train(model, train_set, holdout, tcfg,
                   checkpoint_path=ckpt, resume=args.resume)

    report = evaluate_model(result.model, holdout, thresholds=tcfg.thresholds)
    _write_json(out_dir / "train_report.json", {
        **_manifest(cfg), "sequence": seq.name, "checkpoint": str(ckpt),
        "epochs": tcfg.epochs, "history": result.history, "holdout": report})
    print(render_threshold_table(report["per_threshold"],
                                 title=f"holdout ({seq.name})"))
    print(f"[train] checkpoint: {ckpt}")
    return 0


def _ablation_cells(cfg: dict, axis: str) -> list[tuple[str, dict, tuple[str, ...]]]:
    full = tuple(cfg["loss"]["terms"])
    if axis == "loss":
        return [("con", {}, ("con",)), ("con+tri", {}, ("con", "tri")),
                ("con+sim", {}, ("con", "sim")),
                ("con+tri+sim", {}, ("con", "tri", "sim"))]
    if axis == "fusion":
        return [(s, {"fusion": s}, full)
                for s in ("weighted", "concat", "self_attention")]
    if axis == "interaction":
        return [(s, {"interaction": s}, full)
                for s in ("cross_attention", "concat", "add")]
    enc = pipeline_config(cfg).encoder
    cells = []
    for layers in ((enc.inject_layers[0],), (enc.inject_layers[-1],),
                   tuple(enc.inject_layers)):
        name = "inject-" + "+".join(str(x) for x in layers)
        cells.append((name, {"encoder": replace(enc, inject_layers=layers)}, full))
    return cells


def cmd_ablate(cfg: dict, args: argparse.Namespace) -> int:
    seq = _single_sequence(cfg["paths"]["data_root"])
    frames, gt = load_sequence(seq, with_images=True)
    results = run_ablation(frames, gt, pipeline_config(cfg), train_config(cfg),
                           _ablation_cells(cfg, args.axis))
    out = Path(cfg["paths"]["out_dir"]) / f"ablation_{args.axis}.json"
    _write_json(out, {**_manifest(cfg), "axis": args.axis, "cells": results})
    for row in results:
        print(render_threshold_table(row["report"]["per_threshold"],
                                     title=row["cell"]))
    print(f"[ablate] report: {out}")
    return 0


def _track_one(seq_dir: str, cfg: dict, mode: str, force: bool) -> dict:
    seq = Path(seq_dir)
    need_model = mode != "baseline" and cfg["assoc"]["embeddings"] == "model"
    frames, gt = load_sequence(seq, with_images=need_model)
    provider = None
    if mode != "baseline":
        if need_model:
            provider = ModelEmbeddingProvider(_load_embedder(cfg))
        else:
            provider = OracleEmbeddingProvider(gt)

    rows, events = track_sequence(frames, config=assoc_config(cfg),
                                  mode=mode, provider=provider)
    out = Path(cfg["paths"]["out_dir"]) / seq.name
    result_path = out / f"track_{mode}.txt"
    _refuse_overwrite(result_path, force)
    out.mkdir(parents=True, exist_ok=True)
    write_mot_file(result_path, rows)
    write_event_log(out / f"events_{mode}.jsonl", events)
    _write_json(out / f"track_{mode}.json", {
        **_manifest(cfg), "sequence": seq.name, "mode": mode,
        "n_frames": len(frames), "n_events": len(events)})
    return {"sequence": seq.name, "result": str(result_path),
            "n_events": len(events)}


def cmd_track(cfg: dict, args: argparse.Namespace) -> int:
    mode = args.mode or cfg["assoc"]["mode"]
    if mode not in MODES:
        raise ConfigError(f"assoc.mode must be one of {MODES}, got {mode!r}")
    if mode != "baseline" and cfg["assoc"]["embeddings"] == "model":
        _load_embedder(cfg)  # fail fast before spawning workers
    seqs = _sequence_dirs(cfg["paths"]["data_root"])
    jobs = args.jobs or int(cfg["jobs"])

    if jobs > 1 and len(seqs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_track_one, str(s), cfg, mode, args.force)
                       for s in seqs]
            summaries = [f.result() for f in futures]
    else:
        summaries = [_track_one(str(s), cfg, mode, args.force) for s in seqs]
    for s in summaries:
        print(f"[track:{mode}] {s['sequence']}: {s['result']} "
              f"({s['n_events']} events)")
    return 0


def _mean_threshold_rows(rows_per_seq: list[list[dict]]) -> list[dict]:
    out = []
    for i in range(len(rows_per_seq[0])):
        keys = rows_per_seq[0][i].keys()
        out.append({k: float(np.mean([rows[i][k] for rows in rows_per_seq]))
                    for k in keys})
    return out


def _embedding_report(cfg: dict, seq: Path) -> dict:
    """Score prompt/visual embedding quality for one sequence's ground truth."""
    thresholds = tuple(float(x) for x in cfg["eval"]["thresholds"])
    if cfg["assoc"]["embeddings"] == "model":
        model = _load_embedder(cfg)
        frames, gt = load_sequence(seq, with_images=True)
        tcfg = train_config(cfg)
        _, holdout = build_datasets(frames, gt,
                                    holdout_fraction=tcfg.holdout_fraction,
                                    seed=tcfg.seed)
        return evaluate_model(model, holdout, thresholds=thresholds)
    frames, gt = load_sequence(seq, with_images=False)
    provider = OracleEmbeddingProvider(gt)
    vecs, ids = [], []
    for frame in frames:
        rows = gt.get(frame.index, [])
        emb = provider.detection_embeddings(frame, rows)
        vecs.extend(emb)
        ids.extend(o.id for o in rows)
    m = np.stack(vecs)
    return evaluate_embeddings(m, m, m, np.asarray(ids), thresholds=thresholds)


def cmd_eval(cfg: dict, args: argparse.Namespace) -> int:
    mode = args.mode or cfg["assoc"]["mode"]
    if mode not in MODES:
        raise ConfigError(f"assoc.mode must be one of {MODES}, got {mode!r}")
    seqs = _sequence_dirs(cfg["paths"]["data_root"])
    out_dir = Path(cfg["paths"]["out_dir"])

    per_sequence: dict[str, dict] = {}
    for seq in seqs:
        result_path = out_dir / seq.name / f"track_{mode}.txt"
        if not result_path.exists():
            raise ConfigError(f"no tracking result at {result_path}; "
                              f"run `promptrack track` first")
        gt = parse_mot_file(seq / "gt" / "gt.txt")
        result = parse_mot_file(result_path)
        embed = _embedding_report(cfg, seq)
        per_sequence[seq.name] = {"mot": mot_metrics(result, gt),
                                  "per_threshold": embed["per_threshold"],
                                  "consistency": embed["consistency"]}

    names = sorted(per_sequence)
    aggregate = {
        "mot": aggregate_equal_weight([per_sequence[n]["mot"] for n in names]),
        "per_threshold": _mean_threshold_rows(
            [per_sequence[n]["per_threshold"] for n in names]),
        "consistency": aggregate_equal_weight(
            [per_sequence[n]["consistency"] for n in names]),
    }
    report = {**_manifest(cfg), "mode": mode,
              "per_sequence": per_sequence, "aggregate": aggregate}
    _write_json(out_dir / f"eval_{mode}.json", report)

    print(render_threshold_table(aggregate["per_threshold"],
                                 title=f"embeddings ({mode}, {len(names)} seq)"))
    mot = aggregate["mot"]
    print(f"idf1={mot['idf1']:.4f} mota={mot['mota']:.4f} "
          f"fragments={mot['fragments']:.1f}")
    print(f"[eval] report: {out_dir / f'eval_{mode}.json'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptrack",
        description="prompt-conditioned multi-object tracking toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="path to a JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")

    common(sub.add_parser("gen-synth", help="write a synthetic sequence"))
    p_train = sub.add_parser("train", help="fit the embedder on one sequence")
    common(p_train)
    p_train.add_argument("--resume", action="store_true",
                         help="continue from paths.checkpoint")
    p_ablate = sub.add_parser("ablate", help="train a grid of variants")
    common(p_ablate)
    p_ablate.add_argument("--axis", choices=ABLATION_AXES, default="loss")
    p_track = sub.add_parser("track", help="run association over sequences")
    common(p_track)
    p_track.add_argument("--mode", choices=MODES, default=None)
    p_track.add_argument("--jobs", type=int, default=None,
                         help="sequences to process in parallel")
    p_eval = sub.add_parser("eval", help="score tracking results")
    common(p_eval)
    p_eval.add_argument("--mode", choices=MODES, default=None)
    return parser


_HANDLERS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "track": cmd_track,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if getattr(args, "jobs", None) is not None and args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        return _HANDLERS[args.command](cfg, args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - boundary of the process
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
