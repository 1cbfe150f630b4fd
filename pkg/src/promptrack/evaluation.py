"""Retrieval-style and tracking-style evaluation.

Embedding quality is scored as binary verification over cosine similarity:
matched pairs are multimodal/visual embeddings of the same instance,
unmatched pairs cross identities (same-identity cross pairs are excluded
from both sides). A similarity above the threshold predicts "same target".
Precision, recall and F1 are reported per threshold and averaged over the
two prompt branches.

Tracking output is scored against ground truth with identity-F1 (optimal
trajectory-level identity matching), MOTA and the identity fragment count,
where a fragment is a change of the matched predicted identity along one
ground-truth trajectory. Box matches require IoU >= 0.5.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .datamodel import Observation
from .association import iou_matrix

IOU_MATCH = 0.5
DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8)


def _normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


def pair_protocol(m: np.ndarray, v: np.ndarray,
                  ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarities of matched and cross-identity unmatched pairs."""
    if m.shape != v.shape or m.ndim != 2:
        raise ValueError("m and v must be equal [N, d]")
    if len(ids) != len(m):
        raise ValueError("ids must be [N]")
    sim = _normalize(m) @ _normalize(v).T
    matched = np.diag(sim).copy()
    cross = ids[:, None] != ids[None, :]
    return matched, sim[cross]


def threshold_metrics(matched: np.ndarray, unmatched: np.ndarray,
                      threshold: float) -> dict[str, float]:
    """Verification counts at one decision threshold.

    Matched pairs above the threshold are true positives, at or below it
    false negatives; unmatched pairs above it are false positives. Empty
    denominators yield zero.
    """
    tp = int((matched > threshold).sum())
    fn = int((matched <= threshold).sum())
    fp = int((unmatched > threshold).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"threshold": threshold, "tp": tp, "fp": fp, "fn": fn,
            "precision": precision, "recall": recall, "f1": f1}


def consistency_metrics(m: np.ndarray, v: np.ndarray) -> dict[str, float]:
    """Squared distance between modality centroids, and the mean squared
    per-pair distance. Operates on the embeddings as given."""
    if m.shape != v.shape or m.ndim != 2:
        raise ValueError("m and v must be equal [N, d]")
    gap = float(np.sum((m.mean(axis=0) - v.mean(axis=0)) ** 2))
    align = float(np.mean(np.sum((m - v) ** 2, axis=1)))
    return {"modality_gap": gap, "alignment": align}


def evaluate_embeddings(m_explicit: np.ndarray, m_implicit: np.ndarray,
                        v: np.ndarray, ids: np.ndarray,
                        thresholds=DEFAULT_THRESHOLDS) -> dict:
    """Full embedding report: per-threshold metrics and consistency, each
    averaged over the explicit and implicit branches."""
    branches = {"explicit": _normalize(m_explicit), "implicit": _normalize(m_implicit)}
    vn = _normalize(v)
    per_branch = {}
    for name, mb in branches.items():
        matched, unmatched = pair_protocol(mb, vn, ids)
        per_branch[name] = {
            "thresholds": [threshold_metrics(matched, unmatched, t) for t in thresholds],
            "consistency": consistency_metrics(mb, vn),
        }
    averaged = []
    for i, t in enumerate(thresholds):
        row = {"threshold": t}
        for key in ("precision", "recall", "f1"):
            row[key] = float(np.mean([
                per_branch[b]["thresholds"][i][key] for b in branches]))
        averaged.append(row)
    consistency = {
        key: float(np.mean([per_branch[b]["consistency"][key] for b in branches]))
        for key in ("modality_gap", "alignment")}
    return {"per_threshold": averaged, "consistency": consistency,
            "branches": per_branch}


# ---------------------------------------------------------------------------
# tracking metrics


def _frame_union(gt: dict[int, list[Observation]],
                 result: dict[int, list[Observation]]) -> list[int]:
    extra = set(result) - set(gt)
    if extra:
        raise ValueError(f"result contains frames missing from ground truth: "
                         f"{sorted(extra)[:5]}")
    return sorted(gt)


def mot_metrics(result: dict[int, list[Observation]],
                gt: dict[int, list[Observation]]) -> dict[str, float]:
    """IDF1, MOTA and identity fragments of a tracking result.

    MOTA = 1 - (FN + FP + fragments) / total ground-truth boxes, with the
    fragment count serving as the identity-switch term: it increments
    whenever the predicted identity matched to a ground-truth trajectory
    differs from the one it matched last.
    """
    frames = _frame_union(gt, result)

    fn = fp = fragments = 0
    total_gt = sum(len(gt[f]) for f in frames)
    last_pred: dict[int, int] = {}
    pair_overlap: dict[tuple[int, int], int] = {}
    total_pred = 0

    for f in frames:
        gt_rows = gt[f]
        pred_rows = result.get(f, [])
        total_pred += len(pred_rows)
        if gt_rows and pred_rows:
            overlap = iou_matrix(np.stack([o.box for o in gt_rows]),
                                 np.stack([o.box for o in pred_rows]))
        else:
            overlap = np.zeros((len(gt_rows), len(pred_rows)))

        # identity-overlap tallies feeding IDF1
        for i, g in enumerate(gt_rows):
            for j, p in enumerate(pred_rows):
                if overlap[i, j] >= IOU_MATCH:
                    pair_overlap[(g.id, p.id)] = pair_overlap.get((g.id, p.id), 0) + 1

        # CLEAR matching: sticky previous assignment, then optimal fill-in
        taken_g: set[int] = set()
        taken_p: set[int] = set()
        assigned: list[tuple[int, int]] = []
        pred_by_id = {p.id: j for j, p in enumerate(pred_rows)}
        for i, g in enumerate(gt_rows):
            j = pred_by_id.get(last_pred.get(g.id, -1))
            if j is not None and j not in taken_p and overlap[i, j] >= IOU_MATCH:
                assigned.append((i, j))
                taken_g.add(i)
                taken_p.add(j)
        rest_g = [i for i in range(len(gt_rows)) if i not in taken_g]
        rest_p = [j for j in range(len(pred_rows)) if j not in taken_p]
        if rest_g and rest_p:
            cost = 1.0 - overlap[np.ix_(rest_g, rest_p)]
            cost[cost > 1.0 - IOU_MATCH] = 1e9
            rows, cols = linear_sum_assignment(cost)
            for r, c in zip(rows, cols):
                if cost[r, c] < 1e9:
                    assigned.append((rest_g[r], rest_p[c]))

        fn += len(gt_rows) - len(assigned)
        fp += len(pred_rows) - len(assigned)
        for i, j in assigned:
            gid, pid = gt_rows[i].id, pred_rows[j].id
            if gid in last_pred and last_pred[gid] != pid:
                fragments += 1
            last_pred[gid] = pid

    # IDF1 through optimal identity-level matching
    gt_ids = sorted({o.id for f in frames for o in gt[f]})
    pred_ids = sorted({o.id for rows in result.values() for o in rows})
    idtp = 0
    if gt_ids and pred_ids:
        table = np.zeros((len(gt_ids), len(pred_ids)))
        for (gid, pid), n in pair_overlap.items():
            table[gt_ids.index(gid), pred_ids.index(pid)] = n
        rows, cols = linear_sum_assignment(-table)
        idtp = int(table[rows, cols].sum())
    denom = total_gt + total_pred
    idf1 = 2.0 * idtp / denom if denom else 1.0
    mota = 1.0 - (fn + fp + fragments) / total_gt if total_gt else 1.0

    return {"idf1": idf1, "mota": mota, "fragments": float(fragments),
            "fn": float(fn), "fp": float(fp),
            "gt_total": float(total_gt), "pred_total": float(total_pred)}


def aggregate_equal_weight(reports: list[dict]) -> dict[str, float]:
    """Unweighted mean of every numeric key shared by all reports."""
    if not reports:
        raise ValueError("nothing to aggregate")
    keys = set(reports[0])
    for r in reports[1:]:
        keys &= set(r)
    return {k: float(np.mean([r[k] for r in reports]))
            for k in sorted(keys) if isinstance(reports[0][k], (int, float))}


def render_threshold_table(rows: list[dict], title: str = "") -> str:
    """Plain-text table of per-threshold precision/recall/F1."""
    out = []
    if title:
        out.append(title)
    out.append(f"{'thr':>5} {'precision':>10} {'recall':>10} {'f1':>10}")
    for r in rows:
        out.append(f"{r['threshold']:>5.2f} {r['precision']:>10.4f} "
                   f"{r['recall']:>10.4f} {r['f1']:>10.4f}")
    return "\n".join(out) + "\n"
