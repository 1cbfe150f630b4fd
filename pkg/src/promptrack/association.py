"""Tracking-by-detection association with optional embedding stages.

The per-frame cascade, detections split by score:

    stage 1  confirmed tracks  x high-score detections   IoU cost
    stage 2  leftover confirmed x low-score detections   IoU cost
             tentative tracks   x leftover high ones     IoU cost
    stage 3  every still-unmatched track, lost included,
             x leftover detections                       embedding cost

Stage 3 runs only with track reassociation (mode "tr"/"trfr") enabled and
recovers targets whose boxes drifted away while occluded. Fusion refinement
(mode "fr"/"trfr") blends the embedding cost into stage 1 instead of pure
IoU. Embedding cost between a track and a detection averages the cosine
distances of both prompt branches against the detection's visual embedding,
so it lives in [0, 2] and is compared pre-normalized to [0, 1].

Leftover high-score detections spawn tentative tracks; tracks spawned in the
very first frame count as confirmed immediately.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .datamodel import Frame, Observation, Track, TrackState, crop_and_resize
from .encoder import crops_to_tensor
from .explicit_prompts import MotionAttributes, compute_depth, compute_speed

INF = float("inf")
MODES = ("baseline", "tr", "fr", "trfr")


@dataclass(frozen=True)
class AssociationConfig:
    high_score_thr: float = 0.6
    low_score_thr: float = 0.1
    iou_gate: float = 0.3
    tr_gate: float = 0.4       # embedding-cost ceiling for reassociation
    fr_weight: float = 0.5     # embedding share of the blended stage-1 cost
    max_lost_frames: int = 30
    n_init: int = 2
    ema_momentum: float = 0.9

    def __post_init__(self):
        for name in ("high_score_thr", "low_score_thr", "iou_gate",
                     "fr_weight", "ema_momentum"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.low_score_thr > self.high_score_thr:
            raise ValueError("low_score_thr must not exceed high_score_thr")
        if not 0.0 <= self.tr_gate <= 2.0:
            raise ValueError("tr_gate must lie in [0, 2]")
        if self.max_lost_frames < 1 or self.n_init < 1:
            raise ValueError("max_lost_frames and n_init must be >= 1")


class KalmanFilter:
    """Constant-velocity filter over (cx, cy, aspect, height).

    Noise scales with the box height, the usual pedestrian heuristic.
    """

    def __init__(self):
        ndim, dt = 4, 1.0
        self._motion = np.eye(2 * ndim)
        for i in range(ndim):
            self._motion[i, ndim + i] = dt
        self._project = np.eye(ndim, 2 * ndim)
        self._std_pos = 1.0 / 20
        self._std_vel = 1.0 / 160

    def initiate(self, xyah: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean = np.zeros(8)
        mean[:4] = xyah
        h = xyah[3]
        std = np.array([
            2 * self._std_pos * h, 2 * self._std_pos * h, 1e-2, 2 * self._std_pos * h,
            10 * self._std_vel * h, 10 * self._std_vel * h, 1e-5, 10 * self._std_vel * h])
        return mean, np.diag(std ** 2)

    def predict(self, mean: np.ndarray, cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = mean[3]
        std = np.array([
            self._std_pos * h, self._std_pos * h, 1e-2, self._std_pos * h,
            self._std_vel * h, self._std_vel * h, 1e-5, self._std_vel * h])
        noise = np.diag(std ** 2)
        mean = self._motion @ mean
        cov = self._motion @ cov @ self._motion.T + noise
        return mean, (cov + cov.T) / 2.0

    def update(self, mean: np.ndarray, cov: np.ndarray,
               xyah: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = mean[3]
        std = np.array([self._std_pos * h, self._std_pos * h, 1e-1, self._std_pos * h])
        meas_noise = np.diag(std ** 2)
        projected_mean = self._project @ mean
        projected_cov = self._project @ cov @ self._project.T + meas_noise
        gain = np.linalg.solve(projected_cov.T, (cov @ self._project.T).T).T
        mean = mean + gain @ (xyah - projected_mean)
        cov = cov - gain @ projected_cov @ gain.T
        mean[3] = max(mean[3], 1.0)   # heights stay positive
        mean[2] = max(mean[2], 1e-3)
        return mean, (cov + cov.T) / 2.0


def xyah_to_box(xyah: np.ndarray) -> np.ndarray:
    cx, cy, a, h = xyah[:4]
    w = a * h
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def iou(a: np.ndarray, b: np.ndarray) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / union, 0.0)


def hungarian(cost: np.ndarray) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Min-cost assignment; +inf entries are forbidden pairings.

    Returns (pairs, unmatched_rows, unmatched_cols).
    """
    n, m = cost.shape
    if n == 0 or m == 0:
        return [], list(range(n)), list(range(m))
    finite = np.isfinite(cost)
    filled = np.where(finite, cost, 1e9)
    rows, cols = linear_sum_assignment(filled)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if finite[r, c]]
    matched_r = {r for r, _ in pairs}
    matched_c = {c for _, c in pairs}
    return (pairs,
            [i for i in range(n) if i not in matched_r],
            [j for j in range(m) if j not in matched_c])


def _cosine(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    an = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), eps)
    bn = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), eps)
    return an @ bn.T


def multimodal_cost(track_explicit: np.ndarray, track_implicit: np.ndarray,
                    det_visual: np.ndarray) -> np.ndarray:
    """Mean cosine distance of both prompt branches to detection embeddings.

    Output lies in [0, 2]: 0 for perfectly aligned branches, 2 for opposed.
    """
    if len(track_explicit) == 0 or len(det_visual) == 0:
        return np.zeros((len(track_explicit), len(det_visual)))
    d_ev = 1.0 - _cosine(track_explicit, det_visual)
    d_iv = 1.0 - _cosine(track_implicit, det_visual)
    return np.clip((d_ev + d_iv) / 2.0, 0.0, 2.0)


class TrackedTarget:
    """Runtime wrapper: trajectory plus filter state plus smoothed embeddings."""

    def __init__(self, track_id: int, det: Observation, kf: KalmanFilter,
                 confirmed: bool = False):
        obs = dataclasses.replace(det, id=track_id)
        state = TrackState.CONFIRMED if confirmed else TrackState.TENTATIVE
        self.track = Track(id=track_id, history=[obs], state=state)
        self.track.kalman_mean, self.track.kalman_cov = kf.initiate(det.to_xyah())
        self.emb_explicit: np.ndarray | None = None
        self.emb_implicit: np.ndarray | None = None
        self.hits = 1
        self.lost_frames = 0

    @property
    def id(self) -> int:
        return self.track.id

    @property
    def state(self) -> TrackState:
        return self.track.state

    @property
    def predicted_box(self) -> np.ndarray:
        return xyah_to_box(self.track.kalman_mean)

    def predict(self, kf: KalmanFilter) -> None:
        self.track.kalman_mean, self.track.kalman_cov = kf.predict(
            self.track.kalman_mean, self.track.kalman_cov)

    def update(self, kf: KalmanFilter, det: Observation, n_init: int) -> Observation:
        self.track.kalman_mean, self.track.kalman_cov = kf.update(
            self.track.kalman_mean, self.track.kalman_cov, det.to_xyah())
        obs = dataclasses.replace(det, id=self.id)
        self.track.add(obs)
        self.hits += 1
        self.lost_frames = 0
        if self.track.state is TrackState.LOST or self.hits >= n_init:
            self.track.state = TrackState.CONFIRMED
        return obs

    def merge_embeddings(self, explicit: np.ndarray, implicit: np.ndarray,
                         momentum: float) -> None:
        def ema(old, new):
            new = new / max(np.linalg.norm(new), 1e-12)
            if old is None:
                return new
            mixed = momentum * old + (1.0 - momentum) * new
            return mixed / max(np.linalg.norm(mixed), 1e-12)

        self.emb_explicit = ema(self.emb_explicit, np.asarray(explicit, dtype=np.float64))
        self.emb_implicit = ema(self.emb_implicit, np.asarray(implicit, dtype=np.float64))


class OracleEmbeddingProvider:
    """Ground-truth identities as one-hot embeddings, for plumbing tests.

    A detection inherits the identity of the ground-truth box it overlaps
    most in its frame; a track reuses the embedding of its matched detection.
    """

    def __init__(self, gt: dict[int, list[Observation]]):
        ids = sorted({o.id for rows in gt.values() for o in rows})
        if not ids:
            raise ValueError("empty ground truth")
        self._gt = gt
        self._index = {tid: i for i, tid in enumerate(ids)}
        self.dim = len(ids)

    def _one_hot(self, det: Observation, frame_index: int) -> np.ndarray:
        vec = np.zeros(self.dim)
        rows = self._gt.get(frame_index, [])
        if rows:
            overlaps = [iou(det.box, o.box) for o in rows]
            best = int(np.argmax(overlaps))
            if overlaps[best] > 0.0:
                vec[self._index[rows[best].id]] = 1.0
        return vec

    def detection_embeddings(self, frame: Frame, dets: list[Observation]) -> np.ndarray:
        if not dets:
            return np.zeros((0, self.dim))
        return np.stack([self._one_hot(d, frame.index) for d in dets])

    def track_embeddings(self, target: TrackedTarget, det: Observation,
                         frame: Frame) -> tuple[np.ndarray, np.ndarray]:
        vec = self._one_hot(det, frame.index)
        return vec, vec


class ModelEmbeddingProvider:
    """Runs the trained embedder on crops and track prompts."""

    def __init__(self, model):
        self.model = model
        self.model.eval()

    def detection_embeddings(self, frame: Frame, dets: list[Observation]) -> np.ndarray:
        if not dets:
            d = self.model.config.encoder.d_joint
            return np.zeros((0, d))
        crops = np.stack([crop_and_resize(frame, d) for d in dets])
        with torch.no_grad():
            emb = self.model.detection_embeddings(crops_to_tensor(crops))
        return emb.numpy().astype(np.float64)

    def track_embeddings(self, target: TrackedTarget, det: Observation,
                         frame: Frame) -> tuple[np.ndarray, np.ndarray]:
        history = target.track.history
        if len(history) >= 2:
            speed = compute_speed(history[-2], history[-1])
        else:
            speed = 0.0
        attrs = MotionAttributes(score=det.score, speed=speed,
                                 depth=compute_depth(frame, det))
        crop = crop_and_resize(frame, det)[None]
        with torch.no_grad():
            out = self.model(crops_to_tensor(crop), [target.id], [attrs])
        return (out.explicit[0].numpy().astype(np.float64),
                out.implicit[0].numpy().astype(np.float64))


class Tracker:
    """Stateful per-frame association engine."""

    def __init__(self, config: AssociationConfig = AssociationConfig(),
                 mode: str = "baseline", provider=None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if mode != "baseline" and provider is None:
            raise ValueError(f"mode {mode!r} needs an embedding provider")
        self.config = config
        self.mode = mode
        self.provider = provider
        self.kf = KalmanFilter()
        self.targets: list[TrackedTarget] = []
        self._next_id = 1
        self._first_frame: int | None = None

    @property
    def use_fr(self) -> bool:
        return self.mode in ("fr", "trfr")

    @property
    def use_tr(self) -> bool:
        return self.mode in ("tr", "trfr")

    def _iou_cost(self, targets: list[TrackedTarget],
                  dets: list[Observation]) -> np.ndarray:
        if not targets or not dets:
            return np.zeros((len(targets), len(dets)))
        boxes_t = np.stack([t.predicted_box for t in targets])
        boxes_d = np.stack([d.box for d in dets])
        overlap = iou_matrix(boxes_t, boxes_d)
        cost = 1.0 - overlap
        cost[overlap < self.config.iou_gate] = INF
        return cost

    def _embedding_rows(self, targets: list[TrackedTarget]) -> tuple[np.ndarray, np.ndarray]:
        dim = len(self._det_emb[0]) if len(self._det_emb) else 1
        ev = np.zeros((len(targets), dim))
        iv = np.zeros((len(targets), dim))
        for i, t in enumerate(targets):
            if t.emb_explicit is not None:
                ev[i] = t.emb_explicit
                iv[i] = t.emb_implicit
        return ev, iv

    def step(self, frame: Frame) -> tuple[list[dict], list[Observation]]:
        """Advance one frame. Returns (events, confirmed output boxes)."""
        cfg = self.config
        if self._first_frame is None:
            self._first_frame = frame.index
        for t in self.targets:
            t.predict(self.kf)

        dets = list(frame.detections)
        high = [d for d in dets if d.score >= cfg.high_score_thr]
        low = [d for d in dets if cfg.low_score_thr <= d.score < cfg.high_score_thr]

        dets_all = high + low
        if self.provider is not None and self.mode != "baseline":
            self._det_emb = self.provider.detection_embeddings(frame, dets_all)
        else:
            self._det_emb = np.zeros((len(dets_all), 1))

        confirmed = [t for t in self.targets if t.state is TrackState.CONFIRMED]
        tentative = [t for t in self.targets if t.state is TrackState.TENTATIVE]
        lost = [t for t in self.targets if t.state is TrackState.LOST]

        events: list[dict] = []
        outputs: list[Observation] = []
        matched: list[tuple[TrackedTarget, Observation, int, int]] = []

        # stage 1: confirmed x high, IoU (optionally blended with embeddings)
        cost = self._iou_cost(confirmed, high)
        if self.use_fr and len(confirmed) and len(high):
            ev, iv = self._embedding_rows(confirmed)
            emb = multimodal_cost(ev, iv, self._det_emb[:len(high)]) / 2.0
            blended = (1.0 - cfg.fr_weight) * cost + cfg.fr_weight * emb
            blended[~np.isfinite(cost)] = INF  # spatial gate still applies
            cost = blended
        pairs, un_t, un_d = hungarian(cost)
        for ti, di in pairs:
            matched.append((confirmed[ti], high[di], di, 1))
        rest_confirmed = [confirmed[i] for i in un_t]
        rest_high = [(high[i], i) for i in un_d]

        # stage 2: leftover confirmed x low, IoU only
        pairs, un_t, un_low = hungarian(self._iou_cost(rest_confirmed, low))
        for ti, di in pairs:
            matched.append((rest_confirmed[ti], low[di], len(high) + di, 2))
        rest_confirmed = [rest_confirmed[i] for i in un_t]
        rest_low = [(low[i], len(high) + i) for i in un_low]

        # tentative tracks try the remaining high detections, IoU only
        cand_dets = [d for d, _ in rest_high]
        pairs, un_t, un_d = hungarian(self._iou_cost(tentative, cand_dets))
        for ti, di in pairs:
            det, flat = rest_high[di]
            matched.append((tentative[ti], det, flat, 1))
        rest_tentative = [tentative[i] for i in un_t]
        rest_high = [rest_high[i] for i in un_d]

        # stage 3: reassociation by embeddings over everything left
        rest_dets = rest_high + rest_low
        if self.use_tr and rest_dets:
            candidates = rest_confirmed + rest_tentative + lost
            det_rows = np.stack([self._det_emb[flat] for _, flat in rest_dets]) \
                if rest_dets else np.zeros((0, 1))
            ev, iv = self._embedding_rows(candidates)
            cost = multimodal_cost(ev, iv, det_rows)
            fresh = np.array([t.emb_explicit is None for t in candidates])
            if fresh.any():
                cost[fresh, :] = INF  # nothing to compare yet
            cost[cost >= cfg.tr_gate] = INF
            pairs, un_t, un_d = hungarian(cost)
            for ti, di in pairs:
                det, flat = rest_dets[di]
                matched.append((candidates[ti], det, flat, 3))
            surviving = {id(candidates[i]) for i in un_t}
            rest_confirmed = [t for t in rest_confirmed if id(t) in surviving]
            rest_tentative = [t for t in rest_tentative if id(t) in surviving]
            lost = [t for t in lost if id(t) in surviving]
            rest_dets = [rest_dets[i] for i in un_d]

        # apply matches
        for target, det, flat, stage in matched:
            obs = target.update(self.kf, det, cfg.n_init)
            if self.provider is not None and self.mode != "baseline":
                ev, iv = self.provider.track_embeddings(target, det, frame)
                target.merge_embeddings(ev, iv, cfg.ema_momentum)
            events.append({
                "frame": frame.index,
                "event": "reassociated" if stage == 3 else "matched",
                "track_id": target.id, "det_idx": flat, "stage": stage})
            if target.state is TrackState.CONFIRMED:
                outputs.append(obs)

        # book-keeping for everything unmatched
        removed: set[int] = set()
        for t in rest_confirmed:
            t.track.state = TrackState.LOST
            t.lost_frames = 1
            events.append({"frame": frame.index, "event": "lost",
                           "track_id": t.id, "det_idx": None, "stage": None})
        for t in lost:
            t.lost_frames += 1
            if t.lost_frames > cfg.max_lost_frames:
                removed.add(id(t))
        for t in rest_tentative:
            removed.add(id(t))  # unconfirmed tracks do not survive a miss
        self.targets = [t for t in self.targets if id(t) not in removed]

        # spawn from leftover high-score detections
        for det, flat in rest_dets:
            if det.score < cfg.high_score_thr:
                continue
            target = TrackedTarget(self._next_id, det, self.kf,
                                   confirmed=frame.index == self._first_frame)
            self._next_id += 1
            if self.provider is not None and self.mode != "baseline":
                ev, iv = self.provider.track_embeddings(target, det, frame)
                target.merge_embeddings(ev, iv, cfg.ema_momentum)
            self.targets.append(target)
            events.append({"frame": frame.index, "event": "spawned",
                           "track_id": target.id, "det_idx": flat, "stage": None})
            if target.state is TrackState.CONFIRMED:
                outputs.append(target.track.last)
        return events, outputs


def track_sequence(frames: list[Frame], config: AssociationConfig = AssociationConfig(),
                   mode: str = "baseline", provider=None
                   ) -> tuple[dict[int, list[Observation]], list[dict]]:
    """Run the tracker over a sequence.

    Returns ({frame: confirmed output boxes}, event list).
    """
    tracker = Tracker(config, mode=mode, provider=provider)
    rows: dict[int, list[Observation]] = {}
    events: list[dict] = []
    for frame in frames:
        ev, outs = tracker.step(frame)
        events.extend(ev)
        if outs:
            rows[frame.index] = outs
    return rows, events


def write_event_log(path, events: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for e in events:
            f.write(json.dumps(e, sort_keys=True) + "\n")
