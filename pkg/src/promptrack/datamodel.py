"""Core data types, MOT-format io, crop extraction and synthetic sequences.

Boxes are stored in corner form (x1, y1, x2, y2) in pixel units. MOT text
files use the top-left + width/height convention and are converted on read.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import cv2
import numpy as np

log = logging.getLogger(__name__)

CROP_HEIGHT = 256
CROP_WIDTH = 128

# fixed palette for synthetic targets; identities beyond the palette cycle
_PALETTE = (
    (220, 50, 50), (50, 200, 50), (60, 60, 230), (220, 210, 40),
    (200, 50, 210), (40, 210, 210), (240, 140, 40), (140, 60, 240),
    (60, 240, 150), (240, 60, 140), (150, 240, 60), (60, 150, 240),
)


class ParseError(ValueError):
    """Malformed MOT-format line."""


@dataclass(frozen=True)
class Observation:
    """One box of one target in one frame.

    :param id: integer identity; -1 marks an identity-free detection
    :param frame: 1-based frame index
    :param score: detection confidence in [0, 1]
    """

    id: int
    frame: int
    x1: float
    y1: float
    x2: float
    y2: float
    score: float

    def __post_init__(self):
        if self.frame < 1:
            raise ValueError(f"frame must be >= 1, got {self.frame}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def box(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def to_xyah(self) -> np.ndarray:
        """Center x, center y, aspect ratio (w/h), height."""
        w, h = self.width, self.height
        return np.array([self.x1 + w / 2.0, self.y1 + h / 2.0, w / h, h])


class TrackState(Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    LOST = "lost"


@dataclass
class Track:
    """Trajectory state carried across frames by the association engine."""

    id: int
    history: list[Observation] = field(default_factory=list)
    state: TrackState = TrackState.TENTATIVE
    kalman_mean: np.ndarray | None = None  # 8-vector (cx, cy, a, h, velocities)
    kalman_cov: np.ndarray | None = None

    def add(self, obs: Observation) -> None:
        if self.history and obs.frame <= self.history[-1].frame:
            raise ValueError("history frames must be strictly increasing")
        self.history.append(obs)

    @property
    def last(self) -> Observation:
        return self.history[-1]


@dataclass
class Frame:
    """One image with its detections. The image may be absent (box-only runs)."""

    index: int
    detections: list[Observation] = field(default_factory=list)
    image: np.ndarray | None = None  # H x W x 3 uint8
    height: int = 0
    width: int = 0

    def __post_init__(self):
        if self.image is not None:
            ih, iw = self.image.shape[:2]
            if self.height and self.height != ih:
                raise ValueError("declared height disagrees with image")
            self.height, self.width = ih, iw
        if self.height <= 0:
            raise ValueError("frame height must be known and positive")


@dataclass
class CropBatch:
    """Target patches resized to a fixed resolution, identity-aligned."""

    crops: np.ndarray  # b x 256 x 128 x 3 uint8
    ids: np.ndarray    # b int64
    meta: list[Observation]

    def __post_init__(self):
        if self.crops.shape[1:] != (CROP_HEIGHT, CROP_WIDTH, 3):
            raise ValueError(f"crops must be bx{CROP_HEIGHT}x{CROP_WIDTH}x3")
        if len(self.ids) != len(self.crops) or len(self.meta) != len(self.crops):
            raise ValueError("crops, ids and meta must agree in length")

    def __len__(self) -> int:
        return len(self.crops)


def parse_mot_file(path) -> dict[int, list[Observation]]:
    """Read a MOT text file into {frame: [Observation, ...]}.

    Line format: frame,id,bb_left,bb_top,bb_width,bb_height,conf[,class,vis].
    Boxes with non-positive width or height are skipped with a warning;
    anything else malformed raises ParseError naming the line number.
    """
    per_frame: dict[int, list[Observation]] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 7:
                raise ParseError(f"{path}:{lineno}: expected >=7 fields, got {len(parts)}")
            try:
                frame = int(float(parts[0]))
                tid = int(float(parts[1]))
                left, top, w, h, conf = (float(p) for p in parts[2:7])
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: {e}") from None
            if w <= 0 or h <= 0:
                log.warning("%s:%d: skipping box with non-positive size", path, lineno)
                continue
            try:
                obs = Observation(
                    id=tid, frame=frame, x1=left, y1=top, x2=left + w, y2=top + h,
                    score=min(max(conf, 0.0), 1.0))
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: {e}") from None
            per_frame.setdefault(frame, []).append(obs)
    return per_frame


def write_mot_file(path, per_frame: dict[int, list[Observation]]) -> None:
    """Write observations as `frame,id,x,y,w,h,score,-1,-1,-1` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for frame in sorted(per_frame):
            for o in per_frame[frame]:
                f.write(format_mot_row(o))


def format_mot_row(o: Observation) -> str:
    return (f"{o.frame},{o.id},{o.x1:.2f},{o.y1:.2f},"
            f"{o.width:.2f},{o.height:.2f},{o.score:.6f},-1,-1,-1\n")


def crop_and_resize(frame: Frame, obs: Observation, augment: bool = False,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Cut the observation's patch out of the frame and resize to 256x128.

    The box is clamped to the image rectangle first; an empty intersection is
    an error. With augment on, a random sub-window keeping at least 80% of
    the box area is taken instead and the patch is mirrored with p=0.5.
    Augmentation draws from `rng` only, so a seeded generator reproduces.
    """
    if frame.image is None:
        raise ValueError("frame carries no image")
    ih, iw = frame.image.shape[:2]
    x1 = max(obs.x1, 0.0)
    y1 = max(obs.y1, 0.0)
    x2 = min(obs.x2, float(iw))
    y2 = min(obs.y2, float(ih))
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        raise ValueError("box does not intersect the image")

    flip = False
    if augment:
        if rng is None:
            rng = np.random.default_rng()
        keep = rng.uniform(0.8, 1.0)
        side = math.sqrt(keep)
        bw, bh = x2 - x1, y2 - y1
        cw, ch = bw * side, bh * side
        x1 = x1 + rng.uniform(0.0, bw - cw)
        y1 = y1 + rng.uniform(0.0, bh - ch)
        x2, y2 = x1 + cw, y1 + ch
        flip = rng.random() < 0.5

    patch = frame.image[int(y1):max(int(y2), int(y1) + 1),
                        int(x1):max(int(x2), int(x1) + 1)]
    out = cv2.resize(patch, (CROP_WIDTH, CROP_HEIGHT), interpolation=cv2.INTER_LINEAR)
    if flip:
        out = out[:, ::-1].copy()
    return out


def build_crop_batch(frames: dict[int, Frame], observations: list[Observation],
                     augment: bool = False,
                     rng: np.random.Generator | None = None) -> CropBatch:
    crops = np.stack([
        crop_and_resize(frames[o.frame], o, augment=augment, rng=rng)
        for o in observations])
    ids = np.array([o.id for o in observations], dtype=np.int64)
    return CropBatch(crops=crops, ids=ids, meta=list(observations))


# ---------------------------------------------------------------------------
# synthetic sequences


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a rendered synthetic tracking sequence."""

    n_targets: int
    n_frames: int
    width: int = 320
    height: int = 240
    motion: str = "linear"  # linear | crossing | occlusion_gap
    seed: int = 0
    box_width: float = 36.0
    box_height: float = 60.0
    speed: float = 4.0
    det_jitter: float = 0.0
    occlusion_target: int = 0     # target index hidden in occlusion_gap mode
    occlusion_start: int = 40
    occlusion_end: int = 60
    name: str = "synth"

    def __post_init__(self):
        if self.n_targets < 1:
            raise ValueError("n_targets must be >= 1")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.motion not in ("linear", "crossing", "occlusion_gap"):
            raise ValueError(f"unknown motion model {self.motion!r}")
        if self.motion == "occlusion_gap":
            if not 0 <= self.occlusion_target < self.n_targets:
                raise ValueError("occlusion_target out of range")
            if not 1 <= self.occlusion_start <= self.occlusion_end <= self.n_frames:
                raise ValueError("occlusion window must lie inside the sequence")


def _linear_tracks(spec: SynthSpec, rng: np.random.Generator,
                   n: int, band: tuple[float, float] | None = None) -> np.ndarray:
    """Center trajectories [n, n_frames, 2] with constant velocity, kept
    inside the image and pairwise separated so identities never collide.

    Targets ride horizontal lanes; everyone in a lane shares one velocity,
    so in-lane spacing is preserved, and lanes sit far enough apart that
    boxes in different lanes can never overlap.
    """
    hw, hh = spec.box_width / 2.0, spec.box_height / 2.0
    lo_y, hi_y = band if band else (hh + 2, spec.height - hh - 2)
    if hi_y < lo_y:
        raise RuntimeError("vertical band smaller than the box size")
    min_dx = spec.box_width * 1.25
    min_dy = spec.box_height * 1.1
    usable_y = hi_y - lo_y

    n_lanes = min(n, int(usable_y // min_dy) + 1)
    per_lane = math.ceil(n / n_lanes)
    x_lo, x_hi = hw + 2, spec.width - hw - 2
    slots_extent = (per_lane - 1) * min_dx
    speed_cap = (x_hi - x_lo - slots_extent) / max(spec.n_frames - 1, 1)
    if speed_cap <= 0:
        raise RuntimeError("too many targets per lane for the frame width")

    lane_y = np.full(n_lanes, (lo_y + hi_y) / 2.0)
    if n_lanes > 1:
        lane_y = lo_y + np.arange(n_lanes) * (usable_y / (n_lanes - 1))
    lane_vx = np.empty(n_lanes)
    lane_x0 = np.empty(n_lanes)
    for k in range(n_lanes):
        mag = rng.uniform(0.5, 1.0) * min(spec.speed, 0.95 * speed_cap)
        vx = mag if rng.random() < 0.5 else -mag
        span = vx * (spec.n_frames - 1)
        lane_vx[k] = vx
        lane_x0[k] = rng.uniform(x_lo + max(-span, 0.0),
                                 x_hi - slots_extent - max(span, 0.0))

    t = np.arange(spec.n_frames, dtype=np.float64)
    out = np.zeros((n, spec.n_frames, 2))
    for i in range(n):
        lane, slot = divmod(i, per_lane)
        out[i, :, 0] = lane_x0[lane] + slot * min_dx + lane_vx[lane] * t
        out[i, :, 1] = lane_y[lane]
    return out


def _crossing_tracks(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Targets 0 and 1 approach head-on and bounce back off each other at the
    midpoint frame; any further targets move linearly in clear bands."""
    n_frames = spec.n_frames
    meet = n_frames // 2
    # keep the approach inside the image
    vx = min(spec.speed, (spec.width / 2.0 - spec.box_width - 6) / max(meet - 1, 1))
    cx = spec.width / 2.0
    cy = spec.height / 2.0
    t = np.arange(n_frames, dtype=np.float64)
    away = np.abs(t - meet) * vx

    out = np.zeros((spec.n_targets, n_frames, 2))
    out[0, :, 0] = cx - away
    out[0, :, 1] = cy - 3.0
    if spec.n_targets > 1:
        out[1, :, 0] = cx + away
        out[1, :, 1] = cy + 3.0
    if spec.n_targets > 2:
        extra = spec.n_targets - 2
        # lanes end a full box above the crossing pair so boxes stay disjoint
        hi = cy - 3.0 - spec.box_height - 8
        band = (spec.box_height / 2.0 + 2, max(hi, spec.box_height / 2.0 + 3))
        out[2:] = _linear_tracks(spec, rng, extra, band=band)
    return out


def _occlusion_tracks(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Linear targets, except the occluded one turns 90 degrees when it
    disappears, so a constant-velocity extrapolation drifts off its box."""
    occ = spec.occlusion_target
    n_frames = spec.n_frames
    out = np.zeros((spec.n_targets, n_frames, 2))

    # occluded target: rightward run, then a downward turn at the gap start;
    # the descent stops a full box height above the bystander band below
    x0, y0 = spec.width * 0.12, spec.height * 0.25
    vx = min(spec.speed, (spec.width * 0.76) / n_frames)
    turn = spec.occlusion_start - 1
    y_stop = spec.height * 0.70 - spec.box_height * 1.15
    vy_after = min(spec.speed, max(y_stop - y0, 0.0) / max(n_frames - turn, 1))
    t = np.arange(n_frames, dtype=np.float64)
    out[occ, :, 0] = np.where(t <= turn, x0 + vx * t, x0 + vx * turn)
    out[occ, :, 1] = np.where(t <= turn, y0, y0 + vy_after * (t - turn))

    if spec.n_targets > 1:
        rest = _linear_tracks(
            spec, rng, spec.n_targets - 1,
            band=(spec.height * 0.70, spec.height - spec.box_height / 2.0 - 2))
        j = 0
        for i in range(spec.n_targets):
            if i == occ:
                continue
            out[i] = rest[j]
            j += 1
    return out


def _identity_texture(seed: int, tid: int, h: int, w: int) -> np.ndarray:
    rng = np.random.default_rng(seed * 7919 + tid)
    return rng.integers(-28, 28, size=(h, w, 3), dtype=np.int16)


def generate_synthetic_sequence(spec: SynthSpec) -> tuple[list[Frame], dict[int, list[Observation]]]:
    """Render a sequence from the spec.

    Returns (frames, gt) where frames carry images and id-free detections and
    gt maps frame index to ground-truth observations (ids 1..n_targets). The
    whole output is a pure function of the spec, so reruns are identical.
    In occlusion_gap mode the occluded target keeps its ground truth but
    contributes no detections inside the window.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.motion == "linear":
        centers = _linear_tracks(spec, rng, spec.n_targets)
    elif spec.motion == "crossing":
        centers = _crossing_tracks(spec, rng)
    else:
        centers = _occlusion_tracks(spec, rng)

    hw, hh = spec.box_width / 2.0, spec.box_height / 2.0
    centers[..., 0] = centers[..., 0].clip(hw, spec.width - hw)
    centers[..., 1] = centers[..., 1].clip(hh, spec.height - hh)

    scores = rng.uniform(0.85, 0.99, size=(spec.n_targets, spec.n_frames))
    jitter = (rng.normal(0.0, spec.det_jitter, size=(spec.n_targets, spec.n_frames, 2))
              if spec.det_jitter > 0 else np.zeros((spec.n_targets, spec.n_frames, 2)))

    background = np.full((spec.height, spec.width, 3), 40, dtype=np.uint8)
    background = (background.astype(np.int16)
                  + np.random.default_rng(spec.seed + 1).integers(
                      -10, 10, size=background.shape, dtype=np.int16)).clip(0, 255).astype(np.uint8)
    bw_i, bh_i = int(round(spec.box_width)), int(round(spec.box_height))
    textures = [_identity_texture(spec.seed, tid, bh_i, bw_i)
                for tid in range(1, spec.n_targets + 1)]

    frames: list[Frame] = []
    gt: dict[int, list[Observation]] = {}
    for f in range(1, spec.n_frames + 1):
        img = background.copy()
        dets: list[Observation] = []
        gt_rows: list[Observation] = []
        for i in range(spec.n_targets):
            tid = i + 1
            cx, cy = centers[i, f - 1]
            obs = Observation(id=tid, frame=f, x1=cx - hw, y1=cy - hh,
                              x2=cx + hw, y2=cy + hh, score=float(scores[i, f - 1]))
            gt_rows.append(obs)

            color = np.array(_PALETTE[i % len(_PALETTE)], dtype=np.int16)
            px1, py1 = int(round(obs.x1)), int(round(obs.y1))
            px1 = min(max(px1, 0), spec.width - bw_i)
            py1 = min(max(py1, 0), spec.height - bh_i)
            block = (color[None, None, :] + textures[i]).clip(0, 255).astype(np.uint8)
            img[py1:py1 + bh_i, px1:px1 + bw_i] = block

            occluded = (spec.motion == "occlusion_gap" and i == spec.occlusion_target
                        and spec.occlusion_start <= f <= spec.occlusion_end)
            if not occluded:
                dx, dy = jitter[i, f - 1]
                dets.append(Observation(
                    id=-1, frame=f, x1=obs.x1 + dx, y1=obs.y1 + dy,
                    x2=obs.x2 + dx, y2=obs.y2 + dy, score=obs.score))
        gt[f] = gt_rows
        frames.append(Frame(index=f, detections=dets, image=img))
    return frames, gt


def save_sequence(frames: list[Frame], gt: dict[int, list[Observation]], seq_dir) -> None:
    """Write the standard layout: img1/*.jpg, gt/gt.txt, det/det.txt."""
    seq_dir = Path(seq_dir)
    (seq_dir / "img1").mkdir(parents=True, exist_ok=True)
    for fr in frames:
        if fr.image is not None:
            cv2.imwrite(str(seq_dir / "img1" / f"{fr.index:06d}.jpg"), fr.image)
    write_mot_file(seq_dir / "gt" / "gt.txt", gt)
    dets = {fr.index: fr.detections for fr in frames}
    write_mot_file(seq_dir / "det" / "det.txt", dets)


def load_sequence(seq_dir, with_images: bool = False,
                  frame_size: tuple[int, int] | None = None) -> tuple[list[Frame], dict[int, list[Observation]]]:
    """Read a sequence directory back into frames plus ground truth.

    Without images, frame sizes come from the first image header on disk or
    from `frame_size` (height, width) when no images exist.
    """
    seq_dir = Path(seq_dir)
    dets = parse_mot_file(seq_dir / "det" / "det.txt")
    gt_path = seq_dir / "gt" / "gt.txt"
    gt = parse_mot_file(gt_path) if gt_path.exists() else {}

    image_paths = sorted((seq_dir / "img1").glob("*.jpg"))
    images: dict[int, Path] = {int(p.stem): p for p in image_paths}
    n_frames = max([*dets.keys(), *gt.keys(), *images.keys()], default=0)
    if n_frames == 0:
        raise ValueError(f"{seq_dir}: no frames found")

    height = width = 0
    if frame_size is not None:
        height, width = frame_size
    elif image_paths:
        probe = cv2.imread(str(image_paths[0]))
        height, width = probe.shape[:2]
    else:
        raise ValueError(f"{seq_dir}: frame size unknown (no images, no frame_size)")

    frames = []
    for f in range(1, n_frames + 1):
        img = None
        if with_images and f in images:
            img = cv2.imread(str(images[f]))
        frames.append(Frame(index=f, detections=dets.get(f, []),
                            image=img, height=height, width=width))
    return frames, gt
