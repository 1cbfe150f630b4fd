"""Natural-language state descriptions for tracked targets.

Each target is described by three fixed-template sentences, one per
attribute, in the order (score, speed, depth):

    "A person with identity 21 and a score of 0.85."

Speed is the per-frame change rate of the box size, sqrt(dw^2 + dh^2), so it
is invariant to pure translation. Depth is the pixel distance from the box
bottom edge to the image bottom. Scores render with two decimals; speed and
depth render as whole pixels.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

from .datamodel import Frame, Observation

TEMPLATE = "A person with identity {id} and a {attribute} of {value}."
ATTRIBUTE_ORDER = ("score", "speed", "depth")

_SENTENCE_RE = re.compile(
    r"^A person with identity (-?\d+) and a (score|speed|depth) of (-?\d+(?:\.\d+)?)\.$")


@dataclass(frozen=True)
class MotionAttributes:
    """Per-target state feeding the sentence templates."""

    score: float
    speed: float
    depth: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.speed < 0.0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")


@dataclass(frozen=True)
class ExplicitPromptSet:
    """The three rendered sentences for one target, attribute order fixed."""

    target_id: int
    sentences: tuple[str, str, str]

    def __post_init__(self):
        if len(self.sentences) != 3:
            raise ValueError("exactly three sentences required")
        for s in self.sentences:
            if _SENTENCE_RE.match(s) is None:
                raise ValueError(f"sentence does not match the template: {s!r}")


def compute_speed(prev: Observation, curr: Observation) -> float:
    """Box-size change rate between two consecutive observations of a target."""
    if prev.id != curr.id:
        raise ValueError(f"identity mismatch: {prev.id} vs {curr.id}")
    if curr.frame <= prev.frame:
        raise ValueError("observations must be in frame order")
    dw = curr.width - prev.width
    dh = curr.height - prev.height
    return math.hypot(dw, dh)


def compute_depth(frame: Frame, obs: Observation) -> float:
    """Distance from the box bottom to the image bottom, in pixels."""
    return float(frame.height) - obs.y2


def first_frame_attributes(obs: Observation, frame: Frame) -> MotionAttributes:
    """Attributes for a target with no prior observation; speed defaults to 0."""
    return MotionAttributes(score=obs.score, speed=0.0,
                            depth=compute_depth(frame, obs))


def render_explicit_prompts(target_id: int, attrs: MotionAttributes) -> ExplicitPromptSet:
    values = {
        "score": f"{attrs.score:.2f}",
        "speed": f"{int(round(attrs.speed))}",
        "depth": f"{int(round(attrs.depth))}",
    }
    sentences = tuple(
        TEMPLATE.format(id=target_id, attribute=a, value=values[a])
        for a in ATTRIBUTE_ORDER)
    return ExplicitPromptSet(target_id=target_id, sentences=sentences)


def parse_explicit_prompt(sentence: str) -> tuple[int, str, float]:
    """Invert a rendered sentence into (target_id, attribute, value)."""
    m = _SENTENCE_RE.match(sentence)
    if m is None:
        raise ValueError(f"sentence does not match the template: {sentence!r}")
    return int(m.group(1)), m.group(2), float(m.group(3))
