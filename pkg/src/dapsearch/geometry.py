"""Axis-aligned box arithmetic: IOU, greedy NMS and IOU-based memory matching.

Public functions accept :class:`Box` / :class:`ScoredBox` objects.  The
``*_array`` variants work on ``(n, 4)`` float arrays in ``x1, y1, x2, y2``
order and are what the training loop uses on its hot path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_MATCH_THRESH = 0.5
DEFAULT_NMS_THRESH = 0.4


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Box":
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def boxes_to_array(boxes: Sequence[Box | ScoredBox]) -> np.ndarray:
    rows = [(b.box if isinstance(b, ScoredBox) else b).as_tuple() for b in boxes]
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), 4)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two valid boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IOU between ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms_array(boxes: np.ndarray, scores: np.ndarray, nms_thresh: float = DEFAULT_NMS_THRESH) -> np.ndarray:
    """Indices kept by greedy NMS, in descending-score order.

    Ties on score keep the lower index first (stable sort).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= overlaps[i] > nms_thresh
    return np.asarray(keep, dtype=np.int64)


def greedy_nms(candidates: Sequence[ScoredBox], nms_thresh: float = DEFAULT_NMS_THRESH) -> list[ScoredBox]:
    if not 0.0 < nms_thresh < 1.0:
        raise ValueError("nms_thresh must lie in (0, 1)")
    if not candidates:
        return []
    keep = nms_array(boxes_to_array(candidates), [c.confidence for c in candidates], nms_thresh)
    return [candidates[i] for i in keep]


@dataclass
class MemoryMatch:
    """Result of assigning proposals to memory boxes.

    ``assignment[j]`` is the memory index proposal ``j`` maps to, or ``None``
    when it starts a new entry.  ``stale`` lists memory indices nothing mapped to.
    """

    assignment: list[int | None]
    stale: list[int] = field(default_factory=list)

    def members(self, k: int) -> list[int]:
        return [j for j, m in enumerate(self.assignment) if m == k]

    @property
    def new(self) -> list[int]:
        return [j for j, m in enumerate(self.assignment) if m is None]


def match_array(proposals: np.ndarray, memory: np.ndarray,
                match_thresh: float = DEFAULT_MATCH_THRESH) -> MemoryMatch:
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    memory = np.asarray(memory, dtype=np.float64).reshape(-1, 4)
    if len(memory) == 0:
        return MemoryMatch([None] * len(proposals), [])
    overlaps = iou_matrix(proposals, memory)
    # argmax returns the first maximum: equal-IOU ties go to the lower memory index
    best = overlaps.argmax(axis=1) if len(proposals) else np.zeros(0, dtype=np.int64)
    assignment: list[int | None] = []
    for j, k in enumerate(best):
        assignment.append(int(k) if overlaps[j, k] > match_thresh else None)
    used = {k for k in assignment if k is not None}
    stale = [k for k in range(len(memory)) if k not in used]
    return MemoryMatch(assignment, stale)


def match_to_memory(proposals: Sequence[ScoredBox | Box], memory: Sequence[Box],
                    match_thresh: float = DEFAULT_MATCH_THRESH) -> MemoryMatch:
    """Map every proposal to its max-IOU memory box when that IOU exceeds ``match_thresh``."""
    return match_array(boxes_to_array(proposals), boxes_to_array(memory), match_thresh)


def clip_boxes(boxes: np.ndarray, width: float, height: float, min_size: float = 1.0) -> np.ndarray:
    """Clip boxes to the canvas while keeping at least ``min_size`` extent."""
    out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    out[:, 0] = np.clip(out[:, 0], 0.0, width - min_size)
    out[:, 1] = np.clip(out[:, 1], 0.0, height - min_size)
    out[:, 2] = np.clip(out[:, 2], out[:, 0] + min_size, width)
    out[:, 3] = np.clip(out[:, 3], out[:, 1] + min_size, height)
    return out
