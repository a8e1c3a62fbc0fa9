"""Toy two-head proposal pipeline and detection metrics.

Proposals stand in for an RPN: jittered copies of the people in a scene plus
uniformly placed random boxes.  The detection head is a logistic unit on the
trunk feature; labels come from IOU against whatever boxes supervise the
scene (ground truth for source, pseudo boxes for target).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, ScoredBox, clip_boxes, iou_matrix, nms_array
from .model import TrunkParams, det_logits, trunk_backward, trunk_forward
from .netcore import affine_backward, bce_with_logits, sigmoid
from .synthworld import DomainModel, Scene, render_roi_features

POSITIVE_IOU = 0.5
EVAL_IOU = 0.5
REID_HEAD_CONF = 0.5
DETECTION_HEAD, REID_HEAD = "detection-head", "reid-head"


@dataclass
class ProposalConfig:
    jitter: float = 2.0
    copies: int = 4
    n_random: int = 8
    render_noise: float | None = None


@dataclass
class Proposal:
    box: Box
    raw: np.ndarray
    trunk: np.ndarray | None = None
    confidence: float = 0.0
    stage: str = DETECTION_HEAD

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence outside [0, 1]")


@dataclass
class ProposalSet:
    """Array form of one scene's proposals; ``origin`` is the jittered instance or -1."""

    boxes: np.ndarray
    raw: np.ndarray
    origin: np.ndarray

    def __len__(self):
        return len(self.boxes)

    def as_proposals(self, confidences: np.ndarray | None = None) -> list[Proposal]:
        conf = np.zeros(len(self)) if confidences is None else confidences
        return [Proposal(Box.from_array(b), r, confidence=float(c)) for b, r, c in zip(self.boxes, self.raw, conf)]


@dataclass
class DetectionBatch:
    scene_id: str
    domain: int
    proposals: ProposalSet
    supervision: np.ndarray | None

    @property
    def supervised(self) -> bool:
        return self.supervision is not None


def propose(scene: Scene, domain: DomainModel, cfg: ProposalConfig, rng: np.random.Generator,
            render_noise: float = 0.0) -> ProposalSet:
    """Jittered copies of each instance box plus ``cfg.n_random`` random boxes."""
    parts, origin = [], []
    if scene.n_instances and cfg.copies:
        base = np.repeat(scene.boxes, cfg.copies, axis=0)
        if cfg.jitter > 0:
            base = base + rng.normal(0.0, cfg.jitter, size=base.shape)
        parts.append(clip_boxes(base, scene.width, scene.height))
        origin.append(np.repeat(np.arange(scene.n_instances), cfg.copies))
    if cfg.n_random:
        w = np.minimum(domain.box_w * np.exp(rng.normal(0.0, domain.box_spread, cfg.n_random)), scene.width - 1)
        h = np.minimum(domain.box_h * np.exp(rng.normal(0.0, domain.box_spread, cfg.n_random)), scene.height - 1)
        x1 = rng.uniform(0.0, 1.0, cfg.n_random) * (scene.width - w)
        y1 = rng.uniform(0.0, 1.0, cfg.n_random) * (scene.height - h)
        parts.append(np.stack([x1, y1, x1 + w, y1 + h], axis=1))
        origin.append(np.full(cfg.n_random, -1))
    boxes = np.concatenate(parts) if parts else np.zeros((0, 4))
    noise = render_noise if cfg.render_noise is None else cfg.render_noise
    raw = render_roi_features(scene, boxes, domain.texture, noise, rng)
    return ProposalSet(boxes, raw, np.concatenate(origin) if origin else np.zeros(0, dtype=np.int64))


def score(model: TrunkParams, raw: np.ndarray) -> np.ndarray:
    """Person confidence for raw ROI features (logistic of the detection head)."""
    h, _ = trunk_forward(model, raw)
    return sigmoid(det_logits(model, h))


def iou_labels(boxes: np.ndarray, supervision: np.ndarray, thresh: float = POSITIVE_IOU) -> np.ndarray:
    if len(supervision) == 0:
        return np.zeros(len(boxes))
    return (iou_matrix(boxes, supervision).max(axis=1) >= thresh).astype(np.float64)


def detection_loss_from_trunk(model: TrunkParams, h: np.ndarray, labels: np.ndarray,
                              weight: float = 1.0) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean BCE of the detection head; accumulates det grads, returns (loss, conf, dh)."""
    z = det_logits(model, h)
    loss, p, dz = bce_with_logits(z, labels)
    n = max(len(labels), 1)
    dh = affine_backward(model.det, h, (weight * dz / n)[:, None])
    return float(loss.sum() / n), p, dh


def detection_loss(batch: DetectionBatch, model: TrunkParams, weight: float = 1.0) -> float:
    """Detection BCE for one scene; gradients accumulate into det head and trunk."""
    if not batch.supervised:
        raise ValueError(f"scene {batch.scene_id}: detection loss needs supervision boxes")
    raw = batch.proposals.raw
    h, pre = trunk_forward(model, raw)
    labels = iou_labels(batch.proposals.boxes, batch.supervision)
    loss, _, dh = detection_loss_from_trunk(model, h, labels, weight)
    trunk_backward(model, raw, pre, dh)
    return loss


def qualified_indices(boxes: np.ndarray, conf: np.ndarray, eps_p: float, nms_thresh: float) -> np.ndarray:
    keep = nms_array(boxes, conf, nms_thresh)
    return keep[conf[keep] >= eps_p]


def select_qualified(proposals: Sequence[Proposal], eps_p: float = 0.95, nms_thresh: float = 0.4) -> list[ScoredBox]:
    """NMS, then keep proposals with confidence >= eps_p."""
    if not proposals:
        return []
    boxes = np.array([p.box.as_tuple() for p in proposals])
    conf = np.array([p.confidence for p in proposals])
    return [ScoredBox(proposals[i].box, float(conf[i])) for i in qualified_indices(boxes, conf, eps_p, nms_thresh)]


def reid_head_indices(boxes: np.ndarray, conf: np.ndarray, nms_thresh: float,
                      conf_thresh: float = REID_HEAD_CONF) -> np.ndarray:
    keep = nms_array(boxes, conf, nms_thresh)
    return keep[conf[keep] >= conf_thresh]


def _match_detections(gt: np.ndarray, boxes: np.ndarray, conf: np.ndarray, iou_thresh: float):
    """Greedy-by-confidence matching; returns per-detection TP flags in the given order."""
    tp = np.zeros(len(boxes), dtype=bool)
    if len(gt) == 0 or len(boxes) == 0:
        return tp
    overlaps = iou_matrix(boxes, gt)
    taken = np.zeros(len(gt), dtype=bool)
    for i in np.argsort(-conf, kind="stable"):
        cand = np.where(~taken & (overlaps[i] >= iou_thresh))[0]
        if len(cand):
            j = cand[np.argmax(overlaps[i, cand])]
            taken[j] = True
            tp[i] = True
    return tp


def average_precision(tp_sorted: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP of a confidence-sorted TP/FP sequence."""
    if n_gt == 0 or len(tp_sorted) == 0:
        return 0.0
    tp_cum = np.cumsum(tp_sorted)
    precision = tp_cum / np.arange(1, len(tp_sorted) + 1)
    recall = tp_cum / n_gt
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def detection_eval(gt_boxes: Sequence[np.ndarray], detections: Sequence[tuple[np.ndarray, np.ndarray]],
                   iou_thresh: float = EVAL_IOU) -> tuple[float, float]:
    """(recall, AP) over scenes; ``detections[i]`` is ``(boxes, confidences)`` for scene i."""
    flags, confs = [], []
    n_gt = 0
    for gt, (boxes, conf) in zip(gt_boxes, detections):
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
        conf = np.asarray(conf, dtype=np.float64)
        n_gt += len(gt)
        flags.append(_match_detections(gt, np.asarray(boxes).reshape(-1, 4), conf, iou_thresh))
        confs.append(conf)
    if n_gt == 0:
        return 0.0, 0.0
    flags_all = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
    conf_all = np.concatenate(confs) if confs else np.zeros(0)
    recall = float(flags_all.sum() / n_gt)
    order = np.argsort(-conf_all, kind="stable")
    return recall, average_precision(flags_all[order], n_gt)
