"""Person-search evaluation: galleries of detected people, mAP and CMC top-1."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .detector import EVAL_IOU, REID_HEAD_CONF, ProposalConfig, propose, reid_head_indices
from .geometry import iou_matrix
from .model import TrunkParams, det_logits, embed_forward, trunk_forward
from .netcore import sigmoid
from .seeding import substream
from .synthworld import DatasetSnapshot, Scene, render_roi_features

log = logging.getLogger(__name__)


@dataclass
class Query:
    identity: int
    feature: np.ndarray
    scene_id: str


@dataclass
class GalleryScene:
    scene_id: str
    gt_boxes: np.ndarray
    gt_ids: np.ndarray
    boxes: np.ndarray
    confidences: np.ndarray
    embeddings: np.ndarray


def build_gallery(scenes: Sequence[Scene], model: TrunkParams, snapshot: DatasetSnapshot, prop_cfg: ProposalConfig,
                  seed: int, nms_thresh: float = 0.4, conf_thresh: float = REID_HEAD_CONF) -> list[GalleryScene]:
    """Detect people in every scene and embed them (NMS, confidence >= ``conf_thresh``)."""
    noise = snapshot.config.render_noise
    gallery = []
    for sc in scenes:
        dom = snapshot.domain(sc.domain)
        props = propose(sc, dom, prop_cfg, substream(seed, "eval-proposals", sc.scene_id), noise)
        h, _ = trunk_forward(model, props.raw)
        conf = sigmoid(det_logits(model, h)) if len(props) else np.zeros(0)
        keep = reid_head_indices(props.boxes, conf, nms_thresh, conf_thresh) if len(props) else np.zeros(0, int)
        emb = embed_forward(model, h[keep])[0] if len(keep) else np.zeros((0, model.emb))
        gallery.append(GalleryScene(sc.scene_id, sc.boxes, sc.identities, props.boxes[keep], conf[keep], emb))
    return gallery


def build_queries(snapshot: DatasetSnapshot, model: TrunkParams, seed: int) -> list[Query]:
    noise = snapshot.config.render_noise
    queries = []
    for si, ii in snapshot.queries:
        sc = snapshot.target_test[si]
        tex = snapshot.domain(sc.domain).texture
        raw = render_roi_features(sc, sc.boxes[ii][None, :], tex, noise, substream(seed, "eval-query", sc.scene_id, ii))
        h, _ = trunk_forward(model, raw)
        queries.append(Query(int(sc.identities[ii]), embed_forward(model, h)[0][0], sc.scene_id))
    return queries


def ranked_hits(query: Query, gallery: Sequence[GalleryScene], iou_thresh: float = EVAL_IOU):
    """Correctness flags of the gallery ranked by cosine similarity, plus the GT count.

    A detection is correct when it overlaps a not-yet-claimed GT box of the
    query identity; later detections on the same GT are false positives.
    """
    q = query.feature / max(np.linalg.norm(query.feature), 1e-12)
    sims, hit_box, n_gt = [], [], 0
    for g in gallery:
        if g.scene_id == query.scene_id:
            continue
        gt_mask = g.gt_ids == query.identity
        target_boxes = g.gt_boxes[gt_mask]
        n_gt += len(target_boxes)
        if len(g.boxes) == 0:
            continue
        e = g.embeddings / np.maximum(np.linalg.norm(g.embeddings, axis=1, keepdims=True), 1e-12)
        sims.append(e @ q)
        if len(target_boxes):
            ov = iou_matrix(g.boxes, target_boxes)
            best = ov.argmax(axis=1)
            ok = ov[np.arange(len(ov)), best] >= iou_thresh
            hit_box.append([(g.scene_id, int(b)) if o else None for b, o in zip(best, ok)])
        else:
            hit_box.append([None] * len(g.boxes))
    if not sims:
        return np.zeros(0, dtype=bool), n_gt
    sims_all = np.concatenate(sims)
    targets = [t for block in hit_box for t in block]
    order = np.argsort(-sims_all, kind="stable")
    claimed = set()
    flags = np.zeros(len(order), dtype=bool)
    for r, i in enumerate(order):
        t = targets[i]
        if t is not None and t not in claimed:
            claimed.add(t)
            flags[r] = True
    return flags, n_gt


def query_ap(flags: np.ndarray, n_gt: int) -> float:
    """Mean of precision at each correct rank, divided over all GT matches (missed ones count as 0)."""
    if n_gt == 0:
        return 0.0
    hits = np.where(flags)[0]
    if len(hits) == 0:
        return 0.0
    precision = np.arange(1, len(hits) + 1) / (hits + 1)
    return float(precision.sum() / n_gt)


def search_eval(queries: Sequence[Query], gallery: Sequence[GalleryScene],
                iou_thresh: float = EVAL_IOU) -> tuple[float, float]:
    """(mAP, top-1) over queries; queries with no gallery ground truth are skipped."""
    aps, top1 = [], []
    for q in queries:
        flags, n_gt = ranked_hits(q, gallery, iou_thresh)
        if n_gt == 0:
            log.warning("query identity %s has no ground truth in the gallery; skipped", q.identity)
            continue
        aps.append(query_ap(flags, n_gt))
        top1.append(bool(len(flags) and flags[0]))
    if not aps:
        return 0.0, 0.0
    return float(np.mean(aps)), float(np.mean(top1))
