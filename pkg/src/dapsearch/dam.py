"""Domain alignment: image-level and task-sensitive instance-level adversarial
losses, the scene-count balancing factor, and the classifier consistency term.

Each loss takes features that have already passed the trunk (or the ReID
head), accumulates gradients into its own classifier parameters, and returns
the *reversed* gradient for the features so the caller can push it further
back.  ``weight`` scales every gradient (the caller's loss weight).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .netcore import DenseParams, affine_backward, affine_forward, bce_with_logits, grad_reverse, sigmoid

TASK_SENSITIVE, NORMAL = "task", "normal"


def balance_lambda(n_source: int, n_target: int) -> float:
    """Weight of the detection-head alignment term given the two scene counts."""
    if n_source < 1 or n_target < 1:
        raise ValueError("scene counts must be positive")
    ratio = max(n_source, n_target) / min(n_source, n_target) - 1.0
    sign = (n_target > n_source) - (n_target < n_source)
    z = 4.0 * sign * ratio
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


@dataclass
class BalanceState:
    n_source: int
    n_target: int
    lam: float = 0.5

    def __post_init__(self):
        self.lam = balance_lambda(self.n_source, self.n_target)

    def update(self, n_source: int, n_target: int):
        if (n_source, n_target) != (self.n_source, self.n_target):
            self.n_source, self.n_target = n_source, n_target
            self.lam = balance_lambda(n_source, n_target)


def head_weights(lam: float, mode: str = TASK_SENSITIVE) -> tuple[float, float]:
    """(detection-head, ReID-head) weights; 'normal' alignment skips the balancing."""
    if mode == TASK_SENSITIVE:
        return lam, 1.0 - lam
    if mode == NORMAL:
        return 1.0, 1.0
    raise ValueError(f"unknown instance alignment mode {mode!r}")


def _classifier_loss(clf: DenseParams, feats: np.ndarray, domain: int, weight: float, mu: float):
    """Mean BCE of a domain classifier; returns (loss, probs, reversed d feats)."""
    n = len(feats)
    if n == 0:
        return 0.0, np.zeros(0), np.zeros_like(feats)
    z = affine_forward(clf, feats)[:, 0]
    loss, p, dz = bce_with_logits(z, np.full(n, float(domain)))
    dfeat = affine_backward(clf, feats, (weight * dz / n)[:, None])
    return float(loss.mean()), p, grad_reverse(dfeat, mu)


def image_align_loss(patch_feats: np.ndarray, domain: int, clf: DenseParams,
                     weight: float = 1.0, mu: float = 1.0):
    """Patch classifier loss for one image.

    Returns ``(loss, patch_probs, d_patch_feats)``; the feature gradient is
    already reversed.
    """
    feats = np.asarray(patch_feats, dtype=np.float64).reshape(-1, clf.shape[1])
    return _classifier_loss(clf, feats, domain, weight, mu)


def instance_align_loss(det_feats: np.ndarray, reid_feats: np.ndarray, domain: int, lam: float,
                        clf_det: DenseParams, clf_reid: DenseParams, weight: float = 1.0,
                        mu: float = 1.0, mode: str = TASK_SENSITIVE):
    """Balanced instance-level loss over the two heads' instance sets.

    Each head's term is the mean over its instances, so an empty set
    contributes zero.  Returns ``(loss, p_det, p_reid, d_det_feats, d_reid_feats)``.
    """
    w_det, w_reid = head_weights(lam, mode)
    l_det, p_det, g_det = _classifier_loss(clf_det, det_feats, domain, weight * w_det, mu)
    l_reid, p_reid, g_reid = _classifier_loss(clf_reid, reid_feats, domain, weight * w_reid, mu)
    return w_det * l_det + w_reid * l_reid, p_det, p_reid, g_det, g_reid


def consistency_reg(patch_feats: np.ndarray, det_feats: np.ndarray, reid_feats: np.ndarray,
                    clf_img: DenseParams, clf_det: DenseParams, clf_reid: DenseParams,
                    weight: float = 1.0) -> float:
    """Mean squared gap between instance predictions and the image prediction.

    The image prediction is the mean patch probability.  Gradients go to the
    three classifiers only; features are treated as constants.
    """
    groups = [(clf_det, det_feats), (clf_reid, reid_feats)]
    n_inst = sum(len(f) for _, f in groups)
    if n_inst == 0 or len(patch_feats) == 0:
        return 0.0
    p_patch = sigmoid(affine_forward(clf_img, patch_feats)[:, 0])
    p_img = p_patch.mean()
    loss = 0.0
    d_img = 0.0
    for clf, feats in groups:
        if len(feats) == 0:
            continue
        p = sigmoid(affine_forward(clf, feats)[:, 0])
        diff = p - p_img
        loss += float(np.sum(diff ** 2))
        dp = weight * 2.0 * diff / n_inst
        d_img -= dp.sum()
        affine_backward(clf, feats, (dp * p * (1.0 - p))[:, None], need_dx=False)
    dpatch = d_img / len(p_patch) * p_patch * (1.0 - p_patch)
    affine_backward(clf_img, patch_feats, dpatch[:, None], need_dx=False)
    return loss / n_inst
