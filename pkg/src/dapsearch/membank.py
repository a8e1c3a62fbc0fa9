"""Dynamic clustering machinery for the unlabeled target domain.

* per-image pseudo-box memory and its aligned feature memory (EMA updates,
  stale-box removal, new-box insertion)
* DBSCAN on cosine distance with a linearly tightening radius
* the unified prototype memory {source classes, target centroids, target
  outliers, hard cases} and its contrastive loss / momentum update
* hybrid hard-case mining and promotion
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import MemoryMatch, iou_matrix, match_array

OUTLIER = -1


class MemoryAlignmentError(RuntimeError):
    """Box memory and feature memory fell out of one-to-one correspondence."""


def _normalize(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norms, 1e-12)


# ---------------------------------------------------------------- per-image memory


@dataclass
class MemoryPlan:
    """How one refresh rewrote an image's memory; replayed on the feature side."""

    n_old: int
    kept: list[int]
    members: list[list[int]]
    new: list[int]
    match: MemoryMatch


@dataclass
class ImageMemory:
    """Pseudo boxes B_i and their EMA features V_i for one target image."""

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    feats: np.ndarray | None = None
    last_matched: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.boxes)

    def check(self):
        n_feat = 0 if self.feats is None else len(self.feats)
        if n_feat != len(self.boxes) or len(self.last_matched) != len(self.boxes):
            raise MemoryAlignmentError(
                f"box memory has {len(self.boxes)} entries but feature memory has {n_feat}")


def update_box_memory(boxes: np.ndarray, proposals: np.ndarray, match_thresh: float = 0.5,
                      gamma: float = 0.2) -> tuple[np.ndarray, MemoryPlan]:
    """EMA-update matched boxes, drop stale ones, append unmatched proposals."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    match = match_array(proposals, boxes, match_thresh)
    kept, members, rows = [], [], []
    for k in range(len(boxes)):
        idx = match.members(k)
        if not idx:
            continue
        kept.append(k)
        members.append(idx)
        rows.append(gamma * boxes[k] + (1.0 - gamma) * proposals[idx].mean(axis=0))
    new = match.new
    rows.extend(proposals[j] for j in new)
    out = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return out, MemoryPlan(len(boxes), kept, members, new, match)


def update_feature_memory(feats: np.ndarray | None, plan: MemoryPlan, proposal_feats: np.ndarray,
                          gamma: float = 0.2) -> np.ndarray:
    """Mirror a box-memory plan on the feature side; entries stay unit-norm."""
    proposal_feats = np.asarray(proposal_feats, dtype=np.float64)
    n_feat = 0 if feats is None else len(feats)
    if n_feat != plan.n_old:
        raise MemoryAlignmentError(f"feature memory has {n_feat} entries, box memory had {plan.n_old}")
    dim = proposal_feats.shape[-1] if proposal_feats.size else (feats.shape[-1] if n_feat else 0)
    rows = []
    for k, idx in zip(plan.kept, plan.members):
        rows.append(gamma * feats[k] + (1.0 - gamma) * proposal_feats[idx].mean(axis=0))
    rows.extend(proposal_feats[j] for j in plan.new)
    if not rows:
        return np.zeros((0, dim))
    return _normalize(np.array(rows, dtype=np.float64))


def refresh_image_memory(mem: ImageMemory, boxes: np.ndarray, feats: np.ndarray, epoch: int,
                         match_thresh: float = 0.5, gamma: float = 0.2) -> MemoryPlan:
    """Run the box and feature updates together on ``mem`` (in place)."""
    mem.check()
    new_boxes, plan = update_box_memory(mem.boxes, boxes, match_thresh, gamma)
    new_feats = update_feature_memory(mem.feats, plan, feats, gamma)
    last = [epoch for _ in plan.kept] + [epoch for _ in plan.new]
    mem.boxes, mem.feats = new_boxes, new_feats
    mem.last_matched = np.asarray(last, dtype=np.int64)
    mem.check()
    return plan


def append_entries(mem: ImageMemory, boxes: np.ndarray, feats: np.ndarray, epoch: int):
    if len(boxes) == 0:
        return
    mem.check()
    mem.boxes = np.vstack([mem.boxes, boxes])
    mem.feats = feats.copy() if mem.feats is None or len(mem.feats) == 0 else np.vstack([mem.feats, feats])
    mem.last_matched = np.concatenate([mem.last_matched, np.full(len(boxes), epoch, dtype=np.int64)])
    mem.check()


# ---------------------------------------------------------------- clustering


@dataclass
class ClusterResult:
    labels: np.ndarray
    centroids: np.ndarray

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    @property
    def n_outliers(self) -> int:
        return int(np.sum(self.labels == OUTLIER))


def cosine_distance(features: np.ndarray) -> np.ndarray:
    f = _normalize(np.asarray(features, dtype=np.float64))
    return np.clip(1.0 - f @ f.T, 0.0, 2.0)


def dbscan(features: np.ndarray, eps: float, min_pts: int = 2) -> ClusterResult:
    """Density clustering on ``1 - cosine`` distance.

    Core points (>= ``min_pts`` neighbours within ``eps``, self included) are
    joined through core-core links.  A border point goes to the cluster of its
    nearest core neighbour, which makes the partition independent of input
    order.  Clusters left with fewer than ``min_pts`` members are dissolved.
    """
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    if n == 0:
        return ClusterResult(np.zeros(0, dtype=np.int64), np.zeros((0, features.shape[-1] if features.ndim == 2 else 0)))
    dist = cosine_distance(features)
    near = dist <= eps
    core = near.sum(axis=1) >= min_pts
    labels = np.full(n, OUTLIER, dtype=np.int64)
    core_idx = np.where(core)[0]
    if len(core_idx):
        adj = csr_matrix(near[np.ix_(core_idx, core_idx)])
        _, comp = connected_components(adj, directed=False)
        labels[core_idx] = comp
        border = np.where(~core & near[:, core].any(axis=1))[0]
        if len(border):
            d = np.where(near[np.ix_(border, core_idx)], dist[np.ix_(border, core_idx)], np.inf)
            labels[border] = comp[d.argmin(axis=1)]
    return _finalize(features, labels, min_pts)


def _finalize(features: np.ndarray, labels: np.ndarray, min_pts: int) -> ClusterResult:
    """Drop undersized clusters, relabel by first appearance, compute unit centroids."""
    out = np.full(len(labels), OUTLIER, dtype=np.int64)
    centroids = []
    mapping: dict[int, int] = {}
    sizes = {lab: int(np.sum(labels == lab)) for lab in set(labels.tolist()) if lab != OUTLIER}
    for i, lab in enumerate(labels):
        if lab == OUTLIER or sizes[lab] < min_pts:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    for c in range(len(mapping)):
        centroids.append(features[out == c].mean(axis=0))
    dim = features.shape[1]
    cents = _normalize(np.array(centroids)) if centroids else np.zeros((0, dim))
    return ClusterResult(out, cents)


def self_paced_eps(epoch: int, eps_start: float = 0.6, eps_end: float = 0.4, horizon: int = 10) -> float:
    """Clustering radius shrinking linearly from ``eps_start`` to ``eps_end`` over ``horizon`` epochs."""
    if eps_start < eps_end:
        raise ValueError("eps_start must be >= eps_end")
    if horizon <= 0 or epoch >= horizon:
        return eps_end
    if epoch <= 0:
        return eps_start
    return eps_start + (eps_end - eps_start) * epoch / horizon


# ---------------------------------------------------------------- unified memory


@dataclass
class UnifiedMemory:
    """Prototype store; rows of every partition are unit vectors."""

    V: np.ndarray
    W: np.ndarray
    F: np.ndarray
    H: np.ndarray
    tau: float = 0.05
    gamma: float = 0.2

    def __post_init__(self):
        dim = np.shape(self.V)[1]
        for part in ("V", "W", "F", "H"):
            setattr(self, part, np.array(getattr(self, part), dtype=np.float64).reshape(-1, dim))
        self._bank: np.ndarray | None = None

    @property
    def sizes(self) -> dict[str, int]:
        return {p: len(getattr(self, p)) for p in ("V", "W", "F", "H")}

    def offset(self, part: str) -> int:
        order = ("V", "W", "F", "H")
        return sum(len(getattr(self, p)) for p in order[:order.index(part)])

    def index(self, key: tuple[str, int]) -> int:
        part, i = key
        if part not in ("V", "W", "F", "H") or not 0 <= i < len(getattr(self, part)):
            raise KeyError(f"no prototype {key!r} in memory")
        return self.offset(part) + i

    def bank(self) -> np.ndarray:
        """All prototypes stacked V, W, F, H (cached until the next update)."""
        if self._bank is None:
            self._bank = np.vstack([self.V, self.W, self.F, self.H])
        return self._bank

    def invalidate(self):
        self._bank = None


def build_unified_memory(source_protos: np.ndarray, clusters: ClusterResult | None, target_feats: np.ndarray | None,
                         hard: np.ndarray | None = None, tau: float = 0.05, gamma: float = 0.2) -> UnifiedMemory:
    """Assemble {V, W, F, H}: centroids for clusters, raw features for outliers."""
    V = _normalize(np.asarray(source_protos, dtype=np.float64))
    dim = V.shape[1]
    if clusters is None or target_feats is None or len(target_feats) == 0:
        W = np.zeros((0, dim))
        F = np.zeros((0, dim)) if target_feats is None else _normalize(np.asarray(target_feats).reshape(-1, dim))
    else:
        W = clusters.centroids.reshape(-1, dim)
        F = _normalize(np.asarray(target_feats)[clusters.labels == OUTLIER].reshape(-1, dim))
    H = np.zeros((0, dim)) if hard is None or len(hard) == 0 else _normalize(np.asarray(hard).reshape(-1, dim))
    return UnifiedMemory(V, W, F, H, tau=tau, gamma=gamma)


def target_keys(clusters: ClusterResult) -> list[tuple[str, int]]:
    """Positive key of each clustered target feature: its centroid, or its own F slot."""
    keys = []
    f_slot = 0
    for lab in clusters.labels:
        if lab == OUTLIER:
            keys.append(("F", f_slot))
            f_slot += 1
        else:
            keys.append(("W", int(lab)))
    return keys


def memory_loss_batch(X: np.ndarray, pos: np.ndarray, bank: np.ndarray, tau: float):
    """Contrastive loss for rows of ``X`` against ``bank`` with positive rows ``pos``.

    Returns ``(per-row losses, dL/dX)``.
    """
    logits = X @ bank.T / tau
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    denom = ex.sum(axis=1, keepdims=True)
    prob = ex / denom
    rows = np.arange(len(X))
    losses = (np.log(denom[:, 0]) + m[:, 0]) - logits[rows, pos]
    grad = (prob @ bank - bank[pos]) / tau
    return losses, grad


def memory_loss(x: np.ndarray, key: tuple[str, int], memory: UnifiedMemory, tau: float | None = None):
    """Loss of one unit feature whose positive prototype is ``key``; returns (loss, dL/dx).

    Hard cases are negatives only: a key in ``H`` is rejected.
    """
    if key[0] == "H":
        raise ValueError("hard cases cannot be positives")
    tau = memory.tau if tau is None else tau
    losses, grad = memory_loss_batch(np.asarray(x, dtype=np.float64)[None, :],
                                     np.array([memory.index(key)]), memory.bank(), tau)
    return float(losses[0]), grad[0]


def momentum_update(memory: UnifiedMemory, key: tuple[str, int], x: np.ndarray, gamma: float | None = None) -> np.ndarray:
    """z <- gamma * z + (1 - gamma) * x, renormalised; returns the new prototype."""
    gamma = memory.gamma if gamma is None else gamma
    part, i = key
    memory.index(key)
    arr = getattr(memory, part)
    z = gamma * arr[i] + (1.0 - gamma) * np.asarray(x, dtype=np.float64)
    arr[i] = z / max(np.linalg.norm(z), 1e-12)
    memory.invalidate()
    return arr[i]


# ---------------------------------------------------------------- hard cases


def mine_hard_cases(boxes: np.ndarray, conf: np.ndarray, qualified_boxes: np.ndarray, eps_h: float = 0.8,
                    eps_p: float = 0.95, dup_thresh: float = 0.5) -> np.ndarray:
    """Indices with confidence strictly inside (eps_h, eps_p) that do not duplicate a qualified box."""
    if not eps_h < eps_p:
        raise ValueError("eps_h must be below eps_p")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    conf = np.asarray(conf, dtype=np.float64)
    band = (conf > eps_h) & (conf < eps_p)
    if len(qualified_boxes):
        band &= iou_matrix(boxes, qualified_boxes).max(axis=1) <= dup_thresh
    return np.where(band)[0]


@dataclass
class Promotion:
    moved: list[int]
    consumed: list[int]
    boxes: np.ndarray
    feats: np.ndarray


def promote_hard_cases(hard_boxes: np.ndarray, hard_feats: np.ndarray, qual_boxes: np.ndarray,
                       qual_feats: np.ndarray, match_thresh: float = 0.5, gamma: float = 0.2) -> Promotion:
    """Turn hard cases that a new qualified proposal now overlaps into memory entries.

    Each qualified proposal is assigned to its max-IOU hard case (IOU above
    ``match_thresh``).  A hard case with at least one proposal is moved; its
    box and feature get the same EMA update as a matched memory entry.
    """
    hard_boxes = np.asarray(hard_boxes, dtype=np.float64).reshape(-1, 4)
    qual_boxes = np.asarray(qual_boxes, dtype=np.float64).reshape(-1, 4)
    dim = hard_feats.shape[-1] if np.ndim(hard_feats) == 2 else 0
    if len(hard_boxes) == 0 or len(qual_boxes) == 0:
        return Promotion([], [], np.zeros((0, 4)), np.zeros((0, dim)))
    match = match_array(qual_boxes, hard_boxes, match_thresh)
    moved, consumed, out_boxes, out_feats = [], [], [], []
    for k in range(len(hard_boxes)):
        idx = match.members(k)
        if not idx:
            continue
        moved.append(k)
        consumed.extend(idx)
        out_boxes.append(gamma * hard_boxes[k] + (1.0 - gamma) * qual_boxes[idx].mean(axis=0))
        out_feats.append(gamma * hard_feats[k] + (1.0 - gamma) * np.asarray(qual_feats)[idx].mean(axis=0))
    feats = _normalize(np.array(out_feats)) if out_feats else np.zeros((0, dim))
    return Promotion(moved, sorted(consumed), np.array(out_boxes).reshape(-1, 4), feats)
