"""Asynchronous source/target training schedule.

Epochs before ``alpha`` train detection and ReID on the labeled source only
(domain alignment may already run, see ``dam_warmup``).  From ``alpha`` on,
every epoch starts with an atomic memory refresh over the target training
images:

    qualified proposals -> box/feature memory -> hard-case promotion
    -> DBSCAN -> unified memory {V, W, F, H}

after which each batch mixes source and target scenes and the total loss is

    L_det_src + L_det_tgt + L_reid + lambda_t * (L_img + L_ins + lambda_c * L_cons)
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable

import numpy as np

from . import dam, membank
from .detector import (
    POSITIVE_IOU,
    ProposalConfig,
    ProposalSet,
    detection_eval,
    detection_loss_from_trunk,
    iou_labels,
    propose,
    reid_head_indices,
)
from .geometry import iou_matrix, nms_array
from .model import (
    TrunkParams,
    det_logits,
    embed_backward,
    embed_forward,
    trunk_backward,
    trunk_forward,
)
from .netcore import NumericalError, SgdConfig, sgd_step, sigmoid
from .searcheval import build_gallery, build_queries, search_eval
from .seeding import substream
from .synthworld import SOURCE, DatasetSnapshot, Scene, render_patch_features, render_roi_features

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "l_det_src", "l_det_tgt", "l_reid", "l_img", "l_ins", "l_cons",
               "n_clusters", "n_outliers", "n_hard", "map", "top1", "recall", "ap")
LOSS_NAMES = ("l_det_src", "l_det_tgt", "l_reid", "l_img", "l_ins", "l_cons")
DYNAMIC, STATIC = "dynamic", "static"
PSEUDO, GT = "pseudo", "gt"


@dataclass
class TrainConfig:
    epochs: int = 20
    alpha: int = 4
    source_per_batch: int = 2
    target_per_batch: int = 2
    eps_p: float = 0.95
    eps_h: float = 0.8
    lambda_t: float = 0.1
    lambda_c: float = 0.1
    gamma: float = 0.2
    gamma_box: float = 0.2
    tau: float = 0.05
    match_thresh: float = 0.5
    dup_thresh: float = 0.5
    nms_thresh: float = 0.4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epoch: int = 16
    lr_decay: float = 0.1
    warmup_epochs: int = 1
    use_dam: bool = True
    dam_warmup: bool = True
    instance_mode: str = dam.TASK_SENSITIVE
    use_dc: bool = True
    use_hm: bool = True
    use_dtd: bool = True
    dtd_ignore_conf: float = 0.05
    memory_mode: str = DYNAMIC
    reid_boxes: str = PSEUDO
    eps_start: float = 0.15
    eps_end: float = 0.1
    eps_horizon: int = 10
    min_pts: int = 2
    jitter: float = 2.0
    copies: int = 4
    n_random: int = 8
    emb_dim: int = 32
    grid: int = 4
    grl_mu: float = 1.0
    eval_every: int = 1
    seed: int = 0

    def validate(self):
        if not 0 <= self.alpha <= self.epochs:
            raise ValueError("alpha must lie in [0, epochs]")
        for name in ("eps_p", "eps_h", "match_thresh", "dup_thresh", "nms_thresh"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not self.eps_h < self.eps_p:
            raise ValueError("eps_h must be below eps_p")
        if self.instance_mode not in (dam.TASK_SENSITIVE, dam.NORMAL):
            raise ValueError(f"instance_mode must be '{dam.TASK_SENSITIVE}' or '{dam.NORMAL}'")
        if self.memory_mode not in (DYNAMIC, STATIC):
            raise ValueError(f"memory_mode must be '{DYNAMIC}' or '{STATIC}'")
        if self.reid_boxes not in (PSEUDO, GT):
            raise ValueError(f"reid_boxes must be '{PSEUDO}' or '{GT}'")
        if (self.use_hm or self.use_dtd) and not self.use_dc:
            raise ValueError("use_hm and use_dtd need use_dc (they consume the pseudo-box memory)")
        if self.source_per_batch < 1 or self.target_per_batch < 0:
            raise ValueError("bad batch composition")

    def sgd(self) -> SgdConfig:
        return SgdConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                         decay_epochs=(self.lr_decay_epoch,), decay_factor=self.lr_decay,
                         warmup_epochs=self.warmup_epochs)

    def proposals(self) -> ProposalConfig:
        return ProposalConfig(jitter=self.jitter, copies=self.copies, n_random=self.n_random)


@dataclass
class EpochReport:
    epoch: int
    losses: dict[str, float]
    n_clusters: int = 0
    n_outliers: int = 0
    n_hard: int = 0
    n_qualified: int = 0
    n_memory: int = 0
    metrics: dict[str, float] | None = None

    def row(self) -> list[str]:
        out = [str(self.epoch)] + [f"{self.losses[k]:.6f}" for k in LOSS_NAMES]
        out += [str(self.n_clusters), str(self.n_outliers), str(self.n_hard)]
        m = self.metrics
        out += [f"{m[k]:.6f}" if m else "" for k in ("map", "top1", "recall", "ap")]
        return out


@dataclass
class TrainResult:
    model: TrunkParams
    reports: list[EpochReport]
    config: TrainConfig

    @property
    def final_metrics(self) -> dict[str, float]:
        for r in reversed(self.reports):
            if r.metrics:
                return r.metrics
        return {}


def reports_csv(reports: Iterable[EpochReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


@dataclass
class _Entry:
    """Target ReID entries of one image: boxes and the key of each entry's positive prototype."""

    boxes: np.ndarray
    keys: list[tuple[str, int]]


@dataclass
class _HardCases:
    boxes: np.ndarray
    feats: np.ndarray


@dataclass
class _SceneOut:
    losses: dict[str, float] = field(default_factory=lambda: dict.fromkeys(LOSS_NAMES, 0.0))
    updates: list[tuple[tuple[str, int], np.ndarray]] = field(default_factory=list)


def evaluate(model: TrunkParams, snapshot: DatasetSnapshot, cfg: TrainConfig) -> dict[str, float]:
    """Target test metrics: search mAP / top-1 and detection recall / AP."""
    gallery = build_gallery(snapshot.target_test, model, snapshot, cfg.proposals(), cfg.seed, cfg.nms_thresh)
    queries = build_queries(snapshot, model, cfg.seed)
    mAP, top1 = search_eval(queries, gallery)
    recall, ap = detection_eval([g.gt_boxes for g in gallery], [(g.boxes, g.confidences) for g in gallery])
    return {"map": mAP, "top1": top1, "recall": recall, "ap": ap}


class Trainer:
    def __init__(self, snapshot: DatasetSnapshot, cfg: TrainConfig):
        cfg.validate()
        if not snapshot.source_train:
            raise ValueError("snapshot has no source training scenes")
        if not snapshot.target_train:
            raise ValueError("snapshot has no target training scenes")
        self.snap = snapshot
        self.cfg = cfg
        self.sgd = cfg.sgd()
        self.prop_cfg = cfg.proposals()
        self.noise = snapshot.config.render_noise
        self.model = TrunkParams.init(snapshot.dim, cfg.emb_dim, substream(cfg.seed, "init"))
        self.lam = dam.balance_lambda(len(snapshot.source_train), len(snapshot.target_train))
        src_ids = sorted({int(i) for sc in snapshot.source_train for i in sc.identities})
        self.src_row = {ident: r for r, ident in enumerate(src_ids)}
        self.box_memory: dict[str, membank.ImageMemory] = {}
        self.hard: dict[str, _HardCases] = {}
        self.entries: dict[str, _Entry] = {}
        self.memory: membank.UnifiedMemory | None = None
        self.source_protos = self._init_source_protos()

    # ------------------------------------------------------------ helpers

    def _texture(self, scene: Scene) -> np.ndarray:
        return self.snap.domain(scene.domain).texture

    def _init_source_protos(self) -> np.ndarray:
        """Centre the ReID layer on source people, then average embeddings per identity."""
        hs, rows = [], []
        for sc in self.snap.source_train:
            raw = render_roi_features(sc, sc.boxes, self._texture(sc), self.noise,
                                      substream(self.cfg.seed, "proto-init", sc.scene_id))
            hs.append(trunk_forward(self.model, raw)[0])
            rows.extend(self.src_row[int(i)] for i in sc.identities)
        h = np.vstack(hs)
        reid = self.model.reid
        reid.bias = -(reid.weight @ h.mean(axis=0))
        emb = embed_forward(self.model, h)[0]
        sums = np.zeros((len(self.src_row), self.model.emb))
        np.add.at(sums, np.array(rows), emb)
        return membank._normalize(sums)

    def _dam_active(self, epoch: int) -> bool:
        return self.cfg.use_dam and (epoch >= self.cfg.alpha or self.cfg.dam_warmup)

    def _target_active(self, epoch: int) -> bool:
        return self.cfg.use_dc and epoch >= self.cfg.alpha

    def _propose(self, scene: Scene, *stream) -> ProposalSet:
        return propose(scene, self.snap.domain(scene.domain), self.prop_cfg,
                       substream(self.cfg.seed, *stream, scene.scene_id), self.noise)

    # ------------------------------------------------------------ memory refresh

    def refresh_memory(self, epoch: int) -> dict[str, int]:
        """Start-of-epoch update: match, EMA, promote, cluster, rebuild.  Builds new
        state off to the side and swaps it in at the end."""
        cfg = self.cfg
        box_memory = {k: membank.ImageMemory(v.boxes.copy(), None if v.feats is None else v.feats.copy(),
                                             v.last_matched.copy()) for k, v in self.box_memory.items()}
        new_hard: dict[str, _HardCases] = {}
        reid_sets: list[tuple[str, np.ndarray, np.ndarray]] = []
        n_qualified = 0
        for sc in self.snap.target_train:
            props = self._propose(sc, "refresh", epoch)
            h, _ = trunk_forward(self.model, props.raw)
            conf = sigmoid(det_logits(self.model, h))
            emb = embed_forward(self.model, h)[0]
            keep = nms_array(props.boxes, conf, cfg.nms_thresh)
            qual = keep[conf[keep] >= cfg.eps_p]
            n_qualified += len(qual)
            mem = box_memory.setdefault(sc.scene_id, membank.ImageMemory())
            if cfg.memory_mode == STATIC:
                mem.boxes, mem.feats = props.boxes[qual].copy(), emb[qual].copy()
                mem.last_matched = np.full(len(qual), epoch, dtype=np.int64)
            else:
                q_boxes, q_feats = props.boxes[qual], emb[qual]
                promo = None
                prev = self.hard.get(sc.scene_id)
                if prev is not None and len(prev.boxes) and len(q_boxes):
                    fresh = membank.match_array(q_boxes, mem.boxes, cfg.match_thresh).new
                    promo = membank.promote_hard_cases(prev.boxes, prev.feats, q_boxes[fresh], q_feats[fresh],
                                                       cfg.match_thresh, cfg.gamma)
                    consumed = {fresh[j] for j in promo.consumed}
                    rest = [j for j in range(len(q_boxes)) if j not in consumed]
                    q_boxes, q_feats = q_boxes[rest], q_feats[rest]
                membank.refresh_image_memory(mem, q_boxes, q_feats, epoch, cfg.match_thresh, cfg.gamma_box)
                if promo is not None:
                    membank.append_entries(mem, promo.boxes, promo.feats, epoch)
            if cfg.use_hm:
                hidx = keep[membank.mine_hard_cases(props.boxes[keep], conf[keep], props.boxes[qual],
                                                    cfg.eps_h, cfg.eps_p, cfg.dup_thresh)]
                if len(hidx):
                    new_hard[sc.scene_id] = _HardCases(props.boxes[hidx].copy(), emb[hidx].copy())
            if cfg.reid_boxes == GT:
                raw = render_roi_features(sc, sc.boxes, self._texture(sc), self.noise,
                                          substream(cfg.seed, "gt-embed", epoch, sc.scene_id))
                reid_sets.append((sc.scene_id, sc.boxes, embed_forward(self.model, trunk_forward(self.model, raw)[0])[0]))
            elif len(mem):
                # cluster on current-model features, not the stored running averages
                raw = render_roi_features(sc, mem.boxes, self._texture(sc), self.noise,
                                          substream(cfg.seed, "memory-embed", epoch, sc.scene_id))
                reid_sets.append((sc.scene_id, mem.boxes, embed_forward(self.model, trunk_forward(self.model, raw)[0])[0]))

        feats = np.vstack([f for _, _, f in reid_sets]) if reid_sets else np.zeros((0, self.model.emb))
        eps = membank.self_paced_eps(epoch - cfg.alpha, cfg.eps_start, cfg.eps_end, cfg.eps_horizon)
        clusters = membank.dbscan(feats, eps, cfg.min_pts)
        keys = membank.target_keys(clusters)
        entries, start = {}, 0
        for sid, boxes, f in reid_sets:
            entries[sid] = _Entry(boxes.copy(), keys[start:start + len(f)])
            start += len(f)
        hard_feats = np.vstack([hc.feats for hc in new_hard.values()]) if new_hard else None
        memory = membank.build_unified_memory(self.source_protos, clusters, feats, hard_feats, cfg.tau, cfg.gamma)

        # atomic swap
        self.box_memory, self.hard, self.entries, self.memory = box_memory, new_hard, entries, memory
        return {"n_clusters": clusters.n_clusters, "n_outliers": clusters.n_outliers,
                "n_hard": memory.sizes["H"], "n_qualified": n_qualified, "n_memory": len(feats)}

    # ------------------------------------------------------------ per-scene step

    def _scene_step(self, sc: Scene, epoch: int, weight: float) -> _SceneOut:
        cfg, model = self.cfg, self.model
        out = _SceneOut()
        is_src = sc.domain == SOURCE
        target_on = self._target_active(epoch)
        if not is_src and not target_on and not self._dam_active(epoch):
            return out
        props = self._propose(sc, "proposals", epoch)
        X = props.raw
        h, pre = trunk_forward(model, X)
        dh = np.zeros_like(h)

        # detection
        supervision = None
        if is_src:
            supervision = sc.boxes
        elif target_on and cfg.use_dtd:
            mem = self.box_memory.get(sc.scene_id)
            if mem is not None and len(mem):
                supervision = mem.boxes
        if supervision is not None:
            labels = iou_labels(props.boxes, supervision)
            conf = sigmoid(det_logits(model, h))
            use = np.ones(len(X), dtype=bool)
            if not is_src:
                # unlabeled people look like background here; skip confident negatives
                use = (labels > 0) | (conf < cfg.dtd_ignore_conf)
            loss, _, g = detection_loss_from_trunk(model, h[use], labels[use], weight)
            dh[use] += g
            out.losses["l_det_src" if is_src else "l_det_tgt"] = loss
        else:
            conf = sigmoid(det_logits(model, h))

        # ReID instances: proposals overlapping a supervising box inherit its key
        reid_idx = np.zeros(0, dtype=np.int64)
        pos_rows = np.zeros(0, dtype=np.int64)
        memory = self.memory
        if is_src:
            ov = iou_matrix(props.boxes, sc.boxes)
            best = ov.argmax(axis=1) if sc.n_instances else np.zeros(len(X), dtype=np.int64)
            ok = ov[np.arange(len(X)), best] >= POSITIVE_IOU if sc.n_instances else np.zeros(len(X), bool)
            reid_idx = np.where(ok)[0]
            pos_rows = np.array([self.src_row[int(sc.identities[best[i]])] for i in reid_idx], dtype=np.int64)
            keys = [("V", int(r)) for r in pos_rows]
        elif target_on and memory is not None and sc.scene_id in self.entries:
            ent = self.entries[sc.scene_id]
            ov = iou_matrix(props.boxes, ent.boxes)
            best = ov.argmax(axis=1)
            reid_idx = np.where(ov[np.arange(len(X)), best] >= POSITIVE_IOU)[0]
            keys = [ent.keys[best[i]] for i in reid_idx]
        else:
            keys = []

        dam_on = self._dam_active(epoch)
        k2 = reid_head_indices(props.boxes, conf, cfg.nms_thresh) if dam_on else np.zeros(0, dtype=np.int64)
        emb_idx = np.union1d(reid_idx, k2).astype(np.int64)
        if len(emb_idx):
            xe, norms = embed_forward(model, h[emb_idx])
            dxe = np.zeros_like(xe)
            where = {int(j): r for r, j in enumerate(emb_idx)}

        if len(reid_idx):
            if memory is None:
                bank = self.source_protos
                pos = pos_rows
            else:
                bank = memory.bank()
                pos = np.array([memory.index(k) for k in keys], dtype=np.int64)
            rows = np.array([where[int(j)] for j in reid_idx])
            losses, grad = membank.memory_loss_batch(xe[rows], pos, bank, cfg.tau)
            out.losses["l_reid"] = float(losses.mean())
            dxe[rows] += weight * grad / len(rows)
            key_list = keys if memory is not None else [("V", int(r)) for r in pos_rows]
            out.updates.extend((k, xe[r].copy()) for k, r in zip(key_list, rows))

        if dam_on:
            w = weight * cfg.lambda_t
            patches = render_patch_features(sc, cfg.grid, self._texture(sc), self.noise,
                                            substream(cfg.seed, "patches", epoch, sc.scene_id)).reshape(-1, X.shape[1])
            hp, prep = trunk_forward(model, patches)
            l_img, _, dhp = dam.image_align_loss(hp, sc.domain, model.dom_img, w, cfg.grl_mu)
            trunk_backward(model, patches, prep, dhp)
            k2_rows = np.array([where[int(j)] for j in k2], dtype=np.int64)
            xk2 = xe[k2_rows] if len(k2) else np.zeros((0, model.emb))
            l_ins, _, _, g_det, g_reid = dam.instance_align_loss(
                h, xk2, sc.domain, self.lam, model.dom_det, model.dom_reid, w, cfg.grl_mu, cfg.instance_mode)
            dh += g_det
            if len(k2):
                dxe[k2_rows] += g_reid
            l_cons = dam.consistency_reg(hp, h, xk2, model.dom_img, model.dom_det, model.dom_reid,
                                         w * cfg.lambda_c)
            out.losses.update(l_img=l_img, l_ins=l_ins, l_cons=l_cons)

        if len(emb_idx):
            dh[emb_idx] += embed_backward(model, h[emb_idx], xe, norms, dxe)
        trunk_backward(model, X, pre, dh)
        return out

    # ------------------------------------------------------------ epoch loop

    def _batches(self, epoch: int) -> list[list[Scene]]:
        cfg = self.cfg
        src = [self.snap.source_train[i] for i in substream(cfg.seed, "batching", epoch, "s").permutation(
            len(self.snap.source_train))]
        tgt = [self.snap.target_train[i] for i in substream(cfg.seed, "batching", epoch, "t").permutation(
            len(self.snap.target_train))]
        n_batches = max(math.ceil(len(src) / cfg.source_per_batch),
                        math.ceil(len(tgt) / cfg.target_per_batch) if cfg.target_per_batch else 0)
        batches = []
        for b in range(n_batches):
            batch = [src[(b * cfg.source_per_batch + i) % len(src)] for i in range(cfg.source_per_batch)]
            batch += [tgt[(b * cfg.target_per_batch + i) % len(tgt)] for i in range(cfg.target_per_batch)]
            batches.append(batch)
        return batches

    def run_epoch(self, epoch: int) -> EpochReport:
        cfg = self.cfg
        stats = {"n_clusters": 0, "n_outliers": 0, "n_hard": 0, "n_qualified": 0, "n_memory": 0}
        if self._target_active(epoch):
            stats = self.refresh_memory(epoch)
        totals = dict.fromkeys(LOSS_NAMES, 0.0)
        batches = self._batches(epoch)
        for step, batch in enumerate(batches):
            weight = 1.0 / len(batch)
            updates = []
            for sc in batch:
                res = self._scene_step(sc, epoch, weight)
                for k, v in res.losses.items():
                    if not math.isfinite(v):
                        raise NumericalError(f"epoch {epoch}: non-finite {k} on scene {sc.scene_id}")
                    totals[k] += v * weight
                updates.extend(res.updates)
            sgd_step(self.model.blocks(), self.sgd, self.sgd.lr_at(epoch, step, len(batches)))
            self._apply_momentum(updates)
        losses = {k: v / len(batches) for k, v in totals.items()}
        metrics = None
        if (epoch + 1) % max(cfg.eval_every, 1) == 0 or epoch == cfg.epochs - 1:
            metrics = evaluate(self.model, self.snap, cfg)
        return EpochReport(epoch, losses, metrics=metrics, **stats)

    def _apply_momentum(self, updates: list[tuple[tuple[str, int], np.ndarray]]):
        if self.memory is None:
            for (_, r), x in updates:
                z = self.cfg.gamma * self.source_protos[r] + (1.0 - self.cfg.gamma) * x
                self.source_protos[r] = z / max(np.linalg.norm(z), 1e-12)
            return
        for key, x in updates:
            membank.momentum_update(self.memory, key, x, self.cfg.gamma)
        self.source_protos = self.memory.V

    def run(self, progress: Callable[[EpochReport], None] | None = None) -> TrainResult:
        reports = []
        for epoch in range(self.cfg.epochs):
            rep = self.run_epoch(epoch)
            reports.append(rep)
            if progress:
                progress(rep)
        return TrainResult(self.model, reports, self.cfg)


def run_training(snapshot: DatasetSnapshot, cfg: TrainConfig | None = None,
                 progress: Callable[[EpochReport], None] | None = None) -> TrainResult:
    return Trainer(snapshot, cfg or TrainConfig()).run(progress)


# ---------------------------------------------------------------- ablations

BASELINE = {"use_dam": False, "use_dc": False, "use_hm": False, "use_dtd": False}
COMPONENTS = {
    "DAM": {"use_dam": True},
    "DC": {"use_dc": True},
    "HM": {"use_dc": True, "use_hm": True},
    "DTD": {"use_dc": True, "use_dtd": True},
}
FLAG_OVERRIDES = {
    "normal": {"instance_mode": dam.NORMAL},
    "static": {"memory_mode": STATIC},
    "gt": {"reid_boxes": GT},
}


def cell_overrides(flags: Iterable[str]) -> dict:
    """Config overrides for a set of component flags, e.g. ``{"DAM", "DC"}``."""
    out = dict(BASELINE)
    for f in flags:
        if f in COMPONENTS:
            out.update(COMPONENTS[f])
        elif f in FLAG_OVERRIDES:
            out.update(FLAG_OVERRIDES[f])
        else:
            raise ValueError(f"unknown component flag {f!r}")
    return out


PRESET_GRIDS: dict[str, dict[str, dict]] = {
    "components": {
        "baseline": cell_overrides([]),
        "DAM": cell_overrides(["DAM"]),
        "DC": cell_overrides(["DC"]),
        "DAM+DC": cell_overrides(["DAM", "DC"]),
        "DAM+DC+HM": cell_overrides(["DAM", "DC", "HM"]),
        "DAM+DC+DTD": cell_overrides(["DAM", "DC", "DTD"]),
        "full": cell_overrides(["DAM", "DC", "HM", "DTD"]),
    },
    "instance-mode": {
        "normal": cell_overrides(["DAM", "normal"]),
        "task-sensitive": cell_overrides(["DAM"]),
    },
    "memory-mode": {
        "gt": cell_overrides(["DAM", "DC", "HM", "DTD", "gt"]),
        "static": cell_overrides(["DAM", "DC", "HM", "DTD", "static"]),
        "dynamic": cell_overrides(["DAM", "DC", "HM", "DTD"]),
    },
    "alpha": {f"alpha={a}": {**cell_overrides(["DAM", "DC", "HM", "DTD"]), "alpha": a} for a in (0, 4, 8, 10)},
    # eps_h must stay below eps_p, so it drops with the lowest sweep value
    "eps_p": {f"eps_p={e:.2f}": {**cell_overrides(["DAM", "DC", "HM", "DTD"]), "eps_p": e,
                                 "eps_h": round(min(0.8, e - 0.05), 2)}
              for e in (0.80, 0.90, 0.95, 0.99)},
}


@dataclass
class AblationRun:
    cell: str
    seed: int
    metrics: dict[str, float]
    n_qualified: int
    result: TrainResult | None = None


AGG_COLUMNS = ("cell", "n_runs", "map_mean", "map_std", "top1_mean", "top1_std", "recall_mean", "recall_std",
               "ap_mean", "ap_std", "n_qualified_mean", "n_qualified_std")


def ablate(snapshot: DatasetSnapshot | Callable[[int], DatasetSnapshot], grid: dict[str, dict],
           seeds: Iterable[int], base: TrainConfig | None = None, keep_results: bool = False,
           on_run: Callable[[AblationRun], None] | None = None) -> list[AblationRun]:
    """One training run per (cell, seed); ``snapshot`` may be a seed -> snapshot factory."""
    if not grid:
        raise ValueError("empty ablation grid")
    base = base or TrainConfig()
    runs = []
    for seed in seeds:
        snap = snapshot(seed) if callable(snapshot) else snapshot
        for name, overrides in grid.items():
            cfg = replace(base, **overrides, seed=seed)
            res = run_training(snap, cfg)
            last = res.reports[-1]
            run = AblationRun(name, seed, res.final_metrics, last.n_qualified, res if keep_results else None)
            runs.append(run)
            if on_run:
                on_run(run)
    return runs


def aggregate(runs: list[AblationRun]) -> list[dict]:
    """Mean and population std per cell, cells in first-seen order."""
    cells: dict[str, list[AblationRun]] = {}
    for r in runs:
        cells.setdefault(r.cell, []).append(r)
    rows = []
    for name, rs in cells.items():
        row = {"cell": name, "n_runs": len(rs)}
        for k in ("map", "top1", "recall", "ap"):
            vals = np.array([r.metrics[k] for r in rs])
            row[f"{k}_mean"], row[f"{k}_std"] = float(vals.mean()), float(vals.std())
        q = np.array([r.n_qualified for r in rs], dtype=np.float64)
        row["n_qualified_mean"], row["n_qualified_std"] = float(q.mean()), float(q.std())
        rows.append(row)
    return rows


def aggregate_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(AGG_COLUMNS)
    for row in rows:
        writer.writerow([row["cell"], row["n_runs"]] + [f"{row[c]:.6f}" for c in AGG_COLUMNS[2:]])
    return buf.getvalue()


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def config_fields() -> dict[str, type]:
    return {f.name: f.type for f in fields(TrainConfig)}
