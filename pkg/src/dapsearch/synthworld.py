"""Synthetic two-domain person-search world.

A scene is a canvas holding person instances (identity + box) and a few
textured clutter regions.  Instead of pixels we model the pooled ROI feature
directly: a box sees every instance in proportion to its IOU with it, the
uncovered remainder sees the domain's background texture, and a render-time
Gaussian is added on top.

Snapshots are stored as JSON Lines: a header line, then one scene per line.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .geometry import iou_matrix
from .seeding import substream

SOURCE, TARGET = 0, 1
SPLITS = ("source_train", "target_train", "target_test")
FORMAT_VERSION = 1


class SnapshotFormatError(ValueError):
    """Malformed snapshot file; the message names the offending line."""


def round9(x):
    """Round to 9 significant digits so values survive the text format exactly."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return float(f"{float(arr):.9g}")
    flat = np.array([float(f"{v:.9g}") for v in arr.ravel()], dtype=np.float64)
    return flat.reshape(arr.shape)


@dataclass
class WorldConfig:
    n_source_scenes: int = 60
    n_target_scenes: int = 50
    n_test_scenes: int = 40
    n_source_ids: int = 24
    n_target_ids: int = 24
    n_test_ids: int = 16
    min_instances: int = 1
    max_instances: int = 3
    max_distractors: int = 2
    dim: int = 16
    canvas_w: float = 128.0
    canvas_h: float = 80.0
    # identity latents are normalize(person_axis + id_spread * g / sqrt(dim)), g in the non-nuisance span
    id_spread: float = 3.0
    clutter_personness: float = 0.6
    source_box_w: float = 16.0
    source_box_h: float = 36.0
    target_box_w: float = 10.0
    target_box_h: float = 22.0
    box_spread: float = 0.12
    source_noise: float = 0.05
    target_noise: float = 0.05
    render_noise: float = 0.05
    target_shift: float = 0.6
    # directions that carry no source content; the target cast lives here
    nuisance_dims: int = 4
    target_condition: float = 4.0
    max_condition: float = 10.0
    texture_norm: float = 0.6

    def validate(self):
        if min(self.n_source_ids, self.n_target_ids, self.n_test_ids) <= 0:
            raise ValueError("every domain needs at least one identity")
        if self.dim < 2:
            raise ValueError("dim must be at least 2")
        if not 0 <= self.nuisance_dims <= self.dim - 2:
            raise ValueError("nuisance_dims must lie in [0, dim - 2]")
        if min(self.n_source_scenes, self.n_target_scenes, self.n_test_scenes) < 0:
            raise ValueError("scene counts must be non-negative")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("need 1 <= min_instances <= max_instances")
        if self.target_condition > self.max_condition or self.target_condition < 1.0:
            raise ValueError("target_condition must lie in [1, max_condition]")
        for name in ("source_noise", "target_noise", "render_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class IdentityBank:
    latents: dict[int, np.ndarray]

    def __eq__(self, other):
        return (isinstance(other, IdentityBank) and self.latents.keys() == other.latents.keys()
                and all(np.array_equal(v, other.latents[k]) for k, v in self.latents.items()))


@dataclass
class DomainModel:
    domain: int
    transform: np.ndarray
    shift: np.ndarray
    noise: float
    texture: np.ndarray
    box_w: float
    box_h: float
    box_spread: float

    def appearance(self, latent: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.transform @ latent + self.shift + rng.normal(0.0, self.noise, size=latent.shape)

    def __eq__(self, other):
        if not isinstance(other, DomainModel):
            return NotImplemented
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


@dataclass
class Scene:
    scene_id: str
    domain: int
    width: float
    height: float
    boxes: np.ndarray
    identities: np.ndarray
    appearances: np.ndarray
    clutter_boxes: np.ndarray
    clutter_appearances: np.ndarray

    @property
    def n_instances(self) -> int:
        return len(self.identities)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


@dataclass
class DatasetSnapshot:
    config: WorldConfig
    bank: IdentityBank
    domains: tuple[DomainModel, DomainModel]
    source_train: list[Scene]
    target_train: list[Scene]
    target_test: list[Scene]
    # (scene index within target_test, instance index)
    queries: list[tuple[int, int]] = field(default_factory=list)

    def domain(self, d: int) -> DomainModel:
        return self.domains[d]

    @property
    def dim(self) -> int:
        return self.config.dim

    def __eq__(self, other):
        if not isinstance(other, DatasetSnapshot):
            return NotImplemented
        return (self.config == other.config and self.bank == other.bank
                and list(self.domains) == list(other.domains)
                and all(getattr(self, s) == getattr(other, s) for s in SPLITS)
                and [tuple(q) for q in self.queries] == [tuple(q) for q in other.queries])


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _identity_part(basis: np.ndarray, cfg: WorldConfig, v: np.ndarray) -> np.ndarray:
    """Projection of ``v`` onto the span of the first ``dim - nuisance_dims`` basis columns."""
    ident = basis[:, :cfg.dim - cfg.nuisance_dims]
    return ident @ (ident.T @ v)


def _sample_domain(cfg: WorldConfig, d: int, rng: np.random.Generator, basis: np.ndarray) -> DomainModel:
    """``basis[:, 0]`` is the person axis; the last ``nuisance_dims`` columns are nuisance."""
    D = cfg.dim
    if d == SOURCE:
        transform = np.eye(D)
        shift = np.zeros(D)
        noise, bw, bh = cfg.source_noise, cfg.source_box_w, cfg.source_box_h
    else:
        # keep the person axis and the nuisance block, stretch the rest of the identity subspace
        n_id = D - cfg.nuisance_dims - 1
        sv = np.geomspace(np.sqrt(cfg.target_condition), 1.0 / np.sqrt(cfg.target_condition), n_id)
        scale = np.concatenate([[1.0], sv, np.ones(cfg.nuisance_dims)])
        transform = basis @ np.diag(scale) @ basis.T
        if cfg.nuisance_dims:
            direction = basis[:, D - cfg.nuisance_dims:] @ rng.normal(size=cfg.nuisance_dims)
        else:
            direction = rng.normal(size=D)
        shift = cfg.target_shift * _unit(direction)
        noise, bw, bh = cfg.target_noise, cfg.target_box_w, cfg.target_box_h
    # shared background texture plus the domain's global cast
    texture = basis[:, 1] * cfg.texture_norm + shift
    return DomainModel(d, round9(transform), round9(shift), float(noise), round9(texture),
                       float(bw), float(bh), float(cfg.box_spread))


def _place_boxes(rng: np.random.Generator, n: int, dom: DomainModel, cfg: WorldConfig,
                 avoid: np.ndarray | None = None) -> np.ndarray:
    placed: list[np.ndarray] = [] if avoid is None else list(avoid)
    n_fixed = len(placed)
    for _ in range(n):
        for _attempt in range(50):
            w = dom.box_w * np.exp(rng.normal(0.0, dom.box_spread))
            h = dom.box_h * np.exp(rng.normal(0.0, dom.box_spread))
            w, h = min(w, cfg.canvas_w - 2), min(h, cfg.canvas_h - 2)
            x1 = rng.uniform(0.0, cfg.canvas_w - w)
            y1 = rng.uniform(0.0, cfg.canvas_h - h)
            cand = np.array([x1, y1, x1 + w, y1 + h])
            if not placed or iou_matrix(cand, np.array(placed)).max() < 0.05:
                break
        placed.append(cand)
    return round9(np.array(placed[n_fixed:]).reshape(-1, 4))


def _make_scene(scene_id: str, dom: DomainModel, ids: np.ndarray, bank: IdentityBank,
                basis: np.ndarray, cfg: WorldConfig, rng: np.random.Generator) -> Scene:
    boxes = _place_boxes(rng, len(ids), dom, cfg)
    apps = np.array([dom.appearance(bank.latents[int(i)], rng) for i in ids]).reshape(-1, cfg.dim)
    n_clutter = int(rng.integers(0, cfg.max_distractors + 1))
    cboxes = _place_boxes(rng, n_clutter, dom, cfg, avoid=boxes)
    clutter = []
    for _ in range(n_clutter):
        g = _identity_part(basis, cfg, rng.normal(size=cfg.dim))
        latent = _unit(cfg.clutter_personness * basis[:, 0] + g / np.sqrt(cfg.dim))
        clutter.append(dom.appearance(latent, rng))
    capps = np.array(clutter).reshape(-1, cfg.dim)
    return Scene(scene_id, dom.domain, float(cfg.canvas_w), float(cfg.canvas_h), boxes,
                 np.asarray(ids, dtype=np.int64), round9(apps), cboxes, round9(capps))


def _scenes_for_split(prefix: str, n_scenes: int, pool: np.ndarray, dom: DomainModel, bank: IdentityBank,
                      basis: np.ndarray, cfg: WorldConfig, rng: np.random.Generator) -> list[Scene]:
    scenes = []
    for s in range(n_scenes):
        k = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
        k = min(k, len(pool))
        ids = np.sort(rng.choice(pool, size=k, replace=False))
        scenes.append(_make_scene(f"{prefix}{s:04d}", dom, ids, bank, basis, cfg, rng))
    return scenes


def _pick_queries(scenes: list[Scene], rng: np.random.Generator) -> list[tuple[int, int]]:
    where: dict[int, list[tuple[int, int]]] = {}
    for si, sc in enumerate(scenes):
        for ii, ident in enumerate(sc.identities):
            where.setdefault(int(ident), []).append((si, ii))
    queries = []
    for ident in sorted(where):
        occ = where[ident]
        if len({si for si, _ in occ}) >= 2:
            queries.append(occ[int(rng.integers(len(occ)))])
    return queries


def generate_dataset(config: WorldConfig | None = None, seed: int = 0) -> DatasetSnapshot:
    """Deterministically sample a full snapshot for ``seed``."""
    cfg = config or WorldConfig()
    cfg.validate()
    rng = substream(seed, "datagen")
    D = cfg.dim
    basis, _ = np.linalg.qr(rng.normal(size=(D, D)))
    person_axis = basis[:, 0]
    domains = (_sample_domain(cfg, SOURCE, rng, basis), _sample_domain(cfg, TARGET, rng, basis))

    pools = []
    latents: dict[int, np.ndarray] = {}
    offset = 0
    for n in (cfg.n_source_ids, cfg.n_target_ids, cfg.n_test_ids):
        ids = np.arange(offset, offset + n)
        for i in ids:
            g = _identity_part(basis, cfg, rng.normal(size=D))
            latents[int(i)] = round9(_unit(person_axis + cfg.id_spread * g / np.sqrt(D)))
        pools.append(ids)
        offset += 1000 * ((n // 1000) + 1)
    bank = IdentityBank(latents)

    source = _scenes_for_split("s", cfg.n_source_scenes, pools[0], domains[SOURCE], bank, basis, cfg, rng)
    target = _scenes_for_split("t", cfg.n_target_scenes, pools[1], domains[TARGET], bank, basis, cfg, rng)
    test = _scenes_for_split("q", cfg.n_test_scenes, pools[2], domains[TARGET], bank, basis, cfg, rng)
    queries = _pick_queries(test, rng)
    return DatasetSnapshot(cfg, bank, domains, source, target, test, queries)


def render_roi_features(scene: Scene, boxes: np.ndarray, texture: np.ndarray, noise: float = 0.0,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Pooled features for an ``(n, 4)`` array of boxes in ``scene``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    D = len(texture)
    out = np.zeros((len(boxes), D))
    if len(boxes) == 0:
        return out
    coverage = np.zeros(len(boxes))
    if scene.n_instances:
        w = iou_matrix(boxes, scene.boxes)
        out += w @ scene.appearances
        coverage = w.max(axis=1)
    if len(scene.clutter_boxes):
        out += iou_matrix(boxes, scene.clutter_boxes) @ scene.clutter_appearances
    out += (1.0 - coverage)[:, None] * texture[None, :]
    if noise > 0 and rng is not None:
        out += rng.normal(0.0, noise, size=out.shape)
    return out


def render_roi_feature(scene: Scene, box, texture: np.ndarray, noise: float = 0.0,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    arr = box.as_array() if hasattr(box, "as_array") else np.asarray(box, dtype=np.float64)
    return render_roi_features(scene, arr[None, :], texture, noise, rng)[0]


def patch_boxes(scene: Scene, grid: int) -> np.ndarray:
    """Grid cells in row-major order; cell ``(r, c)`` is row ``r`` (y) and column ``c`` (x)."""
    if grid < 1:
        raise ValueError("grid must be >= 1")
    xs = np.linspace(0.0, scene.width, grid + 1)
    ys = np.linspace(0.0, scene.height, grid + 1)
    return np.array([[xs[c], ys[r], xs[c + 1], ys[r + 1]] for r in range(grid) for c in range(grid)])


def render_patch_features(scene: Scene, grid: int, texture: np.ndarray, noise: float = 0.0,
                          rng: np.random.Generator | None = None) -> np.ndarray:
    feats = render_roi_features(scene, patch_boxes(scene, grid), texture, noise, rng)
    return feats.reshape(grid, grid, -1)


# ---------------------------------------------------------------- JSON Lines


def _scene_record(scene: Scene, split: str) -> dict:
    return {
        "id": scene.scene_id,
        "split": split,
        "domain": scene.domain,
        "w": scene.width,
        "h": scene.height,
        "instances": [
            {"identity": int(i), "box": b.tolist(), "appearance": a.tolist()}
            for i, b, a in zip(scene.identities, scene.boxes, scene.appearances)
        ],
        "distractors": [
            {"box": b.tolist(), "appearance": a.tolist()}
            for b, a in zip(scene.clutter_boxes, scene.clutter_appearances)
        ],
    }


def _domain_record(dom: DomainModel) -> dict:
    return {
        "domain": dom.domain,
        "transform": dom.transform.tolist(),
        "shift": dom.shift.tolist(),
        "noise": dom.noise,
        "texture": dom.texture.tolist(),
        "box_w": dom.box_w,
        "box_h": dom.box_h,
        "box_spread": dom.box_spread,
    }


def _fmt(obj) -> str:
    # reals carry at most 9 significant digits by construction; repr keeps them exact
    return json.dumps(obj, separators=(",", ":"))


def snapshot_lines(snap: DatasetSnapshot) -> list[str]:
    header = {
        "format": "dapsearch-snapshot",
        "version": FORMAT_VERSION,
        "dim": snap.dim,
        "config": asdict(snap.config),
        "domains": [_domain_record(d) for d in snap.domains],
        "identities": {str(k): v.tolist() for k, v in sorted(snap.bank.latents.items())},
        "queries": [list(q) for q in snap.queries],
        "counts": {s: len(getattr(snap, s)) for s in SPLITS},
    }
    lines = [_fmt(header)]
    for split in SPLITS:
        lines.extend(_fmt(_scene_record(sc, split)) for sc in getattr(snap, split))
    return lines


def snapshot_bytes(snap: DatasetSnapshot) -> bytes:
    return ("\n".join(snapshot_lines(snap)) + "\n").encode("utf-8")


def snapshot_hash(snap: DatasetSnapshot) -> str:
    return hashlib.sha256(snapshot_bytes(snap)).hexdigest()


def save_snapshot(snap: DatasetSnapshot, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(snapshot_bytes(snap))
    return path


def _parse_scene(rec: dict, dim: int) -> Scene:
    inst = rec["instances"]
    dist = rec.get("distractors", [])
    return Scene(
        scene_id=str(rec["id"]),
        domain=int(rec["domain"]),
        width=float(rec["w"]),
        height=float(rec["h"]),
        boxes=np.array([r["box"] for r in inst], dtype=np.float64).reshape(-1, 4),
        identities=np.array([r["identity"] for r in inst], dtype=np.int64),
        appearances=np.array([r["appearance"] for r in inst], dtype=np.float64).reshape(-1, dim),
        clutter_boxes=np.array([r["box"] for r in dist], dtype=np.float64).reshape(-1, 4),
        clutter_appearances=np.array([r["appearance"] for r in dist], dtype=np.float64).reshape(-1, dim),
    )


def _parse_domain(rec: dict) -> DomainModel:
    return DomainModel(int(rec["domain"]), np.array(rec["transform"], dtype=np.float64),
                       np.array(rec["shift"], dtype=np.float64), float(rec["noise"]),
                       np.array(rec["texture"], dtype=np.float64), float(rec["box_w"]),
                       float(rec["box_h"]), float(rec["box_spread"]))


def parse_snapshot(text: str) -> DatasetSnapshot:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise SnapshotFormatError("line 1: missing header")
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise SnapshotFormatError(f"line {lineno}: {exc.msg} (column {exc.colno})") from None
    lineno, header = records[0]
    try:
        if header.get("format") != "dapsearch-snapshot":
            raise SnapshotFormatError(f"line {lineno}: not a snapshot header")
        dim = int(header["dim"])
        config = WorldConfig(**header["config"])
        domains = tuple(_parse_domain(r) for r in header["domains"])
        bank = IdentityBank({int(k): np.array(v, dtype=np.float64) for k, v in header["identities"].items()})
        queries = [tuple(int(x) for x in q) for q in header["queries"]]
        counts = header["counts"]
    except SnapshotFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SnapshotFormatError(f"line {lineno}: bad header ({exc})") from None
    splits: dict[str, list[Scene]] = {s: [] for s in SPLITS}
    for lineno, rec in records[1:]:
        try:
            splits[rec["split"]].append(_parse_scene(rec, dim))
        except (KeyError, TypeError, ValueError) as exc:
            raise SnapshotFormatError(f"line {lineno}: bad scene record ({exc})") from None
    for s in SPLITS:
        if len(splits[s]) != counts[s]:
            raise SnapshotFormatError(
                f"line {len(lines)}: expected {counts[s]} {s} scenes, found {len(splits[s])} (truncated file?)")
    return DatasetSnapshot(config, bank, domains, splits["source_train"], splits["target_train"],
                           splits["target_test"], queries)


def load_snapshot(path: str | Path) -> DatasetSnapshot:
    return parse_snapshot(Path(path).read_text(encoding="utf-8"))
