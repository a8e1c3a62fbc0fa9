"""Parameter blocks of the toy person-search network.

trunk:  raw ROI feature (dim) -> relu(affine) -> trunk feature (emb)
det:    trunk feature -> person logit
reid:   trunk feature -> affine -> L2-normalised embedding
dom_img / dom_det / dom_reid: logistic domain classifiers (image patches,
detection-head instances, ReID-head embeddings)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netcore import DenseParams, affine_backward, affine_forward, relu_backward, relu_forward

BLOCKS = ("trunk", "det", "reid", "dom_img", "dom_det", "dom_reid")
EMBED_EPS = 1e-12


@dataclass
class TrunkParams:
    trunk: DenseParams
    det: DenseParams
    reid: DenseParams
    dom_img: DenseParams
    dom_det: DenseParams
    dom_reid: DenseParams

    @classmethod
    def init(cls, dim: int, emb: int, rng: np.random.Generator) -> "TrunkParams":
        # row k starts as +/- e_{k mod dim}; with emb >= 2*dim the ReLU keeps both signs of every input
        base = np.array([(-1.0) ** (k // dim) * np.eye(dim)[k % dim] for k in range(emb)])
        trunk = DenseParams(base + rng.normal(0.0, 0.3 / np.sqrt(dim), size=(emb, dim)),
                            np.full(emb, 0.1), name="trunk")
        reid = DenseParams(np.eye(emb) + rng.normal(0.0, 0.3 / np.sqrt(emb), size=(emb, emb)),
                           np.zeros(emb), name="reid")
        return cls(
            trunk=trunk,
            det=DenseParams.init(emb, 1, rng, scale=0.1, name="det"),
            reid=reid,
            dom_img=DenseParams(np.zeros((1, emb)), np.zeros(1), name="dom_img"),
            dom_det=DenseParams(np.zeros((1, emb)), np.zeros(1), name="dom_det"),
            dom_reid=DenseParams(np.zeros((1, emb)), np.zeros(1), name="dom_reid"),
        )

    def blocks(self) -> list[DenseParams]:
        return [getattr(self, b) for b in BLOCKS]

    def zero_grad(self):
        for b in self.blocks():
            b.zero_grad()

    def copy(self) -> "TrunkParams":
        return TrunkParams(*(b.copy() for b in self.blocks()))

    @property
    def dim(self) -> int:
        return self.trunk.weight.shape[1]

    @property
    def emb(self) -> int:
        return self.trunk.weight.shape[0]


def trunk_forward(model: TrunkParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (trunk features, pre-activation cache)."""
    pre = affine_forward(model.trunk, x)
    return relu_forward(pre), pre


def trunk_backward(model: TrunkParams, x: np.ndarray, pre: np.ndarray, dh: np.ndarray):
    affine_backward(model.trunk, x, relu_backward(pre, dh), need_dx=False)


def det_logits(model: TrunkParams, h: np.ndarray) -> np.ndarray:
    return affine_forward(model.det, h)[..., 0]


def embed_forward(model: TrunkParams, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm ReID embeddings and their pre-normalisation norms."""
    e = affine_forward(model.reid, h)
    norms = np.maximum(np.linalg.norm(e, axis=-1), EMBED_EPS)
    return e / norms[..., None], norms


def embed_backward(model: TrunkParams, h: np.ndarray, x: np.ndarray, norms: np.ndarray,
                   dx: np.ndarray) -> np.ndarray:
    """Backprop through normalisation and the ReID layer; returns d(trunk feature)."""
    de = (dx - x * np.sum(x * dx, axis=-1, keepdims=True)) / norms[..., None]
    return affine_backward(model.reid, h, de)


def embed(model: TrunkParams, raw: np.ndarray) -> np.ndarray:
    h, _ = trunk_forward(model, raw)
    return embed_forward(model, h)[0]


# ---------------------------------------------------------------- checkpoints


def checkpoint_lines(model: TrunkParams, meta: dict | None = None) -> list[str]:
    header = {"format": "dapsearch-checkpoint", "blocks": list(BLOCKS)}
    if meta:
        header["meta"] = meta
    lines = [json.dumps(header, separators=(",", ":"))]
    for name in BLOCKS:
        blk = getattr(model, name)
        lines.append(json.dumps({"block": name, "shape": list(blk.shape),
                                 "weight": blk.weight.tolist(), "bias": blk.bias.tolist()},
                                separators=(",", ":")))
    return lines


def save_checkpoint(model: TrunkParams, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_text("\n".join(checkpoint_lines(model, meta)) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> TrunkParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    blocks = {}
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            blocks[rec["block"]] = DenseParams(np.array(rec["weight"]), np.array(rec["bias"]), name=rec["block"])
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"{path}: line {lineno}: bad checkpoint record ({exc})") from None
    missing = [b for b in BLOCKS if b not in blocks]
    if missing:
        raise ValueError(f"{path}: checkpoint missing blocks {missing}")
    return TrunkParams(**blocks)
