"""Small differentiable kernels with hand-written backward passes.

Everything is float64.  Layers operate on row batches: ``x`` has shape
``(n, in)`` and ``y = x @ W.T + b`` has shape ``(n, out)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

P_CLAMP = 1e-7


class NumericalError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class DenseParams:
    weight: np.ndarray
    bias: np.ndarray
    name: str = "dense"
    grad_w: np.ndarray = field(init=False, repr=False)
    grad_b: np.ndarray = field(init=False, repr=False)
    vel_w: np.ndarray = field(init=False, repr=False)
    vel_b: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"{self.name}: weight {self.weight.shape} / bias {self.bias.shape} mismatch")
        self.grad_w = np.zeros_like(self.weight)
        self.grad_b = np.zeros_like(self.bias)
        self.vel_w = np.zeros_like(self.weight)
        self.vel_b = np.zeros_like(self.bias)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, scale: float | None = None,
             name: str = "dense") -> "DenseParams":
        scale = 1.0 / np.sqrt(n_in) if scale is None else scale
        return cls(rng.normal(0.0, scale, size=(n_out, n_in)), np.zeros(n_out), name=name)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def zero_grad(self):
        self.grad_w.fill(0.0)
        self.grad_b.fill(0.0)

    def copy(self) -> "DenseParams":
        other = DenseParams(self.weight.copy(), self.bias.copy(), name=self.name)
        other.vel_w[...] = self.vel_w
        other.vel_b[...] = self.vel_b
        return other


def affine_forward(params: DenseParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.weight.shape[1]:
        raise ValueError(f"{params.name}: input width {x.shape[-1]} != {params.weight.shape[1]}")
    return x @ params.weight.T + params.bias


def affine_backward(params: DenseParams, x: np.ndarray, dy: np.ndarray,
                    need_dx: bool = True) -> np.ndarray | None:
    """Accumulate dW, db from upstream ``dy`` and return dx (or None)."""
    x = np.asarray(x, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape[-1] != params.weight.shape[0] or dy.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"{params.name}: upstream gradient shape {dy.shape} does not fit input {x.shape}")
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    params.grad_w += dy2.T @ x2
    params.grad_b += dy2.sum(axis=0)
    if not need_dx:
        return None
    return dy @ params.weight


def relu_forward(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_backward(z: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (z > 0.0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def binary_ce(p, d):
    """Cross entropy of probability ``p`` against label ``d``.

    Returns ``(loss, grad_logit)`` where ``grad_logit = p - d`` is the gradient
    with respect to the logit that produced ``p``.
    """
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    loss = -(d * np.log(pc) + (1.0 - d) * np.log(1.0 - pc))
    grad = p - d
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def bce_with_logits(z, d):
    """Numerically stable ``binary_ce(sigmoid(z), d)``; returns (loss, p, grad_logit)."""
    z = np.asarray(z, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    loss = np.logaddexp(0.0, z) - d * z
    p = sigmoid(z)
    return loss, p, p - d


def grad_reverse(dy, mu: float = 1.0):
    """Backward of the gradient reversal layer (its forward is the identity)."""
    if mu <= 0:
        raise ValueError("reversal strength must be positive")
    return -mu * np.asarray(dy, dtype=np.float64)


def grad_reverse_forward(x):
    return x


@dataclass
class SgdConfig:
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: tuple[int, ...] = (16,)
    decay_factor: float = 0.1
    warmup_epochs: int = 1
    warmup_start: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def lr_at(self, epoch: int, step: int = 0, steps_per_epoch: int = 1) -> float:
        """Step-decayed learning rate with a linear ramp over the warmup epochs."""
        lr = self.lr * self.decay_factor ** sum(epoch >= e for e in self.decay_epochs)
        if epoch < self.warmup_epochs:
            total = max(1, self.warmup_epochs * steps_per_epoch - 1)
            frac = (epoch * steps_per_epoch + step) / total
            lr *= self.warmup_start + (1.0 - self.warmup_start) * min(1.0, frac)
        return lr


def sgd_step(blocks: Sequence[DenseParams], cfg: SgdConfig, lr: float | None = None):
    """Momentum SGD with L2 weight decay; zeroes the gradients afterwards."""
    lr = cfg.lr if lr is None else lr
    for blk in blocks:
        if not (np.all(np.isfinite(blk.grad_w)) and np.all(np.isfinite(blk.grad_b))):
            raise NumericalError(f"non-finite gradient in parameter block '{blk.name}'")
    for blk in blocks:
        for param, grad, vel in ((blk.weight, blk.grad_w, blk.vel_w), (blk.bias, blk.grad_b, blk.vel_b)):
            vel *= cfg.momentum
            vel += grad + cfg.weight_decay * param
            param -= lr * vel
        blk.zero_grad()


def finite_diff_check(lossfn: Callable[[], tuple[float, Sequence[np.ndarray]]],
                      params: Sequence[np.ndarray], h: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``lossfn()`` evaluates the loss at the current contents of ``params`` (which
    are perturbed in place) and returns ``(loss, grads)`` with one gradient
    array per parameter array.  Relative errors use ``max(|a|, |n|, floor)``.
    """
    _, analytic = lossfn()
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    worst = 0.0
    for param, grad in zip(params, analytic):
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = lossfn()[0]
            flat[i] = orig - h
            down = lossfn()[0]
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(numeric), abs(gflat[i]), floor)
            worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst
