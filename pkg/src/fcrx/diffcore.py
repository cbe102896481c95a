"""Small numpy autodiff-free core: layers with hand-written backward passes,
the contrastive and box-regression losses, AdamW and the warmup/cosine schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
PROB_EPS = 1e-7


class ShapeError(ValueError):
    pass


@dataclass
class Param:
    """A trainable array with its gradient buffer."""

    value: np.ndarray
    grad: Optional[np.ndarray] = None
    decay: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"gradient shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def _check(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} are incompatible")


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check(x, W, "linear")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
    return x @ W + b


def linear_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Returns (dx, dW, db)."""
    if dy.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear backward: shapes {dy.shape} and {W.shape} are incompatible")
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


def dropout(x: np.ndarray, p: float, rng: Optional[np.random.Generator], training: bool = True):
    """Inverted dropout. Returns (y, mask); identity when p == 0 or not training."""
    if not training or p <= 0.0:
        return x, None
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dy: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    return dy if mask is None else dy * mask


def l2_normalize(x: np.ndarray, eps: float = 1e-12):
    """Row-wise unit vectors. Returns (y, norms)."""
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True)) + eps
    return x / norms, norms


def l2_normalize_backward(dy: np.ndarray, y: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / norms


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} are incompatible")
    return np.sum(l2_normalize(a)[0] * l2_normalize(b)[0], axis=-1)


def _logsumexp(v: np.ndarray) -> float:
    m = np.max(v)
    return float(m + np.log(np.sum(np.exp(v - m))))


@dataclass
class SupConGrads:
    image: np.ndarray
    real: np.ndarray
    fake: np.ndarray


def supcon_loss(z_img: np.ndarray, z_real: np.ndarray, z_fake: np.ndarray, tau: float = 0.07,
                include_positive: bool = False) -> tuple[float, SupConGrads]:
    """Multi-label cross-modal contrastive loss for one image.

    Every real finding embedding is pulled toward the image against the sum
    over the image's fake findings only. With ``include_positive`` the
    denominator also carries the positive term (InfoNCE form). Inputs are
    expected to be L2-normalized already.
    """
    z_img = np.asarray(z_img, dtype=np.float64)
    z_real = np.atleast_2d(np.asarray(z_real, dtype=np.float64))
    z_fake = np.atleast_2d(np.asarray(z_fake, dtype=np.float64))
    if z_fake.size == 0:
        raise ValueError("supcon_loss needs at least one fake finding")
    if z_real.size == 0:
        raise ValueError("supcon_loss needs at least one real finding")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    for name, z in (("real", z_real), ("fake", z_fake)):
        if z.shape[-1] != z_img.shape[-1]:
            raise ShapeError(f"supcon_loss: image {z_img.shape} vs {name} {z.shape}")

    s_real = z_real @ z_img / tau
    s_fake = z_fake @ z_img / tau
    n = len(s_real)
    if not include_positive:
        lse = _logsumexp(s_fake)
        loss = -float(np.mean(s_real)) + lse
        d_sr = np.full(n, -1.0 / n)
        d_sf = np.exp(s_fake - lse)
    else:
        loss = 0.0
        d_sr = np.empty(n)
        d_sf = np.zeros(len(s_fake))
        for j, s in enumerate(s_real):
            logits = np.append(s_fake, s)
            lse = _logsumexp(logits)
            p = np.exp(logits - lse)
            loss += (lse - s) / n
            d_sr[j] = (p[-1] - 1.0) / n
            d_sf += p[:-1] / n
    d_sr /= tau
    d_sf /= tau
    grads = SupConGrads(image=d_sr @ z_real + d_sf @ z_fake,
                        real=np.outer(d_sr, z_img), fake=np.outer(d_sf, z_img))
    return loss, grads


def giou(pred: np.ndarray, gt: np.ndarray):
    """Generalized IoU for rows of ``<x, y, w, h>`` boxes.

    Returns (giou, iou, dgiou/dpred). Rows where both boxes have zero area get
    giou = iou = 1 and zero gradient.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    px1, py1, pw, ph = pred.T
    gx1, gy1, gw, gh = gt.T
    px2, py2, gx2, gy2 = px1 + pw, py1 + ph, gx1 + gw, gy1 + gh

    iw_raw = np.minimum(px2, gx2) - np.maximum(px1, gx1)
    ih_raw = np.minimum(py2, gy2) - np.maximum(py1, gy1)
    iw, ih = np.maximum(iw_raw, 0.0), np.maximum(ih_raw, 0.0)
    inter = iw * ih
    ap, ag = pw * ph, gw * gh
    union = ap + ag - inter
    cw = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    ch = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    hull = cw * ch

    degenerate = (ap <= 0) & (ag <= 0)
    safe_u = np.where(degenerate, 1.0, union)
    safe_c = np.where(degenerate | (hull <= 0), 1.0, hull)
    iou_v = np.where(degenerate, 1.0, inter / safe_u)
    giou_v = np.where(degenerate, 1.0, iou_v - (hull - union) / safe_c)

    # d giou / d(inter, ap, hull) with giou = I/U - 1 + U/C, U = ap + ag - I
    d_inter = 1.0 / safe_u + inter / safe_u**2 - 1.0 / safe_c
    d_ap = -inter / safe_u**2 + 1.0 / safe_c
    d_hull = -union / safe_c**2

    in_w, in_h = iw_raw > 0, ih_raw > 0
    d_iw, d_ih = d_inter * ih * in_w, d_inter * iw * in_h
    dx1 = -d_iw * (px1 > gx1) - d_hull * ch * (px1 < gx1)
    dx2 = d_iw * (px2 < gx2) + d_hull * ch * (px2 > gx2)
    dy1 = -d_ih * (py1 > gy1) - d_hull * cw * (py1 < gy1)
    dy2 = d_ih * (py2 < gy2) + d_hull * cw * (py2 > gy2)
    grad = np.stack([dx1 + dx2, dy1 + dy2, dx2 + d_ap * ph, dy2 + d_ap * pw], axis=1)
    grad[degenerate] = 0.0
    return giou_v, iou_v, grad


def regression_loss(Y: np.ndarray, Yg: np.ndarray, box_terms: bool = True,
                    veracity_terms: bool = True):
    """Combined per-pair loss L1 + (1 - GIoU) + squared error + BCE, averaged over rows.

    ``Y`` rows are ``<x, y, w, h, E>`` after the sigmoid; ``Yg`` rows carry
    the target box and the 0/1 veracity. Returns (loss, dY, parts) where
    ``parts`` holds the mean of each term. ``box_terms``/``veracity_terms``
    let the dual-head variant split the loss between its two heads.
    """
    Y = np.asarray(Y, dtype=np.float64)
    Yg = np.asarray(Yg, dtype=np.float64)
    if Y.shape != Yg.shape or Y.shape[-1] != 5:
        raise ShapeError(f"regression_loss: prediction {Y.shape} vs target {Yg.shape}")
    single = Y.ndim == 1
    Y, Yg = np.atleast_2d(Y), np.atleast_2d(Yg)
    e, eg = Y[:, 4], Yg[:, 4]
    if veracity_terms and np.any((e <= 0) | (e >= 1)):
        raise ValueError("veracity output must lie strictly inside (0, 1); apply the sigmoid first")
    n = len(Y)
    diff = Y - Yg
    dY = np.zeros_like(Y)
    parts = {"l1": 0.0, "giou": 0.0, "mse": 0.0, "bce": 0.0}
    if box_terms:
        parts["l1"] = float(np.abs(diff[:, :4]).sum() / n)
        g, _, dg = giou(Y[:, :4], Yg[:, :4])
        degenerate = (Y[:, 2] * Y[:, 3] <= 0) & (Yg[:, 2] * Yg[:, 3] <= 0)
        parts["giou"] = float(np.where(degenerate, 0.0, 1.0 - g).sum() / n)
        dY[:, :4] += np.sign(diff[:, :4]) - dg
        cols = slice(0, 5) if veracity_terms else slice(0, 4)
        parts["mse"] = float((diff[:, cols] ** 2).sum() / n)
        dY[:, cols] += 2.0 * diff[:, cols]
    if veracity_terms:
        parts["bce"] = float(-(eg * np.log(e) + (1 - eg) * np.log(1 - e)).sum() / n)
        dY[:, 4] += (e - eg) / (e * (1 - e))
    dY /= n
    loss = sum(parts.values())
    return loss, (dY[0] if single else dY), parts


def bce_with_logits(logits: np.ndarray, targets: np.ndarray):
    """Mean binary cross-entropy on raw scores. Returns (loss, dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    loss = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    n = max(logits.size, 1)
    return float(loss.sum() / n), (sigmoid(logits) - targets) / n


@dataclass
class CosineWarmup:
    """Linear warmup from 0 to ``max_lr`` then cosine decay to 0 at ``total_steps``."""

    max_lr: float
    warmup_steps: int
    total_steps: int

    def __call__(self, step: int) -> float:
        if step <= 0:
            return 0.0
        if step < self.warmup_steps:
            return self.max_lr * step / self.warmup_steps
        if step >= self.total_steps:
            return 0.0 if self.total_steps > self.warmup_steps else self.max_lr
        frac = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        return self.max_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def lr_schedule(step: int, max_lr: float, warmup_steps: int, total_steps: int) -> float:
    return CosineWarmup(max_lr, warmup_steps, total_steps)(step)


@dataclass
class OptimizerState:
    schedule: CosineWarmup
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Param], state: OptimizerState,
               names: Optional[Sequence[str]] = None) -> float:
    """One AdamW update in place (decoupled decay, bias-corrected moments).

    Only ``names`` are updated when given. Returns the learning rate used.
    """
    state.step += 1
    t = state.step
    lr = state.schedule(t)
    for name in (names if names is not None else params):
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p.value))
        v = state.v.setdefault(name, np.zeros_like(p.value))
        m *= BETA1
        m += (1 - BETA1) * p.grad
        v *= BETA2
        v += (1 - BETA2) * p.grad**2
        if p.decay and state.weight_decay:
            p.value *= 1.0 - lr * state.weight_decay
        m_hat = m / (1 - BETA1**t)
        v_hat = v / (1 - BETA2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return lr
