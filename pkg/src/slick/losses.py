"""Segmentation losses and the prediction/ground-truth matcher."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor

PRED_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_seg: float = 1.0
    lambda_bnd: float = 0.5
    lambda_aux: float = 0.5
    lambda_cons: float = 0.1

    def __post_init__(self):
        vals = self.as_tuple()
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")

    def as_tuple(self) -> tuple:
        return (self.lambda_seg, self.lambda_bnd, self.lambda_aux, self.lambda_cons)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossWeights":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)
    unmatched_preds: list = field(default_factory=list)
    unmatched_truths: list = field(default_factory=list)


# ---------------------------------------------------------------- Dice + BCE


def bce(pred, gt) -> Tensor:
    """Mean binary cross-entropy per mask over the last two axes."""
    p = T.clamp(T.as_tensor(pred), PRED_CLAMP, 1.0 - PRED_CLAMP)
    g = np.asarray(gt, dtype=np.float64)
    ll = T.log(p) * g + T.log(1.0 - p) * (1.0 - g)
    return -T.mean(ll, axis=(-2, -1))


def dice_loss(pred, gt, smooth: float = 1.0) -> Tensor:
    p = T.clamp(T.as_tensor(pred), PRED_CLAMP, 1.0 - PRED_CLAMP)
    g = np.asarray(gt, dtype=np.float64)
    inter = T.tsum(p * g, axis=(-2, -1))
    denom = T.tsum(p, axis=(-2, -1)) + g.sum(axis=(-2, -1))
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def dice_bce(pred, gt) -> Tensor:
    """Dice + BCE, averaged over any leading (instance) axes."""
    pred = T.as_tensor(pred)
    if pred.shape[-2:] != np.shape(gt)[-2:]:
        raise ValueError(f"mask shape mismatch {pred.shape} vs {np.shape(gt)}")
    return T.mean(dice_loss(pred, gt) + bce(pred, gt))


# ---------------------------------------------------------------- boundaries

_CROSS = ndimage.generate_binary_structure(2, 1)


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of the (binarised) mask that vanish under 4-neighbour erosion."""
    m = np.asarray(mask) >= 0.5
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def boundary(pred_mask, gt_mask) -> float:
    """1 - 2|dm & dm_hat| / (|dm| + |dm_hat|); 0 when both boundaries are empty."""
    a, b = mask_boundary(pred_mask), mask_boundary(gt_mask)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 0.0
    return 1.0 - 2.0 * int((a & b).sum()) / total


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL = np.stack([_SOBEL_X, _SOBEL_X.T], axis=-1)[:, :, None, :]  # (3, 3, 1, 2)
_SOBEL_MAX = 4.0 * np.sqrt(2.0)


def _edge_map(m) -> Tensor:
    m = T.as_tensor(m)
    lead = m.shape[:-2]
    h, w = m.shape[-2:]
    flat = T.reshape(m, (-1, h, w, 1))
    g = T.conv2d(flat, _SOBEL)
    mag = T.sqrt(T.tsum(T.square(g), axis=-1) + 1e-12) * (1.0 / _SOBEL_MAX)
    return T.reshape(mag, lead + (h, w))


def boundary_surrogate(pred, gt, smooth: float = 1.0) -> Tensor:
    """Differentiable stand-in for ``boundary``: Dice loss on Sobel-magnitude maps.

    The squared-norm denominator makes the loss vanish when the edge maps agree
    even though they are not binary.
    """
    a = _edge_map(pred)
    b = _edge_map(np.asarray(gt, dtype=np.float64)).data
    inter = T.tsum(a * b, axis=(-2, -1))
    denom = T.tsum(T.square(a), axis=(-2, -1)) + (b * b).sum(axis=(-2, -1))
    return T.mean(1.0 - (2.0 * inter + smooth) / (denom + smooth))


# ---------------------------------------------------------------- classification


def cross_entropy(logits, labels, weights=None) -> Tensor:
    """Weighted mean of -log softmax(logits)[label] over all leading axes."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    onehot = np.eye(logits.shape[-1])[labels]
    nll = -T.tsum(T.log_softmax(logits) * onehot, axis=-1)
    if weights is None:
        return T.mean(nll)
    w = np.asarray(weights, dtype=np.float64)
    return T.tsum(nll * w) * (1.0 / max(w.sum(), 1e-12))


def aux_joint(part_logits, damage_logits, part_label, damage_label, weights=None) -> Tensor:
    """Part cross-entropy plus damage cross-entropy, averaged over instances."""
    return cross_entropy(part_logits, part_label, weights) + cross_entropy(damage_logits, damage_label, weights)


# ---------------------------------------------------------------- matching


def iou_matrix(a: np.ndarray, b: np.ndarray, soft: bool = False) -> np.ndarray:
    """Pairwise IoU between mask stacks (Na, h, w) and (Nb, h, w).

    Hard IoU binarises at 0.5; soft IoU is sum(min) / sum(max).  Two empty
    masks have IoU 0.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return np.zeros((len(a), len(b)))
    a, b = a.reshape(len(a), -1), b.reshape(len(b), -1)
    if soft:
        inter = np.minimum(a[:, None], b[None]).sum(-1)
        union = np.maximum(a[:, None], b[None]).sum(-1)
    else:
        a, b = (a >= 0.5).astype(float), (b >= 0.5).astype(float)
        inter = a @ b.T
        union = a.sum(1)[:, None] + b.sum(1)[None] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def greedy_pairs(iou: np.ndarray, threshold: float) -> MatchResult:
    n_pred, n_truth = iou.shape
    cand = [(-iou[i, j], i, j) for i in range(n_pred) for j in range(n_truth) if iou[i, j] >= threshold]
    cand.sort()
    used_p, used_t, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        pairs.append((i, j))
    return MatchResult(pairs=pairs,
                       unmatched_preds=[i for i in range(n_pred) if i not in used_p],
                       unmatched_truths=[j for j in range(n_truth) if j not in used_t])


def _as_masks(items) -> np.ndarray:
    if isinstance(items, np.ndarray):
        return items
    if len(items) == 0:
        return np.zeros((0, 1, 1))
    return np.stack([getattr(it, "mask", it) for it in items])


def match(preds, truths, threshold: float = 0.25, soft: bool = False) -> MatchResult:
    """Greedy matching by descending mask IoU; pairs below ``threshold`` are dropped.

    Ties break towards the lower prediction index, then the lower truth index.
    """
    p, t = _as_masks(preds), _as_masks(truths)
    if len(p) == 0 or len(t) == 0:
        return MatchResult(pairs=[], unmatched_preds=list(range(len(p))),
                           unmatched_truths=list(range(len(t))))
    return greedy_pairs(iou_matrix(p, t, soft), threshold)


# ---------------------------------------------------------------- consistency

TRANSFORMS = ("identity", "hflip", "rot90", "rot180", "rot270")


def apply_transform(x, transform: str, axes=(-3, -2), inverse: bool = False):
    """Apply a grid transform to a Tensor or array along the two spatial axes."""
    if transform not in TRANSFORMS:
        raise ValueError(f"unknown transform {transform!r}")
    if transform == "identity":
        return x
    if transform == "hflip":
        return T.flip(x, axes[1]) if isinstance(x, Tensor) else np.flip(x, axes[1]).copy()
    k = {"rot90": 1, "rot180": 2, "rot270": 3}[transform]
    k = -k if inverse else k
    return T.rot90(x, k, axes) if isinstance(x, Tensor) else np.rot90(x, k, axes).copy()


def consistency(model: Callable, x, transform: str, heat=None) -> Tensor:
    """Mean squared difference between T^-1(model(T(x))) and model(x).

    ``model(x, heat)`` returns masks shaped (N, H, W) or (B, N, H, W) for an
    image (H, W, C) or batch (B, H, W, C).  Instances are paired per image by
    greedy soft-IoU matching.
    """
    x = np.asarray(x, dtype=np.float64)
    base = model(x, heat)
    if transform == "identity":
        return T.Tensor(0.0)
    xt = apply_transform(x, transform, axes=(-3, -2))
    ht = None if heat is None else apply_transform(np.asarray(heat, dtype=np.float64), transform, axes=(-2, -1))
    back = apply_transform(model(xt, ht), transform, axes=(-2, -1), inverse=True)
    batched = base.ndim == 4
    terms = []
    for b in range(base.shape[0] if batched else 1):
        bm = base[b] if batched else base
        tm = back[b] if batched else back
        res = match(tm.data, bm.data, threshold=0.0, soft=True)
        if not res.pairs:
            continue
        ti = np.array([i for i, _ in res.pairs])
        bi = np.array([j for _, j in res.pairs])
        terms.append(T.mean(T.square(tm[ti] - bm[bi])))
    if not terms:
        return T.Tensor(0.0)
    return T.mean(T.stack(terms))


# ---------------------------------------------------------------- total


def total(losses, w: LossWeights) -> Tensor:
    """lambda_seg*seg + lambda_bnd*bnd + lambda_aux*aux + lambda_cons*cons.

    ``losses`` is a 4-sequence or a mapping with keys seg, bnd, aux, cons.
    """
    if isinstance(losses, Mapping):
        losses = [losses.get(k, 0.0) for k in ("seg", "bnd", "aux", "cons")]
    if len(losses) != 4:
        raise ValueError("expected four component losses")
    for v in w.as_tuple():
        if v < 0:
            raise ValueError("negative loss weight")
    out = T.Tensor(0.0)
    for lam, loss in zip(w.as_tuple(), losses):
        if lam:
            out = out + lam * T.as_tensor(loss)
    return out
