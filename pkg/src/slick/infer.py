"""Mask NMS, bootstrap refinement, the single-pass predictor and .slkp files."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .calibrate import PartDamagePriorTable, calibrate_instance
from .losses import greedy_pairs, iou_matrix
from .model import ForwardOutput, InstancePrediction, forward
from .tensor import Tensor


@dataclass(frozen=True)
class NmsConfig:
    score_threshold: float = 0.3
    iou_threshold: float = 0.5
    top_k: int = 20

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must lie in [0, 1]")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be positive")


def nms_indices(masks: np.ndarray, scores: np.ndarray, score_threshold: float,
                iou_threshold: float, top_k: int) -> list[int]:
    """Greedy mask suppression; returns kept indices in visiting order.

    Visits by descending score (lower index first on ties), skips scores not
    above the threshold, keeps a mask only if its IoU with every kept mask is
    below ``iou_threshold``, and stops at ``top_k`` survivors.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    binar = np.asarray(masks) >= 0.5
    iou = iou_matrix(binar, binar)
    kept: list[int] = []
    for i in order:
        if not scores[i] > score_threshold:
            break
        if all(iou[i, j] < iou_threshold for j in kept):
            kept.append(i)
            if len(kept) == top_k:
                break
    return kept


def mask_nms(preds: Sequence[InstancePrediction], cfg: NmsConfig = NmsConfig()) -> list[InstancePrediction]:
    if not preds:
        return []
    masks = np.stack([p.mask for p in preds])
    scores = np.array([p.score for p in preds])
    return [preds[i] for i in nms_indices(masks, scores, cfg.score_threshold, cfg.iou_threshold, cfg.top_k)]


# ---------------------------------------------------------------- bootstrap refinement


def psi(masks, scores) -> np.ndarray:
    """Render predictions into one conditioning channel: clamp(sum_i s_i m_i, 0, 1).

    ``masks`` is (N, H, W) or (B, N, H, W); the result gains a trailing channel axis.
    """
    m = np.asarray(masks.data if isinstance(masks, Tensor) else masks, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    return np.clip((m * s[..., None, None]).sum(axis=-3), 0.0, 1.0)[..., None]


def bootstrap_refine(params, cfg, x, heat=None, graph=None, first: ForwardOutput | None = None):
    """Second pass conditioned on psi(first pass); returns (refined output, L_refine).

    L_refine is the mean squared difference between pass-1 and pass-2 masks,
    query by query.  The conditioning channel itself is not differentiated.
    """
    if first is None:
        first = forward(params, cfg, x, heat=heat, graph=graph)
    aux = psi(first.masks.data, first.scores())
    second = forward(params, cfg, x, heat=heat, graph=graph, aux=aux)
    loss = T.mean(T.square(second.masks - first.masks))
    return second, loss


# ---------------------------------------------------------------- deployment path


def predict(params, cfg, x, heat=None, graph=None, nms: NmsConfig = NmsConfig(),
            table: PartDamagePriorTable | None = None, refine: bool = False) -> list[list[InstancePrediction]]:
    """Single student pass (optionally refined) -> calibration -> NMS, per image."""
    with T.no_grad():
        out = forward(params, cfg, x, heat=heat, graph=graph)
        if refine:
            out, _ = bootstrap_refine(params, cfg, x, heat=heat, graph=graph, first=out)
    results = []
    for b in range(out.batch):
        inst = out.instances(b)
        if table is not None:
            inst = [calibrate_instance(p, table) for p in inst]
        results.append(mask_nms(inst, nms))
    return results


# ---------------------------------------------------------------- .slkp files

SLKP_MAGIC = b"SLKP"


def write_slkp(path, instances: Sequence[InstancePrediction], parts: Sequence[str],
               damages: Sequence[str], image_size: tuple[int, int]) -> None:
    """Magic, u32 LE header length, JSON header, then one SLKT mask per instance."""
    header = {
        "classes": {"parts": list(parts), "damages": list(damages)},
        "image_size": [int(image_size[0]), int(image_size[1])],
        "instances": [{"score": float(p.score), "part_probs": [float(v) for v in p.part_probs],
                       "damage_probs": [float(v) for v in p.damage_probs], "mask_ref": i}
                      for i, p in enumerate(instances)],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(SLKP_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in instances:
            T.write_slkt(fh, p.mask)


def read_slkp(path) -> tuple[dict, list[InstancePrediction]]:
    with open(path, "rb") as fh:
        if fh.read(4) != SLKP_MAGIC:
            raise ValueError(f"{path} is not a prediction file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        masks = [T.read_slkt(fh) for _ in header["instances"]]
    preds = [InstancePrediction(mask=masks[e["mask_ref"]], part_probs=np.array(e["part_probs"]),
                                damage_probs=np.array(e["damage_probs"]), score=e["score"])
             for e in header["instances"]]
    return header, preds


# ---------------------------------------------------------------- evaluation


def instance_ious(preds: Sequence[InstancePrediction], gt_masks: np.ndarray) -> np.ndarray:
    """Best-effort IoU per ground-truth instance after greedy hard-IoU matching
    (unmatched truths score 0)."""
    gt_masks = np.asarray(gt_masks)
    out = np.zeros(len(gt_masks))
    if not preds or not len(gt_masks):
        return out
    iou = iou_matrix(np.stack([p.mask for p in preds]), gt_masks)
    for i, j in greedy_pairs(iou, 0.0).pairs:
        out[j] = iou[i, j]
    return out


def mean_mask_iou(params, cfg, samples, graph=None, nms: NmsConfig = NmsConfig(), batch_size: int = 32,
                  table: PartDamagePriorTable | None = None) -> float:
    """Mean over all ground-truth instances of the matched mask IoU."""
    vals = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        x = np.stack([s.image for s in chunk])
        heat = np.stack([s.heatmap for s in chunk])
        for preds, s in zip(predict(params, cfg, x, heat, graph, nms, table), chunk):
            vals.extend(instance_ious(preds, s.instance_masks()))
    return float(np.mean(vals)) if vals else 0.0
