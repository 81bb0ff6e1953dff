"""Part-conditioned damage priors and prior-reweighted instance calibration."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .model import InstancePrediction, instance_score


@dataclass(frozen=True)
class PartDamagePriorTable:
    parts: tuple
    damages: tuple
    counts: np.ndarray  # (P, D) raw annotation counts
    alpha: float = 1.0

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.float64)
        if counts.shape != (len(self.parts), len(self.damages)):
            raise ValueError(f"counts shape {counts.shape} does not match "
                             f"{len(self.parts)} parts x {len(self.damages)} damages")
        if (counts < 0).any() or not np.isfinite(counts).all():
            raise ValueError("counts must be finite and non-negative")
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        object.__setattr__(self, "parts", tuple(self.parts))
        object.__setattr__(self, "damages", tuple(self.damages))
        object.__setattr__(self, "counts", counts)

    @property
    def probs(self) -> np.ndarray:
        """P(d | p) with additive smoothing; rows without mass are uniform."""
        D = len(self.damages)
        num = self.counts + self.alpha
        den = num.sum(axis=1, keepdims=True)
        uniform = np.full_like(num, 1.0 / D)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / np.where(den > 0, den, 1.0), uniform)

    def row(self, part) -> np.ndarray:
        return self.probs[self.parts.index(part) if not isinstance(part, (int, np.integer)) else part]

    def to_json(self) -> dict:
        return {"parts": list(self.parts), "damages": list(self.damages),
                "counts": self.counts.tolist(), "alpha": self.alpha}

    @classmethod
    def from_json(cls, d: dict) -> "PartDamagePriorTable":
        return cls(tuple(d["parts"]), tuple(d["damages"]), np.asarray(d["counts"], dtype=np.float64),
                   float(d["alpha"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "PartDamagePriorTable":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _index(value, names: Sequence, kind: str) -> int:
    if isinstance(value, (int, np.integer)):
        if not 0 <= value < len(names):
            raise ValueError(f"{kind} index {value} out of range")
        return int(value)
    try:
        return list(names).index(value)
    except ValueError:
        raise ValueError(f"unknown {kind} {value!r}") from None


def build_table(annotations: Iterable[tuple], parts: Sequence, damages: Sequence,
                alpha: float = 1.0) -> PartDamagePriorTable:
    """Count (part, damage) annotations; ids may be names or indices."""
    counts = np.zeros((len(parts), len(damages)))
    for p, d in annotations:
        counts[_index(p, parts, "part"), _index(d, damages, "damage")] += 1
    return PartDamagePriorTable(tuple(parts), tuple(damages), counts, alpha)


def damage_prior(part_probs: np.ndarray, table: PartDamagePriorTable) -> np.ndarray:
    """sum_p q(p) P(d | p) over real parts; a trailing no-object entry is dropped."""
    q = np.asarray(part_probs, dtype=np.float64)
    P = len(table.parts)
    if q.shape[-1] == P + 1:
        q = q[..., :P]
    elif q.shape[-1] != P:
        raise ValueError(f"part distribution has {q.shape[-1]} classes, table has {P} parts")
    return q @ table.probs


def calibrate_instance(pred: InstancePrediction, table: PartDamagePriorTable) -> InstancePrediction:
    """r*(d) proportional to r(d) * sum_p q(p) P(d|p); mask rescaled by the
    change in damage confidence and clamped to [0, 1].
    """
    r = np.asarray(pred.damage_probs, dtype=np.float64)
    if r.shape[-1] != len(table.damages):
        raise ValueError(f"damage distribution has {r.shape[-1]} classes, table has {len(table.damages)}")
    prior = damage_prior(pred.part_probs, table)
    # a flat prior carries no information; return the input untouched.  Uniform
    # rows give a flat prior exactly, even when the float sum rounds unevenly.
    if np.all(table.probs == table.probs[:, :1]) or np.all(prior == prior[0]):
        return pred
    w = r * prior
    total = w.sum()
    if not total > 0:
        return pred
    r_star = w / total
    ratio = r_star.max() / r.max()
    mask = np.clip(np.asarray(pred.mask) * ratio, 0.0, 1.0)
    score = float(instance_score(np.asarray(pred.part_probs), r_star))
    return replace(pred, mask=mask, damage_probs=r_star, score=score)


def calibrate_all(preds: Sequence[InstancePrediction], table: PartDamagePriorTable) -> list[InstancePrediction]:
    return [calibrate_instance(p, table) for p in preds]
