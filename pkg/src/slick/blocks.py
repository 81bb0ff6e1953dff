"""Architecture blocks: pyramid encoder, prior-constrained attention,
localization-aware attention, instance mask head, channel calibration and
knowledge fusion with FiLM modulation.

All feature maps are channels-last, either (H, W, C) or batched (B, H, W, C).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    levels: int = 3
    query_dim: int = 32
    num_queries: int = 12
    kernel_size: int = 3
    num_parts: int = 6
    num_damages: int = 4
    se_reduction: int = 4
    fusion_dim: int = 16
    fusion_channels: int = 8
    stem_stride: int = 1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"ModelConfig.{name} must be a positive integer, got {value!r}")
        if self.channels % self.se_reduction:
            raise ValueError("se_reduction must divide channels")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.levels < 2:
            raise ValueError("at least two pyramid levels are required")
        if self.stem_stride not in (1, 2):
            raise ValueError("stem_stride must be 1 or 2")

    @property
    def part_outputs(self) -> int:
        # last index is the no-object class
        return self.num_parts + 1

    @property
    def damage_outputs(self) -> int:
        # last index is "none" (the instance is a part, not a damage)
        return self.num_damages + 1

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def dominates(teacher: ModelConfig, student: ModelConfig) -> bool:
    """True when the teacher is strictly larger in C, L, d and N."""
    return (teacher.channels > student.channels and teacher.levels > student.levels
            and teacher.query_dim > student.query_dim and teacher.num_queries > student.num_queries)


@dataclass
class StructuralPriorGraph:
    parts: list[str]
    adjacency: set[frozenset] = field(default_factory=set)
    symmetry: set[frozenset] = field(default_factory=set)
    bias_pos: float = 1.0
    bias_neg: float = -1.0

    def __post_init__(self):
        self.adjacency = {frozenset(e) for e in self.adjacency}
        self.symmetry = {frozenset(e) for e in self.symmetry}
        known = set(self.parts)
        for edge in self.adjacency | self.symmetry:
            if len(edge) != 2:
                raise ValueError(f"self-edge or malformed edge {sorted(edge)}")
            if not edge <= known:
                raise ValueError(f"edge {sorted(edge)} references an unknown part")
        # zero biases are allowed so the unbiased reduction can be expressed
        if not self.bias_pos >= 0 >= self.bias_neg:
            raise ValueError("need bias_pos >= 0 >= bias_neg")

    def related(self, a: str, b: str) -> bool:
        return a == b or frozenset((a, b)) in self.adjacency or frozenset((a, b)) in self.symmetry

    def edges(self) -> list[tuple[int, int]]:
        """Index pairs of every adjacency or symmetry relation, sorted."""
        idx = {p: i for i, p in enumerate(self.parts)}
        out = {tuple(sorted(idx[p] for p in e)) for e in self.adjacency | self.symmetry}
        return sorted(out)

    def bias_matrix(self, token_parts: Sequence) -> np.ndarray:
        known = set(self.parts)
        for p in token_parts:
            if p is not None and p not in known:
                raise KeyError(f"unknown part id {p!r}")
        n = len(token_parts)
        delta = np.zeros((n, n))
        for i, a in enumerate(token_parts):
            if a is None:
                continue
            for j, b in enumerate(token_parts):
                if b is None:
                    continue
                delta[i, j] = self.bias_pos if self.related(a, b) else self.bias_neg
        return delta

    def to_json(self) -> dict:
        return {
            "parts": list(self.parts),
            "adjacency": sorted(sorted(e) for e in self.adjacency),
            "symmetry": sorted(sorted(e) for e in self.symmetry),
            "bias_pos": self.bias_pos,
            "bias_neg": self.bias_neg,
        }

    @classmethod
    def from_json(cls, d: dict) -> "StructuralPriorGraph":
        return cls(parts=list(d["parts"]), adjacency={frozenset(e) for e in d["adjacency"]},
                   symmetry={frozenset(e) for e in d["symmetry"]},
                   bias_pos=float(d["bias_pos"]), bias_neg=float(d["bias_neg"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "StructuralPriorGraph":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class DamageHeatmap:
    map: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.map, dtype=np.float64)
        if m.ndim == 2:
            m = m[..., None]
        self.map = np.clip(m, 0.0, 1.0)


@dataclass
class InstanceQuery:
    embedding: np.ndarray
    part_assignment: str | None = None


@dataclass
class FeaturePyramid:
    levels: list[Tensor]

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ValueError("a pyramid needs at least two levels")
        channels = {lvl.shape[-1] for lvl in self.levels}
        if len(channels) != 1:
            raise ValueError("pyramid levels must share the channel count")
        for prev, cur in zip(self.levels, self.levels[1:]):
            h, w = prev.shape[-3:-1]
            if cur.shape[-3:-1] != (math.ceil(h / 2), math.ceil(w / 2)):
                raise ValueError("each pyramid level must halve the previous one")

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]


# ---------------------------------------------------------------- encoder


def encode(x, cfg: ModelConfig, params: dict[str, Tensor], prefix: str = "enc.") -> FeaturePyramid:
    """Conv pyramid: stem, one full-rate conv, then a stride-2 conv per level.

    ``x`` carries the image channels plus, optionally, the conditioning
    channel used by bootstrap refinement.
    """
    x = T.as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = T.expand_dims(x, 0)
    H, W = x.shape[1:3]
    need = cfg.stem_stride * 2 ** (cfg.levels - 1)
    if H < need or W < need or H < 2 ** cfg.levels or W < 2 ** cfg.levels:
        raise ValueError(f"image {H}x{W} too small for {cfg.levels} levels")
    stem_w = params[prefix + "stem.w"]
    if x.shape[-1] < stem_w.shape[2]:
        pad = np.zeros(x.shape[:-1] + (stem_w.shape[2] - x.shape[-1],))
        x = T.concat([x, pad], -1)
    h = T.relu(T.conv2d(x, stem_w, params[prefix + "stem.b"], stride=cfg.stem_stride))
    h = T.relu(T.conv2d(h, params[prefix + "l1.w"], params[prefix + "l1.b"]))
    levels = [h]
    for lvl in range(2, cfg.levels + 1):
        h = T.relu(T.conv2d(h, params[f"{prefix}l{lvl}.w"], params[f"{prefix}l{lvl}.b"], stride=2))
        levels.append(h)
    if squeeze:
        levels = [T.reshape(l, l.shape[1:]) for l in levels]
    return FeaturePyramid(levels)


# ---------------------------------------------------------------- attention


def prior_attention(tokens, graph: StructuralPriorGraph, token_parts, wq, wk, wv) -> Tensor:
    """softmax(Q K^T / sqrt(d_k) + Delta) V over a (T, C) or (B, T, C) token set.

    ``token_parts`` is a list of part ids (None = unassigned) or, for a
    batch, a list of such lists.
    """
    tokens = T.as_tensor(tokens)
    batched = tokens.ndim == 3
    parts_list = token_parts if batched else [token_parts]
    n = tokens.shape[-2]
    for tp in parts_list:
        if len(tp) != n:
            raise ValueError(f"token_parts has {len(tp)} entries for {n} tokens")
    delta = np.stack([graph.bias_matrix(tp) for tp in parts_list])
    if not batched:
        delta = delta[0]
    q = T.matmul(tokens, wq)
    k = T.matmul(tokens, wk)
    v = T.matmul(tokens, wv)
    dk = q.shape[-1]
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dk)) + delta
    return T.matmul(T.softmax(scores), v)


def mlp(x, layers: Sequence[tuple], activation: str = "relu") -> Tensor:
    """Dense layers on the last axis; ``activation`` applies between layers."""
    h = T.as_tensor(x)
    vector = h.ndim == 1
    if vector:
        h = T.expand_dims(h, 0)
    for i, (w, b) in enumerate(layers):
        h = T.matmul(h, w)
        if b is not None:
            h = h + b
        if i < len(layers) - 1 and activation == "relu":
            h = T.relu(h)
    return T.reshape(h, h.shape[1:]) if vector else h


def _heat_like(heat, F: Tensor) -> np.ndarray:
    m = heat.map if isinstance(heat, DamageHeatmap) else np.asarray(heat, dtype=np.float64)
    spatial = F.shape[-3:-1]
    if m.ndim == 2 or m.ndim == F.ndim - 1:
        m = m[..., None]
    if m.shape[-3:-1] != spatial:
        m = T.resize_nearest(m, spatial)
    return np.broadcast_to(m, F.shape[:-1] + (1,))


def loc_attention(F, heat, mlp_weights: Sequence[tuple], activation: str = "relu") -> Tensor:
    """Per-pixel MLP over the concatenation of features and damage heatmap."""
    F = T.as_tensor(F)
    h = _heat_like(heat, F)
    x = T.concat([F, h], -1)
    if mlp_weights[0][0].shape[0] != x.shape[-1]:
        raise ValueError(f"first MLP layer expects {mlp_weights[0][0].shape[0]} inputs, "
                         f"concat has {x.shape[-1]}")
    return mlp(x, mlp_weights, activation)


def weak_heatmap(boxes: Sequence[tuple], scratch_maps: Sequence, shape: tuple[int, int],
                 box_value: float = 0.7) -> DamageHeatmap:
    """Rasterise box interiors at ``box_value`` plus scratch maps, clamped to [0, 1].

    Boxes are (y0, x0, y1, x1) with exclusive upper bounds.
    """
    H, W = shape
    boxes_map = np.zeros((H, W))
    for y0, x0, y1, x1 in boxes:
        if not (0 <= y0 <= y1 <= H and 0 <= x0 <= x1 <= W):
            raise ValueError(f"box {(y0, x0, y1, x1)} outside a {H}x{W} image")
        boxes_map[y0:y1, x0:x1] = box_value
    total = boxes_map
    for m in scratch_maps:
        total = total + np.asarray(m, dtype=np.float64).reshape(H, W)
    return DamageHeatmap(total)


# ---------------------------------------------------------------- instance head


def isr_logits(queries, F, phi_w, phi_b, kernel_size: int) -> Tensor:
    """Correlate a per-query kernel phi(q_i) with F; returns (..., N, h, w) logits.

    ``queries`` is (N, d) or (B, N, d); ``F`` is (h, w, C) or (B, h, w, C).
    """
    queries, F = T.as_tensor(queries), T.as_tensor(F)
    squeeze = F.ndim == 3
    if squeeze:
        F = T.expand_dims(F, 0)
        queries = T.expand_dims(queries, 0)
    B, h, w, C = F.shape
    kernels = T.matmul(queries, phi_w)
    if phi_b is not None:
        kernels = kernels + phi_b
    if kernels.shape[-1] != kernel_size * kernel_size * C:
        raise ValueError("phi output does not match kernel_size**2 * channels")
    if kernel_size == 1:
        cols = T.reshape(F, (B, h * w, C))
    else:
        cols = T.reshape(T.im2col(F, kernel_size, 1, (kernel_size - 1) // 2), (B, h * w, -1))
    logits = T.matmul(kernels, T.swapaxes(cols, -1, -2))
    logits = T.reshape(logits, (B, -1, h, w))
    return T.reshape(logits, logits.shape[1:]) if squeeze else logits


def isr_masks(queries, F, phi_w, phi_b, kernel_size: int) -> Tensor:
    return T.sigmoid(isr_logits(queries, F, phi_w, phi_b, kernel_size))


# ---------------------------------------------------------------- calibration


def se_weights(F, W1, W2) -> Tensor:
    """Channel gates sigmoid(W2 . relu(W1 . GAP(F))) with shape (..., C)."""
    gap = T.global_avg_pool(T.as_tensor(F))
    return T.sigmoid(T.matmul(T.relu(T.matmul(T.expand_dims(gap, -2), W1)), W2))


def c3_calibrate(F, W1, W2) -> Tensor:
    F, W1 = T.as_tensor(F), T.as_tensor(W1)
    C = F.shape[-1]
    if W1.shape[0] != C or C % W1.shape[1]:
        raise ValueError(f"W1 of shape {W1.shape} does not reduce {C} channels by an integer ratio")
    gates = se_weights(F, W1, W2)  # (..., 1, C)
    return F * T.expand_dims(gates, -2)


# ---------------------------------------------------------------- knowledge fusion


def stream_encoder(x, w, b) -> Tensor:
    """Stride-2 conv, ReLU, global average pool: image -> vector."""
    return T.global_avg_pool(T.relu(T.conv2d(x, w, b, stride=2)))


def fuse_knowledge(x, enc_syn, enc_geom, enc_real, mlp_weights) -> Tensor:
    """z = MLP([Enc_syn(x); Enc_geom(x); Enc_real(x)]).

    Each encoder is either a (w, b) conv pair or any callable x -> vector.
    """
    feats = []
    for enc in (enc_syn, enc_geom, enc_real):
        feats.append(enc(x) if callable(enc) else stream_encoder(x, *enc))
    return mlp(T.concat(feats, -1), mlp_weights)


def film_modulate(F, z, gamma: tuple, beta: tuple) -> Tensor:
    """gamma(z) * F + beta(z) with per-channel affine maps broadcast over space."""
    F, z = T.as_tensor(F), T.as_tensor(z)
    g = T.matmul(T.expand_dims(z, -2), gamma[0]) + gamma[1]
    b = T.matmul(T.expand_dims(z, -2), beta[0]) + beta[1]
    return F * T.expand_dims(g, -2) + T.expand_dims(b, -2)
