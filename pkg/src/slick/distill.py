"""Teacher -> student transfer losses and the softmax Lipschitz bound check."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .losses import greedy_pairs, iou_matrix
from .tensor import Tensor

BN_EPS = 1e-5


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    lambda_m: float = 1.0
    lambda_c: float = 1.0
    lambda_f: float = 0.5
    lambda_g: float = 0.5
    scale_weights: tuple = (0.5, 0.5)
    lambda_kd: float = 1.0
    lambda_multi: float = 0.5
    lambda_refine: float = 0.1
    lambda_attn: float = 0.1
    # three-term preset: lambda_1 CE + lambda_2 KD + lambda_3 feature
    lambda_1: float = 1.0
    lambda_2: float = 1.0
    lambda_3: float = 0.5
    appendix_mode: bool = False
    class_temperature: float = 1.0
    pair_threshold: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0 or not self.class_temperature > 0:
            raise ValueError("temperatures must be positive")
        for name, v in asdict(self).items():
            if name.startswith("lambda") and v < 0:
                raise ValueError(f"{name} must be non-negative")
        a = np.asarray(self.scale_weights, dtype=float)
        if a.size == 0 or (a < 0).any() or abs(a.sum() - 1.0) > 1e-9:
            raise ValueError("scale_weights must be non-negative and sum to 1")
        object.__setattr__(self, "scale_weights", tuple(float(v) for v in a))
        if self.appendix_mode:
            # one code path, preset weights mapped onto the composite loss
            object.__setattr__(self, "lambda_m", 0.0)
            object.__setattr__(self, "lambda_g", 0.0)
            object.__setattr__(self, "lambda_c", self.lambda_2)
            object.__setattr__(self, "lambda_f", self.lambda_3)
            object.__setattr__(self, "class_temperature", self.temperature)

    @property
    def seg_weight(self) -> float:
        return self.lambda_1 if self.appendix_mode else 1.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "DistillConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown distill keys: {sorted(unknown)}")
        d = dict(d)
        if "scale_weights" in d:
            d["scale_weights"] = tuple(d["scale_weights"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_weights"] = list(self.scale_weights)
        return d

    @classmethod
    def appendix(cls, lambda_1: float = 1.0, lambda_2: float = 1.0, lambda_3: float = 0.5,
                 temperature: float = 2.0, **kw) -> "DistillConfig":
        return cls(lambda_1=lambda_1, lambda_2=lambda_2, lambda_3=lambda_3,
                   temperature=temperature, appendix_mode=True, **kw)


# ---------------------------------------------------------------- component losses


def mask_kd(m_T, m_S, temperature: float) -> Tensor:
    """Mean per-pixel Bernoulli KL(sigmoid(m_T/tau) || sigmoid(m_S/tau)).

    Both arguments are mask logits of equal shape; the teacher side is
    treated as a constant.
    """
    m_S = T.as_tensor(m_S)
    a = np.asarray(m_T.data if isinstance(m_T, Tensor) else m_T, dtype=np.float64) / temperature
    if a.shape != m_S.shape:
        raise ValueError(f"mask shape mismatch {a.shape} vs {m_S.shape}")
    p = 1.0 / (1.0 + np.exp(-a))
    log_p = -np.logaddexp(0.0, -a)
    log_1mp = -np.logaddexp(0.0, a)
    s = m_S * (1.0 / temperature)
    kl = (p * (log_p - T.log_sigmoid(s)) + (1.0 - p) * (log_1mp - T.log_sigmoid(-s)))
    return T.mean(kl)


def class_kd(p_T, p_S, temperature: float | None = None, centered: bool = False) -> Tensor:
    """-sum_k p_T,k log p_S,k averaged over instances.

    With ``temperature`` set, both arguments are logits and are softened by
    it first.  ``centered`` subtracts the teacher entropy, which turns the
    cross-entropy into KL(p_T || p_S): same student gradient, zero at equality.
    """
    if temperature is None:
        pt = np.asarray(p_T.data if isinstance(p_T, Tensor) else p_T, dtype=np.float64)
        log_ps = T.log(T.as_tensor(p_S))
    else:
        zt = np.asarray(p_T.data if isinstance(p_T, Tensor) else p_T, dtype=np.float64) / temperature
        zt = zt - zt.max(-1, keepdims=True)
        pt = np.exp(zt) / np.exp(zt).sum(-1, keepdims=True)
        log_ps = T.log_softmax(p_S, temperature)
    ce = -T.tsum(log_ps * pt, axis=-1)
    if centered:
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -np.where(pt > 0, pt * np.log(np.where(pt > 0, pt, 1.0)), 0.0).sum(-1)
        ce = ce - ent
    return T.mean(ce)


def batch_standardize(F) -> Tensor:
    """Per-channel standardisation over all non-channel axes (batch statistics)."""
    F = T.as_tensor(F)
    axes = tuple(range(F.ndim - 1))
    mu = T.mean(F, axis=axes, keepdims=True)
    centered = F - mu
    var = T.mean(T.square(centered), axis=axes, keepdims=True)
    return centered / T.sqrt(var + BN_EPS)


def feature_kd(F_T: Sequence, F_S: Sequence, projections: Sequence | None = None) -> Tensor:
    """sum_l mean((norm(F_T_l) - norm(proj(resize(F_S_l))))^2) over aligned levels."""
    terms = []
    for lvl, (ft, fs) in enumerate(zip(F_T, F_S)):
        ft = np.asarray(ft.data if isinstance(ft, Tensor) else ft, dtype=np.float64)
        fs = T.as_tensor(fs)
        fs = T.resize(fs, ft.shape[-3:-1])
        if projections is not None and projections[lvl] is not None:
            fs = T.matmul(fs, projections[lvl])
        if fs.shape != ft.shape:
            raise ValueError(f"level {lvl}: student {fs.shape} vs teacher {ft.shape}")
        nt = batch_standardize(ft).data
        terms.append(T.mean(T.square(batch_standardize(fs) - nt)))
    return T.tsum(T.stack(terms)) if terms else T.Tensor(0.0)


def graph_kd(h, h_prime, edges: Sequence[tuple[int, int]]) -> Tensor:
    """sum over edges of ||(h_i - h_j) - (h'_i - h'_j)||^2, batch-averaged for (B, V, d)."""
    h_prime = T.as_tensor(h_prime)
    h = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64)
    if h.shape != h_prime.shape:
        raise ValueError(f"node embedding shapes differ: {h.shape} vs {h_prime.shape}")
    if not edges:
        return T.Tensor(0.0)
    V = h.shape[-2]
    D = np.zeros((len(edges), V))
    for e, (i, j) in enumerate(edges):
        D[e, i], D[e, j] = 1.0, -1.0
    diff = T.matmul(D, h - h_prime)
    sq = T.tsum(T.square(diff), axis=(-2, -1))
    return T.mean(sq)


def graph_edges(graph, num_parts: int, cooccurrence=None) -> list[tuple[int, int]]:
    """Part-part edges from the structural graph plus part-damage edges for
    every (part, damage) pair with a positive co-occurrence count.

    ``cooccurrence`` is a (P, D) count matrix; damage node d has index P + d.
    """
    edges = list(graph.edges())
    if cooccurrence is not None:
        c = np.asarray(cooccurrence)
        for p, d in zip(*np.nonzero(c > 0)):
            edges.append((int(p), num_parts + int(d)))
    return edges


def node_embeddings(tokens, part_logits: np.ndarray, damage_logits: np.ndarray) -> Tensor:
    """Mean unit-normalised query embedding per part node then per damage
    node -> (B, P + D, d).

    Tokens are scaled to unit length first so the relational term stays
    comparable across models whose token norms differ.  A query joins the part node of its argmax part (unless no-object) and
    the damage node of its argmax damage (unless none).  Empty nodes are zero.
    """
    tokens = T.as_tensor(tokens)
    tokens = tokens / (T.sqrt(T.tsum(T.square(tokens), axis=-1, keepdims=True)) + 1e-8)
    P = part_logits.shape[-1] - 1
    Dm = damage_logits.shape[-1] - 1
    pa = part_logits.argmax(-1)
    da = damage_logits.argmax(-1)
    B, N = pa.shape
    A = np.zeros((B, P + Dm, N))
    for b in range(B):
        for n in range(N):
            if pa[b, n] < P:
                A[b, pa[b, n], n] = 1.0
            if da[b, n] < Dm:
                A[b, P + da[b, n], n] = 1.0
    counts = A.sum(-1, keepdims=True)
    A = np.where(counts > 0, A / np.maximum(counts, 1.0), 0.0)
    return T.matmul(A, tokens)


def attn_transfer(A_T: Sequence, A_S: Sequence) -> Tensor:
    """sum_l ||A_T_l - A_S_l||_1 on sum-normalised maps, batch-averaged."""
    terms = []
    for at, as_ in zip(A_T, A_S):
        at = np.asarray(at.data if isinstance(at, Tensor) else at, dtype=np.float64)
        as_ = T.as_tensor(as_)
        squeeze = at.ndim == 2
        if squeeze:
            at, as_ = at[None], T.expand_dims(as_, 0)
        as_ = T.resize(as_, at.shape[-2:], axes=(-2, -1))
        at_n = at / (at.sum(axis=(-2, -1), keepdims=True) + 1e-12)
        as_n = as_ / (T.tsum(as_, axis=(-2, -1), keepdims=True) + 1e-12)
        terms.append(T.mean(T.tsum(T.absolute(as_n - at_n), axis=(-2, -1))))
    return T.tsum(T.stack(terms)) if terms else T.Tensor(0.0)


def init_projections(teacher_cfg, student_cfg, seed: int = 0, noise: float = 0.0) -> dict:
    """Learned student->teacher maps: one 1x1 channel projection per aligned
    level plus one for query embeddings.  Rectangular identities at init.
    """
    rng = np.random.default_rng(seed)
    Cs, Ct = student_cfg.channels, teacher_cfg.channels
    ds, dt = student_cfg.query_dim, teacher_cfg.query_dim
    out = {}
    for lvl in range(min(teacher_cfg.levels, student_cfg.levels)):
        out[f"proj.feat.{lvl}"] = np.eye(Cs, Ct) + noise * rng.standard_normal((Cs, Ct))
    out["proj.graph"] = np.eye(ds, dt) + noise * rng.standard_normal((ds, dt))
    return {k: Tensor(v, requires_grad=True) for k, v in out.items()}


def feature_projections(proj: dict) -> list:
    n = sum(1 for k in proj if k.startswith("proj.feat."))
    return [proj[f"proj.feat.{i}"] for i in range(n)]


# ---------------------------------------------------------------- pairing


@dataclass
class PairedOutputs:
    """Teacher/student outputs aligned for the distillation terms.

    Mask logits and class logits are gathered along the greedy pairing and
    flattened over the batch; features and attention maps stay per level.
    """
    mask_T: np.ndarray
    mask_S: Tensor
    part_T: np.ndarray
    part_S: Tensor
    damage_T: np.ndarray
    damage_S: Tensor
    features_T: list
    features_S: list
    attention_T: list
    attention_S: list
    nodes_T: np.ndarray
    nodes_S: Tensor
    edges: list = field(default_factory=list)
    feature_proj: list | None = None


def pair_instances(masks_T: np.ndarray, masks_S: np.ndarray, threshold: float = 0.1):
    """Per-image greedy soft-IoU pairing -> (batch idx, teacher idx, student idx)."""
    bi, ti, si = [], [], []
    for b in range(masks_T.shape[0]):
        res = greedy_pairs(iou_matrix(masks_T[b], masks_S[b], soft=True), threshold)
        for t, s in res.pairs:
            bi.append(b)
            ti.append(t)
            si.append(s)
    return np.array(bi, dtype=int), np.array(ti, dtype=int), np.array(si, dtype=int)


def build_pair(teacher, student, edges, feature_proj=None, graph_proj=None,
               threshold: float = 0.1) -> PairedOutputs:
    """Align two ``ForwardOutput`` objects; teacher tensors are taken as constants."""
    bi, ti, si = pair_instances(teacher.masks.data, student.masks.data, threshold)
    nodes_T = node_embeddings(teacher.tokens.data, teacher.part_logits.data, teacher.damage_logits.data).data
    nodes_S = node_embeddings(student.tokens, student.part_logits.data, student.damage_logits.data)
    if graph_proj is not None:
        nodes_S = T.matmul(nodes_S, graph_proj)
    return PairedOutputs(
        mask_T=teacher.mask_logits.data[bi, ti], mask_S=student.mask_logits[bi, si],
        part_T=teacher.part_logits.data[bi, ti], part_S=student.part_logits[bi, si],
        damage_T=teacher.damage_logits.data[bi, ti], damage_S=student.damage_logits[bi, si],
        features_T=[f.data for f in teacher.pyramid.levels], features_S=list(student.pyramid.levels),
        attention_T=[a.data for a in teacher.attention], attention_S=list(student.attention),
        nodes_T=nodes_T, nodes_S=nodes_S, edges=list(edges), feature_proj=feature_proj)


def distill_terms(pair: PairedOutputs, cfg: DistillConfig, level: int | None = None) -> dict:
    """The four composite-loss terms; ``level`` restricts them to one scale.

    At a given scale the masks are resampled to that pyramid level of the
    teacher and only that feature level contributes.
    """
    n_lv = min(len(pair.features_T), len(pair.features_S))
    levels = range(n_lv) if level is None else [level]
    mT, mS = pair.mask_T, pair.mask_S
    if level is not None and len(mT):
        size = pair.features_T[level].shape[-3:-1]
        mT = T.resize(mT, size, axes=(-2, -1)).data
        mS = T.resize(mS, size, axes=(-2, -1))
    if len(mT):
        l_mask = mask_kd(mT, mS, cfg.temperature)
        l_class = (class_kd(pair.part_T, pair.part_S, cfg.class_temperature, centered=True)
                   + class_kd(pair.damage_T, pair.damage_S, cfg.class_temperature, centered=True))
    else:
        l_mask = l_class = T.Tensor(0.0)
    proj = None if pair.feature_proj is None else [pair.feature_proj[i] for i in levels]
    l_feat = feature_kd([pair.features_T[i] for i in levels], [pair.features_S[i] for i in levels], proj)
    l_graph = graph_kd(pair.nodes_T, pair.nodes_S, pair.edges)
    return {"mask": l_mask, "class": l_class, "feature": l_feat, "graph": l_graph}


def combine_terms(terms: dict, cfg: DistillConfig) -> Tensor:
    return (cfg.lambda_m * terms["mask"] + cfg.lambda_c * terms["class"]
            + cfg.lambda_f * terms["feature"] + cfg.lambda_g * terms["graph"])


def distill_loss(pair: PairedOutputs, cfg: DistillConfig) -> Tensor:
    return combine_terms(distill_terms(pair, cfg), cfg)


def multi_scale(per_scale: Sequence, alpha: Sequence[float]) -> Tensor:
    """sum_s alpha_s * L_distill^(s)."""
    if len(per_scale) != len(alpha):
        raise ValueError("one weight per scale is required")
    out = T.Tensor(0.0)
    for a, loss in zip(alpha, per_scale):
        if a:
            out = out + a * T.as_tensor(loss)
    return out


def multi_scale_loss(pair: PairedOutputs, cfg: DistillConfig) -> Tensor:
    n_lv = min(len(pair.features_T), len(pair.features_S))
    alpha = cfg.scale_weights
    if len(alpha) > n_lv:
        raise ValueError(f"{len(alpha)} scale weights for {n_lv} aligned levels")
    return multi_scale([combine_terms(distill_terms(pair, cfg, s), cfg) for s in range(len(alpha))], alpha)


def total_objective(seg_loss, distill, multi, refine, cfg: DistillConfig, attn=None) -> Tensor:
    out = cfg.seg_weight * T.as_tensor(seg_loss) + cfg.lambda_kd * T.as_tensor(distill) \
        + cfg.lambda_multi * T.as_tensor(multi) + cfg.lambda_refine * T.as_tensor(refine)
    if attn is not None and cfg.lambda_attn:
        out = out + cfg.lambda_attn * T.as_tensor(attn)
    return out


# ---------------------------------------------------------------- bound check


def _tempered_softmax(z: np.ndarray, tau) -> np.ndarray:
    s = z / np.asarray(tau)[..., None] if np.ndim(tau) else z / tau
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def lipschitz_check(z_T, z_S, tau):
    """||p_S - p_T||_1 <= (sqrt(K) / tau) ||z_S - z_T||_2 for tau-softmax outputs.

    Logits may carry leading batch axes, with ``tau`` a scalar or one value
    per row.  Returns (lhs, rhs, holds).
    """
    z_T, z_S = np.asarray(z_T, dtype=np.float64), np.asarray(z_S, dtype=np.float64)
    if z_T.shape != z_S.shape:
        raise ValueError("logit vectors must have equal length")
    if not np.all(np.asarray(tau) > 0):
        raise ValueError("tau must be positive")
    K = z_T.shape[-1]
    lhs = np.abs(_tempered_softmax(z_S, tau) - _tempered_softmax(z_T, tau)).sum(-1)
    rhs = math.sqrt(K) / np.asarray(tau) * np.sqrt(((z_S - z_T) ** 2).sum(-1))
    holds = lhs <= rhs + 1e-12
    if np.ndim(lhs) == 0:
        return float(lhs), float(rhs), bool(holds)
    return lhs, rhs, holds
