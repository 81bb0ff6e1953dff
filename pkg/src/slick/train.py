"""Optimiser, segmentation objective and the teacher / student training loops."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .blocks import ModelConfig, StructuralPriorGraph
from .distill import (
    DistillConfig,
    attn_transfer,
    build_pair,
    distill_terms,
    combine_terms,
    feature_projections,
    init_projections,
    multi_scale_loss,
    total_objective,
)
from .infer import bootstrap_refine
from .losses import (
    TRANSFORMS,
    LossWeights,
    aux_joint,
    boundary_surrogate,
    consistency,
    dice_bce,
    greedy_pairs,
    iou_matrix,
    total,
)
from .model import ForwardOutput, forward, init_params
from .synthdata import SceneSample
from .tensor import Tensor

NO_OBJECT_WEIGHT = 0.1


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "cosine"      # "cosine" or "constant"
    cycles: int = 1               # cosine cycles over the whole run
    min_lr_ratio: float = 0.05
    warmup_steps: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0 or self.clip_norm < 0:
            raise ValueError("weight_decay and clip_norm must be non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "OptimConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown optimizer keys: {sorted(unknown)}")
        return cls(**d)


def learning_rate(step: int, total_steps: int, cfg: OptimConfig) -> float:
    """Linear warm-up then a cosine cycle between lr and min_lr_ratio * lr."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant" or total_steps <= 1:
        return cfg.lr
    period = max(1, math.ceil((total_steps - cfg.warmup_steps) / cfg.cycles))
    t = ((step - cfg.warmup_steps) % period) / period
    lo = cfg.lr * cfg.min_lr_ratio
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * t))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class AdamW:
    """Adam with decoupled weight decay; state kept per parameter name."""

    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p = params[name].data
            if c.weight_decay:
                p -= lr * c.weight_decay * p
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    images: np.ndarray            # (B, H, W, 3)
    heat: np.ndarray              # (B, H, W)
    masks: list                   # per image (K, H, W)
    labels: list                  # per image (K, 2) part index, damage index

    @property
    def size(self) -> int:
        return len(self.images)

    def shard(self, lo: int, hi: int) -> "Batch":
        return Batch(self.images[lo:hi], self.heat[lo:hi], self.masks[lo:hi], self.labels[lo:hi])


def make_batch(samples: Sequence[SceneSample], num_damages: int) -> Batch:
    return Batch(images=np.stack([s.image for s in samples]),
                 heat=np.stack([s.heatmap for s in samples]),
                 masks=[s.instance_masks() for s in samples],
                 labels=[s.instance_labels(num_damages) for s in samples])


def match_batch(out: ForwardOutput, batch: Batch, class_weight: float = 0.5):
    """Per-image greedy assignment of queries to ground-truth instances.

    Similarity is soft mask IoU plus ``class_weight`` times the predicted
    probabilities of the instance's part and damage labels.
    """
    masks = out.masks.data
    pp, dp = out.part_probs(), out.damage_probs()
    rows = []
    for b in range(batch.size):
        gt, lab = batch.masks[b], batch.labels[b]
        if len(gt) == 0:
            rows.append([])
            continue
        sim = iou_matrix(masks[b], gt, soft=True)
        sim = sim + class_weight * 0.5 * (pp[b][:, lab[:, 0]] + dp[b][:, lab[:, 1]])
        rows.append(greedy_pairs(sim, -np.inf).pairs)
    return rows


def segmentation_losses(out: ForwardOutput, batch: Batch, cfg: ModelConfig, pairs=None) -> dict:
    """Dice+BCE and boundary surrogate on matched queries; joint CE on all queries."""
    if pairs is None:
        pairs = match_batch(out, batch)
    B, N = out.batch, cfg.num_queries
    bi, qi, gt_masks = [], [], []
    part_t = np.full((B, N), cfg.num_parts)
    dmg_t = np.full((B, N), cfg.num_damages)
    weights = np.full((B, N), NO_OBJECT_WEIGHT)
    for b, prs in enumerate(pairs):
        for q, g in prs:
            bi.append(b)
            qi.append(q)
            gt_masks.append(batch.masks[b][g])
            part_t[b, q], dmg_t[b, q] = batch.labels[b][g]
            weights[b, q] = 1.0
    losses = {}
    if bi:
        pred = out.masks[np.array(bi), np.array(qi)]
        gt = np.stack(gt_masks)
        losses["seg"] = dice_bce(pred, gt)
        losses["bnd"] = boundary_surrogate(pred, gt)
    else:
        losses["seg"] = losses["bnd"] = Tensor(0.0)
    losses["aux"] = aux_joint(out.part_logits, out.damage_logits, part_t, dmg_t, weights)
    return losses


def _model_fn(params, cfg, graph):
    return lambda x, heat=None: forward(params, cfg, x, heat=heat, graph=graph).masks


def teacher_objective(params, cfg: ModelConfig, batch: Batch, graph, weights: LossWeights,
                      cons_transform: str | None = None, cons_images: int = 2):
    out = forward(params, cfg, batch.images, heat=batch.heat, graph=graph)
    losses = segmentation_losses(out, batch, cfg)
    if cons_transform is not None and weights.lambda_cons:
        k = min(cons_images, batch.size)
        losses["cons"] = consistency(_model_fn(params, cfg, graph), batch.images[:k], cons_transform,
                                     heat=batch.heat[:k])
    else:
        losses["cons"] = Tensor(0.0)
    return total(losses, weights), losses, out


# ---------------------------------------------------------------- loops


@dataclass
class TrainConfig:
    epochs: int = 6
    batch_size: int = 16
    seed: int = 0
    consistency_every: int = 4
    workers: int = 1
    log_every: int = 0

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class History:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def log_step(self, **kw) -> None:
        self.steps.append({k: float(v) for k, v in kw.items()})

    def close_epoch(self, epoch: int) -> dict:
        rows = [s for s in self.steps if s.get("epoch") == epoch]
        keys = sorted({k for r in rows for k in r} - {"epoch", "step"})
        summary = {"epoch": epoch, **{k: float(np.mean([r[k] for r in rows if k in r])) for k in keys}}
        self.epochs.append(summary)
        return summary


def _sharded_grads(objective: Callable, params: dict[str, Tensor], batch: Batch, workers: int):
    """Loss and gradients for a batch, optionally split across worker threads.

    Each worker differentiates its shard with private leaf tensors sharing
    the parameter storage; shard gradients are summed in worker-index order.
    """
    if workers <= 1 or batch.size < 2:
        zero_grads(params)
        loss, parts = objective(params, batch)
        T.backward(loss)
        return float(loss.item()), {k: float(v.item()) for k, v in parts.items()}, collect_grads(params)
    bounds = np.linspace(0, batch.size, min(workers, batch.size) + 1).astype(int)

    def run(i):
        local = {n: Tensor.__new__(Tensor) for n in params}
        for n, p in params.items():
            t = local[n]
            t.data, t.requires_grad, t.grad = p.data, True, None
            t._parents, t._backward, t._op = (), None, "leaf"
        shard = batch.shard(bounds[i], bounds[i + 1])
        loss, parts = objective(local, shard)
        T.backward(loss)
        w = shard.size / batch.size
        return (w * float(loss.item()), {k: w * float(v.item()) for k, v in parts.items()},
                {n: w * g for n, g in collect_grads(local).items()})

    with ThreadPoolExecutor(max_workers=len(bounds) - 1) as pool:
        results = list(pool.map(run, range(len(bounds) - 1)))
    loss = 0.0
    parts: dict[str, float] = {}
    grads = {n: np.zeros_like(p.data) for n, p in params.items()}
    for l, pr, g in results:  # fixed worker order
        loss += l
        for k, v in pr.items():
            parts[k] = parts.get(k, 0.0) + v
        for n in grads:
            grads[n] += g[n]
    return loss, parts, grads


def train_teacher(samples: Sequence[SceneSample], cfg: ModelConfig, graph: StructuralPriorGraph,
                  weights: LossWeights = LossWeights(), optim: OptimConfig = OptimConfig(),
                  train: TrainConfig = TrainConfig(), params: dict | None = None,
                  log: Callable[[str], None] | None = None):
    rng = np.random.default_rng(train.seed)
    if params is None:
        params = init_params(cfg, seed=train.seed)
    opt = AdamW(optim)
    history = History()
    n = len(samples)
    steps_per_epoch = math.ceil(n / train.batch_size) if n else 0
    total_steps = steps_per_epoch * train.epochs
    step = 0
    for epoch in range(train.epochs):
        order = rng.permutation(n)
        t0 = time.perf_counter()
        for s in range(steps_per_epoch):
            idx = order[s * train.batch_size:(s + 1) * train.batch_size]
            batch = make_batch([samples[i] for i in idx], cfg.num_damages)
            cons_t = None
            if train.consistency_every and step % train.consistency_every == 0:
                cons_t = TRANSFORMS[1 + int(rng.integers(len(TRANSFORMS) - 1))]

            def objective(p, b, cons_t=cons_t):
                loss, parts, _ = teacher_objective(p, cfg, b, graph, weights, cons_t)
                return loss, parts

            loss, parts, grads = _sharded_grads(objective, params, batch, train.workers)
            grads, gnorm = clip_by_global_norm(grads, optim.clip_norm)
            lr = learning_rate(step, total_steps, optim)
            opt.step(params, grads, lr)
            zero_grads(params)
            history.log_step(epoch=epoch, step=step, loss=loss, grad_norm=gnorm, lr=lr, **parts)
            if log and train.log_every and step % train.log_every == 0:
                log(f"step {step} loss {loss:.4f} " + " ".join(f"{k} {v:.4f}" for k, v in sorted(parts.items())))
            step += 1
        summary = history.close_epoch(epoch)
        if log:
            log(f"epoch {epoch} loss {summary.get('loss', float('nan')):.4f} "
                f"({time.perf_counter() - t0:.1f}s)")
    return params, history


def distill_objective(sparams, scfg: ModelConfig, proj: dict, teacher_out: ForwardOutput, batch: Batch,
                      graph, edges, dcfg: DistillConfig, weights: LossWeights):
    """Student objective: segmentation + composite distillation + multi-scale
    + bootstrap refinement (+ attention transfer)."""
    first = forward(sparams, scfg, batch.images, heat=batch.heat, graph=graph)
    seg_parts = segmentation_losses(first, batch, scfg)
    seg = total({**seg_parts, "cons": 0.0}, weights)
    pair = build_pair(teacher_out, first, edges, feature_projections(proj), proj["proj.graph"],
                      threshold=dcfg.pair_threshold)
    terms = distill_terms(pair, dcfg)
    distill = combine_terms(terms, dcfg)
    multi = multi_scale_loss(pair, dcfg) if dcfg.lambda_multi else Tensor(0.0)
    if dcfg.lambda_refine:
        _, refine = bootstrap_refine(sparams, scfg, batch.images, batch.heat, graph, first=first)
    else:
        refine = Tensor(0.0)
    attn = None
    if dcfg.lambda_attn:
        attn = attn_transfer([a.data for a in teacher_out.attention], first.attention)
    loss = total_objective(seg, distill, multi, refine, dcfg, attn)
    parts = {"seg": seg, "distill": distill, "multi": multi, "refine": refine,
             **{f"kd_{k}": v for k, v in terms.items()}}
    if attn is not None:
        parts["attn"] = attn
    return loss, parts


def distill_student(samples: Sequence[SceneSample], teacher_params: dict, tcfg: ModelConfig,
                    scfg: ModelConfig, graph: StructuralPriorGraph, edges,
                    dcfg: DistillConfig = DistillConfig(), weights: LossWeights = LossWeights(),
                    optim: OptimConfig = OptimConfig(), train: TrainConfig = TrainConfig(),
                    params: dict | None = None, log: Callable[[str], None] | None = None):
    rng = np.random.default_rng(train.seed)
    if params is None:
        params = init_params(scfg, seed=train.seed + 1)
    proj = init_projections(tcfg, scfg, seed=train.seed + 2)
    trainable = {**params, **proj}
    opt = AdamW(optim)
    history = History()
    n = len(samples)
    steps_per_epoch = math.ceil(n / train.batch_size) if n else 0
    total_steps = steps_per_epoch * train.epochs
    step = 0
    for epoch in range(train.epochs):
        order = rng.permutation(n)
        t0 = time.perf_counter()
        for s in range(steps_per_epoch):
            idx = order[s * train.batch_size:(s + 1) * train.batch_size]
            batch = make_batch([samples[i] for i in idx], scfg.num_damages)

            def objective(p, b):
                with T.no_grad():
                    t_out = forward(teacher_params, tcfg, b.images, heat=b.heat, graph=graph)
                sp = {k: p[k] for k in params}
                pr = {k: p[k] for k in proj}
                return distill_objective(sp, scfg, pr, t_out, b, graph, edges, dcfg, weights)

            loss, parts, grads = _sharded_grads(objective, trainable, batch, train.workers)
            grads, gnorm = clip_by_global_norm(grads, optim.clip_norm)
            lr = learning_rate(step, total_steps, optim)
            opt.step(trainable, grads, lr)
            zero_grads(trainable)
            history.log_step(epoch=epoch, step=step, loss=loss, grad_norm=gnorm, lr=lr, **parts)
            if log and train.log_every and step % train.log_every == 0:
                log(f"step {step} loss {loss:.4f} " + " ".join(f"{k} {v:.4f}" for k, v in sorted(parts.items())))
            step += 1
        summary = history.close_epoch(epoch)
        if log:
            log(f"epoch {epoch} loss {summary.get('loss', float('nan')):.4f} "
                f"distill {summary.get('distill', float('nan')):.4f} ({time.perf_counter() - t0:.1f}s)")
    return params, proj, history
