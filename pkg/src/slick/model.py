"""Network composition, parameter initialisation and checkpoints."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import (
    FeaturePyramid,
    ModelConfig,
    StructuralPriorGraph,
    c3_calibrate,
    encode,
    film_modulate,
    fuse_knowledge,
    isr_logits,
    loc_attention,
    mlp,
    prior_attention,
)
from .tensor import Tensor


@dataclass
class InstancePrediction:
    mask: np.ndarray
    part_probs: np.ndarray
    damage_probs: np.ndarray
    score: float
    embedding: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mask_logits: np.ndarray | None = None

    @property
    def part(self) -> int:
        return int(np.argmax(self.part_probs))

    @property
    def damage(self) -> int:
        return int(np.argmax(self.damage_probs))


def instance_score(part_probs: np.ndarray, damage_probs: np.ndarray) -> np.ndarray:
    """max real-part probability times max damage probability (last axis)."""
    return part_probs[..., :-1].max(axis=-1) * damage_probs.max(axis=-1)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardOutput:
    mask_logits: Tensor      # (B, N, H, W)
    masks: Tensor            # sigmoid(mask_logits)
    part_logits: Tensor      # (B, N, P + 1)
    damage_logits: Tensor    # (B, N, D + 1)
    tokens: Tensor           # (B, N, d) query embeddings after prior attention
    pyramid: FeaturePyramid  # calibrated, attention-refined levels
    attention: list          # per-level (B, h, w) spatial attention maps
    token_parts: list

    @property
    def batch(self) -> int:
        return self.mask_logits.shape[0]

    def part_probs(self) -> np.ndarray:
        return _softmax_np(self.part_logits.data)

    def damage_probs(self) -> np.ndarray:
        return _softmax_np(self.damage_logits.data)

    def scores(self) -> np.ndarray:
        return instance_score(self.part_probs(), self.damage_probs())

    def instances(self, b: int = 0) -> list[InstancePrediction]:
        pp, dp, sc = self.part_probs()[b], self.damage_probs()[b], self.scores()[b]
        return [InstancePrediction(mask=self.masks.data[b, i], part_probs=pp[i], damage_probs=dp[i],
                                   score=float(sc[i]), embedding=self.tokens.data[b, i],
                                   mask_logits=self.mask_logits.data[b, i])
                for i in range(self.mask_logits.shape[1])]


# ---------------------------------------------------------------- parameters


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    C, d, N, k = cfg.channels, cfg.query_dim, cfg.num_queries, cfg.kernel_size
    Cr, Z, ce = C // cfg.se_reduction, cfg.fusion_dim, cfg.fusion_channels
    p: dict[str, np.ndarray] = {}

    def he(*shape, fan_in):
        return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)

    def lin(*shape, fan_in):
        return rng.standard_normal(shape) * math.sqrt(1.0 / fan_in)

    stem = he(3, 3, 4, C, fan_in=27)
    stem[:, :, 3, :] = 0.0  # conditioning channel starts disconnected
    p["enc.stem.w"], p["enc.stem.b"] = stem, np.zeros(C)
    p["enc.l1.w"], p["enc.l1.b"] = he(3, 3, C, C, fan_in=9 * C), np.zeros(C)
    for lvl in range(2, cfg.levels + 1):
        p[f"enc.l{lvl}.w"], p[f"enc.l{lvl}.b"] = he(3, 3, C, C, fan_in=9 * C), np.zeros(C)
    for lvl in range(1, cfg.levels + 1):
        p[f"c3.{lvl}.w1"] = lin(C, Cr, fan_in=C)
        p[f"c3.{lvl}.w2"] = lin(Cr, C, fan_in=Cr)
        p[f"loc.{lvl}.w1"], p[f"loc.{lvl}.b1"] = he(C + 1, C, fan_in=C + 1), np.zeros(C)
        p[f"loc.{lvl}.w2"], p[f"loc.{lvl}.b2"] = lin(C, C, fan_in=C) * 0.1, np.zeros(C)
    for stream in ("syn", "geom", "real"):
        p[f"fuse.{stream}.w"], p[f"fuse.{stream}.b"] = he(3, 3, 3, ce, fan_in=27), np.zeros(ce)
    p["fuse.w1"], p["fuse.b1"] = he(3 * ce, Z, fan_in=3 * ce), np.zeros(Z)
    p["fuse.w2"], p["fuse.b2"] = lin(Z, Z, fan_in=Z), np.zeros(Z)
    p["film.gamma.w"], p["film.gamma.b"] = np.zeros((Z, C)), np.ones(C)
    p["film.beta.w"], p["film.beta.b"] = np.zeros((Z, C)), np.zeros(C)
    p["query.embed"] = rng.standard_normal((N, d))
    p["pool.wk"], p["pool.wv"] = lin(C, d, fan_in=C), lin(C, d, fan_in=C)
    for name in ("wq", "wk", "wv"):
        p[f"attn.{name}"] = lin(d, d, fan_in=d)
    p["head.w1"], p["head.b1"] = he(d, d, fan_in=d), np.zeros(d)
    p["head.w2"], p["head.b2"] = lin(d, cfg.part_outputs + cfg.damage_outputs, fan_in=d), np.zeros(
        cfg.part_outputs + cfg.damage_outputs)
    p["phi.w"], p["phi.b"] = lin(d, k * k * C, fan_in=d * k * k * C) , np.zeros(k * k * C)
    return {name: Tensor(v, requires_grad=True) for name, v in p.items()}


def param_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def clone_params(params: dict[str, Tensor], requires_grad: bool = True) -> dict[str, Tensor]:
    return {n: Tensor(t.data.copy(), requires_grad=requires_grad) for n, t in params.items()}


# ---------------------------------------------------------------- forward


def _pool_queries(params, F_coarse: Tensor) -> Tensor:
    """Each learned query attends over the coarsest-level pixels."""
    B, h, w, C = F_coarse.shape
    flat = T.reshape(F_coarse, (B, h * w, C))
    keys = T.matmul(flat, params["pool.wk"])
    vals = T.matmul(flat, params["pool.wv"])
    q = params["query.embed"]
    d = q.shape[-1]
    att = T.softmax(T.matmul(q, T.swapaxes(keys, -1, -2)) * (1.0 / math.sqrt(d)))
    return q + T.matmul(att, vals)


def class_head(params, tokens) -> Tensor:
    return mlp(tokens, [(params["head.w1"], params["head.b1"]), (params["head.w2"], params["head.b2"])])


def forward(params: dict[str, Tensor], cfg: ModelConfig, x, heat=None,
            graph: StructuralPriorGraph | None = None, token_parts=None, aux=None) -> ForwardOutput:
    """Run the full network on an (H, W, 3) image or (B, H, W, 3) batch.

    ``token_parts`` (per image, one part id or None per query) forces the
    part identity used for the prior attention bias; by default it is the
    argmax of the class head evaluated on the pooled queries.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    B, H, W, _ = x.shape
    heat_arr = np.zeros((B, H, W)) if heat is None else np.asarray(
        heat.map[..., 0] if hasattr(heat, "map") else heat, dtype=np.float64).reshape(-1, H, W)
    heat_arr = np.broadcast_to(heat_arr, (B, H, W))
    aux_arr = np.zeros((B, H, W, 1)) if aux is None else np.asarray(
        aux.data if isinstance(aux, Tensor) else aux, dtype=np.float64).reshape(B, H, W, 1)
    inp = np.concatenate([x[..., :3], aux_arr], -1)

    raw = encode(inp, cfg, params)
    levels, attention = [], []
    for lvl, F in enumerate(raw.levels, start=1):
        F = c3_calibrate(F, params[f"c3.{lvl}.w1"], params[f"c3.{lvl}.w2"])
        hm = T.resize_nearest(heat_arr[..., None], F.shape[1:3])
        F = F + loc_attention(F, hm, [(params[f"loc.{lvl}.w1"], params[f"loc.{lvl}.b1"]),
                                      (params[f"loc.{lvl}.w2"], params[f"loc.{lvl}.b2"])])
        levels.append(F)
        attention.append(T.mean(T.square(F), axis=-1))
    pyramid = FeaturePyramid(levels)

    xs = x[..., :3]
    z = fuse_knowledge(xs, (params["fuse.syn.w"], params["fuse.syn.b"]),
                       (params["fuse.geom.w"], params["fuse.geom.b"]),
                       (params["fuse.real.w"], params["fuse.real.b"]),
                       [(params["fuse.w1"], params["fuse.b1"]), (params["fuse.w2"], params["fuse.b2"])])

    mask_feat = levels[0]
    size = levels[0].shape[1:3]
    for F in levels[1:]:
        mask_feat = mask_feat + T.resize(F, size)
    mask_feat = film_modulate(mask_feat, z, (params["film.gamma.w"], params["film.gamma.b"]),
                              (params["film.beta.w"], params["film.beta.b"]))

    tokens = _pool_queries(params, levels[-1])
    if token_parts is None:
        prelim = class_head(params, tokens).data[..., :cfg.part_outputs].argmax(-1)
        token_parts = [[graph.parts[i] if graph is not None and i < cfg.num_parts else None
                        for i in row] for row in prelim]
    if graph is not None:
        tokens = tokens + prior_attention(tokens, graph, token_parts,
                                          params["attn.wq"], params["attn.wk"], params["attn.wv"])
    else:
        empty = StructuralPriorGraph(parts=[], bias_pos=0.0, bias_neg=0.0)
        tokens = tokens + prior_attention(tokens, empty, [[None] * cfg.num_queries] * B,
                                          params["attn.wq"], params["attn.wk"], params["attn.wv"])
    logits = class_head(params, tokens)
    part_logits = logits[..., :cfg.part_outputs]
    damage_logits = logits[..., cfg.part_outputs:]

    low = isr_logits(tokens, mask_feat, params["phi.w"], params["phi.b"], cfg.kernel_size)
    mask_logits = T.resize(low, (H, W), axes=(-2, -1))
    return ForwardOutput(mask_logits=mask_logits, masks=T.sigmoid(mask_logits),
                         part_logits=part_logits, damage_logits=damage_logits, tokens=tokens,
                         pyramid=pyramid, attention=attention, token_parts=token_parts)


def checksum(out: ForwardOutput) -> float:
    return float(out.mask_logits.data.sum() + out.part_logits.data.sum()
                 + out.damage_logits.data.sum() + out.pyramid[0].data.sum())


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, Tensor], meta: dict | None = None) -> None:
    """JSON manifest plus one SLKT file per parameter."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(params):
        fname = f"params/{name}.slkt"
        T.save_tensor(path / fname, params[name].data)
        entries.append({"name": name, "shape": list(params[name].shape), "file": fname})
    manifest = {"format": "slick-checkpoint", "version": 1, "config": cfg.to_dict(),
                "parameters": entries, "meta": meta or {}}
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path, requires_grad: bool = True):
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "slick-checkpoint":
        raise ValueError(f"{path} is not a checkpoint directory")
    cfg = ModelConfig.from_dict(manifest["config"])
    params = {}
    for entry in manifest["parameters"]:
        arr = T.load_tensor(path / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"shape mismatch for {entry['name']}")
        params[entry["name"]] = Tensor(arr, requires_grad=requires_grad)
    return cfg, params, manifest.get("meta", {})


def checkpoint_files(path) -> list[str]:
    out = []
    for root, _, files in os.walk(path):
        out.extend(os.path.relpath(os.path.join(root, f), path) for f in files)
    return sorted(out)
