"""Property suite behind ``slick verify``: gradient checks, bound sampling,
NMS properties, boundary and calibration properties, FLOP scaling.

Each check returns a dict ``{name, passed, detail, cases, seconds}``.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .bench import flops, scaling_exponent
from .blocks import (
    ModelConfig,
    c3_calibrate,
    film_modulate,
    fuse_knowledge,
    isr_logits,
    loc_attention,
    mlp,
    prior_attention,
    se_weights,
)
from .calibrate import PartDamagePriorTable
from .distill import (
    attn_transfer,
    batch_standardize,
    class_kd,
    feature_kd,
    graph_kd,
    lipschitz_check,
    DistillConfig,
    combine_terms,
    mask_kd,
    multi_scale,
    total_objective,
)
from .gradcheck import directional_check
from .infer import nms_indices
from .losses import (
    aux_joint,
    boundary,
    boundary_surrogate,
    consistency,
    cross_entropy,
    LossWeights,
    dice_bce,
    iou_matrix,
    total,
)
from .synthdata import make_graph

_GRAPH = make_graph()
_PARTS = list(_GRAPH.parts)


def _off_kink(r, shape, margin=0.05):
    """Standard normals pushed at least ``margin`` away from zero."""
    x = r.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _n(r, *shape):
    return r.standard_normal(shape)


def _fuse_fn(x, w, b, m):
    return T.square(fuse_knowledge(x, (w, b), (w * 0.5, b), (w, b * 2), [(m, None)])).sum()


def _fuse_case(r, margin=1e-3):
    """Inputs redrawn until every stream pre-activation clears the ReLU kink."""
    while True:
        x, w, b, m = r.random((1, 6, 6, 3)), _n(r, 3, 3, 3, 2), r.uniform(0.2, 1.0, 2), _n(r, 6, 3)
        pre = [T.conv2d(x, w * s, b * t, stride=2).data for s, t in ((1, 1), (0.5, 1), (1, 2))]
        if min(np.abs(p).min() for p in pre) > margin:
            return _fuse_fn, [x, w, b, m]


# name -> (scalar function of Tensors, input generator) or builder(rng) -> (fn, inputs); all smooth at the sampled points
OP_CASES: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda a, b: (T.add(a, b) * a).sum(), lambda r: [_n(r, 3, 4), _n(r, 4)]),
    "sub": (lambda a, b: T.square(T.sub(a, b)).sum(), lambda r: [_n(r, 3, 1), _n(r, 3, 4)]),
    "mul": (lambda a, b: (T.mul(a, b) * a).sum(), lambda r: [_n(r, 2, 3), _n(r, 3)]),
    "div": (lambda a, b: T.div(a, b).sum(), lambda r: [_n(r, 3), r.uniform(0.5, 2.0, 3)]),
    "neg": (lambda a: (T.neg(a) * a * a).sum(), lambda r: [_n(r, 5)]),
    "power": (lambda a: T.power(a, 2.5).sum(), lambda r: [r.uniform(0.3, 2.0, 4)]),
    "square": (lambda a: (T.square(a) * a).sum(), lambda r: [_n(r, 4)]),
    "sqrt": (lambda a: T.sqrt(a).sum(), lambda r: [r.uniform(0.5, 3.0, 4)]),
    "exp": (lambda a: T.exp(a).sum(), lambda r: [_n(r, 5)]),
    "log": (lambda a: T.log(a).sum(), lambda r: [r.uniform(0.3, 3.0, 5)]),
    "absolute": (lambda a: (T.absolute(a) * a).sum(), lambda r: [_off_kink(r, 6)]),
    "sigmoid": (lambda a: (T.sigmoid(a) * a).sum(), lambda r: [_n(r, 6) * 3]),
    "log_sigmoid": (lambda a: T.log_sigmoid(a).sum(), lambda r: [_n(r, 6) * 5]),
    "relu": (lambda a: T.square(T.relu(a)).sum(), lambda r: [_off_kink(r, 8)]),
    "tanh": (lambda a: T.tanh(a).sum(), lambda r: [_n(r, 4)]),
    "clamp": (lambda a: (T.clamp(a, -0.5, 0.5) * a).sum(),
              lambda r: [np.clip(_off_kink(r, 8), -2, 2) + 0.013]),
    "tsum": (lambda a: T.square(T.tsum(a, axis=(0, 2), keepdims=True)).sum(), lambda r: [_n(r, 3, 4, 2)]),
    "mean": (lambda a: T.square(T.mean(a, axis=1)).sum(), lambda r: [_n(r, 3, 4, 2)]),
    "global_avg_pool": (lambda a: T.square(T.global_avg_pool(a)).sum(), lambda r: [_n(r, 2, 3, 4, 5)]),
    "l1_norm": (lambda a: T.l1_norm(a), lambda r: [_off_kink(r, 7)]),
    "l2_norm": (lambda a: T.l2_norm(a), lambda r: [_n(r, 7)]),
    "squared_l2": (lambda a: T.squared_l2(a), lambda r: [_n(r, 7)]),
    "reshape": (lambda a: (T.reshape(a, (4, 6)) * np.arange(24.0).reshape(4, 6)).sum() ** 2,
                lambda r: [_n(r, 3, 8)]),
    "transpose": (lambda a: (T.transpose(a, (1, 0, 2)) * np.arange(24.0).reshape(4, 3, 2)).sum() ** 2,
                  lambda r: [_n(r, 3, 4, 2)]),
    "swapaxes": (lambda a: (T.swapaxes(a, 0, 1) * np.arange(12.0).reshape(4, 3)).sum() ** 2,
                 lambda r: [_n(r, 3, 4)]),
    "expand_dims": (lambda a: T.square(T.expand_dims(a, 1) * np.ones((3, 2, 4))).sum(), lambda r: [_n(r, 3, 4)]),
    "getitem": (lambda a: T.square(a[np.array([0, 2, 2]), 1:]).sum(), lambda r: [_n(r, 3, 4)]),
    "concat": (lambda a, b: (T.square(T.concat([a, b], -1)) * np.arange(5.0)).sum(),
               lambda r: [_n(r, 2, 2), _n(r, 2, 3)]),
    "stack": (lambda a, b: (T.stack([a, b], 1) ** 3).sum(), lambda r: [_n(r, 3), _n(r, 3)]),
    "flip": (lambda a: (T.flip(a, -1) * np.arange(12.0).reshape(3, 4)).sum() ** 2, lambda r: [_n(r, 3, 4)]),
    "rot90": (lambda a: (T.rot90(a, 1) * np.arange(12.0).reshape(4, 3)).sum() ** 2, lambda r: [_n(r, 3, 4)]),
    "matmul": (lambda a, b: T.square(T.matmul(a, b)).sum(), lambda r: [_n(r, 3, 5), _n(r, 5, 2)]),
    "batched_matmul": (lambda a, b: T.tanh(T.matmul(a, b)).sum(), lambda r: [_n(r, 2, 3, 4), _n(r, 4, 2)]),
    "im2col": (lambda x: (T.im2col(x, 3, 1, 1) ** 2 * 0.5).sum() + T.im2col(x, 3, 2, 1).sum() ** 2,
               lambda r: [_n(r, 1, 4, 5, 2)]),
    "conv2d": (lambda x, w, b: T.tanh(T.conv2d(x, w, b)).sum(), lambda r: [_n(r, 1, 5, 4, 2), _n(r, 3, 3, 2, 3), _n(r, 3)]),
    "conv2d_stride2": (lambda x, w: T.square(T.conv2d(x, w, stride=2)).mean(),
                       lambda r: [_n(r, 2, 5, 6, 2), _n(r, 3, 3, 2, 2)]),
    "softmax": (lambda a: (T.softmax(a, 1.7) * np.arange(5.0)).sum(), lambda r: [_n(r, 3, 5)]),
    "log_softmax": (lambda a: (T.log_softmax(a, 0.8) * np.arange(4.0)).sum(), lambda r: [_n(r, 2, 4)]),
    "kl_divergence": (lambda a, b: T.kl_divergence(T.softmax(a), T.softmax(b)), lambda r: [_n(r, 5), _n(r, 5)]),
    "resize": (lambda a: T.square(T.resize(a, (5, 7), axes=(-2, -1))).sum(), lambda r: [_n(r, 2, 3, 4)]),
    # architecture blocks
    "prior_attention": (lambda t, q, k, v: T.square(prior_attention(t, _GRAPH, _PARTS[:3] + [None], q, k, v)).sum(),
                        lambda r: [_n(r, 4, 5), _n(r, 5, 3) * 0.5, _n(r, 5, 3) * 0.5, _n(r, 5, 2)]),
    "mlp": (lambda x, w1, b1, w2: T.square(mlp(x, [(w1, b1), (w2, None)], activation="tanh")).sum(),
            lambda r: [_n(r, 3, 4), _n(r, 4, 5), _n(r, 5), _n(r, 5, 2)]),
    "loc_attention": (lambda F, w1, w2: T.square(loc_attention(F, np.linspace(0, 1, 12).reshape(3, 4),
                                                               [(w1, None), (w2, None)], activation="tanh")).sum(),
                      lambda r: [_n(r, 3, 4, 2), _n(r, 3, 4), _n(r, 4, 2)]),
    "isr_logits": (lambda q, F, w, b: T.tanh(isr_logits(q, F, w, b, 3)).sum(),
                   lambda r: [_n(r, 2, 3), _n(r, 4, 4, 2), _n(r, 3, 18) * 0.3, _n(r, 18) * 0.3]),
    "se_weights": (lambda F, W1, W2: (se_weights(F, W1, W2) * np.arange(4.0)).sum(),
                   lambda r: [_n(r, 3, 3, 4) + 0.5, _n(r, 4, 2), _n(r, 2, 4)]),
    "c3_calibrate": (lambda F, W1, W2: T.square(c3_calibrate(F, W1, W2)).sum(),
                     lambda r: [_n(r, 3, 3, 4), _n(r, 4, 2), _n(r, 2, 4)]),
    "fuse_knowledge": lambda r: _fuse_case(r),
    "film_modulate": (lambda F, z, g, b: T.square(film_modulate(F, z, (g, np.ones(3)), (b, np.zeros(3)))).sum(),
                      lambda r: [_n(r, 2, 3, 3), _n(r, 2), _n(r, 2, 3), _n(r, 2, 3)]),
}


def _seg_model(W):
    def model(x, heat=None):
        return T.sigmoid(T.reshape(T.matmul(x, W), x.shape[:-1]))[None]
    return model


def _soft_labels(r, *shape):
    z = r.standard_normal(shape)
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


# name -> builder(rng) returning (scalar function, differentiable inputs); targets,
# labels and teacher-side values are drawn inside the builder and held fixed
LOSS_CASES: dict[str, Callable] = {
    "dice_bce": lambda r: (lambda g: (lambda z: dice_bce(T.sigmoid(z), g), [_n(r, 2, 5, 5)]))(
        (r.random((2, 5, 5)) > 0.5).astype(float)),
    "boundary_surrogate": lambda r: (lambda g: (lambda z: boundary_surrogate(T.sigmoid(z), g), [_n(r, 6, 6)]))(
        (r.random((6, 6)) > 0.5).astype(float)),
    "cross_entropy": lambda r: (lambda lab: (lambda z: cross_entropy(z, lab, np.array([1.0, 0.5, 2.0])),
                                             [_n(r, 3, 4)]))(r.integers(0, 4, 3)),
    "aux_joint": lambda r: (lambda a, b: aux_joint(a, b, np.array([0, 2]), np.array([1, 0])),
                            [_n(r, 2, 3), _n(r, 2, 2)]),
    "consistency": lambda r: (lambda x: (lambda W: consistency(_seg_model(W), x, "hflip"),
                                         [_n(r, 3, 1) + np.array([[0.0], [1.0], [2.0]])]))(
        r.random((4, 5, 3)) * np.arange(1, 6)[:, None]),
    "mask_kd": lambda r: (lambda t: (lambda s: mask_kd(t, s, 2.0), [_n(r, 3, 4, 4)]))(_n(r, 3, 4, 4)),
    "class_kd": lambda r: (lambda t: (lambda s: class_kd(t, s, 2.0), [_n(r, 3, 5)]))(_n(r, 3, 5)),
    "class_kd_centered": lambda r: (lambda t: (lambda s: class_kd(t, T.softmax(s), centered=True),
                                               [_n(r, 3, 5)]))(_soft_labels(r, 3, 5)),
    "batch_standardize": lambda r: (lambda f: (batch_standardize(f) * np.arange(1.0, 4.0)).sum() ** 2 * 0.1,
                                    [_n(r, 2, 3, 3, 3)]),
    "feature_kd": lambda r: (lambda ft: (lambda fs, p: feature_kd([ft], [fs], [p]),
                                         [_n(r, 2, 2, 2, 3), _n(r, 3, 4)]))(_n(r, 2, 4, 4, 4)),
    "graph_kd": lambda r: (lambda h: (lambda hp: graph_kd(h, hp, [(0, 1), (1, 2), (0, 3)]),
                                      [_n(r, 2, 4, 3)]))(_n(r, 2, 4, 3)),
    "attn_transfer": lambda r: (lambda t: (lambda a: attn_transfer([t], [T.sigmoid(a)]),
                                           [_n(r, 2, 4, 4)]))(r.random((2, 4, 4)) + 0.1),
    "multi_scale": lambda r: (lambda a, b: multi_scale([T.square(a).sum(), T.tanh(b).sum()], (0.7, 0.3)),
                              [_n(r, 3), _n(r, 4)]),
    # composed objectives
    "seg_total": lambda r: (lambda g, lab: (
        lambda z, c: total({"seg": dice_bce(T.sigmoid(z), g), "bnd": boundary_surrogate(T.sigmoid(z[0]), g[0]),
                            "aux": cross_entropy(c, lab)}, LossWeights()),
        [_n(r, 2, 5, 5), _n(r, 3, 4)]))((r.random((2, 5, 5)) > 0.5).astype(float), r.integers(0, 4, 3)),
    "distill_composite": lambda r: (lambda mt, ct, ft, h: (
        lambda ms, cs, fs, hp: combine_terms({"mask": mask_kd(mt, ms, 2.0), "class": class_kd(ct, cs, 1.0, True),
                                              "feature": feature_kd([ft], [fs]),
                                              "graph": graph_kd(h, hp, [(0, 1), (1, 2)])}, DistillConfig()),
        [_n(r, 2, 4, 4), _n(r, 2, 5), _n(r, 2, 3, 3, 2), _n(r, 3, 4)]))(
        _n(r, 2, 4, 4), _n(r, 2, 5), _n(r, 2, 3, 3, 2), _n(r, 3, 4)),
    "total_objective": lambda r: (lambda a, b, c, d, e: total_objective(
        T.square(a).sum(), T.tanh(b).sum(), T.sigmoid(c).sum(), T.square(d).mean(), DistillConfig(),
        attn=T.exp(e).sum()), [_n(r, 3), _n(r, 2), _n(r, 4), _n(r, 2, 2), _n(r, 3) * 0.3]),
}


def _timed(name: str, fn: Callable[[], tuple[bool, str, int]]) -> dict:
    t0 = time.perf_counter()
    passed, detail, cases = fn()
    return {"name": name, "passed": bool(passed), "detail": detail, "cases": int(cases),
            "seconds": round(time.perf_counter() - t0, 3)}


def _builder(case) -> Callable:
    if isinstance(case, tuple):
        fn, gen = case
        return lambda r: (fn, gen(r))
    return case


def gradient_errors(cases: dict, n: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative directional-derivative error per case over ``n`` draws.

    A case is either ``(fn, generator)`` or a builder returning ``(fn, inputs)``.
    """
    worst = {}
    for i, name in enumerate(sorted(cases)):
        build = _builder(cases[name])
        rng = np.random.default_rng([seed, i])
        w = 0.0
        for _ in range(n):
            fn, inputs = build(rng)
            w = max(w, directional_check(fn, inputs, rng))
        worst[name] = w
    return worst


def check_gradients(cases: dict, tol: float, n: int = 100, seed: int = 0):
    worst = gradient_errors(cases, n, seed)
    bad = {k: v for k, v in worst.items() if not v < tol}
    top = max(worst, key=worst.get)
    detail = f"{len(worst)} functions, worst {top} {worst[top]:.1e} (tol {tol:g})"
    if bad:
        detail += f"; failing: {sorted(bad)}"
    return not bad, detail, n * len(worst)


def check_lipschitz(n: int = 100_000, seed: int = 0, max_k: int = 32):
    """Sample (tau, K, z_T, z_S) and count violations of the bound with C = sqrt(K)."""
    rng = np.random.default_rng(seed)
    ks = rng.integers(2, max_k + 1, n)
    violations = 0
    worst = 0.0
    for k in np.unique(ks):
        m = int((ks == k).sum())
        tau = rng.uniform(0.5, 10.0, m)
        scale = rng.choice([0.1, 1.0, 10.0], size=(m, 1))
        z_t = rng.standard_normal((m, k)) * scale
        z_s = z_t + rng.standard_normal((m, k)) * rng.choice([1e-3, 0.1, 1.0, 5.0], size=(m, 1))
        lhs, rhs, holds = lipschitz_check(z_t, z_s, tau)
        violations += int((~np.asarray(holds)).sum())
        worst = max(worst, float(np.max(lhs / rhs)))
    return violations == 0, f"{violations} violations, max lhs/rhs {worst:.3f}", n


def random_prediction_set(rng, size: int = 12):
    n = int(rng.integers(0, 10))
    masks = np.zeros((n, size, size))
    for i in range(n):
        y, x = rng.integers(0, size - 3, 2)
        h, w = rng.integers(2, 7, 2)
        masks[i, y:y + h, x:x + w] = rng.uniform(0.5, 1.0)
    scores = np.round(rng.random(n), 2)  # coarse scores create ties
    return masks, scores


def check_nms(n: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    failures = {"subset": 0, "threshold": 0, "iou": 0, "idempotent": 0, "scale": 0}
    for _ in range(n):
        masks, scores = random_prediction_set(rng)
        thr, eps, k = float(rng.uniform(0, 0.8)), float(rng.uniform(0.1, 1.0)), int(rng.integers(1, 8))
        kept = nms_indices(masks, scores, thr, eps, k)
        failures["subset"] += not (len(set(kept)) == len(kept) <= k and set(kept) <= set(range(len(scores))))
        failures["threshold"] += not all(scores[i] > thr for i in kept)
        if len(kept) > 1:
            iou = iou_matrix(masks[kept], masks[kept])
            failures["iou"] += not (iou[~np.eye(len(kept), dtype=bool)] < eps).all()
        again = nms_indices(masks[kept], scores[kept], thr, eps, k) if kept else []
        failures["idempotent"] += [kept[i] for i in again] != kept
        c = float(rng.uniform(0.1, 10.0))
        failures["scale"] += nms_indices(masks, scores * c, thr * c, eps, k) != kept
    bad = {k: v for k, v in failures.items() if v}
    return not bad, f"failures per property: {failures}", n


def boundary_set_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Boundary loss from explicit pixel sets (4-neighbour, outside counts as background)."""
    def edge(m):
        on = {(i, j) for i in range(m.shape[0]) for j in range(m.shape[1]) if m[i, j] >= 0.5}
        return {(i, j) for i, j in on
                if any(q not in on for q in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)))}
    sa, sb = edge(a), edge(b)
    if not sa and not sb:
        return 0.0
    return 1.0 - 2.0 * len(sa & sb) / (len(sa) + len(sb))


def check_boundary(n: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n):
        a = (rng.random((16, 16)) < rng.uniform(0.1, 0.9)).astype(float)
        b = (rng.random((16, 16)) < rng.uniform(0.1, 0.9)).astype(float)
        mismatches += boundary(a, b) != boundary_set_oracle(a, b)
    sq = np.zeros((16, 16))
    sq[2:6, 2:6] = 1
    far = np.zeros((16, 16))
    far[9:14, 9:14] = 1
    ident = boundary(sq, sq) == 0.0 and boundary_surrogate(sq, sq).item() == 0.0
    disjoint = boundary(sq, far) == 1.0
    ok = mismatches == 0 and ident and disjoint
    return ok, f"{mismatches} oracle mismatches, identical->0 {ident}, disjoint->1 {disjoint}", n


def check_calibration(n: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst_row = 0.0
    monotone_failures = 0
    for _ in range(n):
        P, D = int(rng.integers(1, 7)), int(rng.integers(2, 7))
        counts = rng.integers(0, 6, (P, D)).astype(float)
        counts[rng.random(P) < 0.3] = 0.0  # all-zero rows
        alpha = float(rng.uniform(0.01, 3.0))
        t = PartDamagePriorTable(tuple(f"p{i}" for i in range(P)), tuple(f"d{j}" for j in range(D)), counts, alpha)
        worst_row = max(worst_row, float(np.abs(t.probs.sum(1) - 1.0).max()))
        p, d = int(rng.integers(P)), int(rng.integers(D))
        bumped = counts.copy()
        bumped[p, d] += float(rng.uniform(0.5, 5.0))
        u = PartDamagePriorTable(t.parts, t.damages, bumped, alpha)
        monotone_failures += u.probs[p, d] < t.probs[p, d]
    ok = worst_row <= 1e-12 and monotone_failures == 0
    return ok, f"max |row sum - 1| {worst_row:.1e}, monotonicity failures {monotone_failures}", n


def check_flop_scaling(sizes=(32, 64, 128, 256)):
    from .config import STUDENT_DEFAULT
    exps = {name: scaling_exponent(cfg, sizes) for name, cfg in (("teacher", ModelConfig()),
                                                                 ("student", STUDENT_DEFAULT))}
    quad = all(flops(cfg, 2 * s, 2 * s, "spatial") == 4 * flops(cfg, s, s, "spatial")
               for cfg in (ModelConfig(), STUDENT_DEFAULT) for s in sizes)
    ok = all(abs(e - 1.0) <= 0.15 for e in exps.values()) and quad
    return ok, ", ".join(f"{k} exponent {v:.4f}" for k, v in exps.items()) + f", spatial x4 exact {quad}", len(sizes)


def run_all(quick: bool = False, log: Callable[[str], None] | None = print) -> list[dict]:
    scale = 10 if quick else 1
    checks = [
        ("gradients.ops", lambda: check_gradients(OP_CASES, 1e-4, n=100 // scale)),
        ("gradients.losses", lambda: check_gradients(LOSS_CASES, 1e-3, n=100 // scale)),
        ("lipschitz_bound", lambda: check_lipschitz(100_000 // scale)),
        ("nms_properties", lambda: check_nms(1000 // scale)),
        ("boundary_oracle", lambda: check_boundary(1000 // scale)),
        ("calibration_rows_monotone", lambda: check_calibration(1000 // scale)),
        ("flop_scaling", check_flop_scaling),
    ]
    results = []
    for name, fn in checks:
        r = _timed(name, fn)
        results.append(r)
        if log:
            log(f"{'PASS' if r['passed'] else 'FAIL'} {name}: {r['detail']} ({r['seconds']:.1f}s)")
    return results
