import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from slick import tensor as T
from slick.blocks import ModelConfig
from slick.distill import DistillConfig, graph_edges
from slick.losses import LossWeights
from slick.model import init_params
from slick.synthdata import generate_many, make_graph
from slick.train import (
    AdamW,
    History,
    OptimConfig,
    TrainConfig,
    clip_by_global_norm,
    distill_student,
    learning_rate,
    make_batch,
    teacher_objective,
    train_teacher,
)

TCFG = ModelConfig(channels=4, levels=2, query_dim=8, num_queries=4, se_reduction=2, fusion_dim=4,
                   fusion_channels=2)
SCFG = ModelConfig(channels=3, levels=2, query_dim=6, num_queries=3, kernel_size=1, stem_stride=2,
                   se_reduction=3, fusion_dim=4, fusion_channels=2)


def test_adamw_matches_scalar_reference():
    cfg = OptimConfig(lr=0.1, weight_decay=0.01, beta1=0.8, beta2=0.9, eps=1e-6)
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(5)
    params = {"w": T.parameter(p0.copy())}
    opt = AdamW(cfg)
    ref, m, v = list(p0), [0.0] * 5, [0.0] * 5
    for t in range(1, 6):
        g = rng.standard_normal(5)
        lr = 0.1 / t
        opt.step(params, {"w": g}, lr)
        for i in range(5):
            m[i] = 0.8 * m[i] + 0.2 * g[i]
            v[i] = 0.9 * v[i] + 0.1 * g[i] ** 2
            ref[i] -= lr * 0.01 * ref[i]
            ref[i] -= lr * (m[i] / (1 - 0.8 ** t)) / (math.sqrt(v[i] / (1 - 0.9 ** t)) + 1e-6)
    assert_allclose(params["w"].data, ref, rtol=1e-13)


def test_adamw_minimises_quadratic():
    params = {"w": T.parameter(np.array([3.0, -2.0]))}
    opt = AdamW(OptimConfig(lr=0.05, weight_decay=0.0))
    for _ in range(500):
        opt.step(params, {"w": 2 * params["w"].data}, 0.05)
    assert np.abs(params["w"].data).max() < 1e-2


def test_clip_by_global_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    assert_allclose(clipped["a"], [0.6, 0.0])
    assert_allclose(clipped["b"], [[0.8]])
    same, _ = clip_by_global_norm(g, 10.0)
    assert same["a"] is g["a"]


def test_learning_rate_schedule():
    cfg = OptimConfig(lr=1.0, min_lr_ratio=0.1)
    assert learning_rate(0, 100, cfg) == 1.0
    assert learning_rate(50, 100, cfg) == pytest.approx(0.55)
    assert learning_rate(99, 100, cfg) == pytest.approx(0.1 + 0.45 * (1 + math.cos(math.pi * 0.99)))
    lrs = [learning_rate(s, 100, cfg) for s in range(100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    warm = OptimConfig(lr=1.0, warmup_steps=4)
    assert [learning_rate(s, 100, warm) for s in range(4)] == [0.25, 0.5, 0.75, 1.0]
    assert learning_rate(7, 10, OptimConfig(lr=0.3, schedule="constant")) == 0.3


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="momentum"):
        OptimConfig.from_dict({"momentum": 0.9})
    with pytest.raises(ValueError, match="epoch"):
        TrainConfig.from_dict({"epoch": 3})
    with pytest.raises(ValueError):
        OptimConfig(lr=0.0)


def test_history_epoch_means():
    h = History()
    h.log_step(epoch=0, step=0, loss=1.0)
    h.log_step(epoch=0, step=1, loss=3.0, seg=2.0)
    assert h.close_epoch(0) == {"epoch": 0, "loss": 2.0, "seg": 2.0}


def test_teacher_objective_parts_finite():
    samples = generate_many(range(3))
    batch = make_batch(samples, TCFG.num_damages)
    loss, parts, _ = teacher_objective(init_params(TCFG, 0), TCFG, batch, make_graph(), LossWeights(), None)
    assert np.isfinite(loss.item())
    assert {"seg", "bnd", "aux"} <= set(parts)


def _train(workers=1, seed=0):
    samples = generate_many(range(6))
    return train_teacher(samples, TCFG, make_graph(), optim=OptimConfig(lr=3e-3),
                         train=TrainConfig(epochs=2, batch_size=3, seed=seed, consistency_every=2,
                                           workers=workers))


def test_teacher_training_is_deterministic():
    p1, h1 = _train()
    p2, h2 = _train()
    for k in p1:
        assert_array_equal(p1[k].data, p2[k].data)
    assert h1.steps == h2.steps
    assert len(h1.epochs) == 2 and all(np.isfinite(s["loss"]) for s in h1.steps)
    p3, _ = _train(seed=1)
    assert any(not np.array_equal(p1[k].data, p3[k].data) for k in p1)


def test_threaded_shards_deterministic():
    p1, _ = _train(workers=2)
    p2, _ = _train(workers=2)
    for k in p1:
        assert_array_equal(p1[k].data, p2[k].data)


def test_distill_student_runs_and_repeats():
    samples = generate_many(range(4))
    teacher, _ = train_teacher(samples, TCFG, make_graph(), train=TrainConfig(epochs=1, batch_size=4))
    edges = graph_edges(make_graph(), 6)
    runs = []
    for _ in range(2):
        sp, proj, hist = distill_student(samples, teacher, TCFG, SCFG, make_graph(), edges, DistillConfig(),
                                         train=TrainConfig(epochs=1, batch_size=2))
        runs.append((sp, proj, hist))
    (a, pa, ha), (b, pb, hb) = runs
    for k in a:
        assert_array_equal(a[k].data, b[k].data)
    for k in pa:
        assert_array_equal(pa[k].data, pb[k].data)
    keys = set(ha.steps[0])
    assert {"seg", "distill", "multi", "refine", "kd_mask", "kd_class", "kd_feature", "kd_graph"} <= keys
    assert all(np.isfinite(s["loss"]) for s in ha.steps)
