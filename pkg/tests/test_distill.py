import math

import mpmath
import numpy as np
import pytest
from numpy.testing import assert_allclose

from slick import tensor as T
from slick.blocks import ModelConfig
from slick.distill import (
    DistillConfig,
    attn_transfer,
    batch_standardize,
    build_pair,
    class_kd,
    combine_terms,
    distill_loss,
    distill_terms,
    feature_kd,
    feature_projections,
    graph_edges,
    graph_kd,
    init_projections,
    lipschitz_check,
    mask_kd,
    multi_scale,
    multi_scale_loss,
    node_embeddings,
    total_objective,
)
from slick.gradcheck import params_check
from slick.losses import dice_bce
from slick.model import clone_params, forward, init_params
from slick.synthdata import make_graph
from slick.tensor import Tensor

mpmath.mp.dps = 50

TEACHER = ModelConfig(channels=8, levels=3, query_dim=8, num_queries=6, se_reduction=2,
                      fusion_dim=4, fusion_channels=2)
STUDENT = ModelConfig(channels=4, levels=2, query_dim=4, num_queries=4, kernel_size=1, se_reduction=2,
                      fusion_dim=4, fusion_channels=2, stem_stride=2)


def _bernoulli_kl_mp(a, b, tau):
    p = 1 / (1 + mpmath.e ** (-mpmath.mpf(a) / tau))
    q = 1 / (1 + mpmath.e ** (-mpmath.mpf(b) / tau))
    return p * mpmath.log(p / q) + (1 - p) * mpmath.log((1 - p) / (1 - q))


# ---------------------------------------------------------------- config


def test_config_defaults_and_validation():
    cfg = DistillConfig()
    assert (cfg.temperature, cfg.lambda_m, cfg.lambda_c, cfg.lambda_f, cfg.lambda_g) == (2.0, 1.0, 1.0, 0.5, 0.5)
    assert (cfg.lambda_kd, cfg.lambda_multi, cfg.lambda_refine) == (1.0, 0.5, 0.1)
    with pytest.raises(ValueError):
        DistillConfig(temperature=0.0)
    with pytest.raises(ValueError):
        DistillConfig(lambda_f=-0.1)
    with pytest.raises(ValueError):
        DistillConfig(scale_weights=(0.3, 0.3))
    with pytest.raises(ValueError):
        DistillConfig.from_dict({"tau": 1.0})
    assert DistillConfig.from_dict(cfg.to_dict()) == cfg


def test_appendix_preset():
    cfg = DistillConfig.appendix(lambda_1=0.7, lambda_2=0.2, lambda_3=0.1, temperature=3.0)
    assert cfg.lambda_g == 0.0 and cfg.lambda_m == 0.0
    assert cfg.lambda_c == 0.2 and cfg.lambda_f == 0.1
    assert cfg.class_temperature == 3.0
    assert cfg.seg_weight == 0.7


# ---------------------------------------------------------------- mask KD


def test_mask_kd_identity_and_nonnegative():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((3, 5, 5)) * 4
    assert mask_kd(m, m, 2.0).item() < 1e-15
    a, b = rng.standard_normal((10000, 1)) * 5, rng.standard_normal((10000, 1)) * 5
    vals = [mask_kd(a[i], b[i], 1.5).item() for i in range(10000)]
    assert min(vals) >= 0.0


def test_mask_kd_pixel_oracle():
    got = mask_kd(np.array([[1.0]]), np.array([[0.0]]), 2.0).item()
    assert_allclose(got, float(_bernoulli_kl_mp(1.0, 0.0, 2.0)), rtol=1e-13)
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 3)) * 3, rng.standard_normal((2, 3)) * 3
    ref = sum(_bernoulli_kl_mp(x, y, 0.7) for x, y in zip(a.flat, b.flat)) / 6
    assert_allclose(mask_kd(a, b, 0.7).item(), float(ref), rtol=1e-12)


def test_mask_kd_monotone_along_path():
    rng = np.random.default_rng(2)
    mt, ms = rng.standard_normal((4, 4)) * 3, rng.standard_normal((4, 4)) * 3
    vals = [mask_kd(mt, ms + t * (mt - ms), 2.0).item() for t in np.linspace(0, 1, 10)]
    assert all(x >= y for x, y in zip(vals, vals[1:]))
    assert vals[-1] < 1e-15


# ---------------------------------------------------------------- class KD


def test_class_kd_uniform_is_log_k():
    for K in (2, 5, 11):
        u = np.full((3, K), 1.0 / K)
        assert_allclose(class_kd(u, u).item(), math.log(K), rtol=1e-14)
        assert class_kd(u, u, centered=True).item() < 1e-15


def test_class_kd_one_hot_limit():
    vals = []
    for s in (5.0, 10.0, 20.0, 40.0):
        ps = np.exp(np.array([s, 0.0, 0.0]))
        ps /= ps.sum()
        vals.append(class_kd(np.array([1.0, 0.0, 0.0]), ps).item())
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-15


def test_class_kd_scalar_oracle():
    rng = np.random.default_rng(3)
    pt, ps = rng.dirichlet(np.ones(6), size=4), rng.dirichlet(np.ones(6), size=4)
    ref = sum(-sum(pt[i, k] * math.log(ps[i, k]) for k in range(6)) for i in range(4)) / 4
    assert_allclose(class_kd(pt, ps).item(), ref, rtol=1e-13)
    ent = sum(-sum(pt[i, k] * math.log(pt[i, k]) for k in range(6)) for i in range(4)) / 4
    assert_allclose(class_kd(pt, ps, centered=True).item(), ref - ent, rtol=1e-12)
    # temperature form takes logits
    zt, zs = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    sm = lambda z: np.exp(z / 2) / np.exp(z / 2).sum(-1, keepdims=True)
    assert_allclose(class_kd(zt, zs, temperature=2.0).item(), class_kd(sm(zt), sm(zs)).item(), rtol=1e-12)


# ---------------------------------------------------------------- feature KD


def test_feature_kd_identity_and_norm_invariance():
    rng = np.random.default_rng(4)
    F = [rng.standard_normal((2, 8, 8, 3)), rng.standard_normal((2, 4, 4, 3))]
    assert feature_kd(F, F).item() < 1e-20
    # exact up to the variance epsilon
    assert_allclose(batch_standardize(F[0] * 7.5).data, batch_standardize(F[0]).data, atol=2e-5)
    assert_allclose(batch_standardize(F[0] * 1e3).data, batch_standardize(F[0] * 1e4).data, atol=1e-10)
    P = rng.standard_normal((3, 5))
    Ft = [f @ P for f in F]
    assert feature_kd(Ft, F, [P, P]).item() < 1e-20


def _standardize_loop(F):
    out = np.empty_like(F)
    for c in range(F.shape[-1]):
        v = F[..., c]
        mu = v.sum() / v.size
        var = ((v - mu) ** 2).sum() / v.size
        out[..., c] = (v - mu) / math.sqrt(var + 1e-5)
    return out


def test_feature_kd_loop_oracle():
    rng = np.random.default_rng(5)
    Ft = [rng.standard_normal((2, 4, 4, 3)), rng.standard_normal((2, 2, 2, 3))]
    Fs = [rng.standard_normal((2, 4, 4, 2)), rng.standard_normal((2, 2, 2, 2))]
    P = [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]
    ref = 0.0
    for ft, fs, p in zip(Ft, Fs, P):
        proj = np.einsum("bhwc,co->bhwo", fs, p)
        d = _standardize_loop(ft) - _standardize_loop(proj)
        ref += (d ** 2).sum() / d.size
    assert_allclose(feature_kd(Ft, Fs, P).item(), ref, rtol=1e-12)


def test_feature_kd_resamples_student():
    rng = np.random.default_rng(6)
    ft = rng.standard_normal((1, 8, 8, 2))
    fs = rng.standard_normal((1, 4, 4, 2))
    up = T.resize(fs, (8, 8)).data
    assert_allclose(feature_kd([ft], [fs]).item(), feature_kd([ft], [up]).item(), rtol=1e-14)


# ---------------------------------------------------------------- graph KD


def test_graph_kd_cases():
    h = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    hp = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 2.0]])
    edges = [(0, 1), (1, 2)]
    assert graph_kd(h, h, edges).item() == 0.0
    assert graph_kd(h, h + np.array([3.0, -1.0]), edges).item() < 1e-28
    assert graph_kd(h + 5.0, h, edges).item() < 1e-28
    assert graph_kd(h, hp, edges).item() == pytest.approx(2.0)
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    ref = sum(((a[i] - a[j]) - (b[i] - b[j])) @ ((a[i] - a[j]) - (b[i] - b[j])) for i, j in edges)
    assert_allclose(graph_kd(a, b, edges).item(), ref, rtol=1e-13)


def test_node_embeddings_mean_and_empty():
    tokens = np.arange(12, dtype=float).reshape(1, 4, 3)
    # 2 parts + no-object, 1 damage + none
    part_logits = np.array([[[5, 0, 0], [5, 0, 0], [0, 0, 5], [0, 0, 5]]], dtype=float)
    dmg_logits = np.array([[[0, 5], [5, 0], [0, 5], [5, 0]]], dtype=float)
    h = node_embeddings(tokens, part_logits, dmg_logits).data[0]
    unit = tokens[0] / np.linalg.norm(tokens[0], axis=1, keepdims=True)
    assert_allclose(h[0], unit[:2].mean(0), rtol=1e-7)
    assert_allclose(h[1], 0.0)
    assert_allclose(h[2], unit[[1, 3]].mean(0), rtol=1e-7)


def test_graph_edges_include_cooccurrence():
    g = make_graph()
    co = np.zeros((6, 4))
    co[0, 1] = 3
    edges = graph_edges(g, 6, co)
    assert (0, 7) in edges
    assert set(g.edges()) <= set(edges)


# ---------------------------------------------------------------- attention transfer


def test_attn_transfer_cases():
    rng = np.random.default_rng(8)
    A = [rng.random((2, 4, 4)), rng.random((2, 2, 2))]
    assert attn_transfer(A, A).item() < 1e-15
    a, b = np.zeros((3, 3)), np.zeros((3, 3))
    a[0, 0], b[2, 2] = 1, 1
    assert_allclose(attn_transfer([a], [b]).item(), 2.0, rtol=1e-10)
    At, As = [rng.random((3, 3))], [rng.random((3, 3))]
    ref = sum(abs(At[0][i, j] / At[0].sum() - As[0][i, j] / As[0].sum()) for i in range(3) for j in range(3))
    assert_allclose(attn_transfer(At, As).item(), ref, rtol=1e-10)


# ---------------------------------------------------------------- composition


def test_multi_scale_cases():
    assert multi_scale([Tensor(2.5)], [1.0]).item() == 2.5
    assert multi_scale([Tensor(2.5), Tensor(1.0)], [0.0, 0.0]).item() == 0.0
    assert multi_scale([Tensor(2.0), Tensor(4.0)], [0.25, 0.75]).item() == 3.5
    with pytest.raises(ValueError):
        multi_scale([Tensor(1.0)], [0.5, 0.5])


def test_total_objective_weights():
    cfg = DistillConfig(lambda_kd=2.0, lambda_multi=0.5, lambda_refine=0.1, lambda_attn=0.0)
    v = total_objective(1.0, 2.0, 4.0, 10.0, cfg, attn=100.0).item()
    assert_allclose(v, 1.0 + 4.0 + 2.0 + 1.0)


def _outputs(seed=0, same=False):
    rng = np.random.default_rng(seed)
    x = rng.random((2, 16, 16, 3))
    heat = rng.random((2, 16, 16))
    tp = init_params(TEACHER, seed=1)
    sp = clone_params(tp) if same else init_params(STUDENT, seed=2)
    scfg = TEACHER if same else STUDENT
    graph = make_graph()
    with T.no_grad():
        t_out = forward(tp, TEACHER, x, heat=heat, graph=graph)
    return tp, sp, scfg, x, heat, graph, t_out


def test_self_distillation_identity():
    tp, sp, scfg, x, heat, graph, t_out = _outputs(same=True)
    s_out = forward(sp, scfg, x, heat=heat, graph=graph)
    proj = init_projections(TEACHER, scfg)
    pair = build_pair(t_out, s_out, graph_edges(graph, 6, np.ones((6, 4))),
                      feature_projections(proj), proj["proj.graph"])
    assert len(pair.mask_T) == 2 * TEACHER.num_queries
    terms = distill_terms(pair, DistillConfig())
    for name, v in terms.items():
        assert abs(v.item()) < 1e-8, name
    assert abs(distill_loss(pair, DistillConfig()).item()) < 1e-8


def test_total_objective_gradients_and_frozen_teacher():
    tp, sp, scfg, x, heat, graph, t_out = _outputs(seed=3)
    rng = np.random.default_rng(4)
    for name in sp:
        if name.rsplit(".", 1)[1].startswith("b") or name.startswith("film."):
            sp[name].data = sp[name].data + 0.1 * rng.standard_normal(sp[name].shape)
    proj = init_projections(TEACHER, scfg, seed=5, noise=0.1)
    edges = graph_edges(graph, 6, np.ones((6, 4)))
    cfg = DistillConfig(scale_weights=(0.5, 0.5))
    target = (rng.random((2, scfg.num_queries, 16, 16)) > 0.5).astype(float)
    allp = {**sp, **proj}

    def loss_fn():
        s_out = forward(sp, scfg, x, heat=heat, graph=graph)
        pair = build_pair(t_out, s_out, edges, feature_projections(proj), proj["proj.graph"])
        attn = attn_transfer([a.data for a in t_out.attention], s_out.attention)
        return total_objective(dice_bce(s_out.masks, target), distill_loss(pair, cfg),
                               multi_scale_loss(pair, cfg), Tensor(0.0), cfg, attn)

    groups = sorted({n.rsplit(".", 1)[0] for n in allp})
    for g in groups:
        names = [n for n in allp if n.rsplit(".", 1)[0] == g]
        err = params_check(loss_fn, allp, np.random.default_rng(len(g)), h=1e-6, names=names)
        assert err < 1e-3, (g, err)
    T.backward(loss_fn())
    assert all(p.grad is None for p in tp.values())


# ---------------------------------------------------------------- Lipschitz bound


def test_lipschitz_equal_and_two_class_oracle():
    lhs, rhs, holds = lipschitz_check([1.0, 2.0], [1.0, 2.0], 1.0)
    assert lhs == 0.0 and rhs == 0.0 and holds
    lhs, rhs, holds = lipschitz_check([1.0, 0.0], [0.0, 1.0], 1.0)
    s = 1 / (1 + mpmath.e ** -1)
    assert_allclose(lhs, float(2 * (2 * s - 1)), rtol=1e-14)
    assert_allclose(rhs, float(mpmath.sqrt(2) * mpmath.sqrt(2)), rtol=1e-14)
    assert holds


def test_lipschitz_random_sample_and_errors():
    rng = np.random.default_rng(9)
    for _ in range(2000):
        K = int(rng.integers(1, 33))
        tau = rng.uniform(0.5, 10)
        zt, zs = rng.standard_normal(K) * 5, rng.standard_normal(K) * 5
        assert lipschitz_check(zt, zs, tau)[2]
    with pytest.raises(ValueError):
        lipschitz_check([1.0], [1.0, 2.0], 1.0)
    with pytest.raises(ValueError):
        lipschitz_check([1.0], [1.0], 0.0)
