import json

import numpy as np
import pytest

from slick import tensor as T
from slick.bench import (
    BenchReport,
    LatencyStats,
    flop_breakdown,
    flop_ratio,
    flops,
    level_sizes,
    run_bench,
    scaling_exponent,
)
from slick.blocks import ModelConfig
from slick.model import forward, init_params
from slick.synthdata import make_graph

TINY = ModelConfig(channels=2, levels=2, query_dim=2, num_queries=1, kernel_size=1, stem_stride=1,
                   se_reduction=2, fusion_channels=1, fusion_dim=1)
STUDENT = ModelConfig(channels=12, levels=2, query_dim=24, num_queries=10, kernel_size=1, stem_stride=2,
                      fusion_channels=6, fusion_dim=8)


def test_level_sizes():
    assert level_sizes(ModelConfig(), 64, 64) == [(64, 64), (32, 32), (16, 16)]
    assert level_sizes(STUDENT, 65, 33) == [(33, 17), (17, 9)]


def test_smallest_model_hand_count():
    # 4x4 input, levels 4x4 and 2x2, C=2, d=2, N=1, k=1, Z=1, 12 class outputs
    b = flop_breakdown(TINY, 4, 4)
    spatial = {
        "enc.stem": 16 * 9 * 4 * 2,
        "enc.l1": 16 * 9 * 2 * 2,
        "enc.l2": 4 * 9 * 2 * 2,
        "c3.1": 2 * 16 * 2,
        "c3.2": 2 * 4 * 2,
        "loc.1": 16 * 3 * 2 + 16 * 2 * 2,
        "loc.2": 4 * 3 * 2 + 4 * 2 * 2,
        "attn_map.1": 16 * 2,
        "attn_map.2": 4 * 2,
        "fuse.encoders": 3 * (4 * 9 * 3 + 4),
        "mask_feat": 4 * 16 * 2,
        "film": 16 * 2,
        "pool": 2 * 4 * 2 * 2 + 2 * 4 * 2,
        "isr": 16 * 2,
        "mask_resize": 4 * 16,
    }
    fixed = {"c3.1": 4, "c3.2": 4, "fuse.mlp": 4, "film": 4, "prior_attn": 3 * 4 + 2 * 2,
             "class_head": 2 * (4 + 2 * 12), "phi": 4}
    assert b["spatial"] == spatial
    assert b["fixed"] == fixed
    assert flops(TINY, 4, 4) == 2832 + 92


@pytest.mark.parametrize("cfg", [TINY, STUDENT, ModelConfig()], ids=["tiny", "student", "teacher"])
def test_conv_entries_match_traced_forward(cfg, monkeypatch):
    traced = []
    orig = T.conv2d

    def counting(x, w, b=None, stride=1, padding="same"):
        out = orig(x, w, b, stride=stride, padding=padding)
        k, _, cin, cout = w.shape
        traced.append(int(np.prod(out.shape[:-1])) * k * k * cin * cout)
        return out

    monkeypatch.setattr(T, "conv2d", counting)
    H = W = 24
    s = np.random.default_rng(0)
    with T.no_grad():
        forward(init_params(cfg, 0), cfg, s.random((1, H, W, 3)), heat=s.random((1, H, W)), graph=make_graph())
    b = flop_breakdown(cfg, H, W)["spatial"]
    hx, wx = -(-H // 2), -(-W // 2)
    fuse_conv = b["fuse.encoders"] - 3 * hx * wx * cfg.fusion_channels
    expected = sum(v for k, v in b.items() if k.startswith("enc.")) + fuse_conv
    assert sum(traced) == expected


def test_identical_configs_ratio_one():
    for cfg in (TINY, STUDENT, ModelConfig()):
        assert flop_ratio(cfg, cfg) == 1.0


def test_spatial_term_quadruples_when_side_doubles():
    for cfg in (ModelConfig(), STUDENT):
        for s in (32, 64, 128):
            assert flops(cfg, 2 * s, 2 * s, "spatial") == 4 * flops(cfg, s, s, "spatial")
            assert flops(cfg, 2 * s, 2 * s, "fixed") == flops(cfg, s, s, "fixed")


def test_default_student_ratio_and_scaling():
    assert flops(ModelConfig(), 64, 64) == 26_990_080
    assert flop_ratio(ModelConfig(), STUDENT) >= 7.0
    for cfg in (ModelConfig(), STUDENT):
        assert abs(scaling_exponent(cfg) - 1.0) <= 0.15


def test_latency_stats():
    calls = []
    stats = LatencyStats.measure(lambda: calls.append(1), runs=7, warmup=3, flops=11)
    assert len(calls) == 10 and stats.runs == 7 and stats.flops == 11
    assert 0 <= stats.median_ms <= stats.p95_ms
    with pytest.raises(ValueError):
        LatencyStats.measure(lambda: None, runs=0)


def test_run_bench_report(tmp_path):
    rep = run_bench(forward, TINY, init_params(TINY, 0), TINY, init_params(TINY, 1), size=16, runs=3,
                    warmup=1, sizes=(16, 32))
    assert isinstance(rep, BenchReport)
    assert rep.flop_ratio == 1.0 and rep.speedup > 0
    rep.save(tmp_path / "b.json")
    data = json.loads((tmp_path / "b.json").read_text())
    assert data["input_size"] == [16, 16] and "speedup" in data
    assert "FLOP ratio" in rep.table()
