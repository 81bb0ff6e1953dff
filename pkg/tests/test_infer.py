import numpy as np
import pytest
from numpy.testing import assert_array_equal

from slick.blocks import ModelConfig
from slick.calibrate import build_table
from slick.infer import (
    NmsConfig,
    bootstrap_refine,
    instance_ious,
    mask_nms,
    nms_indices,
    predict,
    psi,
    read_slkp,
    write_slkp,
)
from slick.losses import iou_matrix
from slick.model import InstancePrediction, forward, init_params
from slick.synthdata import Taxonomy, generate, make_graph

CFG = ModelConfig(channels=4, levels=2, query_dim=8, num_queries=5, se_reduction=2, fusion_dim=4,
                  fusion_channels=2)


def _inst(mask, score):
    return InstancePrediction(mask=np.asarray(mask, dtype=float), part_probs=np.array([1.0, 0.0]),
                              damage_probs=np.array([1.0]), score=score)


def _reference_nms(masks, scores, thr, eps, top_k):
    """Scan the remaining candidates for the best survivor until none is left."""
    remaining = [i for i in range(len(scores)) if scores[i] > thr]
    kept = []
    b = masks >= 0.5
    while remaining and len(kept) < top_k:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best]:
                best = i
        remaining.remove(best)
        ok = True
        for j in kept:
            inter = (b[best] & b[j]).sum()
            union = (b[best] | b[j]).sum()
            if union and inter / union >= eps:
                ok = False
        if ok:
            kept.append(best)
    return kept


def _random_set(rng, n=None, size=10):
    n = int(rng.integers(0, 9)) if n is None else n
    masks = np.zeros((n, size, size))
    for i in range(n):
        y, x = rng.integers(0, size - 3, 2)
        h, w = rng.integers(2, 6, 2)
        masks[i, y:y + h, x:x + w] = rng.uniform(0.5, 1.0)
    scores = np.round(rng.random(n), 2)  # rounding creates ties
    return masks, scores


def test_nms_config_validation():
    with pytest.raises(ValueError):
        NmsConfig(score_threshold=1.5)
    with pytest.raises(ValueError):
        NmsConfig(iou_threshold=0.0)
    with pytest.raises(ValueError):
        NmsConfig(top_k=0)


def test_single_and_duplicate():
    m = np.zeros((6, 6))
    m[1:4, 1:4] = 1
    assert len(mask_nms([_inst(m, 0.8)], NmsConfig(score_threshold=0.5))) == 1
    kept = mask_nms([_inst(m, 0.6), _inst(m, 0.9)], NmsConfig(score_threshold=0.1, iou_threshold=0.5))
    assert len(kept) == 1 and kept[0].score == 0.9
    assert mask_nms([], NmsConfig()) == []


def test_five_overlapping_vs_reference():
    rng = np.random.default_rng(0)
    for _ in range(100):
        masks, scores = _random_set(rng, n=5, size=8)
        for eps in (0.3, 0.5, 0.8):
            got = nms_indices(masks, scores, 0.1, eps, 10)
            assert got == _reference_nms(masks, scores, 0.1, eps, 10)


def test_nms_properties():
    rng = np.random.default_rng(1)
    for _ in range(200):
        masks, scores = _random_set(rng)
        thr, eps, k = float(rng.uniform(0, 0.8)), float(rng.uniform(0.1, 1.0)), int(rng.integers(1, 6))
        kept = nms_indices(masks, scores, thr, eps, k)
        assert len(set(kept)) == len(kept) and len(kept) <= k
        assert all(scores[i] > thr for i in kept)
        if len(kept) > 1:
            iou = iou_matrix(masks[kept], masks[kept])
            assert (iou[~np.eye(len(kept), dtype=bool)] < eps).all()
        if kept:
            again = nms_indices(masks[kept], scores[kept], thr, eps, k)
            assert [kept[i] for i in again] == kept
        c = float(rng.uniform(0.1, 10))
        assert nms_indices(masks, scores * c, thr * c, eps, k) == kept


def test_psi_range():
    rng = np.random.default_rng(2)
    for _ in range(20):
        m = rng.random((2, 4, 5, 5)) * 3 - 1
        out = psi(m, rng.random((2, 4)) * 4)
        assert out.shape == (2, 5, 5, 1)
        assert out.min() >= 0 and out.max() <= 1


def test_bootstrap_identity_with_disconnected_conditioning():
    params = init_params(CFG, seed=0)
    assert not params["enc.stem.w"].data[:, :, 3, :].any()
    x = np.random.default_rng(3).random((2, 16, 16, 3))
    first = forward(params, CFG, x, graph=make_graph())
    second, loss = bootstrap_refine(params, CFG, x, graph=make_graph(), first=first)
    assert_array_equal(second.masks.data, first.masks.data)
    assert loss.item() == 0.0


def test_bootstrap_golden_checksum():
    params = init_params(CFG, seed=1)
    rng = np.random.default_rng(4)
    params["enc.stem.w"].data[:, :, 3, :] = rng.standard_normal((3, 3, CFG.channels))
    x = rng.random((1, 16, 16, 3))
    second, loss = bootstrap_refine(params, CFG, x, graph=make_graph())
    assert loss.item() > 0
    assert float(second.mask_logits.data.sum()) == pytest.approx(GOLDEN_REFINE, rel=1e-10)
    assert loss.item() == pytest.approx(GOLDEN_REFINE_LOSS, rel=1e-10)


GOLDEN_REFINE = -72.61186064552513
GOLDEN_REFINE_LOSS = 0.0031626290771717414


def test_predict_contracts_and_calibration():
    params = init_params(CFG, seed=2)
    s = generate(3)
    x, heat = s.image[None], s.heatmap[None]
    for thr in (0.0, 0.2, 0.99):
        out = predict(params, CFG, x, heat, make_graph(), NmsConfig(score_threshold=thr, iou_threshold=0.4))[0]
        assert all(p.score > thr for p in out)
        if len(out) > 1:
            iou = iou_matrix(np.stack([p.mask for p in out]), np.stack([p.mask for p in out]))
            assert (iou[~np.eye(len(out), dtype=bool)] < 0.4).all()
    tax = Taxonomy()
    table = build_table([], tax.parts, tax.damages_with_none)
    plain = predict(params, CFG, x, heat, make_graph(), NmsConfig(score_threshold=0.0))[0]
    cal = predict(params, CFG, x, heat, make_graph(), NmsConfig(score_threshold=0.0), table=table)[0]
    assert [p.score for p in plain] == [p.score for p in cal]


def test_predict_golden():
    params = init_params(CFG, seed=5)
    s = generate(8)
    out = predict(params, CFG, s.image[None], s.heatmap[None], make_graph(), NmsConfig(score_threshold=0.0))[0]
    summary = [round(p.score, 10) for p in out]
    assert summary == GOLDEN_PREDICT


GOLDEN_PREDICT = [0.1796124056, 0.1547292168, 0.1436721058]


def test_slkp_roundtrip_and_determinism(tmp_path):
    params = init_params(CFG, seed=3)
    s = generate(1)
    tax = Taxonomy()
    paths = []
    for i in range(2):
        out = predict(params, CFG, s.image[None], s.heatmap[None], make_graph(), NmsConfig(score_threshold=0.0))[0]
        paths.append(tmp_path / f"p{i}.slkp")
        write_slkp(paths[-1], out, tax.parts, tax.damages_with_none, (64, 64))
    assert paths[0].read_bytes() == paths[1].read_bytes()
    header, back = read_slkp(paths[0])
    assert header["image_size"] == [64, 64]
    assert len(back) == len(out)
    for a, b in zip(out, back):
        assert_array_equal(a.mask, b.mask)
        assert a.score == b.score
        assert_array_equal(a.damage_probs, b.damage_probs)
    bad = tmp_path / "bad.slkp"
    bad.write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        read_slkp(bad)


def test_instance_ious():
    gt = np.zeros((2, 4, 4))
    gt[0, :2] = 1
    gt[1, 2:] = 1
    assert_array_equal(instance_ious([_inst(gt[1], 0.5)], gt), [0.0, 1.0])
    assert_array_equal(instance_ious([], gt), [0.0, 0.0])
