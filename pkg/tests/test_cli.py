import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from slick import tensor as T
from slick.cli import main
from slick.config import STUDENT_DEFAULT, ConfigError, RunConfig
from slick.infer import read_slkp
from slick.model import checkpoint_files, load_checkpoint

TINY = {
    "teacher": {"channels": 4, "levels": 2, "query_dim": 8, "num_queries": 4, "se_reduction": 2,
                "fusion_dim": 4, "fusion_channels": 2},
    "student": {"channels": 3, "levels": 2, "query_dim": 6, "num_queries": 3, "kernel_size": 1,
                "stem_stride": 2, "se_reduction": 3, "fusion_dim": 4, "fusion_channels": 2},
    "dataset": {"num_train": 4, "num_test": 2, "image_size": 32},
    "train": {"epochs": 1, "batch_size": 2},
    "distill_train": {"epochs": 1, "batch_size": 2},
    "nms": {"score_threshold": 0.0},
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _tree_bytes(root):
    return {f: (root / f).read_bytes() for f in checkpoint_files(root)}


# ---------------------------------------------------------------- config schema


def test_defaults_roundtrip(tmp_path):
    cfg = RunConfig()
    assert cfg.student == STUDENT_DEFAULT
    cfg.save(tmp_path / "c.json")
    again = RunConfig.load(tmp_path / "c.json")
    assert again.to_dict() == cfg.to_dict()
    assert again.hash() == cfg.hash()


@pytest.mark.parametrize("doc,key", [
    ({"teachr": {}}, "teachr"),
    ({"teacher": {"chanels": 4}}, "teacher.chanels"),
    ({"teacher": {"channels": "16"}}, "teacher.channels"),
    ({"teacher": {"channels": 10}}, "teacher.channels"),
    ({"optimizer": {"lr": -1}}, "optimizer.lr"),
    ({"distill": {"temperature": 0}}, "distill.temperature"),
    ({"loss_weights": {"lambda_seg": 1.0, "lambda_cons": True}}, "loss_weights.lambda_cons"),
    ({"seed": -3}, "seed"),
    ({"nms": {"iou_threshold": 1.5}}, "nms.iou_threshold"),
    ({"dataset": {"path": 3}}, "dataset.path"),
    ({"train": []}, "train"),
])
def test_schema_errors_name_the_key(doc, key):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict(doc)
    assert info.value.key == key
    assert key in str(info.value)


def test_seed_propagates():
    cfg = RunConfig.from_dict({"seed": 9})
    assert cfg.train.seed == cfg.distill_train.seed == 9
    assert cfg.hash() != RunConfig().hash()


def test_invalid_config_exits_nonzero_before_side_effects(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optimizer": {"momentum": 0.9}}))
    out = tmp_path / "never"
    code = main(["train-teacher", "--config", str(bad), "--out", str(out)])
    assert code != 0
    assert "optimizer.momentum" in capsys.readouterr().err
    assert not out.exists()
    garbage = tmp_path / "garbage.json"
    garbage.write_text("{not json")
    assert main(["gen-data", "--config", str(garbage), "--out", str(out)]) != 0
    assert main(["calibrate", "--out", str(out)]) != 0
    assert not out.exists()


def test_bad_thread_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SLICK_THREADS", "zero")
    assert main(["gen-data", "--out", str(tmp_path / "x")]) != 0
    assert "SLICK_THREADS" in capsys.readouterr().err


# ---------------------------------------------------------------- commands


def test_gen_data_and_train_from_directory(tmp_path, tiny):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", tiny, "--out", str(data)]) == 0
    assert (data / "train" / "manifest.json").exists() and (data / "test" / "manifest.json").exists()
    doc = dict(TINY, dataset={"path": str(data)}, train={"epochs": 0, "batch_size": 2})
    cfg_path = tmp_path / "from_dir.json"
    cfg_path.write_text(json.dumps(doc))
    run = tmp_path / "run"
    assert main(["train-teacher", "--config", str(cfg_path), "--out", str(run)]) == 0
    # zero epochs writes the initialised checkpoint
    cfg, params, _ = load_checkpoint(run / "teacher")
    assert cfg.channels == 4 and params


def test_pipeline_end_to_end(tmp_path, tiny, capsys):
    run = tmp_path / "run"
    assert main(["train-teacher", "--config", tiny, "--seed", "7", "--out", str(run)]) == 0
    manifest = json.loads((run / "run_manifest.json").read_text())
    assert manifest["seeds"]["teacher"] == 7
    assert manifest["config_hash"] == RunConfig.from_dict(TINY).with_seed(7).hash()
    assert {"numpy", "python", "slick"} <= set(manifest["versions"])
    history = json.loads((run / "history.json").read_text())
    assert len(history["epochs"]) == 1

    assert main(["distill", "--config", tiny, "--out", str(run), "--teacher", str(run / "teacher")]) == 0
    hist = json.loads((run / "history.json").read_text())
    assert {"kd_mask", "kd_class", "kd_feature", "kd_graph"} <= set(hist["steps"][0])
    assert (run / "table.json").exists()

    preds = tmp_path / "preds"
    assert main(["infer", "--config", tiny, "--ckpt", str(run / "student"), "--out", str(preds),
                 "--evaluate"]) == 0
    files = sorted((preds / "preds").glob("*.slkp"))
    assert len(files) == 2
    header, inst = read_slkp(files[0])
    assert header["image_size"] == [32, 32]

    cal = tmp_path / "cal" / "out.slkp"
    assert main(["calibrate", "--table", str(run / "table.json"), "--in", str(files[0]), "--out", str(cal)]) == 0
    _, cal_inst = read_slkp(cal)
    assert len(cal_inst) == len(inst)
    for p in cal_inst:
        assert abs(p.damage_probs.sum() - 1) < 1e-12
    assert (cal.parent / "out.slkp.manifest.json").exists()

    assert main(["bench", "--config", tiny, "--teacher", str(run / "teacher"), "--student",
                 str(run / "student"), "--size", "32", "--runs", "2", "--warmup", "1",
                 "--out", str(tmp_path / "bench")]) == 0
    report = json.loads((tmp_path / "bench" / "bench.json").read_text())
    assert report["flop_ratio"] > 1
    assert "speedup" in capsys.readouterr().out


def test_train_teacher_is_bit_reproducible(tmp_path, tiny):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train-teacher", "--config", tiny, "--seed", "7", "--out", str(a)]) == 0
    assert main(["train-teacher", "--config", tiny, "--seed", "7", "--out", str(b)]) == 0
    assert _tree_bytes(a / "teacher") == _tree_bytes(b / "teacher")
    assert (a / "history.json").read_bytes() == (b / "history.json").read_bytes()


def test_infer_single_image(tmp_path, tiny):
    run = tmp_path / "run"
    doc = dict(TINY, train={"epochs": 0, "batch_size": 2})
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps(doc))
    assert main(["train-teacher", "--config", str(cfg_path), "--out", str(run)]) == 0
    img = tmp_path / "img.slkt"
    T.save_tensor(img, np.random.default_rng(0).random((32, 32, 3)))
    outs = []
    for i in range(2):
        d = tmp_path / f"p{i}"
        assert main(["infer", "--config", str(cfg_path), "--ckpt", str(run / "teacher"), "--image", str(img),
                     "--out", str(d)]) == 0
        outs.append((d / "preds" / "img.slkp").read_bytes())
    assert outs[0] == outs[1]


def test_build_table_command(tmp_path, tiny):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", tiny, "--out", str(data)]) == 0
    table = tmp_path / "t.json"
    assert main(["calibrate", "--build", str(data / "train"), "--table", str(table),
                 "--out", str(tmp_path / "o")]) == 0
    doc = json.loads(table.read_text())
    assert doc["damages"][-1] == "none"
    assert_array_equal(np.asarray(doc["counts"]).shape, (6, 5))


def test_verify_command(tmp_path, capsys):
    assert main(["verify", "--quick", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "PASS gradients.ops" in text and "FAIL" not in text
    results = json.loads((tmp_path / "verify.json").read_text())
    assert all(r["passed"] for r in results)
