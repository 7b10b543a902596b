import json

import numpy as np
import pytest

from otmf.cli import load_config, main, resolved_config
from otmf.errors import ConfigError
from otmf.io import load_checkpoint, load_matrix, load_report


TINY = {
    "stream": {"num_tasks": 2, "input_dim": 4, "classes_per_task": 3,
               "samples_per_task": 40},
    "model": {"layer_dims": [4, 8, 4]},
    "fusion": {"ot_epochs": 6, "batch_size": 16},
    "sft": {"epochs": 30, "lr": 0.1},
    "seeds": [0],
}


@pytest.fixture
def tiny_cfg(tmp_path):
    cfg = dict(TINY, output_dir=str(tmp_path / "run"))
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture
def pipeline(tiny_cfg, tmp_path):
    assert run("gen", "--config", tiny_cfg) == 0
    assert run("train", "--config", tiny_cfg) == 0
    return tiny_cfg, tmp_path / "run" / "seed0"


# ---------------------------------------------------------------------------
# config handling


def test_defaults_without_config_file():
    cfg = load_config(None, None, None)
    assert cfg.seeds == (0,)
    assert cfg.fusion.alpha == 0.8
    assert cfg.model.layer_dims == (8, 16, 8)
    resolved = resolved_config(cfg)
    assert resolved["stream"]["num_tasks"] == 3
    assert resolved["fusion"]["sinkhorn"]["epsilon"] == 0.05


def test_config_overrides(tiny_cfg):
    cfg = load_config(str(tiny_cfg), seed=7, out="elsewhere")
    assert cfg.seeds == (7,)
    assert cfg.output_dir == "elsewhere"
    assert cfg.stream.num_tasks == 2


def test_config_rejects_unknown_keys(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"streem": {}}))
    with pytest.raises(ConfigError):
        load_config(str(p), None, None)
    p.write_text(json.dumps({"fusion": {"alfa": 0.5}}))
    with pytest.raises(ConfigError):
        load_config(str(p), None, None)


def test_config_rejects_model_stream_mismatch(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"stream": {"input_dim": 5},
                             "model": {"layer_dims": [4, 4]}}))
    with pytest.raises(ConfigError):
        load_config(str(p), None, None)


# ---------------------------------------------------------------------------
# exit codes


def test_exit_code_config_error():
    assert run("gen", "--config", "does-not-exist.json") == 2


def test_exit_code_missing_data(tiny_cfg, tmp_path):
    assert run("train", "--config", tiny_cfg, "--out", tmp_path / "empty") == 3


def test_exit_code_bad_grid(pipeline):
    tiny_cfg, _ = pipeline
    assert run("ablate-alpha", "--config", tiny_cfg, "--grid", "0,2") == 2
    assert run("ablate-alpha", "--config", tiny_cfg, "--grid", "zero") == 2


def test_unknown_method_rejected_by_parser(tiny_cfg):
    with pytest.raises(SystemExit) as exc:
        run("merge", "--config", tiny_cfg, "--method", "magic")
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# gen / train


def test_gen_writes_deterministic_datasets(tiny_cfg, tmp_path):
    assert run("gen", "--config", tiny_cfg) == 0
    data = tmp_path / "run" / "seed0" / "data"
    files = sorted(p.name for p in data.iterdir())
    assert files == [
        "pretrain.csv",
        "task01_test.csv", "task01_train.csv", "task01_unlabeled.csv",
        "task02_test.csv", "task02_train.csv", "task02_unlabeled.csv",
    ]
    before = {p.name: p.read_bytes() for p in data.iterdir()}
    assert run("gen", "--config", tiny_cfg) == 0
    after = {p.name: p.read_bytes() for p in data.iterdir()}
    assert before == after


def test_train_writes_checkpoints(pipeline):
    _, seed_dir = pipeline
    ckpts = sorted(p.name for p in (seed_dir / "checkpoints").iterdir())
    assert ckpts == ["pretrained.ckpt", "task01.ckpt", "task02.ckpt"]
    model = load_checkpoint(seed_dir / "checkpoints" / "task01.ckpt")
    assert "task01" in model.heads


# ---------------------------------------------------------------------------
# merge / eval / ablate


@pytest.mark.parametrize("method", ["otmf", "swa", "task_arithmetic", "ties"])
def test_merge_each_method(pipeline, method):
    tiny_cfg, seed_dir = pipeline
    assert run("merge", "--config", tiny_cfg, "--method", method) == 0
    report = load_report(seed_dir / f"report_{method}.json")
    assert report["method"] == method
    assert 0.0 <= report["average_accuracy"] <= 1.0
    assert report["config"]["sft"]["epochs"] == 30
    mat = report["accuracy_matrix"]
    assert len(mat) == 2 and mat[0][1] is None and mat[1][1] is not None
    assert (seed_dir / "merged" / method / "final.ckpt").exists()
    assert (seed_dir / "merged" / method / "step02.ckpt").exists()
    assert (seed_dir / f"timings_{method}.json").exists()
    if method == "otmf":
        assert len(report["ot_loss_history"]) == 6
        assert report["pair_loss"][0]["step"] == 2


def test_merge_report_byte_deterministic(pipeline):
    tiny_cfg, seed_dir = pipeline
    assert run("merge", "--config", tiny_cfg, "--method", "otmf") == 0
    report1 = (seed_dir / "report_otmf.json").read_bytes()
    ckpt1 = (seed_dir / "merged" / "otmf" / "final.ckpt").read_bytes()
    assert run("merge", "--config", tiny_cfg, "--method", "otmf") == 0
    assert (seed_dir / "report_otmf.json").read_bytes() == report1
    assert (seed_dir / "merged" / "otmf" / "final.ckpt").read_bytes() == ckpt1


def test_eval_self_shift_is_zero(pipeline):
    tiny_cfg, seed_dir = pipeline
    ckpt = seed_dir / "checkpoints" / "task01.ckpt"
    assert run("eval", "--config", tiny_cfg, "--checkpoint", ckpt) == 0
    report = load_report(seed_dir / "eval" / "eval_report.json")
    entry = next(e for e in report["per_task"] if e["task"] == "task01")
    assert entry["delta_l1"] == 0.0
    # entropic self-distance is blurred away from zero at the default epsilon
    assert entry["delta_sinkhorn"] <= 0.2
    assert entry["accuracy"] >= 0.5
    assert (seed_dir / "eval" / "features_task01_merged.csv").exists()


def test_eval_feature_dumps(pipeline):
    tiny_cfg, seed_dir = pipeline
    assert run("merge", "--config", tiny_cfg, "--method", "swa") == 0
    ckpt = seed_dir / "merged" / "swa" / "final.ckpt"
    assert run("eval", "--config", tiny_cfg, "--checkpoint", ckpt) == 0
    dump = seed_dir / "eval" / "features_task02_merged.csv"
    lines = dump.read_text().splitlines()
    assert lines[0].endswith(",source")
    assert lines[1].endswith(",merged")


def test_eval_shape_mismatch_exit_code(pipeline, tmp_path):
    tiny_cfg, seed_dir = pipeline
    other = tmp_path / "other.json"
    other.write_text(json.dumps(dict(
        TINY, model={"layer_dims": [4, 6, 4]}, output_dir=str(seed_dir.parent))))
    ckpt = seed_dir / "checkpoints" / "task01.ckpt"
    assert run("eval", "--config", other, "--checkpoint", ckpt) == 3


def test_ablate_alpha_table(pipeline):
    tiny_cfg, seed_dir = pipeline
    assert run("ablate-alpha", "--config", tiny_cfg, "--grid", "0,0.5,1") == 0
    table, cols = load_matrix(seed_dir / "alpha_table.csv")
    assert cols == ["alpha", "task01", "task02", "average"]
    np.testing.assert_array_equal(table[:, 0], [0.0, 0.5, 1.0])
    np.testing.assert_allclose(table[:, 1:3].mean(axis=1), table[:, 3], atol=1e-12)
    report = load_report(seed_dir / "report_ablate.json")
    best = int(np.argmax(table[:, 3]))
    assert report["best_alpha"] == table[best, 0]
    assert report["best_average_accuracy"] == table[best, 3]


def test_seed_override_writes_new_subdir(pipeline, tmp_path):
    tiny_cfg, _ = pipeline
    assert run("gen", "--config", tiny_cfg, "--seed", "5") == 0
    assert (tmp_path / "run" / "seed5" / "data" / "pretrain.csv").exists()
