from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from hesskit.errors import ConfigInvalid, CorruptDataset, UnsupportedFormat
from hesskit.pipeline import DEFAULTS, DatasetSpec, build_config, load_config, load_dataset, read_idx
from hesskit.pipeline.cli import main

ROOT = Path(__file__).resolve().parents[1]

TINY = """
[model]
architecture = "MLP"
widths = [8]

[dataset]
kind = "synthetic-blobs"
n = 300
classes = 3
dims = 4
image_shape = []
noise = 1.0

[train]
epochs = 4
batch_size = 32

[finetune]
epochs = 2
batch_size = 32

[qat]
epochs = 1
batch_size = 32

[hutchinson]
n_v = 20
hessian_batch_size = 64

[pruning]
target_compression = 0.6
"""


# --- datasets ----------------------------------------------------------------

@pytest.mark.parametrize("kind", ["synthetic-blobs", "synthetic-rings"])
def test_synthetic_datasets_are_seeded(kind):
    spec = DatasetSpec(kind, n=2000, classes=2, seed=3)
    a, b = load_dataset(spec), load_dataset(spec)
    assert np.array_equal(a.train.x, b.train.x) and np.array_equal(a.test.y, b.test.y)
    assert len(a.train) == 1500 and len(a.test) == 500
    other = load_dataset(DatasetSpec(kind, n=2000, classes=2, seed=4))
    assert not np.array_equal(a.train.x, other.train.x)


def test_grating_images_shape():
    split = load_dataset(DatasetSpec("synthetic-blobs", n=40, classes=4, seed=0, image_shape=(3, 8, 8)))
    assert split.input_shape == (3, 8, 8) and split.num_classes == 4
    assert split.train.x.shape == (30, 3, 8, 8)


def _write_idx(path: Path, arr: np.ndarray, magic: int):
    arr = np.asarray(arr, dtype=np.uint8)
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes())


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (20, 5, 6))
    labels = rng.integers(0, 3, 20)
    _write_idx(tmp_path / "x.idx", imgs, 0x00000803)
    _write_idx(tmp_path / "y.idx", labels, 0x00000801)
    assert np.array_equal(read_idx(tmp_path / "x.idx"), imgs)
    split = load_dataset(DatasetSpec("idx-images", path=str(tmp_path / "x.idx"),
                                     labels_path=str(tmp_path / "y.idx"), test_fraction=0.25))
    assert split.input_shape == (1, 5, 6) and len(split.test) == 5
    assert np.allclose(split.train.x[0, 0], imgs[0] / 255.0)


def test_idx_wrong_magic(tmp_path):
    _write_idx(tmp_path / "bad.idx", np.zeros((2, 2, 2)), 0x00000903)
    with pytest.raises(CorruptDataset):
        read_idx(tmp_path / "bad.idx")
    _write_idx(tmp_path / "short.idx", np.zeros((2, 2, 2)), 0x00000803)
    (tmp_path / "short.idx").write_bytes((tmp_path / "short.idx").read_bytes()[:-1])
    with pytest.raises(CorruptDataset):
        read_idx(tmp_path / "short.idx")


def test_cifar10_binary_batch(tmp_path):
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 10, 10000).astype(np.uint8)
    pixels = rng.integers(0, 256, (10000, 3072)).astype(np.uint8)
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(np.concatenate([labels[:, None], pixels], axis=1).tobytes())
    split = load_dataset(DatasetSpec("cifar10-binary", path=str(path), test_fraction=0.2))
    assert len(split.train) + len(split.test) == 10000
    assert split.input_shape == (3, 32, 32) and split.num_classes == 10
    assert np.array_equal(np.concatenate([split.train.y, split.test.y]), labels)
    assert split.train.x[0, 2, 31, 31] == pixels[0, -1] / 255.0
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(CorruptDataset):
        load_dataset(DatasetSpec("cifar10-binary", path=str(path)))


def test_unsupported_format():
    with pytest.raises(UnsupportedFormat):
        load_dataset(DatasetSpec("imagenet-tar"))


# --- configuration -----------------------------------------------------------

def test_defaults_follow_published_tables():
    cfg = build_config()
    for section in ("train", "finetune", "qat"):
        assert cfg[f"{section}.batch_size"] == 128
        assert cfg[f"{section}.momentum"] == 0.9
    assert (cfg["train.initial_lr"], cfg["train.weight_decay"]) == (0.05, 1e-3)
    assert (cfg["finetune.initial_lr"], cfg["finetune.weight_decay"]) == (0.01, 1e-3)
    assert (cfg["qat.initial_lr"], cfg["qat.weight_decay"]) == (1e-4, 1e-4)
    assert cfg["hutchinson.n_v"] == 300
    assert cfg["hutchinson.hessian_batch_size"] == 512
    assert cfg["pruning.prune_ratio_limit"] == 0.95
    assert cfg["qat.act_momentum"] == 0.99 and cfg["qat.scheme"] == "Uniform8"
    assert cfg.scales == {"first": 2.0**16, "second": 2.0**8}


def test_reference_config_loads():
    cfg = load_config(ROOT / "configs" / "reference.toml")
    assert cfg["model.architecture"] == "SmallConvNet"
    assert cfg["pruning.target_compression"] == 0.1


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigInvalid) as info:
        build_config({"train": {"epoch": 3}})
    assert info.value.field == "train.epoch"


def test_missing_dataset_path_names_field():
    with pytest.raises(ConfigInvalid) as info:
        build_config({"dataset": {"kind": "cifar10-binary"}})
    assert info.value.field == "dataset.path"


@pytest.mark.parametrize("raw, field", [
    ({"train": {"epochs": True}}, "train.epochs"),
    ({"train": {"epochs": "3"}}, "train.epochs"),
    ({"hutchinson": {"second_scale": 300.0}}, "hutchinson.second_scale"),
    ({"hutchinson": {"mode": "bf16"}}, "hutchinson.mode"),
    ({"pruning": {"target_compression": 1.5}}, "pruning.target_compression"),
    ({"model": {"widths": [4, 2.5]}}, "model.widths"),
    ({"train": {"momentum": 1.0}}, "train"),
])
def test_invalid_values(raw, field):
    with pytest.raises(ConfigInvalid) as info:
        build_config(raw)
    assert info.value.field == field


def test_ints_promote_to_floats():
    assert build_config({"train": {"initial_lr": 1}})["train.initial_lr"] == 1.0


def test_every_default_has_a_type():
    assert all(isinstance(t, type) for t, _ in DEFAULTS.values())


# --- CLI ---------------------------------------------------------------------

@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def _cli(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_unknown_command(capsys):
    code, _, err = _cli(capsys, "compress")
    assert code == 1 and "unknown command" in err


def test_bad_flag_and_missing_config(capsys, tmp_path):
    assert _cli(capsys, "train", "--n-v", "abc")[0] == 1
    assert _cli(capsys, "train", "--config", tmp_path / "nope.toml")[0] == 1


def test_missing_dataset_path_exit_code(capsys, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[dataset]\nkind = "idx-images"\n')
    code, _, err = _cli(capsys, "train", "--config", cfg, "--out", tmp_path / "o")
    assert code == 1 and "dataset.path" in err


def test_runtime_failure_exit_code(capsys, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(TINY.replace("epochs = 4", "epochs = 4\ninitial_lr = 1000.0"))
    code, _, err = _cli(capsys, "train", "--config", cfg, "--out", tmp_path / "o")
    assert code == 2 and "DivergedLoss" in err


def test_stage_before_training_is_missing_artifact(capsys, tiny_config, tmp_path):
    assert _cli(capsys, "estimate", "--config", tiny_config, "--out", tmp_path / "o")[0] == 1


def test_estimate_fp16_records_mode_and_scale(capsys, tiny_config, tmp_path):
    out = tmp_path / "run"
    assert _cli(capsys, "train", "--config", tiny_config, "--out", out)[0] == 0
    code, stdout, _ = _cli(capsys, "estimate", "--out", out, "--mode", "fp16", "--n-v", "30")
    assert code == 0
    report = json.loads(stdout)
    assert report["mode"] == "FP16_SCALED" and report["scale"] == 256 and report["n_v"] == 30
    assert json.loads((out / "trace.json").read_text()) == report


def test_report_needs_artifacts(capsys, tmp_path):
    (tmp_path / "empty").mkdir()
    assert _cli(capsys, "report", "--out", tmp_path / "empty")[0] == 1
    assert _cli(capsys, "report", "--out", tmp_path / "missing")[0] == 1


def _without_wall_times(d: dict) -> dict:
    return {k: v for k, v in d.items() if "wall_time" not in k}


def test_bench(capsys, tiny_config, tmp_path):
    out = tmp_path / "run"
    _cli(capsys, "train", "--config", tiny_config, "--out", out)
    code, first, _ = _cli(capsys, "bench", "--out", out, "--n-v", "1")
    assert code == 0
    d = json.loads(first)
    assert d["low_confidence"] is True
    assert d["fp16_peak_bytes"] < d["fp32_peak_bytes"]
    assert "not comparable" in d["wall_time_note"]
    _, second, _ = _cli(capsys, "bench", "--out", out, "--n-v", "1")
    assert _without_wall_times(json.loads(second)) == _without_wall_times(d)


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipe")
    cfg = base / "tiny.toml"
    cfg.write_text(TINY)
    codes = [main(["pipeline", "--config", str(cfg), "--out", str(base / name)]) for name in ("a", "b")]
    return base, codes


ARTIFACTS = ("config.json", "model.ckpt", "train.json", "trace.json", "sensitivity.json", "plan.json",
             "pruned.ckpt", "finetuned.ckpt", "model.q8", "quant.json", "report.json")


def test_pipeline_writes_all_artifacts(pipeline_runs):
    base, codes = pipeline_runs
    assert codes == [0, 0]
    for name in ARTIFACTS:
        assert (base / "a" / name).is_file(), name
    report = json.loads((base / "a" / "report.json").read_text())
    for key in ("original_accuracy", "pruned_accuracy", "finetuned_accuracy", "quantized_accuracy"):
        assert 0.0 <= report[key] <= 1.0
    assert report["achieved_compression"] == report["plan_predicted_compression"]
    assert report["achieved_compression"] <= 0.65


def test_pipeline_is_deterministic(pipeline_runs):
    base, _ = pipeline_runs
    for name in ARTIFACTS:
        if name == "config.json":
            continue
        a, b = (base / "a" / name).read_bytes(), (base / "b" / name).read_bytes()
        if name == "trace.json":
            a, b = (json.loads(x) for x in (a, b))
            a.pop("wall_time_s"), b.pop("wall_time_s")
        assert a == b, name


def test_report_is_idempotent(pipeline_runs, capsys):
    base, _ = pipeline_runs
    before = (base / "a" / "report.json").read_bytes()
    code, stdout, _ = _cli(capsys, "report", "--out", base / "a")
    assert code == 0
    assert (base / "a" / "report.json").read_bytes() == before
    assert stdout.encode() == before


def test_stages_rerun_independently(pipeline_runs, capsys):
    base, _ = pipeline_runs
    run = base / "a"
    plan = (run / "plan.json").read_bytes()
    q8 = (run / "model.q8").read_bytes()
    assert _cli(capsys, "prune", "--out", run)[0] == 0
    assert (run / "plan.json").read_bytes() == plan
    assert _cli(capsys, "qat", "--out", run)[0] == 0
    assert (run / "model.q8").read_bytes() == q8
