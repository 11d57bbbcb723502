from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import tiny_cnn, tiny_mlp, tiny_resnet
from hesskit.errors import CorruptCheckpoint, DivergedLoss, InvalidSpec
from hesskit.models import (
    Dataset,
    ModelSpec,
    TrainConfig,
    accuracy,
    build_model,
    channel_groups,
    cosine_lr,
    count_params_flops,
    load_checkpoint,
    save_checkpoint,
    train,
)
from hesskit.pipeline.datasets import synthetic_blobs
from hesskit.pruner import apply_prune, plan_from_removals


def _plan(model, removals):
    return plan_from_removals(model, removals)


# --- specs and construction --------------------------------------------------

@pytest.mark.parametrize("args", [
    ("CNN", (4,), 2, (3, 4, 4)),
    ("SmallConvNet", (0, 4), 2, (3, 4, 4)),
    ("MLP", (4, 3), 2, (4,)),
    ("MiniResNet", (4,), 2, (3, 4, 4)),
    ("SmallConvNet", (4,), 1, (3, 4, 4)),
])
def test_invalid_specs(args):
    with pytest.raises(InvalidSpec):
        ModelSpec(*args)


def test_build_model_is_deterministic():
    spec = ModelSpec.mlp([4, 8, 3])
    a, b = build_model(spec, 7), build_model(spec, 7)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    assert not np.array_equal(build_model(spec, 8).flat(), a.flat())


def test_initialization_conventions():
    m = tiny_cnn()
    assert np.all(m.params["conv0.bn_gamma"] == 1.0) and np.all(m.params["conv0.bn_beta"] == 0.0)
    assert np.all(m.params["fc.bias"] == 0.0)
    bound = math.sqrt(6.0 / (3 * 9))
    assert np.all(np.abs(m.params["conv0.weight"]) <= bound)
    flat = m.flat()
    assert np.array_equal(flat.astype(np.float32).astype(np.float64), flat)


def test_small_conv_net_group_count():
    m = build_model(ModelSpec("SmallConvNet", (8, 16), 10, (3, 8, 8)), 0)
    groups = channel_groups(m)
    assert sum(g.prunable for g in groups) == 8 + 16
    assert {g.p for g in groups if g.layer_name == "conv0"} == {27}
    assert {g.p for g in groups if g.layer_name == "conv1"} == {8 * 9}


def test_mlp_group_membership():
    m = tiny_mlp((4, 8, 3))
    groups = channel_groups(m)
    assert len(groups) == 8
    for g in groups:
        assert g.p == 4 and g.own_param_indices.size == 5
        assert g.coupled_param_indices.size == 3
    assert all(g.layer_name != "dense1" for g in groups)


def test_residual_output_channels_not_prunable():
    m = tiny_resnet((4, 3, 5))
    groups = channel_groups(m)
    for g in groups:
        assert g.prunable == g.layer_name.endswith("a")
    assert all(g.layer_name != "fc" for g in groups)


@pytest.mark.parametrize("make", [tiny_mlp, tiny_cnn, tiny_resnet])
def test_group_cover_and_disjointness(make):
    m = make()
    groups = channel_groups(m)
    own = np.concatenate([g.own_param_indices for g in groups])
    assert np.unique(own).size == own.size
    residue = m.num_params() - own.size
    classifier = sum(m.params[k].size for k in m.param_names() if k.startswith(("fc.", f"dense{len(m.plan) - 1}.")))
    assert residue == classifier
    for g in groups:
        assert np.all(np.isin(g.weight_indices, g.own_param_indices))


# --- counting ----------------------------------------------------------------

def test_dense_params_flops():
    m = build_model(ModelSpec.mlp([4, 8]), 0)
    assert count_params_flops(m) == (40, 64 + 8)


def test_halving_channels_cuts_flops_by_more_than_half():
    m = build_model(ModelSpec("SmallConvNet", (8, 8), 4, (3, 6, 6)), 0)
    removals = [(0, c) for c in range(4)] + [(1, c) for c in range(4)]
    pruned = apply_prune(m, _plan(m, removals))
    _, f0 = count_params_flops(m)
    _, f1 = count_params_flops(pruned)
    assert f1 < f0 / 2


def test_empty_plan_keeps_counts():
    m = tiny_cnn()
    assert count_params_flops(apply_prune(m, _plan(m, []))) == count_params_flops(m)


# --- schedule and training ---------------------------------------------------

def test_cosine_lr():
    assert cosine_lr(0, 10, 0.05) == 0.05
    assert cosine_lr(10, 10, 0.05) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(5, 10, 0.05) == pytest.approx(0.025, rel=1e-12)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 0.05)


def test_train_config_validation():
    with pytest.raises(InvalidSpec):
        TrainConfig(momentum=1.0)
    with pytest.raises(InvalidSpec):
        TrainConfig(initial_lr=0.0)


def _two_blobs():
    x, y = synthetic_blobs(400, 2, seed=1, dims=2, noise=0.8)
    return Dataset(x, y)


def test_train_separable_blobs():
    data = _two_blobs()
    model = build_model(ModelSpec.mlp([2, 16, 2]), 0)
    trained, history = train(model, data, TrainConfig(epochs=30, batch_size=32), 0)
    assert history.accuracy[-1] >= 0.98
    assert accuracy(trained, data.x, data.y) >= 0.98
    assert len(history.loss) == 30


def test_train_zero_epochs_is_identity():
    data = _two_blobs()
    model = build_model(ModelSpec.mlp([2, 16, 2]), 0)
    trained, history = train(model, data, TrainConfig(epochs=0), 0)
    assert np.array_equal(trained.flat(), model.flat())
    assert history.loss == []


def test_train_diverges_with_huge_lr():
    data = _two_blobs()
    model = build_model(ModelSpec.mlp([2, 16, 2]), 0)
    with pytest.raises(DivergedLoss):
        train(model, data, TrainConfig(epochs=30, initial_lr=1e3), 0)


def test_training_is_deterministic(images):
    model = tiny_cnn()
    cfg = TrainConfig(epochs=2, batch_size=50)
    a, ha = train(model, images.train, cfg, 3)
    b, hb = train(model, images.train, cfg, 3)
    assert ha.to_dict() == hb.to_dict()
    assert np.array_equal(a.flat(), b.flat())
    for k in a.buffers:
        assert np.array_equal(a.buffers[k], b.buffers[k])


# --- checkpoints -------------------------------------------------------------

@pytest.mark.parametrize("make", [tiny_mlp, tiny_cnn, tiny_resnet])
def test_checkpoint_round_trip(make):
    m = make()
    m.buffers = {k: v + 0.25 for k, v in m.buffers.items()}
    blob = save_checkpoint(m)
    loaded = load_checkpoint(blob)
    assert save_checkpoint(loaded) == blob
    assert loaded.spec == m.spec
    assert np.array_equal(loaded.flat(), m.flat())
    assert [g.key for g in channel_groups(loaded)] == [g.key for g in channel_groups(m)]
    assert blob[:8] == b"EHAPCKPT"


def test_checkpoint_corruption():
    blob = save_checkpoint(tiny_cnn())
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(blob[:-3])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(b"X" + blob[1:])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(blob[:8] + b"\x09\x00" + blob[10:])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(blob + b"\x00")


def test_pruned_checkpoint_is_smaller():
    m = tiny_cnn()
    pruned = apply_prune(m, _plan(m, [(0, 1)]))
    assert len(save_checkpoint(pruned)) < len(save_checkpoint(m))
