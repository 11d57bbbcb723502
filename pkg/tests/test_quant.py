from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_cnn, tiny_mlp, tiny_resnet
from hesskit.autodiff import Tape, Tensor, backward
from hesskit.errors import CorruptQuantFile
from hesskit.models import TrainConfig, predict, save_checkpoint, train
from hesskit.quant import (
    MAGIC,
    QuantParams,
    RangeObserver,
    calibrate,
    calibrate_symmetric,
    dequantize,
    export_int8,
    fake_quant,
    load_int8,
    observe,
    QATModel,
    qat_train,
    quantize,
    quantized_eval,
)

SYM = QuantParams.symmetric(1.0)
ASYM = QuantParams.asymmetric(0.0, 6.0)


# --- calibration -------------------------------------------------------------

def test_calibrate_symmetric_examples():
    p = calibrate_symmetric(np.linspace(-1, 1, 11))
    assert p.S == 1 / 127 and p.Z == 0 and (p.q_min, p.q_max) == (-127, 127)
    p = calibrate_symmetric(np.array([-0.5, 0.1, 0.25]))
    assert p.beta == 0.5 and p.alpha == -0.5 and p.S == 0.5 / 127
    p = calibrate_symmetric(np.zeros(4))
    assert p.S == 2.0**-16 and p.Z == 0 and quantize(0.0, p) == 0
    with pytest.raises(ValueError):
        calibrate_symmetric(np.array([]))


def test_asymmetric_params():
    p = QuantParams.asymmetric(0.0, 6.0)
    assert p.S == 6 / 255 and p.Z == 0 and (p.q_min, p.q_max) == (0, 255) and not p.signed
    p = QuantParams.asymmetric(-1.0, 3.0)
    assert p.Z == round(-1.0 / p.S) == -64
    # the range is widened so that 0 stays representable
    p = QuantParams.asymmetric(0.5, 2.0)
    assert p.alpha == 0.0 and p.Z == 0


def test_quant_params_validation():
    with pytest.raises(ValueError):
        QuantParams(0.0, 0, -1.0, 1.0, True, -127, 127)
    with pytest.raises(ValueError):
        QuantParams(1.0, 0, 1.0, -1.0, True, -127, 127)


def test_observe_examples():
    obs = observe(RangeObserver(), -1.0, 3.0)
    assert (obs.running_min, obs.running_max, obs.initialized) == (-1.0, 3.0, True)
    obs = RangeObserver(running_min=0.0, running_max=1.0, initialized=True)
    observe(obs, 0.0, 2.0)
    assert obs.running_max == pytest.approx(1.01, rel=1e-15)
    with pytest.raises(ValueError):
        observe(obs, 1.0, 0.0)


def test_observe_constant_stream_is_fixed_point():
    obs = RangeObserver()
    for _ in range(50):
        observe(obs, 0.25, 4.0)
    assert (obs.running_min, obs.running_max) == (0.25, 4.0)
    obs = RangeObserver(running_min=0.0, running_max=10.0, initialized=True)
    for _ in range(3000):
        observe(obs, 0.0, 4.0)
    assert obs.running_max == pytest.approx(4.0, rel=1e-9)


def test_frozen_observer_ignores_updates():
    obs = observe(RangeObserver(), 0.0, 1.0)
    obs.frozen = True
    observe(obs, 0.0, 5.0)
    assert obs.running_max == 1.0


# --- quantize / dequantize ---------------------------------------------------

def test_quantize_examples():
    assert quantize(0.0, SYM) == 0
    assert quantize(0.5, SYM) == 64
    assert quantize(7.5, ASYM) == 255
    assert quantize(-7.5, ASYM) == 0
    assert quantize(2.5 / 127, SYM) == 2  # half to even
    assert quantize(-3.5 / 127, SYM) == -4


def test_dequantize_examples():
    assert dequantize(0, SYM) == 0.0
    assert dequantize(64, SYM) == pytest.approx(0.503937, abs=1e-6)
    assert dequantize(64, SYM) == 64 / 127


@pytest.mark.parametrize("params", [SYM, ASYM, QuantParams.asymmetric(-1.3, 2.9), QuantParams.symmetric(0.07)])
def test_round_trip_error_bound(params):
    r = np.linspace(params.alpha, params.beta, 100_000)
    err = np.abs(dequantize(quantize(r, params), params) - r)
    assert err.max() <= params.S / 2 * (1 + 1e-9)


@pytest.mark.parametrize("params", [SYM, ASYM, QuantParams.asymmetric(-1.3, 2.9)])
def test_lattice_properties_exhaustive(params):
    q = np.arange(params.q_min, params.q_max + 1)
    r = dequantize(q, params)
    # every lattice point is a fixed point, and the map is strictly increasing on it
    assert np.array_equal(quantize(r, params), q)
    assert np.all(np.diff(r) > 0)
    # zero is exact
    assert dequantize(quantize(0.0, params), params) == 0.0


def test_full_width_usage():
    params = QuantParams.asymmetric(0.0, 3.7)
    assert quantize(params.alpha, params) == 0
    assert quantize(params.beta, params) == 255
    params = QuantParams.asymmetric(-0.8, 2.1)
    assert quantize(params.alpha, params) == 0
    assert quantize(params.beta, params) == 255


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_quantize_is_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    for params in (SYM, ASYM):
        assert quantize(lo, params) <= quantize(hi, params)


# --- fake quant --------------------------------------------------------------

def test_fake_quant_lattice_points_are_fixed():
    x = dequantize(np.arange(-127, 128), SYM)
    assert np.array_equal(fake_quant(Tensor(x), SYM).data, x)


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=30))
def test_fake_quant_is_idempotent(xs):
    x = Tensor(np.array(xs))
    for params in (SYM, ASYM):
        once = fake_quant(x, params)
        assert np.array_equal(fake_quant(once, params).data, once.data)


def _fq_grad(x, params):
    t = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    with Tape():
        loss = fake_quant(t, params).sum()
    return backward(loss, [t])[0].data


def test_straight_through_gradient():
    x = np.linspace(-0.99, 0.99, 37)
    assert np.array_equal(_fq_grad(x, SYM), np.ones_like(x))


def test_clipped_input():
    x = np.array([0.2, SYM.beta + 1.0, -0.3])
    out = fake_quant(Tensor(x), SYM).data
    assert out[1] == dequantize(SYM.q_max, SYM)
    assert np.array_equal(_fq_grad(x, SYM), [1.0, 0.0, 1.0])


# --- QAT ---------------------------------------------------------------------

def test_zero_epoch_qat_is_ptq(images):
    model = tiny_cnn()
    qat = qat_train(model, images.train, TrainConfig(epochs=0, batch_size=100), 0)
    assert qat.frozen
    assert np.array_equal(qat.model.flat(), model.flat())
    assert qat.history.loss == []
    assert set(qat.observers) and all(o.initialized for o in qat.observers.values())
    assert 0.0 <= qat.accuracy(images.test) <= 1.0


@pytest.mark.parametrize("make", [tiny_mlp, tiny_cnn, tiny_resnet])
def test_all_zero_model_is_unchanged_by_quantization(make, blobs, images):
    model = make()
    model.set_flat(np.zeros(model.num_params()))
    data = blobs if model.spec.architecture == "MLP" else images
    qat = qat_train(model, data.train, TrainConfig(epochs=0, batch_size=100), 0)
    assert np.array_equal(qat.predict(data.test.x), predict(model, data.test.x))


def test_qat_training_runs_and_observers_freeze(images):
    model, _ = train(tiny_cnn(), images.train, TrainConfig(epochs=2, batch_size=50), 0)
    qat = qat_train(model, images.train, TrainConfig(epochs=1, batch_size=50, initial_lr=1e-3), 0)
    assert len(qat.history.loss) == 1
    before = {k: (o.running_min, o.running_max) for k, o in qat.observers.items()}
    qat.predict(images.test.x)
    assert before == {k: (o.running_min, o.running_max) for k, o in qat.observers.items()}


def test_predict_requires_freeze():
    with pytest.raises(ValueError):
        QATModel(tiny_mlp()).predict(np.zeros((1, 4)))


# --- export ------------------------------------------------------------------

@pytest.fixture(scope="module")
def exported(images):
    model, _ = train(tiny_cnn((6, 8)), images.train, TrainConfig(epochs=2, batch_size=50), 0)
    qat = qat_train(model, images.train, TrainConfig(epochs=1, batch_size=50, initial_lr=1e-3), 0)
    return model, qat, export_int8(qat)


def test_export_round_trip_is_bitwise(exported, images):
    _, qat, blob = exported
    loaded = load_int8(blob)
    assert np.array_equal(loaded.predict(images.test.x), qat.predict(images.test.x))
    assert quantized_eval(blob, images.test) == qat.accuracy(images.test)
    assert export_int8(loaded) == blob


def test_export_header(exported):
    blob = exported[2]
    assert blob.startswith(MAGIC)
    assert struct.unpack("<H", blob[8:10])[0] == 1


def test_export_requires_frozen(images):
    qat = QATModel(tiny_cnn())
    calibrate(qat, images.train)
    with pytest.raises(ValueError):
        export_int8(qat)


def test_quant_file_smaller_than_checkpoint():
    # per-record overhead dominates on tiny nets; this is a mid-sized layer stack
    model = tiny_cnn((16, 32), input_shape=(3, 8, 8))
    qat = QATModel(model)
    qat.model.forward(np.zeros((2, 3, 8, 8)), **qat.forward_kw())
    qat.freeze()
    assert len(export_int8(qat)) <= 0.5 * len(save_checkpoint(model))


@pytest.mark.parametrize("mutate", [
    lambda b: b"X" + b[1:],
    lambda b: b[:8] + b"\x02\x00" + b[10:],
    lambda b: b[:-1],
    lambda b: b + b"\x00",
    lambda b: b[:10] + b"\xff\xff\xff\xff" + b[14:],
])
def test_tampered_file_is_rejected(exported, mutate):
    with pytest.raises(CorruptQuantFile):
        load_int8(mutate(exported[2]))
