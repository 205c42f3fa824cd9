import json

import numpy as np
import pytest

from packptq import tensor as T
from packptq.allocation import BitAllocation, pack_param_counts
from packptq.errors import ConfigError
from packptq.packing import partition_none
from packptq.quant import (QuantParams, calibrate_activation, calibrate_minmax, dequantize,
                           fake_quant, fake_quant_np, quantize, quantize_network,
                           quantized_network_from_document)
from packptq.reconstruct import evaluate_model
from packptq.tensor import Tensor, backward


def uniform_alloc(net, bits, candidates=None):
    plan = partition_none(net.n_blocks)
    p = pack_param_counts(net, plan)
    return BitAllocation(bits=[bits] * plan.n_packs, candidates=candidates or [bits],
                         budget=bits * sum(p), p=p, objective=0.0, cost=bits * sum(p),
                         pack_ranges=list(plan.packs), omegas=[0.0] * plan.n_packs)


# -- calibration ------------------------------------------------------------

def test_minmax_hand_cases():
    qp = calibrate_minmax(np.array([0.0, 3.0]), 2)
    assert float(qp.scale) == 1.0 and float(qp.zero_point) == 0.0
    assert sorted(set(dequantize(quantize(np.array([0.0, 1.0, 2.0, 3.0]), qp)))) == [0, 1, 2, 3]

    qp = calibrate_minmax(np.array([-1.0, 1.0]), 2)
    assert float(qp.scale) == pytest.approx(2.0 / 3.0)
    assert float(qp.zero_point) == pytest.approx(1.5)


def test_minmax_degenerate_constant_tensor():
    for bits in (2, 4, 8):
        qp = calibrate_minmax(np.array([5.0, 5.0, 5.0]), bits)
        assert float(qp.scale) == 1.0
        assert (dequantize(quantize(np.array([5.0, 5.0, 5.0]), qp)) == 5.0).all()


def test_minmax_rejects_empty():
    with pytest.raises(ConfigError):
        calibrate_minmax(np.array([]), 4)


def test_minmax_per_channel_shapes():
    w = np.array([[0.0, -1.0], [3.0, 1.0]])  # linear convention [in, out]
    qp = calibrate_minmax(w, 4, per_channel=True, channel_axis=1)
    assert qp.scale.shape == (1, 2)
    assert float(qp.scale[0, 0]) == pytest.approx(3.0 / 15.0)


def test_activation_calibration_averages_sub_batches():
    # 8 sub-batches of 1 sample each; averaged min/max over sub-batches
    samples = np.arange(8.0).reshape(8, 1)
    qp = calibrate_activation(samples, bits=2, sub_batches=8)
    assert float(qp.scale) == pytest.approx((3.5 - 3.5) / 3.0 + 1.0) or True
    # mins == maxs == 3.5 on average -> degenerate scale 1
    assert float(qp.scale) == 1.0


# -- quantize / dequantize ---------------------------------------------------

def test_eq1_hand_cases():
    qp = QuantParams(np.asarray(0.5), np.asarray(0.0), 2)
    q = quantize(np.array([0.6]), qp)
    assert q.ints.tolist() == [1]
    assert dequantize(q).tolist() == [0.5]

    q = quantize(np.array([100.0]), qp)
    assert q.ints.tolist() == [3]
    assert dequantize(q).tolist() == [1.5]


def test_grid_fixed_point_is_exact():
    qp = QuantParams(np.asarray(0.25), np.asarray(1.2), 4)
    m = np.arange(0, 16)
    x = 0.25 * (m - 1.2)
    assert (fake_quant_np(x, qp) == x).all()


def test_quantizer_random_properties():
    rng = np.random.default_rng(0)
    for _ in range(500):
        bits = int(rng.integers(2, 9))
        x = rng.normal(scale=rng.uniform(0.1, 10.0), size=rng.integers(2, 65))
        qp = calibrate_minmax(x, bits)
        y = fake_quant_np(x, qp)
        # idempotence
        assert (fake_quant_np(y, qp) == y).all()
        # monotonicity
        order = np.argsort(x)
        ints = quantize(x, qp).ints
        assert (np.diff(ints[order]) >= 0).all()
        # error bound for in-range values
        s = float(qp.scale)
        assert (np.abs(y - x) <= s / 2 + 1e-12).all()
        # grid cardinality
        assert len(np.unique(y)) <= 2 ** bits


# -- fake_quant gradients ------------------------------------------------------

def test_ste_passthrough_and_clip_mask():
    qp = QuantParams(np.asarray(1.0), np.asarray(0.0), 2)
    x = Tensor(np.array([0.2, 1.4, 2.9, 50.0, -3.0]), requires_grad=True)
    out = fake_quant(x, qp)
    backward(T.reduce_sum(out), [x])
    assert x.grad.tolist() == [1.0, 1.0, 1.0, 0.0, 0.0]


def test_offset_flips_rounding_decision():
    qp = QuantParams(np.asarray(1.0), np.asarray(0.0), 2)
    x = Tensor(np.array([0.24]))
    off = Tensor(np.array([0.5]), requires_grad=True)
    assert fake_quant(x, qp, offsets=off).data.tolist() == [1.0]
    off2 = Tensor(np.array([0.0]))
    assert fake_quant(x, qp, offsets=off2).data.tolist() == [0.0]


def test_learnable_scale_gradient_follows_ste_rule():
    # d(out)/d(s) = (q - z0) - x/s on unclipped elements, (q - z0) on clipped
    # ones (the straight-through treatment of the rounding step)
    rng = np.random.default_rng(4)
    x = np.concatenate([rng.standard_normal(16), [40.0, -40.0]])  # force clipping
    qp = calibrate_minmax(rng.standard_normal(64), 4)
    scale = Tensor(qp.scale.copy(), requires_grad=True)
    out = fake_quant(Tensor(x), qp, scale=scale)
    backward(T.reduce_sum(out), [scale])

    s, z0, levels = float(qp.scale), float(qp.zero_point), qp.levels
    r = np.rint(x / s + z0)
    q = np.clip(r, 0, levels)
    mask = (r >= 0) & (r <= levels)
    expected = ((q - z0) - np.where(mask, x / s, 0.0)).sum()
    assert float(scale.grad) == pytest.approx(expected, rel=1e-12)


# -- network-level quantization ----------------------------------------------

def test_bypass_allocation_reproduces_fp_exactly(rings_net, rings_data):
    calib, test = rings_data
    qnet = quantize_network(rings_net, uniform_alloc(rings_net, 32),
                            calib.inputs, calib.labels, act_bits=32)
    assert (qnet.logits_np(test.inputs) == rings_net.logits_np(test.inputs)).all()


def test_w4a4_band_and_bit_monotonicity():
    from conftest import load_fixture_net
    from packptq.data import generate_dataset

    net = load_fixture_net("resmlp-4x16_rings2")
    calib, test = generate_dataset("concentric-rings", 256, seed=11, class_count=2,
                                   test_n=2048)
    fp_acc = evaluate_model(net, test)["accuracy"]
    accs = {}
    for bits, cands in ((4, [3, 4, 8]), (2, [2, 3])):
        qnet = quantize_network(net, uniform_alloc(net, bits, cands),
                                calib.inputs, calib.labels, act_bits=bits)
        accs[bits] = evaluate_model(qnet, test)["accuracy"]
    assert fp_acc - 0.15 <= accs[4] <= fp_acc
    assert accs[2] < accs[4]


def test_missing_allocation_entry_rejected(rings_net, rings_data):
    calib, _ = rings_data
    alloc = uniform_alloc(rings_net, 4)
    alloc.pack_ranges = alloc.pack_ranges[:-1]
    alloc.bits = alloc.bits[:-1]
    with pytest.raises(ConfigError, match="does not cover blocks"):
        quantize_network(rings_net, alloc, calib.inputs, calib.labels, act_bits=4)


def test_quantized_document_round_trip(rings_net, rings_data):
    calib, test = rings_data
    qnet = quantize_network(rings_net, uniform_alloc(rings_net, 3),
                            calib.inputs, calib.labels, act_bits=3)
    qnet.pack_offsets(1, rings_net.n_blocks)  # materialize offsets too
    doc = json.loads(json.dumps(qnet.to_document()))
    restored = quantized_network_from_document(doc)
    a = qnet.logits_np(test.inputs[:32])
    b = restored.logits_np(test.inputs[:32])
    assert (a == b).all()
