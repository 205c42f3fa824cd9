import copy
import json

import numpy as np
import pytest

from packptq.data import generate_dataset
from packptq.errors import ConfigError, SchemaError, ShapeError
from packptq.nets import (Network, build_model, deserialize, forward_capture, serialize,
                          training_accuracy)
from packptq.tensor import Tensor


def test_resmlp_block_param_count():
    net = build_model("resmlp-4x16", input_shape=(2,), class_count=3, seed=0)
    assert net.n_blocks == 4
    for block in net.blocks:
        assert block.param_count == 16 * 16 + 16 * 16  # biases excluded


def test_convnet_block_param_count():
    net = build_model("convnet-2x4", input_shape=(1, 8, 8), class_count=3, seed=0)
    for block in net.blocks:
        assert block.param_count == 2 * (4 * 4 * 3 * 3)


def test_untrained_forward_is_finite_on_zero_input():
    net = build_model("resmlp-2x8", input_shape=(2,), class_count=4, seed=1)
    logits = net.forward(Tensor(np.zeros((3, 2))))
    assert np.isfinite(logits.data).all()


def test_unknown_architecture_lists_registered_specs():
    with pytest.raises(ConfigError, match="resmlp-<blocks>x<width>"):
        build_model("densenet-121", input_shape=(2,), class_count=2)


def test_single_block_rejected():
    with pytest.raises(ConfigError, match="at least 2 blocks"):
        build_model("resmlp-1x8", input_shape=(2,), class_count=2)


def test_residual_identity_when_inner_weights_zero():
    net = build_model("resmlp-3x8", input_shape=(2,), class_count=4, seed=2)
    for block in net.blocks:
        for layer in block.layers:
            layer.w.data[:] = 0.0
            layer.b.data[:] = 0.0
    x = np.random.default_rng(0).standard_normal((5, 2))
    cap = forward_capture(net, x, np.zeros(5, dtype=np.int64))
    for z in cap.block_outputs:
        assert (z == cap.stem_output).all()


def test_capture_structure_and_consistency(moons_net, moons_data):
    calib, _ = moons_data
    x, y = calib.inputs[:8], calib.labels[:8]
    cap = forward_capture(moons_net, x, y)
    assert len(cap.block_outputs) == moons_net.n_blocks
    # captures equal direct instrumentation of a plain forward
    h = moons_net.stem.forward(moons_net.prepare_input(x))
    for t, block in enumerate(moons_net.blocks, start=1):
        h = block.forward(h)
        assert (h.data == cap.block_outputs[t - 1]).all()


def test_injected_override_matches_tail(moons_net, moons_data):
    calib, _ = moons_data
    x, y = calib.inputs[:8], calib.labels[:8]
    cap = forward_capture(moons_net, x, y)
    rng = np.random.default_rng(1)
    z3 = cap.block_outputs[2] + 0.1 * rng.standard_normal(cap.block_outputs[2].shape)
    via_tail = moons_net.tail(3, Tensor(z3)).data
    via_hook = moons_net.forward(moons_net.prepare_input(x), override={3: z3}).data
    assert (via_tail == via_hook).all()


def test_serialize_round_trip_is_weight_exact(rings_net, rings_data):
    calib, _ = rings_data
    doc = serialize(rings_net)
    restored = deserialize(json.loads(json.dumps(doc)))
    a = rings_net.logits_np(calib.inputs[:16])
    b = restored.logits_np(calib.inputs[:16])
    assert (a == b).all()


def test_document_negative_dimension_rejected(rings_net):
    doc = serialize(rings_net)
    bad = copy.deepcopy(doc)
    bad["blocks"][0]["layers"][0]["shape"] = [-16, 16]
    with pytest.raises(SchemaError, match="/blocks/0/layers/0"):
        deserialize(bad)


def test_document_missing_block_weights_names_block(rings_net):
    doc = serialize(rings_net)
    bad = copy.deepcopy(doc)
    del bad["blocks"][1]["layers"][0]["weights"]
    with pytest.raises(SchemaError, match="/blocks/1/layers/0"):
        deserialize(bad)


def test_input_shape_mismatch_rejected(rings_net):
    with pytest.raises(ShapeError):
        rings_net.prepare_input(np.zeros((4, 7)))


def test_committed_fixtures_meet_training_gate(moons_net, blobs8_net, rings_net):
    cases = [
        (moons_net, "two-moons-10class", 10),
        (blobs8_net, "gaussian-blobs", 8),
        (rings_net, "concentric-rings", 3),
    ]
    for net, kind, cc in cases:
        train, _ = generate_dataset(kind, 2048, seed=7, class_count=cc)
        assert training_accuracy(net, train) >= 0.95


def test_build_model_training_flag():
    train, _ = generate_dataset("gaussian-blobs", 512, seed=3, class_count=4)
    net = build_model("resmlp-2x8", input_shape=(2,), class_count=4, seed=0,
                      train_data=train, train_steps=400, train_batch=64, train_lr=5e-3,
                      min_train_accuracy=0.9)
    assert training_accuracy(net, train) >= 0.9
