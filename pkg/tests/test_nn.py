import os

import numpy as np
import pytest

from splitfire import nn
from splitfire.errors import BuildError, DimensionError, ValidationError
from splitfire.nn import (
    DEFAULT_INPUT_SHAPE,
    SMALL_VGG_CUT_INDEX,
    TrainConfig,
    accuracy,
    bce_loss,
    build_model,
    conv,
    dense,
    flatten,
    grad_check,
    gradcheck_suite,
    load_model,
    maxpool2,
    param_digest,
    propagate_shapes,
    relu,
    save_model,
    sgd_step,
    sigmoid,
    small_vgg_specs,
)
from splitfire.rng import SplitMix64
from splitfire.tensor import Tensor


def rand_batch(shape, seed, low=-1.0, high=1.0, dtype=np.float32):
    rng = SplitMix64(seed)
    return Tensor(rng.uniform(low, high, int(np.prod(shape))).reshape(shape).astype(dtype))


# --- shape propagation --------------------------------------------------------


def test_small_vgg_shape_chain():
    shapes = propagate_shapes(small_vgg_specs(), DEFAULT_INPUT_SHAPE)
    # conv -> relu -> pool -> conv -> relu -> pool -> flatten -> dense -> relu -> dense -> sigmoid
    assert shapes == [
        (8, 62, 62), (8, 62, 62), (8, 31, 31),
        (16, 29, 29), (16, 29, 29), (16, 14, 14),
        (3136,), (64,), (64,), (1,), (1,),
    ]


def test_propagate_shapes_names_first_bad_layer():
    specs = [conv(1, 8, 3), flatten(), dense(100, 4)]  # dense expects 30752
    with pytest.raises(BuildError, match="layer 2"):
        propagate_shapes(specs, (1, 64, 64))


def test_propagate_shapes_channel_mismatch():
    with pytest.raises(BuildError, match="layer 0"):
        propagate_shapes([conv(3, 8, 3)], (1, 64, 64))


def test_maxpool_floor_rule_in_shapes():
    shapes = propagate_shapes([maxpool2()], (4, 29, 29))
    assert shapes == [(4, 14, 14)]


# --- build_model ---------------------------------------------------------------


def test_build_model_deterministic():
    a = build_model(small_vgg_specs(), seed=42)
    b = build_model(small_vgg_specs(), seed=42)
    assert param_digest(a.params) == param_digest(b.params)
    c = build_model(small_vgg_specs(), seed=43)
    assert param_digest(a.params) != param_digest(c.params)


def test_build_model_he_bounds():
    model = build_model(small_vgg_specs(), seed=1)
    k = model.params[0][0]  # conv1 kernels, fan_in = 1*3*3 = 9
    limit = (6.0 / 9.0) ** 0.5
    assert np.abs(k.data).max() <= limit
    assert model.params[0][1].data.sum() == 0.0  # biases start at zero


def test_identity_init_dense_is_identity():
    model = build_model([flatten(), dense(6, 6)], (2, 3, 1), init="identity")
    x = rand_batch((4, 2, 3, 1), seed=2)
    out, _ = nn.forward(model, x)
    assert np.array_equal(out.data, x.data.reshape(4, 6))


def test_identity_init_rejects_non_square():
    with pytest.raises(ValidationError):
        build_model([flatten(), dense(6, 3)], (2, 3, 1), init="identity")


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0)
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=0.0)
    assert TrainConfig().batch_size == 32


# --- forward -------------------------------------------------------------------


def test_zero_init_predicts_half():
    model = build_model(small_vgg_specs(), seed=0, init="zero")
    batch = rand_batch((3, 1, 64, 64), seed=3, low=0.0, high=1.0)
    out, _ = nn.forward(model, batch)
    assert np.allclose(out.data, 0.5)


def test_forward_batch_independence():
    model = build_model(small_vgg_specs(), seed=5)
    batch4 = rand_batch((4, 1, 64, 64), seed=6, low=0.0, high=1.0)
    single = Tensor(batch4.data[2:3])
    out4, _ = nn.forward(model, batch4)
    out1, _ = nn.forward(model, single)
    assert abs(out4.data[2, 0] - out1.data[0, 0]) < 1e-6


def test_forward_output_in_unit_interval():
    model = build_model(small_vgg_specs(), seed=9)
    out, _ = nn.forward(model, rand_batch((2, 1, 64, 64), seed=10, low=0.0, high=1.0))
    assert out.shape == (2, 1)
    assert ((out.data > 0.0) & (out.data < 1.0)).all()


def test_forward_rejects_wrong_input_shape():
    model = build_model(small_vgg_specs(), seed=0)
    with pytest.raises(DimensionError):
        nn.forward(model, rand_batch((2, 1, 32, 32), seed=0))


def test_forward_crops_odd_dims_before_pool():
    # a 5x5 map entering maxpool2 loses its last row/column
    model = build_model([conv(1, 2, 2), maxpool2()], (1, 6, 6), seed=4)
    out, _ = nn.forward(model, rand_batch((1, 1, 6, 6), seed=4))
    assert out.shape == (1, 2, 2, 2)


# --- bce loss ------------------------------------------------------------------


def test_bce_half_prediction():
    loss, _ = bce_loss(Tensor([[0.5]]), Tensor([[1.0]]))
    assert abs(loss - 0.693147) < 1e-5


def test_bce_perfect_prediction_floor():
    loss, grad = bce_loss(Tensor([[1.0], [0.0]]), Tensor([[1.0], [0.0]]))
    assert 0.0 <= loss <= 1.7e-6
    # saturated predictions sit outside the clamp window: gradient is zero
    assert not grad.data.any()


def test_bce_rejects_non_binary_labels():
    with pytest.raises(ValidationError):
        bce_loss(Tensor([[0.5]]), Tensor([[0.3]]))


def test_bce_grad_matches_finite_differences():
    rng = SplitMix64(77)
    pred = Tensor(rng.uniform(0.05, 0.95, 8).reshape(8, 1))
    labels = Tensor((rng.uniform(0, 1, 8) >= 0.5).astype(np.float64).reshape(8, 1))
    _, grad = bce_loss(pred, labels)
    eps = 1e-7
    for i in range(8):
        up = pred.data.copy(); up[i, 0] += eps
        dn = pred.data.copy(); dn[i, 0] -= eps
        lu, _ = bce_loss(Tensor(up), labels)
        ld, _ = bce_loss(Tensor(dn), labels)
        numeric = (lu - ld) / (2 * eps)
        denom = max(abs(numeric), abs(grad.data[i, 0]), 1e-6)
        assert abs(numeric - grad.data[i, 0]) / denom < 1e-4


def test_bce_is_mean_reduced():
    # doubling the batch by repetition leaves the loss unchanged
    pred = Tensor([[0.3], [0.8]])
    labels = Tensor([[0.0], [1.0]])
    loss1, _ = bce_loss(pred, labels)
    loss2, _ = bce_loss(Tensor(np.tile(pred.data, (2, 1))),
                        Tensor(np.tile(labels.data, (2, 1))))
    assert abs(loss1 - loss2) < 1e-7


# --- accuracy ------------------------------------------------------------------


def test_accuracy_exact_labels():
    labels = Tensor([[0.0], [1.0], [1.0]])
    assert accuracy(labels, labels) == 1.0


def test_accuracy_tie_counts_positive():
    assert accuracy(Tensor([[0.5], [0.5]]), Tensor([[1.0], [1.0]])) == 1.0
    assert accuracy(Tensor([[0.5]]), Tensor([[0.0]])) == 0.0


def test_accuracy_hand_count():
    pred = Tensor([[0.4], [0.6], [0.9], [0.1]])
    labels = Tensor([[1.0], [1.0], [0.0], [0.0]])
    assert accuracy(pred, labels) == 0.5


# --- sgd -----------------------------------------------------------------------


def test_sgd_zero_grads_leave_params():
    p = [Tensor([1.0, 2.0])]
    out = sgd_step(p, [Tensor([0.0, 0.0])], 0.5)
    assert out[0] == p[0]


def test_sgd_unit_case():
    out = sgd_step([Tensor([0.0])], [Tensor([1.0])], 1.0)
    assert out[0].data[0] == -1.0


def test_sgd_nested_structure():
    params = [[Tensor([1.0]), Tensor([2.0])], []]
    grads = [[Tensor([1.0]), Tensor([1.0])], []]
    out = sgd_step(params, grads, 0.5)
    assert out[0][0].data[0] == 0.5
    assert out[0][1].data[0] == 1.5


def test_sgd_shape_mismatch():
    with pytest.raises(DimensionError):
        sgd_step([Tensor([1.0])], [Tensor([1.0, 2.0])], 0.1)


# --- grad check ----------------------------------------------------------------


def test_grad_check_requires_float64():
    model = build_model([flatten(), dense(4, 1), sigmoid()], (2, 2, 1), seed=0)
    with pytest.raises(ValidationError):
        grad_check(model, rand_batch((2, 2, 2, 1), seed=0), Tensor([[1.0], [0.0]]))


def test_zero_loss_gradient_norm():
    # pred == label exactly: clamp zeroes the loss gradient, so every
    # parameter gradient is zero too
    model = build_model([flatten(), dense(4, 1)], (2, 2, 1), seed=0,
                        dtype=np.float64, init="zero")
    batch = rand_batch((2, 2, 2, 1), seed=1, dtype=np.float64)
    labels = Tensor(np.zeros((2, 1), dtype=np.float64))
    pred, cache = nn.forward(model, batch)
    loss, grad_pred = bce_loss(pred, labels)
    grads, _ = nn.backward(model, cache, grad_pred)
    norm = sum(float((g.data ** 2).sum()) for layer in grads for g in layer) ** 0.5
    assert loss <= 1.7e-6
    assert norm < 1e-6


def test_grad_check_linear_model_tight():
    model = build_model([flatten(), dense(6, 1), sigmoid()], (2, 3, 1),
                        seed=3, dtype=np.float64)
    batch = rand_batch((3, 2, 3, 1), seed=4, dtype=np.float64)
    labels = Tensor(np.array([[1.0], [0.0], [1.0]], dtype=np.float64))
    assert grad_check(model, batch, labels) < 1e-8


def test_gradcheck_suite_all_kinds_pass():
    results = gradcheck_suite(seed=13)
    assert set(results) == {"conv", "maxpool2", "dense", "relu", "sigmoid", "small_vgg"}
    for name, err in results.items():
        assert err < 1e-4, f"{name} gradient error {err}"


# --- checkpoint ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = build_model(small_vgg_specs(), seed=21)
    path = os.path.join(tmp_path, "model.ckpt")
    save_model(model, path)
    loaded = load_model(path)
    assert param_digest(loaded.params) == param_digest(model.params)
    assert [s.kind for s in loaded.specs] == [s.kind for s in model.specs]
    batch = rand_batch((2, 1, 64, 64), seed=22, low=0.0, high=1.0)
    a, _ = nn.forward(model, batch)
    b, _ = nn.forward(loaded, batch)
    assert a == b


def test_checkpoint_header_is_versioned(tmp_path):
    model = build_model([flatten(), dense(4, 1), sigmoid()], (2, 2, 1), seed=0)
    path = os.path.join(tmp_path, "tiny.ckpt")
    save_model(model, path)
    with open(path, "rb") as fh:
        first = fh.readline().decode()
    assert first.startswith("splitfire-model/1 ")


def test_checkpoint_rejects_garbage(tmp_path):
    path = os.path.join(tmp_path, "bad.ckpt")
    with open(path, "wb") as fh:
        fh.write(b"not a checkpoint\n")
    with pytest.raises(ValidationError):
        load_model(path)


def test_checkpoint_rejects_truncated_blob(tmp_path):
    model = build_model([flatten(), dense(4, 2), sigmoid()], (2, 2, 1), seed=7)
    path = os.path.join(tmp_path, "trunc.ckpt")
    save_model(model, path)
    data = open(path, "rb").read()
    with open(path, "wb") as fh:
        fh.write(data[:-5])
    with pytest.raises(Exception):
        load_model(path)
