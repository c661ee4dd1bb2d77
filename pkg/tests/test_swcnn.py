"""Short-window CNN: shapes, parameter budget, loss identities, state round trips."""

import math

import numpy as np
import pytest

from swim_asad.selftest import swcnn_grad_error
from swim_asad.swcnn import N_LOCUS, SWCNN, SWCNNConfig, multitask_loss
from swim_asad.tensor import ShapeError, Tensor, default_dtype, softmax_cross_entropy


def n_params(model):
    return sum(p.data.size for p in model.named_parameters().values())


def test_default_architecture_parameter_count():
    model = SWCNN(SWCNNConfig(), np.random.default_rng(0))
    # conv 16x64x5+16, bn 2x16, fc1 64x16+64, fc2 18x64+18
    assert n_params(model) == 5136 + 32 + 1088 + 1170


def test_baseline_configs():
    base = SWCNNConfig.baseline()
    assert (base.kernel_time, base.conv_out_channels, base.hidden_dim, base.batchnorm) == (17, 5, 5, False)
    assert SWCNNConfig.short_kernel_baseline().kernel_time == 5
    model = SWCNN(base, np.random.default_rng(0))
    assert "bn.weight" not in model.named_parameters()
    out = model.forward(np.zeros((2, 64, 128), np.float32))
    assert out.shape == (2, N_LOCUS + 16)


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        SWCNNConfig(kernel_time=4)


def test_config_dict_rejects_unknown_fields():
    d = SWCNNConfig().to_dict()
    assert SWCNNConfig.from_dict(d) == SWCNNConfig()
    with pytest.raises(ValueError):
        SWCNNConfig.from_dict(dict(d, dropout=0.5))


def test_forward_shapes_and_any_window_length():
    rng = np.random.default_rng(1)
    model = SWCNN(SWCNNConfig(in_channels=8), rng)
    model.forward(rng.normal(size=(4, 8, 128)).astype(np.float32), training=True)
    assert model.forward(rng.normal(size=(3, 8, 128)).astype(np.float32)).shape == (3, 18)
    assert model.features(rng.normal(size=(2, 5, 8, 640)).astype(np.float32)).shape == (2, 5, 64)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 7, 128), np.float32))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 8, 3), np.float32))


def test_eval_before_training_is_an_error():
    model = SWCNN(SWCNNConfig(in_channels=4), np.random.default_rng(0))
    with pytest.raises(RuntimeError):
        model.forward(np.zeros((1, 4, 128), np.float32), training=False)


def test_gradient_oracle():
    assert swcnn_grad_error() < 1e-5


def test_multitask_loss_uniform_logits_identity():
    logits = Tensor(np.zeros((5, 18)))
    loss = multitask_loss(logits, np.zeros(5, int), np.arange(5), 0.05)
    assert float(loss.data) == pytest.approx(math.log(2) + 0.05 * math.log(16), abs=1e-6)


def test_multitask_loss_gamma_zero_is_locus_loss():
    rng = np.random.default_rng(2)
    with default_dtype(np.float64):
        logits = Tensor(rng.normal(size=(6, 18)))
        y = rng.integers(0, 2, 6)
        a = multitask_loss(logits, y, rng.integers(0, 16, 6), 0.0)
        b = softmax_cross_entropy(logits[..., :2], y)
    assert float(a.data) == float(b.data)


def test_multitask_loss_rejects_bad_subject():
    with pytest.raises(ValueError):
        multitask_loss(Tensor(np.zeros((2, 18))), np.array([0, 1]), np.array([0, 16]), 0.05)


def test_state_dict_round_trip_preserves_outputs():
    rng = np.random.default_rng(3)
    a = SWCNN(SWCNNConfig(in_channels=4), rng)
    x = rng.normal(size=(6, 4, 128)).astype(np.float32)
    a.forward(x, training=True)
    b = SWCNN(SWCNNConfig(in_channels=4), np.random.default_rng(99))
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a.forward(x).data, b.forward(x).data)
    assert b.bn_stats.num_batches == 1


def test_load_state_dict_shape_mismatch():
    a = SWCNN(SWCNNConfig(in_channels=4), np.random.default_rng(0))
    state = a.state_dict()
    state["fc1.weight"] = np.zeros((3, 3), np.float32)
    with pytest.raises(ShapeError):
        a.load_state_dict(state)
