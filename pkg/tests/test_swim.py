"""Composite model: sequence lengths, batch forward, gradient, streaming decoder."""

import numpy as np
import pytest

from swim_asad.checkpoint import checkpoint_from_model
from swim_asad.dataio import DataError
from swim_asad.selftest import small_swim, stream_memory_growth, streaming_error, swim_grad_error
from swim_asad.swcnn import SWCNN, SWCNNConfig
from swim_asad.swim import (
    SWIM,
    SWIMConfig,
    cnn_windows,
    sequence_length,
    stream_init,
    stream_push,
    swim_forward,
)
from swim_asad.tensor import ShapeError


def warmed_swim(channels=8, layers=1, seed=0):
    rng = np.random.default_rng(seed)
    model = SWIM(SWIMConfig(n_layers=layers), SWCNN(SWCNNConfig(in_channels=channels), rng), rng)
    model.cnn.forward(rng.normal(size=(16, channels, 128)).astype(np.float32), training=True)
    return model


@pytest.mark.parametrize("seconds,n", [(1, 1), (5, 33), (50, 393)])
def test_sequence_lengths(seconds, n):
    assert sequence_length(128 * seconds) == n


def test_sequence_length_too_short():
    with pytest.raises(DataError):
        sequence_length(127)


def test_config_derived_sizes():
    cfg = SWIMConfig()
    assert (cfg.window_samples, cfg.hop_samples, cfg.total_samples) == (128, 16, 640)
    with pytest.raises(ValueError):
        SWIMConfig(hop_seconds=0.3)


def test_cnn_windows_are_demeaned_slices():
    rng = np.random.default_rng(0)
    eeg = rng.normal(size=(3, 640)) + 7
    w = cnn_windows(eeg)
    assert w.shape == (33, 3, 128)
    np.testing.assert_allclose(w[5], eeg[:, 80:208] - eeg[:, 80:208].mean(-1, keepdims=True))


def test_forward_shapes_and_methods_agree():
    model = warmed_swim()
    eeg = np.random.default_rng(1).normal(size=(2, 8, 640)).astype(np.float32)
    a = model.forward(eeg, method="parallel").data
    b = model.forward(eeg, method="sequential").data
    assert a.shape == (2, 2)
    np.testing.assert_allclose(a, b, atol=1e-5)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 7, 640), np.float32))


def test_end_to_end_gradient():
    assert swim_grad_error() < 1e-4


def test_parameter_groups_partition_everything():
    model = warmed_swim()
    names = set(model.named_parameters())
    seq = set(model.sequence_parameters())
    cnn = {k for k in names if k.startswith("cnn.")}
    assert seq | cnn == names and not (seq & cnn)


def test_streaming_matches_batch_on_every_step():
    model = warmed_swim(layers=2)
    eeg = np.random.default_rng(2).normal(3.0, 2.0, size=(8, 128 * 6)).astype(np.float32)
    assert streaming_error(model, eeg) < 1e-3


def test_warmup_and_decision_cadence():
    model = warmed_swim()
    state = stream_init(model, np.ones(8))
    labels = [stream_push(state, np.ones((8, 16), np.float32) * i).label for i in range(10)]
    assert labels[:7] == ["warming"] * 7
    assert all(lab in ("left", "right") for lab in labels[7:])
    assert state.steps == 3


def test_state_memory_constant():
    assert stream_memory_growth(warmed_swim(), n_pushes=500) == 0


def test_stream_init_checks():
    model = warmed_swim()
    with pytest.raises(ShapeError):
        stream_init(model, np.ones(7))
    with pytest.raises(DataError):
        stream_init(model, np.zeros(8))
    with pytest.raises(DataError):
        stream_init(model.cnn, np.ones(8))
    with pytest.raises(DataError):
        stream_init(checkpoint_from_model(model.cnn), np.ones(8))
    state = stream_init(checkpoint_from_model(model), np.ones(8))
    with pytest.raises(ShapeError):
        stream_push(state, np.zeros((8, 15)))


def test_swim_forward_helper_matches_method():
    rng = np.random.default_rng(3)
    with_seed = small_swim(rng)
    with_seed.cnn.forward(rng.normal(size=(4, 3, 16)), training=True)
    eeg = rng.normal(size=(3, 32))
    np.testing.assert_array_equal(swim_forward(eeg, with_seed), with_seed.forward(eeg).data)
