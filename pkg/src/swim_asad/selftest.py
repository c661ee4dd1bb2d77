"""Oracle checks: finite-difference gradients, scan equivalence and streaming-vs-batch agreement."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .ssm import MambaConfig, init_mamba_params, mamba_block_forward, scan_parallel, scan_sequential
from .swcnn import SWCNN, SWCNNConfig, multitask_loss
from .swim import SWIM, SWIMConfig, cnn_windows, stream_init, stream_push, swim_forward
from .tensor import Tensor, default_dtype, grad_check_params, softmax, softmax_cross_entropy


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value)) and self.value < self.tol

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name}: {self.value:.3g} (tol {self.tol:g}, {self.seconds:.1f}s)"


def _timed(name: str, tol: float, fn: Callable[[], float]) -> CheckResult:
    t0 = time.perf_counter()
    value = float(fn())
    return CheckResult(name, value, tol, time.perf_counter() - t0)


def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    return (t * Tensor(w)).sum()


# ---------------------------------------------------------------------------
# gradient oracles (64-bit)
# ---------------------------------------------------------------------------

def swcnn_grad_error(seed: int = 0, batch: int = 3, channels: int = 4, samples: int = 16) -> float:
    """Train-mode SW_CNN (batchnorm on) with the multitask loss, all parameters and the input."""
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        cfg = SWCNNConfig(in_channels=channels, conv_out_channels=3, kernel_time=5, hidden_dim=5, n_subjects=3)
        model = SWCNN(cfg, rng)
        x = Tensor(rng.normal(size=(batch, channels, samples)), requires_grad=True)
        locus = rng.integers(0, 2, batch)
        subj = rng.integers(0, 3, batch)
        f = lambda: multitask_loss(model.forward(x, training=True), locus, subj, 0.05)
        return grad_check_params(f, [x] + list(model.named_parameters().values()))


def mamba_grad_error(seed: int = 0, method: str = "parallel", exact_zoh: bool = False, steps: int = 7) -> float:
    """One Mamba block with residual, all parameters and the input."""
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        cfg = MambaConfig(d_model=4, d_state=3, expand=2, d_conv=4, exact_zoh=exact_zoh, scan_chunk=4)
        p = init_mamba_params(cfg, rng)
        # move away from the init so that norm and D are not at special values
        for t in p.values():
            t.data = t.data + 0.1 * rng.normal(size=t.shape)
        u = Tensor(rng.normal(size=(2, steps, 4)), requires_grad=True)
        w = rng.normal(size=(2, steps, 4))
        f = lambda: _weighted_sum(mamba_block_forward(u, p, cfg, method), w)
        return grad_check_params(f, [u] + list(p.values()))


def small_swim(rng: np.random.Generator, channels: int = 3) -> SWIM:
    """A tiny SWIM (16 Hz, 1 s windows, 2 s spans) for oracle checks."""
    cnn = SWCNN(SWCNNConfig(in_channels=channels, conv_out_channels=2, kernel_time=3, hidden_dim=4,
                            n_subjects=2), rng)
    cfg = SWIMConfig(fs=16, cnn_window_seconds=1.0, hop_seconds=0.125, train_total_seconds=2.0,
                     n_layers=2, d_model=4, d_state=2, expand=2, d_conv=4, scan_chunk=4)
    return SWIM(cfg, cnn, rng)


def swim_grad_error(seed: int = 0) -> float:
    """End-to-end SWIM (CNN in train mode) with locus cross-entropy, every parameter."""
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        model = small_swim(rng)
        eeg = rng.normal(size=(2, 3, model.config.total_samples))
        y = np.array([0, 1])
        f = lambda: softmax_cross_entropy(model.forward(eeg, training=True), y)
        return grad_check_params(f, list(model.named_parameters().values()))


# ---------------------------------------------------------------------------
# scan equivalence
# ---------------------------------------------------------------------------

def random_scan_inputs(rng: np.random.Generator, N: int, D: int, S: int, dtype=np.float64):
    x = rng.normal(size=(N, D))
    delta = np.log1p(np.exp(rng.normal(size=(N, D)) - 1.0))
    A = -np.exp(rng.normal(size=(D, S)))
    B = rng.normal(size=(N, S))
    C = rng.normal(size=(N, S))
    Dv = rng.normal(size=D)
    return [a.astype(dtype) for a in (x, delta, A, B, C, Dv)]


def scan_equivalence_error(n_configs: int = 100, max_steps: int = 1024, max_inner: int = 128, max_state: int = 16,
                           seed: int = 0, dtype=np.float64) -> float:
    """Max |parallel - sequential| over random configurations; the largest size is always included."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_configs):
        if i == 0:
            N, D, S = max_steps, max_inner, max_state
        else:
            N = int(rng.integers(1, max_steps + 1))
            D = int(rng.integers(1, max_inner + 1))
            S = int(rng.integers(1, max_state + 1))
        args = random_scan_inputs(rng, N, D, S, dtype)
        zoh = bool(rng.integers(0, 2))
        chunk = int(rng.choice([8, 16, 64, 256]))
        yp = scan_parallel(*args, exact_zoh=zoh, chunk=chunk)
        ys = scan_sequential(*args, exact_zoh=zoh)
        worst = max(worst, float(np.max(np.abs(yp - ys))))
    return worst


# ---------------------------------------------------------------------------
# streaming
# ---------------------------------------------------------------------------

def streaming_error(model: SWIM, eeg: np.ndarray, stride: int = 1) -> float:
    """Max posterior difference between stream_push and swim_forward on every (stride-th) prefix.

    ``eeg`` is raw [C, L]; both paths divide by the same per-trial channel stds.
    """
    cfg = model.config
    hop, win = cfg.hop_samples, cfg.window_samples
    stds = eeg.astype(np.float64).std(axis=1)
    state = stream_init(model, stds)
    normed = eeg / stds[:, None]
    worst = 0.0
    n_push = eeg.shape[1] // hop
    for i in range(n_push):
        d = stream_push(state, eeg[:, i * hop:(i + 1) * hop])
        if d.posterior is None:
            continue
        k = state.steps - 1
        if k % stride and i != n_push - 1:
            continue
        end = win + k * hop
        ref = softmax(swim_forward(normed[:, :end], model).astype(np.float64))
        worst = max(worst, float(np.max(np.abs(ref - d.posterior))))
    return worst


def stream_memory_growth(model: SWIM, n_pushes: int = 100_000, seed: int = 0) -> float:
    """Bytes of decoder state gained between the first emitted decision and the last push."""
    rng = np.random.default_rng(seed)
    cfg = model.config
    state = stream_init(model, np.ones(model.in_channels))
    chunk = rng.normal(size=(model.in_channels, cfg.hop_samples)).astype(np.float32)
    base = None
    for i in range(n_pushes):
        stream_push(state, chunk if i % 2 else -chunk)
        if base is None and state.ready:
            base = state.nbytes
    return float(state.nbytes - base)


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------

def run_selftest(quick: bool = True, seed: int = 0) -> List[CheckResult]:
    """The oracle suite the CLI ``selftest`` subcommand runs."""
    results = [
        _timed("swcnn gradient (float64)", 1e-5, lambda: swcnn_grad_error(seed)),
        _timed("mamba block gradient, parallel scan (float64)", 1e-5, lambda: mamba_grad_error(seed, "parallel")),
        _timed("mamba block gradient, sequential scan (float64)", 1e-5, lambda: mamba_grad_error(seed, "sequential")),
        _timed("mamba block gradient, exact zoh (float64)", 1e-5, lambda: mamba_grad_error(seed, "parallel", True)),
        _timed("swim end-to-end gradient (float64)", 1e-4, lambda: swim_grad_error(seed)),
        _timed("parallel vs sequential scan (float64)", 1e-5,
               lambda: scan_equivalence_error(20 if quick else 100, 256 if quick else 1024, seed=seed)),
    ]
    rng = np.random.default_rng(seed)
    model = SWIM(SWIMConfig(n_layers=1 if quick else 3), SWCNN(SWCNNConfig(in_channels=8), rng), rng)
    eeg = rng.normal(size=(8, 128 * (5 if quick else 50))).astype(np.float32)
    model.cnn.forward(cnn_windows(eeg[None, :, :640])[0], training=True)  # populate batchnorm running stats
    results.append(_timed("streaming vs batch posterior", 1e-3, lambda: streaming_error(model, eeg)))
    results.append(_timed("stream state growth (bytes)", 0.5,
                          lambda: stream_memory_growth(model, 1000 if quick else 100_000, seed)))
    return results
