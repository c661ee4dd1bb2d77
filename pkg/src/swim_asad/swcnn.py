"""Short-window CNN: temporal conv -> BatchNorm -> ReLU -> mean pool -> FC -> ReLU -> FC."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .tensor import (
    RunningStats,
    ShapeError,
    Tensor,
    batchnorm,
    conv_time,
    get_default_dtype,
    linear,
    mean_over_time,
    relu,
    softmax_cross_entropy,
)

N_LOCUS = 2


@dataclass
class SWCNNConfig:
    in_channels: int = 64
    conv_out_channels: int = 16
    kernel_time: int = 5
    hidden_dim: int = 64
    n_subjects: int = 16
    batchnorm: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.kernel_time % 2 != 1:
            raise ValueError("kernel_time must be odd for symmetric padding")
        if self.conv_out_channels < 1 or self.hidden_dim < 1 or self.in_channels < 1:
            raise ValueError("channel and hidden sizes must be positive")

    @classmethod
    def baseline(cls, **overrides) -> "SWCNNConfig":
        """The earlier CNN this model improves on."""
        base = dict(kernel_time=17, conv_out_channels=5, hidden_dim=5, batchnorm=False)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def short_kernel_baseline(cls, **overrides) -> "SWCNNConfig":
        """Baseline with the kernel shortened to 5 samples."""
        base = dict(kernel_time=5, conv_out_channels=5, hidden_dim=5, batchnorm=False)
        base.update(overrides)
        return cls(**base)

    @property
    def n_outputs(self) -> int:
        return N_LOCUS + self.n_subjects

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SWCNNConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SWCNNConfig fields: {sorted(unknown)}")
        return cls(**d)


class SWCNN:
    def __init__(self, config: Optional[SWCNNConfig] = None, rng: Optional[np.random.Generator] = None):
        self.config = cfg = config or SWCNNConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = get_default_dtype()
        C, F, K, H = cfg.in_channels, cfg.conv_out_channels, cfg.kernel_time, cfg.hidden_dim

        def uni(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dt)

        self.params = {
            "conv.weight": uni((F, C, K), C * K),
            "conv.bias": uni((F,), C * K),
            "fc1.weight": uni((H, F), F),
            "fc1.bias": uni((H,), F),
            "fc2.weight": uni((cfg.n_outputs, H), H),
            "fc2.bias": uni((cfg.n_outputs,), H),
        }
        if cfg.batchnorm:
            self.params["bn.weight"] = Tensor(np.ones(F), requires_grad=True, dtype=dt)
            self.params["bn.bias"] = Tensor(np.zeros(F), requires_grad=True, dtype=dt)
        self.bn_stats = RunningStats(F, cfg.bn_momentum, cfg.bn_eps, dtype=dt)
        for k, v in self.params.items():
            v.name = k

    # -- forward ---------------------------------------------------------
    def _check_input(self, x: Tensor) -> None:
        if x.ndim < 2 or x.shape[-2] != self.config.in_channels:
            raise ShapeError(f"expected input [..., {self.config.in_channels}, T], got {x.shape}")
        if x.shape[-1] < self.config.kernel_time:
            raise ShapeError(f"window of {x.shape[-1]} samples is shorter than the kernel")

    def features(self, x, training: bool = False) -> Tensor:
        """Hidden representation after the first FC layer and ReLU: [..., hidden_dim]."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self._check_input(x)
        p = self.params
        pad = self.config.kernel_time // 2
        h = conv_time(x, p["conv.weight"], p["conv.bias"], pad, pad)
        if self.config.batchnorm:
            h = batchnorm(h, p["bn.weight"], p["bn.bias"], self.bn_stats, training)
        h = mean_over_time(relu(h))
        return relu(linear(h, p["fc1.weight"], p["fc1.bias"]))

    def head(self, hidden: Tensor) -> Tensor:
        return linear(hidden, self.params["fc2.weight"], self.params["fc2.bias"])

    def forward(self, x, training: bool = False) -> Tensor:
        """Logits [..., 2 + n_subjects]; the first two entries are the locus logits."""
        return self.head(self.features(x, training))

    __call__ = forward

    # -- state -----------------------------------------------------------
    def named_parameters(self, prefix: str = "") -> dict:
        return {prefix + k: v for k, v in self.params.items()}

    def buffers(self, prefix: str = "") -> dict:
        if not self.config.batchnorm:
            return {}
        s = self.bn_stats
        return {
            prefix + "bn.running_mean": s.mean,
            prefix + "bn.running_var": s.var,
            prefix + "bn.num_batches": np.array([s.num_batches], dtype=np.int64),
        }

    def state_dict(self, prefix: str = "") -> dict:
        out = {k: v.data for k, v in self.named_parameters(prefix).items()}
        out.update(self.buffers(prefix))
        return out

    def load_state_dict(self, state: dict, prefix: str = "") -> None:
        for k, t in self.params.items():
            key = prefix + k
            if key not in state:
                raise KeyError(f"missing tensor {key!r}")
            arr = np.asarray(state[key])
            if arr.shape != t.shape:
                raise ShapeError(f"tensor {key!r} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(t.dtype).copy()
        if self.config.batchnorm:
            self.bn_stats.mean = np.asarray(state[prefix + "bn.running_mean"], dtype=self.bn_stats.mean.dtype).copy()
            self.bn_stats.var = np.asarray(state[prefix + "bn.running_var"], dtype=self.bn_stats.var.dtype).copy()
            self.bn_stats.num_batches = int(np.asarray(state[prefix + "bn.num_batches"]).reshape(-1)[0])


def multitask_loss(logits: Tensor, locus, subject, gamma: float) -> Tensor:
    """Locus cross-entropy plus ``gamma`` times subject cross-entropy."""
    n_subjects = logits.shape[-1] - N_LOCUS
    subject = np.asarray(subject)
    if subject.size and (subject.min() < 0 or subject.max() >= n_subjects):
        raise ValueError(f"subject label out of range [0, {n_subjects})")
    loss = softmax_cross_entropy(logits[..., :N_LOCUS], locus)
    if gamma == 0:
        return loss
    return loss + softmax_cross_entropy(logits[..., N_LOCUS:], subject) * gamma
