"""CNN feature sequence -> FC -> Mamba backbone -> mean pool -> locus head, plus a streaming decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .dataio import DataError
from .ssm import MambaBackbone, MambaConfig
from .swcnn import N_LOCUS, SWCNN, SWCNNConfig
from .tensor import ShapeError, Tensor, get_default_dtype, linear, softmax


@dataclass
class SWIMConfig:
    fs: int = 128
    cnn_window_seconds: float = 1.0
    hop_seconds: float = 0.125
    train_total_seconds: float = 5.0
    n_layers: int = 3
    d_model: int = 64
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    exact_zoh: bool = False
    scan_chunk: int = 64

    def __post_init__(self):
        w, h = self.window_samples, self.hop_samples
        if w % h:
            raise ValueError("hop must divide the CNN window")
        if (self.total_samples - w) % h:
            raise ValueError("(total - window) must be a whole number of hops")

    @property
    def window_samples(self) -> int:
        return int(round(self.cnn_window_seconds * self.fs))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_seconds * self.fs))

    @property
    def total_samples(self) -> int:
        return int(round(self.train_total_seconds * self.fs))

    def mamba(self) -> MambaConfig:
        return MambaConfig(d_model=self.d_model, d_state=self.d_state, expand=self.expand,
                           d_conv=self.d_conv, exact_zoh=self.exact_zoh, scan_chunk=self.scan_chunk)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SWIMConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown SWIMConfig fields: {sorted(unknown)}")
        return cls(**d)


def sequence_length(n_samples: int, window: int = 128, hop: int = 16) -> int:
    """Number of CNN windows sliding over ``n_samples`` at the given hop."""
    if n_samples < window:
        raise DataError(f"need at least {window} samples, got {n_samples}")
    return (n_samples - window) // hop + 1


def cnn_windows(eeg: np.ndarray, window: int = 128, hop: int = 16) -> np.ndarray:
    """[..., C, T_total] -> [..., N, C, window] with per-window, per-channel mean removed."""
    N = sequence_length(eeg.shape[-1], window, hop)
    view = np.lib.stride_tricks.sliding_window_view(eeg, window, axis=-1)[..., ::hop, :]
    view = np.moveaxis(view[..., :N, :], -2, -3)
    return view - view.mean(axis=-1, keepdims=True)


class SWIM:
    def __init__(self, config: Optional[SWIMConfig] = None, cnn: Optional[SWCNN] = None,
                 rng: Optional[np.random.Generator] = None):
        self.config = cfg = config or SWIMConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cnn = cnn or SWCNN(SWCNNConfig(), rng)
        dt = get_default_dtype()
        H = self.cnn.config.hidden_dim
        b_in = 1 / np.sqrt(H)
        b_out = 1 / np.sqrt(cfg.d_model)
        self.fc_in_w = Tensor(rng.uniform(-b_in, b_in, (cfg.d_model, H)), True, "fc_in.weight", dt)
        self.fc_in_b = Tensor(rng.uniform(-b_in, b_in, cfg.d_model), True, "fc_in.bias", dt)
        self.backbone = MambaBackbone(cfg.mamba(), cfg.n_layers, rng)
        self.head_w = Tensor(rng.uniform(-b_out, b_out, (N_LOCUS, cfg.d_model)), True, "head.weight", dt)
        self.head_b = Tensor(rng.uniform(-b_out, b_out, N_LOCUS), True, "head.bias", dt)

    @property
    def in_channels(self) -> int:
        return self.cnn.config.in_channels

    def named_parameters(self) -> dict:
        out = self.cnn.named_parameters("cnn.")
        out.update(self.sequence_parameters())
        return out

    def sequence_parameters(self) -> dict:
        """Everything outside the CNN (the Mamba side)."""
        out = {"fc_in.weight": self.fc_in_w, "fc_in.bias": self.fc_in_b}
        out.update(self.backbone.named_parameters())
        out.update({"head.weight": self.head_w, "head.bias": self.head_b})
        return out

    def state_dict(self) -> dict:
        out = self.cnn.state_dict("cnn.")
        out.update({k: v.data for k, v in self.sequence_parameters().items()})
        return out

    def load_state_dict(self, state: dict) -> None:
        self.cnn.load_state_dict(state, "cnn.")
        for k, t in self.sequence_parameters().items():
            if k not in state:
                raise KeyError(f"missing tensor {k!r}")
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ShapeError(f"tensor {k!r} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(t.dtype).copy()

    # -- batch path ------------------------------------------------------
    def feature_sequence(self, eeg, training: bool = False) -> Tensor:
        """CNN hidden features for each sliding window: [..., N, hidden]."""
        eeg = np.asarray(eeg)
        if eeg.shape[-2] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} channels, got {eeg.shape}")
        cfg = self.config
        wins = cnn_windows(eeg, cfg.window_samples, cfg.hop_samples)
        lead = wins.shape[:-2]
        flat = Tensor(wins.reshape((-1,) + wins.shape[-2:]), dtype=get_default_dtype())
        feats = self.cnn.features(flat, training)
        return feats.reshape(lead + (feats.shape[-1],))

    def forward(self, eeg, training: bool = False, method: str = "parallel") -> Tensor:
        """Locus logits [..., 2] for EEG [..., C, T_total] (already divided by per-trial channel stds)."""
        feats = self.feature_sequence(eeg, training)
        h = self.backbone.forward(linear(feats, self.fc_in_w, self.fc_in_b), method)
        pooled = h.mean(axis=-2)
        return linear(pooled, self.head_w, self.head_b)

    __call__ = forward


def cnn_feature_sequence(eeg: np.ndarray, cnn: SWCNN, window: int = 128, hop: int = 16) -> np.ndarray:
    """Eval-mode CNN features of the sliding windows of ``eeg`` [C, T_total] -> [N, hidden]."""
    wins = cnn_windows(np.asarray(eeg), window, hop)
    return cnn.features(Tensor(wins), training=False).data


def swim_forward(eeg: np.ndarray, model: SWIM) -> np.ndarray:
    return model.forward(eeg, training=False).data


# ---------------------------------------------------------------------------
# streaming
# ---------------------------------------------------------------------------

class StreamState:
    """Single-stream decoder state. Memory is fixed at construction."""

    def __init__(self, model: SWIM, channel_stds: np.ndarray):
        cfg = model.config
        self.model = model
        dt = get_default_dtype()
        self.stds = np.asarray(channel_stds, dtype=dt).copy()
        self.buffer = np.zeros((model.in_channels, cfg.window_samples), dtype=dt)
        self.filled = 0
        self.layers = model.backbone.init_state()
        self.pooled_sum = np.zeros(cfg.d_model, dtype=np.float64)
        self.steps = 0  # emitted decisions
        self.pushes = 0

    @property
    def nbytes(self) -> int:
        return (self.stds.nbytes + self.buffer.nbytes + self.pooled_sum.nbytes
                + sum(s.nbytes for s in self.layers))

    @property
    def ready(self) -> bool:
        return self.filled >= self.buffer.shape[1]


def stream_init(model, trial_channel_stds) -> StreamState:
    """Fresh streaming state for a SWIM model (or a SWIM checkpoint) and the trial's channel stds."""
    from .checkpoint import Checkpoint, model_from_checkpoint

    if isinstance(model, Checkpoint):
        if model.kind != "swim":
            raise DataError(f"streaming needs a SWIM checkpoint, got kind {model.kind!r}")
        model = model_from_checkpoint(model)
    if not isinstance(model, SWIM):
        raise DataError("streaming needs a SWIM model with both CNN and Mamba parameters")
    stds = np.asarray(trial_channel_stds)
    if stds.shape != (model.in_channels,):
        raise ShapeError(f"model has {model.in_channels} channels but {stds.shape} channel stds were given")
    if not np.all(stds > 0):
        raise DataError("channel stds must be positive")
    return StreamState(model, stds)


@dataclass
class Decision:
    step: int
    label: str  # "left" | "right" | "warming"
    posterior: Optional[np.ndarray] = None


def stream_push(state: StreamState, chunk: np.ndarray) -> Decision:
    """Append one hop of raw EEG; emits a decision once a full CNN window is buffered."""
    model = state.model
    cfg = model.config
    hop = cfg.hop_samples
    chunk = np.asarray(chunk)
    if chunk.shape != (model.in_channels, hop):
        raise ShapeError(f"chunk must be [{model.in_channels}, {hop}], got {chunk.shape}")
    buf = state.buffer
    buf[:, :-hop] = buf[:, hop:]
    buf[:, -hop:] = chunk / state.stds[:, None]
    state.filled = min(buf.shape[1], state.filled + hop)
    state.pushes += 1
    if not state.ready:
        return Decision(state.pushes - 1, "warming")
    win = buf - buf.mean(axis=-1, keepdims=True)
    feat = model.cnn.features(Tensor(win[None]), training=False).data[0]
    u = feat @ model.fc_in_w.data.T + model.fc_in_b.data
    state.layers, h = model.backbone.step(state.layers, u)
    state.pooled_sum += h
    state.steps += 1
    pooled = (state.pooled_sum / state.steps).astype(h.dtype)
    logits = pooled @ model.head_w.data.T + model.head_b.data
    post = softmax(logits)
    return Decision(state.pushes - 1, ("left", "right")[int(np.argmax(post))], post)
