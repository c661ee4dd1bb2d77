"""Adam + cosine annealing training loop with early stopping on validation accuracy."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, checkpoint_from_model
from .dataio import (
    DataError,
    EEGTrial,
    SplitSpec,
    gather,
    index_windows,
    time_mask_batch,
)
from .swcnn import N_LOCUS, SWCNN, SWCNNConfig, multitask_loss
from .swim import SWIM, SWIMConfig
from .tensor import Tensor, get_default_dtype, softmax_cross_entropy

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    cnn_lr: float = 1e-5  # SWIM fine-tuning rate for the pretrained CNN
    max_epochs: int = 100
    weight_decay: float = 1e-3
    patience: int = 10
    seeds: tuple = (0, 1, 2)
    gamma: float = 0.05
    alpha: float = 0.75
    beta: float = 1.0
    window_seconds: float = 1.0
    eval_batch: int = 256
    freeze_cnn_bn: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        self.seeds = tuple(self.seeds)

    @classmethod
    def swim_defaults(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=32, max_epochs=5, weight_decay=0.0, lr=1e-3, cnn_lr=1e-5, patience=5)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

def cosine_lr(epoch: int, lr0: float, T_max: int) -> float:
    if not 0 <= epoch <= T_max:
        raise ValueError(f"epoch {epoch} outside [0, {T_max}]")
    return 0.5 * lr0 * (1 + math.cos(math.pi * epoch / T_max))


def adam_step(param, grad, m, v, t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0):
    """One Adam update with coupled (L2) weight decay. Returns (param, m, v)."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient; step rejected")
    g = grad + weight_decay * param if weight_decay else grad
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    new = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new.astype(param.dtype), m.astype(param.dtype), v.astype(param.dtype)


class Adam:
    """Adam over named parameter groups, each with its own base learning rate."""

    def __init__(self, groups: Dict[str, dict], weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        # groups: name -> {"params": {pname: Tensor}, "lr": float}
        self.groups = groups
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}
        self.scale = 1.0

    def parameters(self):
        for g in self.groups.values():
            yield from g["params"].items()

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for g in self.groups.values():
            lr = g["lr"] * self.scale
            for name, p in g["params"].items():
                grad = p.grad if p.grad is not None else np.zeros_like(p.data)
                m = self.m.get(name, np.zeros_like(p.data))
                v = self.v.get(name, np.zeros_like(p.data))
                try:
                    p.data, self.m[name], self.v[name] = adam_step(
                        p.data, grad, m, v, self.t, lr, *self.betas, self.eps, self.weight_decay)
                except TrainingError as exc:
                    raise TrainingError(f"parameter {name!r}: {exc}") from None


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

def locus_logits(model, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Eval-mode locus logits [n, 2] for windows (SW_CNN) or spans (SWIM) x [n, C, T]."""
    out = []
    dt = get_default_dtype()
    for i in range(0, len(x), batch):
        xb = np.asarray(x[i:i + batch], dtype=dt)
        logits = model.forward(xb, training=False).data
        out.append(logits[..., :N_LOCUS])
    if not out:
        return np.zeros((0, N_LOCUS), dtype=dt)
    return np.concatenate(out)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    checkpoint: Checkpoint
    history: List[dict]
    best_val_acc: float
    best_epoch: int
    seed: int


def _span_samples(kind: str, config: TrainConfig, fs: float, swim_cfg: Optional[SWIMConfig]) -> int:
    if kind == "swim":
        return swim_cfg.total_samples
    return int(round(config.window_seconds * fs))


def _snapshot(model) -> dict:
    return copy.deepcopy(model.state_dict())


def train(kind: str, trials: Sequence[EEGTrial], split: SplitSpec, config: TrainConfig, seed: int = 0,
          cnn_config: Optional[SWCNNConfig] = None, swim_config: Optional[SWIMConfig] = None,
          init_cnn: Optional[SWCNN] = None) -> TrainResult:
    """Train one model on normalized ``trials`` and return the best-validation checkpoint.

    kind="swcnn" trains the multitask CNN on decision windows; kind="swim"
    trains the composite model on ``train_total_seconds`` spans, starting
    from ``init_cnn`` when given.
    """
    if kind not in ("swcnn", "swim"):
        raise ValueError(f"unknown model kind {kind!r}")
    if not trials:
        raise DataError("no trials")
    fs = trials[0].fs
    n_channels = trials[0].data.shape[0]
    rng = np.random.default_rng(seed)

    if kind == "swcnn":
        cnn_config = cnn_config or SWCNNConfig(in_channels=n_channels)
        model = SWCNN(cnn_config, rng)
        groups = {"all": {"params": model.named_parameters(), "lr": config.lr}}
    else:
        swim_config = swim_config or SWIMConfig(fs=int(fs))
        if init_cnn is not None:
            cnn = SWCNN(init_cnn.config, rng)
            cnn.load_state_dict(init_cnn.state_dict())
        else:
            cnn = SWCNN(cnn_config or SWCNNConfig(in_channels=n_channels), rng)
        model = SWIM(swim_config, cnn, rng)
        groups = {
            "cnn": {"params": model.cnn.named_parameters("cnn."), "lr": config.cnn_lr},
            "sequence": {"params": model.sequence_parameters(), "lr": config.lr},
        }
    cnn_channels = model.cnn.config.in_channels if kind == "swim" else model.config.in_channels
    if cnn_channels != n_channels:
        raise DataError(f"model expects {cnn_channels} channels but trials have {n_channels}")
    span = _span_samples(kind, config, fs, swim_config)
    train_idx = index_windows(trials, split.train, span, config.alpha)
    val_idx = index_windows(trials, split.val, span, 0.0)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise DataError(f"empty partition: {len(train_idx)} train / {len(val_idx)} val windows of {span} samples")
    # SWIM consumes raw (trial-normalized) spans; each 1 s sub-window is demeaned inside the model
    demean = kind == "swcnn"
    xv, yv, _ = gather(trials, val_idx, demean=demean)

    opt = Adam(groups, weight_decay=config.weight_decay)
    shuffle_rng = np.random.default_rng([seed, 1])
    history = []
    best_acc, best_epoch, best_state = -1.0, -1, None
    stale = 0
    for epoch in range(config.max_epochs):
        opt.scale = cosine_lr(epoch, 1.0, config.max_epochs)
        mask_rng = np.random.default_rng([seed, 2, epoch])
        order = shuffle_rng.permutation(len(train_idx))
        tot_loss = tot_correct = tot_n = 0.0
        for b0 in range(0, len(order), config.batch_size):
            sel = order[b0:b0 + config.batch_size]
            xb, yb, sb = gather(trials, train_idx.take(sel), demean=demean)
            if config.beta > 0:
                time_mask_batch(xb, config.beta, mask_rng)
            xb = xb.astype(get_default_dtype(), copy=False)
            opt.zero_grad()
            if kind == "swcnn":
                logits = model.forward(Tensor(xb), training=True)
                loss = multitask_loss(logits, yb, sb, config.gamma)
            else:
                logits = model.forward(xb, training=not config.freeze_cnn_bn)
                loss = softmax_cross_entropy(logits, yb)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingError(f"loss diverged (NaN/inf) at epoch {epoch}")
            loss.backward()
            opt.step()
            tot_loss += lv * len(sel)
            tot_correct += float(np.sum(np.argmax(logits.data[..., :N_LOCUS], -1) == yb))
            tot_n += len(sel)
        val_acc = accuracy(locus_logits(model, xv, config.eval_batch), yv)
        row = {"epoch": epoch, "train_loss": tot_loss / tot_n, "train_acc": tot_correct / tot_n,
               "val_acc": val_acc, "lr": cosine_lr(epoch, config.lr, config.max_epochs)}
        history.append(row)
        log.info("seed %d epoch %d loss %.4f train %.3f val %.3f", seed, epoch, row["train_loss"],
                 row["train_acc"], val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch, best_state = val_acc, epoch, _snapshot(model)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state_dict(best_state)
    meta = {"epoch": best_epoch, "val_acc": best_acc, "seed": seed, "protocol": split.protocol,
            "held_out": split.held_out, "train": config.to_dict()}
    return TrainResult(model, checkpoint_from_model(model, meta), history, best_acc, best_epoch, seed)


def write_history(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "train_acc", "val_acc", "lr"])
        for r in history:
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["train_acc"]), repr(r["val_acc"]), repr(r["lr"])])
