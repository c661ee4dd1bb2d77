"""Accuracy evaluation, model combination, channel ablation, window sweeps and the trial-range experiment."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint, model_from_checkpoint
from .dataio import (
    NINE_CHANNELS,
    DataError,
    DecisionWindow,
    EEGTrial,
    SplitSpec,
    gather,
    held_out_values,
    index_windows,
    make_split,
    select_channels,
    split_by_range,
    stack_windows,
)
from .swcnn import N_LOCUS, SWCNN
from .swim import SWIM, cnn_windows
from .tensor import Tensor, get_default_dtype, linear, softmax
from .trainer import TrainConfig, accuracy, locus_logits, train

log = logging.getLogger(__name__)

# Reported accuracies (percent) the pipeline is compared against on real data.
REFERENCE_TARGETS = {
    ("leave-one-speaker-out", "SW_CNN"): 83.2,
    ("leave-one-speaker-out", "SW_CNN combined"): 84.9,
    ("leave-one-speaker-out", "SWIM@50s"): 86.2,
    ("leave-one-speaker-out", "SW_CNN@50s"): 84.4,
    ("every-trial", "SW_CNN"): 96.9,
    ("leave-one-subject-out", "SW_CNN"): 71.2,
}


def _as_model(model_or_ckpt):
    if isinstance(model_or_ckpt, Checkpoint):
        return model_from_checkpoint(model_or_ckpt)
    return model_or_ckpt


def _as_arrays(windows):
    if isinstance(windows, tuple):
        return windows[0], np.asarray(windows[1])
    windows = list(windows)
    if not windows:
        raise DataError("no windows to evaluate")
    x, y, _ = stack_windows(windows)
    return x, y


def _in_channels(model) -> int:
    return model.in_channels if isinstance(model, SWIM) else model.config.in_channels


def evaluate(model_or_ckpt, windows, batch: int = 256) -> float:
    """Locus accuracy over decision windows (list of DecisionWindow or an (x, labels) pair)."""
    model = _as_model(model_or_ckpt)
    x, y = _as_arrays(windows)
    if len(x) == 0:
        raise DataError("no windows to evaluate")
    if x.shape[1] != _in_channels(model):
        raise DataError(f"windows have {x.shape[1]} channels, model expects {_in_channels(model)}")
    return accuracy(locus_logits(model, x, batch), y)


def combine_models(logits_a, logits_b) -> np.ndarray:
    """Average of the two models' 2-way locus posteriors."""
    pa = softmax(np.asarray(logits_a, dtype=np.float64)[..., :N_LOCUS])
    pb = softmax(np.asarray(logits_b, dtype=np.float64)[..., :N_LOCUS])
    return 0.5 * pa + 0.5 * pb


def evaluate_combined(model_all, model_nine, x_all: np.ndarray, x_nine: np.ndarray, y: np.ndarray) -> float:
    post = combine_models(locus_logits(model_all, x_all), locus_logits(model_nine, x_nine))
    return accuracy(post, y)


# ---------------------------------------------------------------------------
# channel importance
# ---------------------------------------------------------------------------

def mask_channels(x: np.ndarray, channels: Sequence[int]) -> np.ndarray:
    out = x.copy()
    out[:, list(channels)] = 0
    return out


def channel_importance(model_or_ckpt, windows, channel_names: Sequence[str]) -> List[dict]:
    """Accuracy drop when each channel is zeroed in every window, plus min-max normalized drops."""
    model = _as_model(model_or_ckpt)
    x, y = _as_arrays(windows)
    base = evaluate(model, (x, y))
    deltas = []
    for c in range(x.shape[1]):
        deltas.append(base - evaluate(model, (mask_channels(x, [c]), y)))
    d = np.asarray(deltas)
    span = d.max() - d.min()
    norm = (d - d.min()) / span if span > 0 else np.zeros_like(d)
    return [{"channel_name": n, "delta_acc": float(a), "normalized": float(b)}
            for n, a, b in zip(channel_names, d, norm)]


# ---------------------------------------------------------------------------
# window-length sweep
# ---------------------------------------------------------------------------

def swim_logits_from_features(model: SWIM, feats: np.ndarray) -> np.ndarray:
    """Run the sequence half of SWIM on precomputed CNN features [..., N, hidden]."""
    dt = get_default_dtype()
    u = linear(Tensor(feats.astype(dt)), model.fc_in_w, model.fc_in_b)
    h = model.backbone.forward(u)
    return linear(h.mean(axis=-2), model.head_w, model.head_b).data


def _trial_features(model: SWIM, data: np.ndarray, chunk: int = 512) -> np.ndarray:
    cfg = model.config
    wins = cnn_windows(data, cfg.window_samples, cfg.hop_samples)
    out = []
    for i in range(0, len(wins), chunk):
        out.append(model.cnn.features(Tensor(wins[i:i + chunk].astype(get_default_dtype()))).data)
    return np.concatenate(out)


def sweep_endpoints(n_samples: int, longest: int, step: int) -> np.ndarray:
    """Decision end samples shared by every window length (so lengths are compared on the same decisions)."""
    if longest > n_samples:
        return np.zeros(0, np.int64)
    return np.arange(longest, n_samples + 1, step, dtype=np.int64)


def window_sweep(swim_model, swcnn_model, trials: Sequence[EEGTrial], lengths_s: Sequence[float],
                 eval_step_s: float = 1.0, batch: int = 16) -> Tuple[List[dict], List[str]]:
    """Accuracy of SWIM and SW_CNN when ``t`` seconds of EEG are available for each decision.

    For every decision point, SWIM runs over all CNN windows of the trailing
    t-second span and SW_CNN sees the same span as one long window. All
    lengths are scored on the same decision points. Returns (rows, notes);
    lengths longer than the shortest trial are skipped with a note.
    """
    swim_model = _as_model(swim_model)
    swcnn_model = _as_model(swcnn_model)
    cfg = swim_model.config
    fs = cfg.fs
    notes = []
    min_len = min(t.n_samples for t in trials)
    usable = []
    for t in lengths_s:
        n = int(round(t * fs))
        if n > min_len:
            notes.append(f"length {t}s skipped: exceeds shortest test trial ({min_len / fs:.2f}s)")
        elif n < cfg.window_samples:
            notes.append(f"length {t}s skipped: shorter than one CNN window")
        elif n % cfg.hop_samples:
            notes.append(f"length {t}s skipped: not a whole number of {cfg.hop_samples}-sample hops")
        else:
            usable.append((t, n))
    if not usable:
        return [], notes
    longest = max(n for _, n in usable)
    step = int(round(eval_step_s * fs))
    hop, win = cfg.hop_samples, cfg.window_samples
    if step < 1 or step % hop:
        raise DataError(f"eval step must be a positive multiple of {hop} samples")
    swim_correct = {t: 0 for t, _ in usable}
    cnn_correct = {t: 0 for t, _ in usable}
    total = 0
    for trial in trials:
        ends = sweep_endpoints(trial.n_samples, longest, step)
        if not len(ends):
            continue
        label = trial.locus_label
        feats = _trial_features(swim_model, trial.data)
        total += len(ends)
        for t, n in usable:
            # feature index k covers samples [k*hop, k*hop + win)
            first = (ends - n) // hop
            count = (n - win) // hop + 1
            for b0 in range(0, len(ends), batch):
                seq = np.stack([feats[f:f + count] for f in first[b0:b0 + batch]])
                logits = swim_logits_from_features(swim_model, seq)
                swim_correct[t] += int(np.sum(np.argmax(logits, -1) == label))
            spans = [DecisionWindow(trial.data[:, e - n:e] - trial.data[:, e - n:e].mean(-1, keepdims=True),
                                    label, trial.subject_id, (trial.subject_id, trial.trial_id, int(e - n)))
                     for e in ends]
            cnn_correct[t] += round(evaluate(swcnn_model, spans, batch=max(1, 4096 * 128 // n)) * len(spans))
    if total == 0:
        raise DataError("no test trial is long enough for the requested lengths")
    rows = []
    for t, _ in usable:
        rows.append({"length_s": t, "model": "SWIM", "accuracy": swim_correct[t] / total, "n": total})
        rows.append({"length_s": t, "model": "SW_CNN", "accuracy": cnn_correct[t] / total, "n": total})
    return rows, notes


# ---------------------------------------------------------------------------
# trial-train-range experiment
# ---------------------------------------------------------------------------

def trial_range_experiment(trials: Sequence[EEGTrial], ranges: Sequence[Tuple[float, float]],
                           config: TrainConfig, seeds: Optional[Sequence[int]] = None) -> List[dict]:
    """Train on the same-size slice of every trial at different offsets; test on the final 15%."""
    for lo, hi in ranges:
        if not 0 <= lo < hi <= 0.85 + 1e-12:
            raise DataError(f"train range ({lo}, {hi}) must lie within [0, 0.85] (test is the final 15%)")
    seeds = list(config.seeds if seeds is None else seeds)
    T = int(round(config.window_seconds * trials[0].fs))
    rows = []
    for lo, hi in ranges:
        split = split_by_range(trials, (lo, hi))
        test = gather(trials, index_windows(trials, split.test, T, 0.0))
        accs = []
        for seed in seeds:
            res = train("swcnn", trials, split, config, seed=seed)
            accs.append(evaluate(res.model, (test[0], test[1])))
        rows.append({"lo": lo, "hi": hi, "accuracy": float(np.mean(accs)),
                     "n_train_windows": len(index_windows(trials, split.train, T, config.alpha))})
    return rows


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    protocol: str
    model: str
    runs: List[dict] = field(default_factory=list)  # {held_out, seed, accuracy, n_windows}

    def add(self, held_out, seed, acc: float, n_windows: int) -> None:
        if not 0 <= acc <= 1:
            raise ValueError("accuracy must lie in [0, 1]")
        self.runs.append({"held_out": held_out, "seed": seed, "accuracy": acc, "n_windows": n_windows})

    def per_seed(self) -> np.ndarray:
        """Accuracy per seed, averaged over held-out runs (the protocol's reported value)."""
        seeds = sorted({r["seed"] for r in self.runs})
        return np.array([np.mean([r["accuracy"] for r in self.runs if r["seed"] == s]) for s in seeds])

    @property
    def mean(self) -> float:
        return float(self.per_seed().mean())

    @property
    def min(self) -> float:
        return float(self.per_seed().min())

    @property
    def max(self) -> float:
        return float(self.per_seed().max())

    def per_held_out(self) -> dict:
        keys = sorted({r["held_out"] for r in self.runs}, key=lambda k: (k is None, k))
        return {k: float(np.mean([r["accuracy"] for r in self.runs if r["held_out"] == k])) for k in keys}


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else ("" if v is None else str(v))


def write_csv(path, header: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def write_eval_report(reports: Sequence[EvalReport], path) -> None:
    rows = []
    for rep in reports:
        for r in rep.runs:
            rows.append({"protocol": rep.protocol, "model": rep.model, "held_out": r["held_out"], "seed": r["seed"],
                         "accuracy": r["accuracy"], "n_windows": r["n_windows"], "summary": ""})
        rows.append({"protocol": rep.protocol, "model": rep.model, "held_out": None, "seed": None,
                     "accuracy": rep.mean, "n_windows": None, "summary": f"mean (min {rep.min:.4f}, max {rep.max:.4f})"})
    write_csv(path, ["protocol", "model", "held_out", "seed", "accuracy", "n_windows", "summary"], rows)


def heldout_windows(trials: Sequence[EEGTrial], split: SplitSpec, T: int):
    x, y, _ = gather(trials, index_windows(trials, split.test, T, 0.0))
    return x, y


# ---------------------------------------------------------------------------
# end-to-end protocol runs
# ---------------------------------------------------------------------------

@dataclass
class ReproductionConfig:
    swcnn: TrainConfig = field(default_factory=TrainConfig)
    swim: TrainConfig = field(default_factory=TrainConfig.swim_defaults)
    protocols: Tuple[str, ...] = ("leave-one-speaker-out", "every-trial", "leave-one-subject-out")
    sweep_lengths_s: Tuple[float, ...] = (1, 2, 5, 10, 20, 30, 40, 50)
    split_seed: int = 0
    with_swim: bool = True


def run_protocol(trials: Sequence[EEGTrial], protocol: str, rc: ReproductionConfig, out_dir=None):
    """Train/evaluate SW_CNN (all and nine channels, combined) and optionally SWIM for one protocol."""
    from .checkpoint import save_checkpoint
    from .trainer import write_history

    T = int(round(rc.swcnn.window_seconds * trials[0].fs))
    nine = [select_channels(t, NINE_CHANNELS) for t in trials]
    reports = {k: EvalReport(protocol, k) for k in ("SW_CNN", "SW_CNN nine-channel", "SW_CNN combined")}
    sweeps = []
    use_swim = rc.with_swim and protocol == "leave-one-speaker-out"
    if use_swim:
        reports["SWIM"] = EvalReport(protocol, "SWIM")
    for held in held_out_values(trials, protocol):
        split = make_split(trials, protocol, held, rc.split_seed)
        x, y = heldout_windows(trials, split, T)
        x9, _ = heldout_windows(nine, split, T)
        for seed in rc.swcnn.seeds:
            r_all = train("swcnn", trials, split, rc.swcnn, seed=seed)
            r_nine = train("swcnn", nine, split, rc.swcnn, seed=seed)
            reports["SW_CNN"].add(held, seed, evaluate(r_all.model, (x, y)), len(y))
            reports["SW_CNN nine-channel"].add(held, seed, evaluate(r_nine.model, (x9, y)), len(y))
            reports["SW_CNN combined"].add(held, seed, evaluate_combined(r_all.model, r_nine.model, x, x9, y), len(y))
            if out_dir is not None:
                tag = f"{protocol}_{held}_seed{seed}"
                save_checkpoint(r_all.checkpoint, Path(out_dir) / f"swcnn_all_{tag}.ckpt")
                save_checkpoint(r_nine.checkpoint, Path(out_dir) / f"swcnn_nine_{tag}.ckpt")
                write_history(r_all.history, Path(out_dir) / f"history_swcnn_all_{tag}.csv")
            if use_swim:
                r_swim = train("swim", trials, split, rc.swim, seed=seed, init_cnn=r_all.model)
                test_trials = [trials[i] for i, _, _ in split.test]
                rows, notes = window_sweep(r_swim.model, r_all.model, test_trials, rc.sweep_lengths_s)
                for n in notes:
                    log.warning(n)
                for r in rows:
                    sweeps.append(dict(r, held_out=held, seed=seed))
                if rows:
                    best = max(r["length_s"] for r in rows)
                    acc = next(r["accuracy"] for r in rows if r["model"] == "SWIM" and r["length_s"] == best)
                    reports["SWIM"].add(held, seed, acc, rows[0]["n"])
                if out_dir is not None:
                    save_checkpoint(r_swim.checkpoint, Path(out_dir) / f"swim_{tag}.ckpt")
    return list(reports.values()), sweeps


def summarize_sweeps(sweeps: Sequence[dict]) -> List[dict]:
    keys = sorted({(r["length_s"], r["model"]) for r in sweeps})
    return [{"length_s": L, "model": m,
             "accuracy": float(np.mean([r["accuracy"] for r in sweeps if r["length_s"] == L and r["model"] == m]))}
            for L, m in keys]


def summary_table_rows(reports: Sequence[EvalReport], sweep_summary: Sequence[dict]) -> List[dict]:
    rows = []
    for rep in reports:
        if not rep.runs:
            continue
        name = rep.model
        if name == "SWIM":
            best = max(r["length_s"] for r in sweep_summary)
            name = f"SWIM@{best:g}s"
        rows.append({"protocol": rep.protocol, "model": name, "accuracy_pct": 100 * rep.mean,
                     "reference_pct": REFERENCE_TARGETS.get((rep.protocol, name))})
    for r in sweep_summary:
        if r["model"] == "SW_CNN" and r["length_s"] == max(s["length_s"] for s in sweep_summary):
            name = f"SW_CNN@{r['length_s']:g}s"
            rows.append({"protocol": "leave-one-speaker-out", "model": name, "accuracy_pct": 100 * r["accuracy"],
                         "reference_pct": REFERENCE_TARGETS.get(("leave-one-speaker-out", name))})
    return rows


def reproduce(trials: Sequence[EEGTrial], rc: ReproductionConfig, out_dir) -> dict:
    """Run every protocol and write summary_table.csv, window_sweep.csv and eval_report.csv under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    all_reports, sweeps = [], []
    for protocol in rc.protocols:
        reps, sw = run_protocol(trials, protocol, rc, out_dir)
        all_reports.extend(reps)
        sweeps.extend(sw)
    summary = summarize_sweeps(sweeps)
    table = summary_table_rows(all_reports, summary)
    write_csv(out_dir / "summary_table.csv", ["protocol", "model", "accuracy_pct", "reference_pct"], table)
    write_csv(out_dir / "window_sweep.csv", ["length_s", "model", "accuracy"], summary)
    write_eval_report(all_reports, out_dir / "eval_report.csv")
    return {"reports": all_reports, "summary_table": table, "window_sweep": summary}
