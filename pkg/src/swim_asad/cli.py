"""Command-line entry point.

Precedence for every setting: command-line flag > ``--config`` JSON file >
built-in default. Each command writes its artifacts plus ``config.json``
(the fully resolved settings) under ``--out``.

Exit codes: 0 success, 1 usage, 2 data error, 3 invariant or training failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, model_from_checkpoint, save_checkpoint
from .dataio import (
    BIOSEMI64,
    NINE_CHANNELS,
    DataError,
    SplitSpec,
    SynthConfig,
    gather,
    held_out_values,
    index_windows,
    load_dataset,
    make_split,
    normalize_trial,
    read_trial_file,
    save_dataset,
    select_channels,
    synth_generate,
)
from .evalkit import (
    EvalReport,
    ReproductionConfig,
    channel_importance,
    evaluate,
    evaluate_combined,
    reproduce,
    trial_range_experiment,
    window_sweep,
    write_csv,
    write_eval_report,
)
from .swim import stream_init, stream_push
from .tensor import ShapeError, set_default_dtype
from .trainer import TrainConfig, TrainingError, train, write_history

log = logging.getLogger("swim_asad")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a run depends on; serialized verbatim as ``config.json``."""

    model: str = "swcnn"
    protocol: str = "leave-one-speaker-out"
    held_out: Optional[list] = None  # None = every held-out value of the protocol
    channels: str = "all"  # "all" | "nine"
    data: Optional[str] = None
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    split_seed: int = 0
    alpha: float = 0.75
    beta: float = 1.0
    gamma: float = 0.05
    batch_size: int = 64
    lr: float = 1e-3
    max_epochs: int = 100
    weight_decay: float = 1e-3
    patience: int = 10
    window_seconds: float = 1.0
    swim_batch_size: int = 32
    swim_lr: float = 1e-3
    swim_cnn_lr: float = 1e-5
    swim_max_epochs: int = 5
    swim_weight_decay: float = 0.0
    swim_patience: int = 5
    init_cnn: Optional[str] = None
    sweep_lengths_s: List[float] = field(default_factory=lambda: [1, 2, 5, 10, 20, 30, 40, 50])
    trial_ranges: List[List[float]] = field(
        default_factory=lambda: [[round(0.1 * i, 1), round(0.1 * i + 0.1, 1)] for i in range(7)])
    dtype: str = "float32"
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in ("swcnn", "swim"):
            raise UsageError(f"model must be swcnn or swim, not {self.model!r}")
        if self.channels not in ("all", "nine"):
            raise UsageError(f"channels must be all or nine, not {self.channels!r}")
        if self.dtype not in ("float32", "float64"):
            raise UsageError(f"dtype must be float32 or float64, not {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**d)

    def swcnn_train(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, lr=self.lr, max_epochs=self.max_epochs,
                           weight_decay=self.weight_decay, patience=self.patience, seeds=tuple(self.seeds),
                           gamma=self.gamma, alpha=self.alpha, beta=self.beta, window_seconds=self.window_seconds)

    def swim_train(self) -> TrainConfig:
        return TrainConfig(batch_size=self.swim_batch_size, lr=self.swim_lr, cnn_lr=self.swim_cnn_lr,
                           max_epochs=self.swim_max_epochs, weight_decay=self.swim_weight_decay,
                           patience=self.swim_patience, seeds=tuple(self.seeds), gamma=self.gamma,
                           alpha=self.alpha, beta=self.beta, window_seconds=self.window_seconds)


# flag name -> RunConfig field; flags left unset do not override the config file
_OVERRIDES = {
    "model": "model", "protocol": "protocol", "held_out": "held_out", "channels": "channels", "data": "data",
    "seeds": "seeds", "split_seed": "split_seed", "alpha": "alpha", "beta": "beta", "gamma": "gamma",
    "batch_size": "batch_size", "lr": "lr", "max_epochs": "max_epochs", "weight_decay": "weight_decay",
    "patience": "patience", "swim_max_epochs": "swim_max_epochs", "init_cnn": "init_cnn",
    "lengths": "sweep_lengths_s", "dtype": "dtype",
}


def resolve_config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            base = json.loads(path.read_text())
        except ValueError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(base, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    for flag, key in _OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is not None:
            base[key] = val
    return RunConfig.from_dict(base)


def write_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True) + "\n")


def _load_trials(cfg: RunConfig, nine: Optional[bool] = None):
    if not cfg.data:
        raise UsageError("--data (or config field data) is required")
    trials = [normalize_trial(t) for t in load_dataset(cfg.data)]
    if not trials:
        raise DataError(f"{cfg.data}: manifest lists no trials")
    if cfg.channels == "nine" if nine is None else nine:
        trials = [select_channels(t, NINE_CHANNELS) for t in trials]
    return trials


def _held_out(cfg: RunConfig, trials) -> list:
    values = held_out_values(trials, cfg.protocol)
    if cfg.held_out is None:
        return values
    bad = [h for h in cfg.held_out if h not in values]
    if bad:
        raise DataError(f"held-out value(s) {bad} not valid for {cfg.protocol}")
    return list(cfg.held_out)


def _split(cfg: RunConfig, trials, args) -> SplitSpec:
    if getattr(args, "split", None):
        path = Path(args.split)
        if not path.exists():
            raise DataError(f"split file not found: {path}")
        return SplitSpec.from_dict(json.loads(path.read_text()))
    held = _held_out(cfg, trials)
    return make_split(trials, cfg.protocol, held[0], cfg.split_seed)


def _test_arrays(trials, split: SplitSpec, cfg: RunConfig):
    T = int(round(cfg.window_seconds * trials[0].fs))
    x, y, _ = gather(trials, index_windows(trials, split.test, T, 0.0))
    if len(y) == 0:
        raise DataError("test partition yields no windows")
    return x, y


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig, out: Path) -> int:
    synth = dict(cfg.synth)
    for key in ("n_subjects", "n_trials", "duration_s", "snr_db"):
        val = getattr(args, key)
        if val is not None:
            synth[key] = val
    try:
        sc = SynthConfig.from_dict(synth)
    except TypeError as exc:
        raise UsageError(f"bad synth settings: {exc}") from None
    trials, truth = synth_generate(sc, args.seed)
    path = save_dataset(trials, out, truth)
    print(path)
    return EXIT_OK


def cmd_split(args, cfg: RunConfig, out: Path) -> int:
    trials = load_dataset(cfg.data) if cfg.data else None
    if trials is None:
        raise UsageError("--data is required")
    for held in _held_out(cfg, trials):
        split = make_split(trials, cfg.protocol, held, cfg.split_seed)
        name = f"split_{cfg.protocol}_{held}.json" if held is not None else f"split_{cfg.protocol}.json"
        (out / name).write_text(json.dumps(split.to_dict(), sort_keys=True) + "\n")
        print(out / name)
    return EXIT_OK


def _train_job(job):
    """One (held-out, seed) training run; module-level so it can run in a worker process."""
    cfg, held, seed, out, threads = job
    set_default_dtype(cfg.dtype)
    with _thread_limit(threads):
        trials = _load_trials(cfg)
        split = make_split(trials, cfg.protocol, held, cfg.split_seed)
        init = None
        if cfg.model == "swim":
            if cfg.init_cnn:
                init = model_from_checkpoint(load_checkpoint(cfg.init_cnn))
            else:
                init = train("swcnn", trials, split, cfg.swcnn_train(), seed=seed).model
            res = train("swim", trials, split, cfg.swim_train(), seed=seed, init_cnn=init)
            span = res.model.config.total_samples
        else:
            res = train("swcnn", trials, split, cfg.swcnn_train(), seed=seed)
            span = int(round(cfg.window_seconds * trials[0].fs))
        tag = f"{cfg.model}_{cfg.protocol}_{held}_seed{seed}"
        save_checkpoint(res.checkpoint, Path(out) / f"{tag}.ckpt")
        write_history(res.history, Path(out) / f"history_{tag}.csv")
        x, y, _ = gather(trials, index_windows(trials, split.test, span, 0.0), demean=cfg.model == "swcnn")
        acc = evaluate(res.model, (x, y)) if len(y) else float("nan")
        return held, seed, acc, len(y)


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    if cfg.protocol == "all":
        return _reproduce(cfg, out)
    trials = _load_trials(cfg)
    jobs = [(cfg, held, seed, str(out), 1 if args.jobs > 1 else None)
            for held in _held_out(cfg, trials) for seed in cfg.seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_train_job, jobs))
    else:
        results = [_train_job(j) for j in jobs]
    report = EvalReport(cfg.protocol, cfg.model if cfg.channels == "all" else f"{cfg.model} nine-channel")
    for held, seed, acc, n in results:
        report.add(held, seed, acc, n)
    write_eval_report([report], out / "eval_report.csv")
    print(f"{cfg.protocol} {report.model}: mean accuracy {report.mean:.4f}")
    return EXIT_OK


def _reproduce(cfg: RunConfig, out: Path) -> int:
    trials = _load_trials(cfg)
    rc = ReproductionConfig(swcnn=cfg.swcnn_train(), swim=cfg.swim_train(),
                            sweep_lengths_s=tuple(cfg.sweep_lengths_s), split_seed=cfg.split_seed)
    res = reproduce(trials, rc, out)
    for row in res["summary_table"]:
        target = "" if row["reference_pct"] is None else f" (reference {row['reference_pct']})"
        print(f"{row['protocol']:>22} {row['model']:<22} {row['accuracy_pct']:6.2f}%{target}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    trials = _load_trials(cfg, nine=model_channels(ckpt) == len(NINE_CHANNELS))
    split = _split(cfg, trials, args)
    if ckpt.kind == "swim":
        span = model.config.total_samples
        x, y, _ = gather(trials, index_windows(trials, split.test, span, 0.0), demean=False)
    else:
        x, y = _test_arrays(trials, split, cfg)
    report = EvalReport(split.protocol, ckpt.kind)
    report.add(split.held_out, ckpt.metadata.get("seed"), evaluate(model, (x, y)), len(y))
    write_eval_report([report], out / "eval_report.csv")
    print(f"accuracy {report.mean:.4f} on {len(y)} windows")
    return EXIT_OK


def model_channels(ckpt: Checkpoint) -> int:
    return int(ckpt.config["swcnn"]["in_channels"])


def cmd_combine(args, cfg: RunConfig, out: Path) -> int:
    m_all = model_from_checkpoint(load_checkpoint(args.checkpoint_all))
    m_nine = model_from_checkpoint(load_checkpoint(args.checkpoint_nine))
    trials = _load_trials(cfg, nine=False)
    nine = [select_channels(t, NINE_CHANNELS) for t in trials]
    split = _split(cfg, trials, args)
    x, y = _test_arrays(trials, split, cfg)
    x9, _ = _test_arrays(nine, split, cfg)
    rows = []
    for name, acc in (("all", evaluate(m_all, (x, y))), ("nine", evaluate(m_nine, (x9, y))),
                      ("combined", evaluate_combined(m_all, m_nine, x, x9, y))):
        rows.append({"model": name, "accuracy": acc, "n_windows": len(y)})
        print(f"{name:>9}: {acc:.4f}")
    write_csv(out / "combine.csv", ["model", "accuracy", "n_windows"], rows)
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig, out: Path) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.kind != "swcnn":
        raise DataError("channel ablation expects an SW_CNN checkpoint")
    trials = _load_trials(cfg, nine=model_channels(ckpt) == len(NINE_CHANNELS))
    split = _split(cfg, trials, args)
    rows = channel_importance(ckpt, _test_arrays(trials, split, cfg), trials[0].channel_names)
    write_csv(out / "channel_importance.csv", ["channel_name", "delta_acc", "normalized"], rows)
    top = sorted(rows, key=lambda r: -r["delta_acc"])[:5]
    print("most important:", ", ".join(f"{r['channel_name']} ({r['delta_acc']:+.3f})" for r in top))
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig, out: Path) -> int:
    swim_ckpt = load_checkpoint(args.swim_checkpoint)
    cnn_ckpt = load_checkpoint(args.cnn_checkpoint)
    if swim_ckpt.kind != "swim" or cnn_ckpt.kind != "swcnn":
        raise DataError("sweep-window needs --swim-checkpoint of kind swim and --cnn-checkpoint of kind swcnn")
    trials = _load_trials(cfg, nine=False)
    split = _split(cfg, trials, args)
    test_trials = [trials[i] for i, _, _ in split.test]
    rows, notes = window_sweep(swim_ckpt, cnn_ckpt, test_trials, cfg.sweep_lengths_s)
    for n in notes:
        print("note:", n, file=sys.stderr)
    write_csv(out / "window_sweep.csv", ["length_s", "model", "accuracy"], rows)
    for r in rows:
        print(f"{r['length_s']:>6g}s {r['model']:<7} {r['accuracy']:.4f}")
    return EXIT_OK


def cmd_trial_range(args, cfg: RunConfig, out: Path) -> int:
    trials = _load_trials(cfg)
    rows = trial_range_experiment(trials, [tuple(r) for r in cfg.trial_ranges], cfg.swcnn_train())
    write_csv(out / "trial_range.csv", ["lo", "hi", "accuracy"], rows)
    for r in rows:
        print(f"{r['lo']:.2f}-{r['hi']:.2f}: {r['accuracy']:.4f}")
    return EXIT_OK


def cmd_stream_replay(args, cfg: RunConfig, out: Path) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.kind != "swim":
        raise DataError(f"stream-replay needs a SWIM checkpoint, got kind {ckpt.kind!r}")
    path = Path(args.trial)
    if not path.exists():
        raise DataError(f"trial file not found: {path}")
    n_ch = model_channels(ckpt)
    eeg = read_trial_file(path, n_ch)
    stds = eeg.astype(np.float64).std(axis=1)
    if not np.all(stds > 0):
        raise DataError(f"{path}: zero-variance channel(s)")
    state = stream_init(ckpt, stds)
    cfg_swim = state.model.config
    hop, fs = cfg_swim.hop_samples, cfg_swim.fs
    out_path = out / (args.output or "decisions.csv")
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step_index", "time_s", "posterior_left", "posterior_right", "decision"])
        for i in range(eeg.shape[1] // hop):
            d = stream_push(state, eeg[:, i * hop:(i + 1) * hop])
            post = ("", "") if d.posterior is None else (repr(float(d.posterior[0])), repr(float(d.posterior[1])))
            w.writerow([d.step, repr((i + 1) * hop / fs), *post, d.label])
    print(out_path)
    return EXIT_OK


def cmd_selftest(args, cfg: RunConfig, out: Path) -> int:
    from .selftest import run_selftest

    results = run_selftest(quick=not args.full)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("selftest failed: " + "; ".join(failed), file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__} values, got {text!r}")
    return parse


def _held(text):
    return [int(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="swim-asad", description="Short-window CNN + selective SSM auditory attention decoding.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    protocols = ("every-trial", "leave-one-speaker-out", "leave-one-subject-out")

    def common(sp, data=True, extra_protocols=()):
        sp.add_argument("--config", help="JSON run config; flags override its fields")
        sp.add_argument("--out", default="run", help="run directory (created)")
        if data:
            sp.add_argument("--data", help="dataset manifest.json")
            sp.add_argument("--protocol", choices=protocols + extra_protocols)
            sp.add_argument("--held-out", type=_held, help="held-out speaker(s)/subject(s), comma separated")
            sp.add_argument("--split", help="split JSON written by the split command")
            sp.add_argument("--split-seed", type=int)
        sp.add_argument("--dtype", choices=("float32", "float64"))

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-subjects", dest="n_subjects", type=int)
    sp.add_argument("--n-trials", dest="n_trials", type=int)
    sp.add_argument("--duration-s", dest="duration_s", type=float)
    sp.add_argument("--snr-db", dest="snr_db", type=float)

    sp = sub.add_parser("split", help="write train/val/test split files")
    common(sp)

    sp = sub.add_parser("train", help="train SW_CNN or SWIM for every held-out value and seed")
    # --protocol all runs every protocol and writes the summary tables
    common(sp, extra_protocols=("all",))
    sp.add_argument("--model", choices=("swcnn", "swim"))
    sp.add_argument("--channels", choices=("all", "nine"))
    sp.add_argument("--seeds", type=_csv_list(int))
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--max-epochs", type=int)
    sp.add_argument("--weight-decay", type=float)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--swim-max-epochs", type=int)
    sp.add_argument("--init-cnn", help="SW_CNN checkpoint to initialize SWIM's CNN")
    sp.add_argument("--lengths", type=_csv_list(float), help="window-sweep lengths in seconds (--protocol all)")
    sp.add_argument("--jobs", type=int, default=1, help="parallel seed runs")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a split's test partition")
    common(sp)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("combine", help="average all-channel and nine-channel SW_CNN posteriors")
    common(sp)
    sp.add_argument("--checkpoint-all", required=True)
    sp.add_argument("--checkpoint-nine", required=True)

    sp = sub.add_parser("ablate-channels", help="per-channel importance by zeroing")
    common(sp)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("sweep-window", help="accuracy vs available EEG length")
    common(sp)
    sp.add_argument("--swim-checkpoint", required=True)
    sp.add_argument("--cnn-checkpoint", required=True)
    sp.add_argument("--lengths", type=_csv_list(float))

    sp = sub.add_parser("trial-range", help="train on different slices of each trial")
    common(sp)
    sp.add_argument("--seeds", type=_csv_list(int))
    sp.add_argument("--max-epochs", type=int)

    sp = sub.add_parser("stream-replay", help="replay a raw trial file through the streaming decoder")
    common(sp, data=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--trial", required=True, help="raw little-endian float32 trial file [C, L]")
    sp.add_argument("--output", help="CSV file name inside --out (default decisions.csv)")

    sp = sub.add_parser("selftest", help="run the gradient, scan and streaming oracles")
    common(sp, data=False)
    sp.add_argument("--full", action="store_true", help="full-size oracles (slower)")
    return p


COMMANDS = {
    "synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval, "combine": cmd_combine,
    "ablate-channels": cmd_ablate, "sweep-window": cmd_sweep, "trial-range": cmd_trial_range,
    "stream-replay": cmd_stream_replay, "selftest": cmd_selftest,
}


@contextlib.contextmanager
def _thread_limit(n: Optional[int]):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def deterministic() -> bool:
    return os.environ.get("SWIM_DETERMINISTIC", "") == "1"


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with EXIT_USAGE on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if deterministic() and getattr(args, "jobs", 1) > 1:
        log.warning("SWIM_DETERMINISTIC=1: ignoring --jobs %d", args.jobs)
        args.jobs = 1
    try:
        cfg = resolve_config(args)
        set_default_dtype(cfg.dtype)
        out = Path(args.out)
        write_config(cfg, out)
        with _thread_limit(1 if deterministic() else None):
            return COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
