"""Acceptance criteria, one test each; every test records a PASS/FAIL line at the stated tolerance."""

import csv
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from swim_asad.dataio import (
    FS,
    SynthConfig,
    extract_windows,
    make_split,
    normalize_trial,
    split_by_range,
    synth_generate,
    window_count,
    window_starts,
)
from swim_asad.evalkit import channel_importance, combine_models, evaluate, heldout_windows, window_sweep
from swim_asad.selftest import (
    mamba_grad_error,
    scan_equivalence_error,
    stream_memory_growth,
    streaming_error,
    swcnn_grad_error,
    swim_grad_error,
)
from swim_asad.swcnn import SWCNN, SWCNNConfig, multitask_loss
from swim_asad.swim import SWIM, SWIMConfig, cnn_windows, sequence_length
from swim_asad.tensor import Tensor, softmax, softmax_cross_entropy
from swim_asad.trainer import TrainConfig, train


def _cli(args, env):
    return subprocess.run([sys.executable, "-m", "swim_asad", *args], env=env, capture_output=True, text=True)


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.suffix in (".ckpt", ".csv", ".json")}


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    """The full three-protocol pipeline run twice in fresh processes under SWIM_DETERMINISTIC=1.

    The two runs use different string hash seeds, which once changed float rounding.
    """
    env = dict(os.environ, SWIM_DETERMINISTIC="1")
    data = tmp_path_factory.mktemp("manifest")
    res = _cli(["synth", "--out", str(data), "--n-subjects", "2", "--n-trials", "8", "--duration-s", "60",
                "--snr-db", "10", "--seed", "0"], env)
    assert res.returncode == 0, res.stderr
    runs = []
    for k, hash_seed in enumerate(("1", "14")):
        out = tmp_path_factory.mktemp(f"run{k}")
        res = _cli(["train", "--protocol", "all", "--data", str(data / "manifest.json"), "--out", str(out),
                    "--seeds", "0", "--max-epochs", "1", "--swim-max-epochs", "1", "--batch-size", "32",
                    "--lengths", "1,2,5"], dict(env, PYTHONHASHSEED=hash_seed))
        assert res.returncode == 0, res.stderr
        runs.append(out)
    return runs


def test_criterion_01_pipeline_emits_summary_tables(pipeline_runs, acceptance):
    out = pipeline_runs[0]
    with open(out / "summary_table.csv") as fh:
        table = list(csv.DictReader(fh))
    with open(out / "window_sweep.csv") as fh:
        sweep = list(csv.DictReader(fh))
    protocols = {r["protocol"] for r in table}
    lengths = {float(r["length_s"]) for r in sweep}
    ok = (protocols == {"every-trial", "leave-one-speaker-out", "leave-one-subject-out"}
          and list(table[0]) == ["protocol", "model", "accuracy_pct", "reference_pct"]
          and list(sweep[0]) == ["length_s", "model", "accuracy"]
          and lengths == {1.0, 2.0, 5.0} and {r["model"] for r in sweep} == {"SWIM", "SW_CNN"}
          and any(r["reference_pct"] for r in table))
    acceptance(1, "pipeline runs all protocols and emits summary_table.csv + window_sweep.csv", ok,
               f"{len(table)} table rows over {sorted(protocols)}, sweep lengths {sorted(lengths)}; "
               "reference accuracies are documented, not gated")
    assert ok


def test_criterion_02_gradient_oracles(acceptance):
    t0 = time.perf_counter()
    layers = {
        "swcnn": swcnn_grad_error(0),
        "mamba/parallel": mamba_grad_error(0, "parallel"),
        "mamba/sequential": mamba_grad_error(0, "sequential"),
        "mamba/zoh": mamba_grad_error(0, "parallel", exact_zoh=True),
    }
    e2e = swim_grad_error(0)
    seconds = time.perf_counter() - t0
    ok = max(layers.values()) < 1e-5 and e2e < 1e-4 and seconds < 120
    acceptance(2, "analytic vs central-difference gradients (float64)", ok,
               f"layers max rel {max(layers.values()):.2e} < 1e-5, end-to-end {e2e:.2e} < 1e-4, "
               f"{seconds:.1f}s < 120s")
    assert ok


def test_criterion_03_scan_equivalence(acceptance):
    t0 = time.perf_counter()
    err = scan_equivalence_error(100, 1024, 128, 16, seed=0, dtype=np.float64)
    seconds = time.perf_counter() - t0
    err32 = scan_equivalence_error(100, 1024, 128, 16, seed=0, dtype=np.float32)
    ok = err < 1e-5 and seconds < 60
    acceptance(3, "parallel vs sequential selective scan, 100 configs up to N=1024 D=128 S=16", ok,
               f"max abs diff {err:.2e} < 1e-5 (float64), {seconds:.1f}s < 60s; float32 for reference {err32:.2e}")
    assert ok


def test_criterion_04_streaming_equivalence(acceptance):
    rng = np.random.default_rng(0)
    (trial,), _ = synth_generate(SynthConfig(n_subjects=1, n_trials=1, duration_s=50.0), seed=0)
    model = SWIM(SWIMConfig(), SWCNN(SWCNNConfig(), rng), rng)
    normed = trial.data / trial.data.std(axis=1, keepdims=True)
    model.cnn.forward(cnn_windows(normed[:, :640]).astype(np.float32), training=True)
    err = streaming_error(model, trial.data)
    growth = stream_memory_growth(model, 100_000)
    ok = err < 1e-3 and growth == 0
    acceptance(4, "stream_push vs batch posteriors on a 50 s trial, state size over 1e5 pushes", ok,
               f"max posterior diff {err:.2e} < 1e-3 at all {sequence_length(50 * FS)} steps, "
               f"state growth {growth:.0f} bytes")
    assert ok


def test_criterion_05_window_counts(acceptance):
    L = np.arange(1001)
    bad = 0
    checked = 0
    for T in range(1, 65):
        for alpha in np.round(np.arange(0, 0.95, 0.05), 2):
            # enumerate starts one by one, then count windows ending at or before every L
            hop = max(1, int(np.floor((1 - alpha) * T + 0.5)))
            starts = []
            s = 0
            while s + T <= 1000:
                starts.append(s)
                s += hop
            ends = np.array(starts, dtype=np.int64) + T
            enumerated = np.searchsorted(ends, L, side="right")
            closed = np.array([window_count(int(n), T, float(alpha)) for n in L])
            bad += int(np.sum(enumerated != closed))
            checked += L.size
            bad += int(len(window_starts(T, float(alpha), 0, 1000)) != len(starts))
    n33, n393 = sequence_length(5 * FS), sequence_length(50 * FS)
    (trial,), _ = synth_generate(SynthConfig(n_subjects=1, n_trials=1, duration_s=10.0), seed=0)
    real = len(extract_windows(trial, 128, 0.75)) == window_count(trial.n_samples, 128, 0.75)
    ok = bad == 0 and n33 == 33 and n393 == 393 and real
    acceptance(5, "window counts vs enumeration (L<=1000, T<=64, alpha 0..0.9) and SWIM lengths", ok,
               f"{bad} mismatches in {checked} cases; N(5 s)={n33}, N(50 s)={n393}")
    assert ok


def test_criterion_06a_swcnn_learns(acceptance):
    trials = [normalize_trial(t) for t in
              synth_generate(SynthConfig(n_subjects=2, n_trials=4, duration_s=90.0, snr_db=10.0), seed=0)[0]]
    split = make_split(trials, "every-trial")
    res = train("swcnn", trials, split, TrainConfig(max_epochs=20), seed=0)
    n_train = sum(window_count(hi - lo, 128, 0.75) for _, lo, hi in split.train)
    ok = res.best_val_acc >= 0.95 and len(res.history) <= 20
    acceptance("6a", "SW_CNN validation accuracy on high-SNR synthetic data within 20 epochs", ok,
               f"best val {res.best_val_acc:.3f} >= 0.95 at epoch {res.best_epoch + 1} ({n_train} train windows)")
    assert ok


def test_criterion_06b_swim_longer_windows_do_not_hurt(acceptance):
    cfg = SynthConfig(n_subjects=4, n_trials=8, duration_s=100.0, snr_db=-5.0, burst_on_fraction=0.5)
    trials = [normalize_trial(t) for t in synth_generate(cfg, seed=0)[0]]
    split = make_split(trials, "leave-one-speaker-out", 2)
    cnn = train("swcnn", trials, split, TrainConfig(max_epochs=6, patience=3), seed=0).model
    swim = train("swim", trials, split, TrainConfig.swim_defaults(max_epochs=2), seed=0, init_cnn=cnn).model
    rows, _ = window_sweep(swim, cnn, [trials[i] for i, _, _ in split.test], [1, 50], eval_step_s=5.0)
    acc = {r["length_s"]: r["accuracy"] for r in rows if r["model"] == "SWIM"}
    ok = acc[50] >= acc[1] - 0.02
    acceptance("6b", "SWIM at 50 s vs 1 s on bursty low-SNR synthetic data", ok,
               f"t=50 s {acc[50]:.3f} >= t=1 s {acc[1]:.3f} - 0.02 ({rows[0]['n']} decisions each)")
    assert ok


def test_criterion_07_ablation(acceptance):
    trials = [normalize_trial(t) for t in
              synth_generate(SynthConfig(n_subjects=4, n_trials=4, duration_s=160.0, snr_db=10.0), seed=0)[0]]
    split = split_by_range(trials, (0.0, 0.5), (0.5, 0.6), (0.6, 1.0))
    model = train("swcnn", trials, split, TrainConfig(max_epochs=5, patience=3), seed=0).model
    x, y = heldout_windows(trials, split, 128)
    base = evaluate(model, (x, y))
    rows = {r["channel_name"]: r["delta_acc"] for r in channel_importance(model, (x, y), trials[0].channel_names)}
    informative = {c: base - rows[c] for c in ("Fp1", "Fp2")}
    noise = max(abs(v) for c, v in rows.items() if c not in informative)
    ok = len(y) >= 1000 and all(abs(a - 0.5) <= 0.05 for a in informative.values()) and noise < 0.01
    acceptance(7, "masking informative vs pure-noise channels", ok,
               f"{len(y)} test windows, base {base:.3f}; masked Fp1 {informative['Fp1']:.3f}, "
               f"Fp2 {informative['Fp2']:.3f} (0.5 +- 0.05); largest noise-channel change {noise:.4f} < 0.01")
    assert ok


def test_criterion_08_loss_identity(acceptance):
    uniform = multitask_loss(Tensor(np.zeros((4, 18))), np.array([0, 1, 0, 1]), np.arange(4) * 3, 0.05).item()
    target = np.log(2) + 0.05 * np.log(16)
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(6, 18)))
    locus, subject = rng.integers(0, 2, 6), rng.integers(0, 16, 6)
    plain = multitask_loss(logits, locus, subject, 0.0).item()
    ref = softmax_cross_entropy(Tensor(logits.data[:, :2]), locus).item()
    ok = abs(uniform - target) < 1e-6 and plain == ref
    acceptance(8, "multitask loss identities", ok,
               f"|uniform - (ln2 + 0.05 ln16)| = {abs(uniform - target):.1e} < 1e-6; gamma=0 equals locus CE exactly: "
               f"{plain == ref}")
    assert ok


def test_criterion_09_combination_identity(acceptance):
    rng = np.random.default_rng(0)
    a = rng.normal(scale=5, size=(32, 18))
    self_err = float(np.max(np.abs(combine_models(a, a) - softmax(a[:, :2]))))
    sat = combine_models(np.array([[1e4, -1e4]]), np.array([[-1e4, 1e4]]))
    sat_err = float(np.max(np.abs(sat - 0.5)))
    ok = self_err < 1e-6 and sat_err < 1e-6
    acceptance(9, "posterior-averaging identities", ok,
               f"combine(a, a) vs softmax {self_err:.1e}; opposing saturated {sat_err:.1e} (both < 1e-6)")
    assert ok


def test_criterion_10_determinism(pipeline_runs, acceptance):
    a, b = (_files(r) for r in pipeline_runs)
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    n_ckpt = sum(k.endswith(".ckpt") for k in a)
    ok = not differing and n_ckpt > 0
    acceptance(10, "SWIM_DETERMINISTIC=1 reruns are byte-identical", ok,
               f"{len(a)} files ({n_ckpt} checkpoints) compared, {len(differing)} differ"
               + (f": {differing[:3]}" if differing else ""))
    assert ok
