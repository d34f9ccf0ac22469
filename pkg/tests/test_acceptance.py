"""End-to-end acceptance criteria, each printed as one PASS/FAIL line.

Tolerances are fixed in advance. Criterion 6 trains the desk-scale network
twice and takes several minutes.
"""

import itertools
import json
import time

import numpy as np
import pytest

from sdcnet import gradcheck
from sdcnet.cli import main
from sdcnet.network import SdcnConfig, init_model, load_checkpoint, model_forward, save_checkpoint
from sdcnet.sdconv import (
    ConvParams,
    ConvSpec,
    DilationVector,
    effective_tap_offsets,
    receptive_field,
    sdconv_backward,
    sdconv_forward,
)
from sdcnet.synth import SynthConfig, make_clip
from sdcnet.train import aggregate_clip, auc
from sdcnet.wavelet import CwtConfig, RawClip, build_scalogram, frequency_grid, morlet_cwt_magnitude, segment_clip

torch = pytest.importorskip("torch")

FS = 400.0


def random_case(rng, k, d, padding="same", dtype=np.float32):
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    rf_h, rf_w = receptive_field(k, d)
    lo_h, lo_w = (rf_h, rf_w) if padding == "valid" else (3, 3)
    h, w = int(rng.integers(lo_h, rf_h + 6)), int(rng.integers(lo_w, rf_w + 8))
    spec = ConvSpec(k, d, cin, cout, padding)
    params = ConvParams(
        (rng.standard_normal((cout, cin, k, k)) / np.sqrt(cin * k * k)).astype(dtype),
        rng.standard_normal(cout).astype(dtype),
    )
    return rng.standard_normal((int(rng.integers(1, 3)), cin, h, w)).astype(dtype), spec, params


def torch_conv(x, weights, bias, dilation=(1, 1), padding=(0, 0)):
    out = torch.nn.functional.conv2d(
        torch.from_numpy(np.asarray(x, np.float64)),
        torch.from_numpy(np.asarray(weights, np.float64)),
        torch.from_numpy(np.asarray(bias, np.float64)),
        dilation=dilation,
        padding=padding,
    )
    return out.numpy()


def zero_insert(weights, d_h, d_w):
    o, c, k, _ = weights.shape
    big = np.zeros((o, c, (k - 1) * d_h + 1, (k - 1) * d_w + 1), weights.dtype)
    for i, j in itertools.product(range(k), range(k)):
        big[:, :, i * d_h, j * d_w] = weights[:, :, i, j]
    return big


def test_c1_receptive_field(verdict):
    t0 = time.perf_counter()
    worked = receptive_field(5, DilationVector(2, 16))
    rng = np.random.default_rng(101)
    mismatches = []
    for _ in range(20):
        k = int(rng.choice([1, 3, 5, 7]))
        d = (int(rng.integers(1, 4)), int(rng.integers(1, 17)))
        x, spec, params = random_case(rng, k, d, "valid", np.float64)
        out = sdconv_forward(x, spec, params)
        g = np.zeros_like(out)
        g[0, 0, 0, 0] = 1.0
        gx, _, _ = sdconv_backward(x, spec, params, g)
        rows, cols = np.nonzero(np.any(gx[0] != 0, axis=0))
        box = (rows.max() - rows.min() + 1, cols.max() - cols.min() + 1)
        taps = set(zip(rows.tolist(), cols.tolist()))
        if box != receptive_field(k, d) or taps != set(effective_tap_offsets(spec)):
            mismatches.append((k, d))
    dt = time.perf_counter() - t0
    verdict(
        "C1 receptive field",
        worked == (9, 65) and not mismatches and dt < 10,
        f"rf(5,[2,16])={worked[0]}x{worked[1]}, probe mismatches {len(mismatches)}/20, {dt:.1f}s",
    )


def test_c2_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(50):
        k = int(rng.choice([3, 5]))
        d = (int(rng.choice([1, 2])), int(rng.choice([1, 2, 4, 8, 16])))
        x, spec, params = random_case(rng, k, d)
        big = zero_insert(params.weights, *d)
        ref = torch_conv(x, big, params.bias, padding=((big.shape[2] - 1) // 2, (big.shape[3] - 1) // 2))
        worst = max(worst, float(np.abs(sdconv_forward(x, spec, params) - ref).max()))
    dt = time.perf_counter() - t0
    verdict("C2 oracle equivalence", worst <= 1e-5 and dt < 60, f"max |diff| {worst:.2e} over 50 cases, {dt:.1f}s")


def test_c3_gradient_checks(verdict):
    t0 = time.perf_counter()
    r32 = gradcheck.check_sdconv_gradients(20, seed=303, dtype=np.float32)
    r64 = gradcheck.check_sdconv_gradients(20, seed=303, dtype=np.float64)
    rmodel = gradcheck.check_model_gradients(seed=303, n_probe=50)
    dt = time.perf_counter() - t0
    ok = r32.value <= 1e-3 and r64.value <= 1e-6 and rmodel.value <= 1e-2 and dt < 120
    verdict(
        "C3 gradient checks",
        ok,
        f"sdconv rel err f32 {r32.value:.2e}, f64 {r64.value:.2e}; tiny model {rmodel.value:.2e}; {dt:.1f}s",
    )


def test_c4_degeneracy(verdict):
    rng = np.random.default_rng(404)
    worst = {1: 0.0, 2: 0.0}
    for r in (1, 2):
        for k in (3, 5):
            for _ in range(5):
                x, spec, params = random_case(rng, k, (r, r))
                half = (k - 1) // 2 * r
                ref = torch_conv(x, params.weights, params.bias, dilation=(r, r), padding=(half, half))
                worst[r] = max(worst[r], float(np.abs(sdconv_forward(x, spec, params) - ref).max()))
    verdict(
        "C4 degeneracy",
        worst[1] <= 1e-5 and worst[2] <= 1e-5,
        f"d=[1,1] vs standard conv {worst[1]:.2e}; d=[2,2] vs dilated conv {worst[2]:.2e}",
    )


def test_c5_preprocessing(verdict):
    t0 = time.perf_counter()
    clip = make_clip(SynthConfig(clip_seconds=600, n_channels=2, seed=5), 0, 0)
    n_seg = len(segment_clip(clip, 30))

    cfg = CwtConfig(100, 0.5, 50.0, 6.0, 2)
    t = np.arange(12000) / FS
    mag = morlet_cwt_magnitude(np.sin(2 * np.pi * 10.0 * t), cfg, FS)
    freqs = frequency_grid(cfg)
    target = int(np.argmin(np.abs(freqs - 10.0)))
    ridge = mag[:, 1000:5000].argmax(axis=0)
    off_by = int(np.abs(ridge - target).max())

    desk = CwtConfig(64, 0.5, 150.0, 6.0, 47)
    scfg = SynthConfig(n_clips=4, clip_seconds=30, n_channels=4, gain=2.0, seed=5)
    energy = {0: [], 1: []}
    for i in range(4):
        for label in (0, 1):
            s = build_scalogram(make_clip(scfg, label, i), desk, normalize=False)
            energy[label].append(float(np.mean(s.values[:, s.freqs_hz <= 50] ** 2)))
    higher = min(energy[1]) > max(energy[0])
    dt = time.perf_counter() - t0
    verdict(
        "C5 preprocessing",
        n_seg == 20 and off_by <= 1 and higher and dt < 60,
        f"{n_seg} segments; 10 Hz ridge within {off_by} bin(s); "
        f"0-50 Hz energy preictal min {min(energy[1]):.3g} vs interictal max {max(energy[0]):.3g}; {dt:.1f}s",
    )


def _train_run(root, gain, seed=0):
    data = root / f"data_gain{gain:g}"
    argv_common = ["--seed", str(seed)]
    assert main(["synth", "--out", str(data), "--clips", "32", "--clip-seconds", "60",
                 "--gain", str(gain), *argv_common]) == 0
    assert main(["preprocess", "--data", str(data), *argv_common]) == 0
    out = root / f"run_gain{gain:g}"
    assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "20", "--patience", "3",
                 *argv_common]) == 0
    return out


@pytest.mark.slow
def test_c6_end_to_end(verdict, tmp_path, capsys):
    t0 = time.perf_counter()
    run = _train_run(tmp_path, 2.0)
    meta = load_checkpoint(run / "model.sdcn").meta
    best = meta["best_metrics"]
    n_epochs = len((run / "metrics.jsonl").read_text().splitlines()) - 1

    null = _train_run(tmp_path, 1.0)
    null_best = load_checkpoint(null / "model.sdcn").meta["best_metrics"]
    # Score the null model on fresh clips it never saw: 128 per class.
    held = tmp_path / "heldout_gain1"
    assert main(["synth", "--out", str(held), "--clips", "128", "--clip-seconds", "60", "--gain", "1",
                 "--seed", "1"]) == 0
    assert main(["preprocess", "--data", str(held)]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(null / "model.sdcn"), "--data", str(held), "--all"]) == 0
    held_metrics = json.loads(capsys.readouterr().out.splitlines()[0])
    dt = time.perf_counter() - t0

    ok = (
        best["clip_auc"] >= 0.95
        and best["sens"] >= 0.9
        and n_epochs <= 20
        and abs(held_metrics["clip_auc"] - 0.5) <= 0.1
        and dt < 15 * 60
    )
    verdict(
        "C6 end-to-end",
        ok,
        f"gain 2: val clip AUC {best['clip_auc']:.3f}, sens {best['sens']:.3f} "
        f"(best epoch {meta['best_epoch']} of {n_epochs}); "
        f"gain 1: held-out clip AUC {held_metrics['clip_auc']:.3f} "
        f"(val clip AUC {null_best['clip_auc']:.3f}); {dt / 60:.1f} min",
    )


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_c7_aggregation_and_metrics(verdict):
    rng = np.random.default_rng(707)
    max_ok = all(
        aggregate_clip(p) == p.max() for p in (rng.uniform(0, 1, int(rng.integers(1, 25))) for _ in range(100))
    )
    exact, invariant = 0, 0
    for _ in range(100):
        n = int(rng.integers(2, 20))
        labels = rng.permutation(np.r_[0, 1, rng.integers(0, 2, n - 2)])
        scores = rng.integers(1, 8, n) / 7.0
        a = auc(scores, labels)
        exact += a == pair_count_auc(scores, labels)
        invariant += a == auc(scores**3, labels) == auc(np.exp(scores), labels)
    verdict(
        "C7 aggregation and metrics",
        max_ok and exact == 100 and invariant == 100,
        f"max aggregation exact: {max_ok}; AUC == pair count {exact}/100; monotone invariance {invariant}/100",
    )


def test_c8_reproducibility(verdict, tmp_path):
    cfg = SdcnConfig(height=16, width=32, n_channels=4, filters=(2, 3, 4), fc_sizes=(8, 4), seed=8)
    model = init_model(cfg)
    rng = np.random.default_rng(808)
    for p in model.params.values():
        p += (0.05 * rng.standard_normal(p.shape)).astype(p.dtype)
    save_checkpoint(model, tmp_path / "m.sdcn")
    x = rng.standard_normal((4, 4, 16, 32)).astype(np.float32)
    bitwise = np.array_equal(model_forward(x, model)[0], model_forward(x, load_checkpoint(tmp_path / "m.sdcn"))[0])

    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--clips", "3", "--clip-seconds", "60", "--seed", "8"]) == 0
    assert main(["preprocess", "--data", str(data), "--n-freqs", "16", "--decimation", "375"]) == 0
    logs = []
    for name in ("a", "b"):
        assert main(["train", "--data", str(data), "--out", str(tmp_path / name), "--epochs", "2",
                     "--batch-size", "4", "--filters", "2,3,4", "--fc-sizes", "8,4", "--seed", "8"]) == 0
        logs.append((tmp_path / name / "metrics.jsonl").read_bytes())
    verdict(
        "C8 reproducibility",
        bitwise and logs[0] == logs[1],
        f"checkpoint round-trip bitwise: {bitwise}; metrics logs identical: {logs[0] == logs[1]}",
    )
