"""End-to-end acceptance checks, one test per criterion.

Criteria 7-9 train real models on CPU and take tens of minutes; they are
marked ``slow``. Run only this file with ``pytest tests/test_acceptance.py -s``
and read the "acceptance criteria" section of the terminal summary.
"""

import json
import subprocess
import sys
import time

import jsonschema
import numpy as np
import pytest
import torch

from ddmd.data import generate_synthetic
from ddmd.denoiser import DenoiserConfig, build_denoiser
from ddmd.discrepancy import AutoencoderConfig, discrepancy_scores, inter_discrepancy, intra_discrepancy, train_ensemble
from ddmd.metrics import SUMMARY_SCHEMA, auroc, dice, miou, pixel_accuracy
from ddmd.sampler import SamplerConfig, predict_batch, reverse_diffusion
from ddmd.schedule import make_linear_schedule, q_sample, reverse_step, scaled_linear_schedule
from ddmd.trainer import TrainConfig, train_ddmd
from gradcheck import finite_difference_check, randomize_output_layer
from test_discrepancy import loop_inter, loop_intra
from test_metrics import enumerate_metrics
from test_sampler import PerfectPredictor
from test_schedule import scalar_alpha_bar


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


@pytest.mark.criterion(1, "schedule matches scalar-loop oracle (T=1000)")
def test_schedule_correctness(report_detail):
    with Timer() as clock:
        s = make_linear_schedule(1000, 1e-4, 0.02)
        oracle = np.array(scalar_alpha_bar(1000, 1e-4, 0.02))
        err = float(np.abs(s.alpha_bar - oracle).max())
        monotone = bool((np.diff(s.alpha_bar) < 0).all() and (np.diff(s.beta) > 0).all())
    report_detail(f"max err {err:.1e}, {clock.seconds:.3f}s")
    assert err <= 1e-12
    assert monotone
    assert clock.seconds < 1


@pytest.mark.criterion(2, "one-step inversion at t=1 (1k trials, 32x32)")
def test_one_step_inversion(report_detail):
    s = make_linear_schedule(1000)
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    with Timer() as clock:
        for _ in range(1000):
            x0 = torch.rand(1, 1, 32, 32, generator=g, dtype=torch.float64) * 2 - 1
            eps = torch.randn(1, 1, 32, 32, generator=g, dtype=torch.float64)
            x1 = q_sample(x0, 1, eps, s)
            back = reverse_step(x1, eps, 1, torch.zeros_like(x1), s)
            worst = max(worst, float((back - x0).abs().max()))
    report_detail(f"max err {worst:.1e}, {clock.seconds:.2f}s")
    assert worst <= 1e-6
    assert clock.seconds < 5


@pytest.mark.criterion(3, "sampler recovers x0 with a perfect noise predictor (T=100)")
def test_closed_loop_sampler(report_detail):
    s = make_linear_schedule(100)
    g = torch.Generator().manual_seed(1)
    x0 = torch.where(torch.rand(4, 1, 32, 32, generator=g) > 0.7, 1.0, -1.0).double()
    cond = torch.rand(4, 4, 32, 32, generator=g).double()
    oracle = PerfectPredictor(x0, s)
    with Timer() as clock:
        out, _ = reverse_diffusion(cond, oracle, s, [torch.Generator().manual_seed(i) for i in range(4)])
    err = float((out - x0).abs().max())
    report_detail(f"max err {err:.1e}, {oracle.calls} predictor calls, {clock.seconds:.2f}s")
    assert oracle.calls == 100
    assert err <= 1e-4
    assert clock.seconds < 30


@pytest.mark.criterion(4, "discrepancy maps match nested loops (10k cases, 4x4, C=2, L=3)")
def test_discrepancy_formulas(report_detail):
    rng = np.random.default_rng(7)
    worst = 0.0
    with Timer() as clock:
        for _ in range(10_000):
            mu1 = rng.normal(size=(2, 4, 4))
            members = rng.normal(size=(3, 2, 4, 4))
            mu2 = members.mean(axis=0)
            X = inter_discrepancy(mu1, mu2)
            Y = intra_discrepancy(list(members), mu2)
            worst = max(worst, float(np.abs(X - loop_inter(mu1, mu2)).max()),
                        float(np.abs(Y - loop_intra(list(members), mu2)).max()))
    report_detail(f"max err {worst:.1e}, {clock.seconds:.2f}s")
    assert worst <= 1e-6
    assert clock.seconds < 10


@pytest.mark.criterion(5, "loss gradients match central differences on every parameter")
def test_gradient_check(report_detail):
    p = build_denoiser(DenoiserConfig(variant="full", modalities=2, base_width=4, depth=2, num_res_blocks=1), 3)
    randomize_output_layer(p, 3)
    with Timer() as clock:
        rep = finite_difference_check(p, n_params=None, seed=1, rtol=1e-3, size=4)
    report_detail(f"{rep.fraction_ok:.2%} of {rep.n_checked} parameters within 1e-3, {clock.seconds:.0f}s")
    assert rep.n_checked == rep.n_total
    assert rep.fraction_ok >= 0.95, rep.worst
    assert clock.seconds < 120


@pytest.mark.criterion(6, "Dice/mIoU/PA equal pixel enumeration (10k 8x8 pairs)")
def test_metric_oracle(report_detail):
    rng = np.random.default_rng(11)
    mismatches = 0
    with Timer() as clock:
        for _ in range(10_000):
            pred = (rng.random((8, 8)) < rng.uniform(0, 1)).astype(np.uint8)
            gt = (rng.random((8, 8)) < rng.uniform(0, 1)).astype(np.uint8)
            pa, d, m = enumerate_metrics(pred, gt)
            mismatches += (pixel_accuracy(pred, gt) != pa) + (dice(pred, gt) != d) + (miou(pred, gt) != m)
    report_detail(f"{mismatches} mismatches, {clock.seconds:.2f}s")
    assert mismatches == 0
    assert clock.seconds < 10


@pytest.mark.criterion(10, "CLI pipeline end to end on 8 slices at 32x32")
def test_cli_smoke(tmp_path, report_detail):
    out = tmp_path / "smoke"
    with Timer() as clock:
        proc = subprocess.run([sys.executable, "-m", "ddmd", "run", "--preset", "smoke", "--out", str(out),
                               "--variant", "light"], capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    manifest = json.loads((out / "data" / "manifest.json").read_text())
    assert len(manifest["records"]) == 8 and manifest["H"] == manifest["W"] == 32
    summary = json.loads((out / "eval" / "light" / "summary.json").read_text())
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    hist = json.loads((out / "features" / "histogram.json").read_text())
    assert {"bins", "families", "n_normal", "n_abnormal"} <= set(hist)
    for stage in ("synth", "train-ae-mixture", "train-ae-normal_only", "features", "train-diff-light",
                  "sample-light", "eval-light"):
        assert (out / "stages" / f"{stage}.json").is_file(), stage
    report_detail(f"mean Dice {summary['per_image_mean_std']['dice']['mean']:.3f}, {clock.seconds:.0f}s")
    assert clock.seconds < 300


# --- trained-model criteria -------------------------------------------------

SEEDS = (0, 1, 2)
OVERFIT_ITERATIONS = 2000


def desk_autoencoder(size):
    return AutoencoderConfig(in_channels=4, height=size, width=size, encoder_conv_layers=3, decoder_deconv_layers=3,
                             latent_dim=256, width_schedule=(16, 32, 64))


def train_pair(records, size, seed_1, seed_2):
    cfg = desk_autoencoder(size)
    ae1 = train_ensemble(records, "mixture", cfg, L=3, epochs=100, lr=1e-3, seed=seed_1, batch_size=8)
    ae2 = train_ensemble(records, "normal_only", cfg, L=3, epochs=100, lr=1e-3, seed=seed_2, batch_size=8)
    return ae1, ae2


def split(records):
    return [r for r in records if r.split == "train"], [r for r in records if r.split == "test"]


def fit_and_segment(train, evaluate, ae1, ae2, variant, seed, iterations, size_base=16, T=100, batch_size=10):
    s = scaled_linear_schedule(T)
    p = build_denoiser(DenoiserConfig(variant=variant, modalities=4, base_width=size_base, depth=3, num_res_blocks=1),
                       seed)
    res = train_ddmd(train, ae1, ae2, p, s, TrainConfig(T=T, batch_size=batch_size, lr=5e-4, iterations=iterations,
                                                         variant=variant, seed=seed, log_every=0,
                                                         use_feature_cache=True))
    preds = predict_batch(np.stack([r.modalities for r in evaluate]), ae1, ae2, res.predictor, s,
                          SamplerConfig(n_samples=5, threshold=0.5, seed=1000 + seed))
    return float(np.mean([dice(q.binary, r.mask) for q, r in zip(preds, evaluate)])), res


@pytest.mark.slow
@pytest.mark.criterion(7, "light overfits 16 slices at 64x64 to Dice >= 0.90")
def test_overfit_segmentation(report_detail):
    records = generate_synthetic(8, 8, C=4, H=64, W=64, seed=0)
    with Timer() as clock:
        ae1, ae2 = train_pair(records, 64, 1, 2)
        score, res = fit_and_segment(records, records, ae1, ae2, "light", 0, OVERFIT_ITERATIONS, batch_size=8)
    h = np.asarray(res.loss_history)
    report_detail(f"Dice {score:.4f} after {len(h)} iterations, {clock.seconds / 60:.0f} min")
    assert len(h) <= 5000
    assert score >= 0.90
    assert clock.seconds <= 2 * 3600


@pytest.fixture(scope="module")
def desk_runs():
    """Per seed: the 200-slice corpus split into train/test, plus both ensembles and their training time."""
    runs = {}
    for seed in SEEDS:
        train, test = split(generate_synthetic(100, 100, C=4, H=32, W=32, seed=seed, test_fraction=0.25,
                                               lesion_contrast=0.6))
        with Timer() as clock:
            ae1, ae2 = train_pair(train, 32, seed, seed + 100)
        runs[seed] = (train, test, ae1, ae2, clock.seconds)
    return runs


@pytest.mark.slow
@pytest.mark.criterion(8, "light beats mini by >= 2 Dice points (200 slices, 3 seeds)")
def test_ablation_ordering(desk_runs, report_detail):
    gaps, lines = [], []
    for seed in SEEDS:
        train, test, ae1, ae2, _ = desk_runs[seed]
        mini, _ = fit_and_segment(train, test, ae1, ae2, "mini", seed, 2000)
        light, _ = fit_and_segment(train, test, ae1, ae2, "light", seed, 2000)
        gaps.append(light - mini)
        lines.append(f"seed {seed}: light {light:.3f} mini {mini:.3f}")
    report_detail(f"mean gap {np.mean(gaps):+.4f}; " + ", ".join(lines))
    assert np.mean(gaps) >= 0.02


@pytest.mark.slow
@pytest.mark.criterion(9, "inter-score AUROC beats intra-score AUROC on every seed")
def test_discrepancy_separation(desk_runs, report_detail):
    results = []
    seconds = sum(run[4] for run in desk_runs.values())
    for seed in SEEDS:
        _, test, ae1, ae2, _ = desk_runs[seed]
        with Timer() as clock:
            scores = discrepancy_scores(np.stack([r.modalities for r in test]), ae1, ae2)
        seconds += clock.seconds
        labels = np.array([r.label for r in test])
        inter = np.array([s.inter_global for s in scores])
        intra = np.array([s.intra_global for s in scores])
        results.append((auroc(inter[labels == 0], inter[labels == 1]),
                        auroc(intra[labels == 0], intra[labels == 1])))
    report_detail(", ".join(f"seed {s}: {a:.3f} vs {b:.3f}" for s, (a, b) in zip(SEEDS, results))
                  + f", {seconds / 60:.1f} min")
    assert all(a > b for a, b in results)
    assert seconds <= 15 * 60
