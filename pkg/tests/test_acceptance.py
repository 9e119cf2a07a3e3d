"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (see ``conftest.py``) before asserting, so
the terminal summary always lists every criterion. The training-based
criteria share one session fixture: four configurations times five seeds on
the default synthetic data (about two minutes on one CPU core).
"""

import json
import time

import numpy as np
import pytest

from kganet import autograd as ag
from kganet.autograd import Tensor, backward, finite_diff_grad, finite_diff_params, relative_error
from kganet.cli import SUITE_ROWS, main, train_and_evaluate
from kganet.data import SyntheticConfig, generate
from kganet.evaluation import auc, youden_threshold
from kganet.losses import (
    ClassCenters,
    center_loss,
    coherence_loss,
    cross_entropy,
    distances_to_center,
    gram,
    total_loss,
)
from kganet.model import KGANet, ModelConfig
from kganet.training import TrainConfig

from oracles import all_multisets, brute_auc, brute_youden

SEEDS = range(5)
GRAD_TOL = 1e-4


def _leaf_grad(fn, x0):
    x = Tensor(x0, requires_grad=True)
    backward(fn(x))
    return x.grad, finite_diff_grad(fn, x0).data


def _composite_errors(seed):
    """Relative errors of every parameter's gradient of the full loss on a 3-frame, D=4 model."""
    rng = np.random.default_rng(seed)
    model = KGANet(ModelConfig(input_dim=4, hidden_dim=4, feature_dim=4, seed=seed))
    clip = rng.standard_normal((3, 4))
    images = rng.standard_normal((2, 4))
    img_labels = [0, 1]
    label = int(rng.integers(2))
    centers = ClassCenters(0.3 * rng.standard_normal(4), 0.3 * rng.standard_normal(4))
    # distances are a constant target for the coherence term
    d0 = distances_to_center(model.video_forward(clip).frame_features, label, centers)

    def loss():
        out = model.video_forward(clip)
        feats, logits = model.image_forward(images)
        return total_loss(
            cross_entropy(out.video_logits, [label]),
            cross_entropy(logits, img_labels),
            cross_entropy(out.frame_logits, [label] * 3),
            center_loss(feats, img_labels, centers),
            coherence_loss(out.attention_weights, d0),
            lam=1.0,
        )

    model.zero_grad()
    backward(loss())
    params = model.parameters()
    analytic = [p.grad.copy() for p in params]
    numeric = finite_diff_params(loss, params)
    return [relative_error(a, n) for a, n in zip(analytic, numeric)]


def test_criterion_1_gradient_suite(report_criterion):
    start = time.perf_counter()
    worst = {"cross_entropy": 0.0, "center_loss": 0.0, "coherence_loss": 0.0, "composite": 0.0}
    for seed in range(100):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 7))
        labels = rng.integers(0, 2, k)
        a, n = _leaf_grad(lambda t: cross_entropy(t, labels), 3 * rng.standard_normal((k, 2)))
        worst["cross_entropy"] = max(worst["cross_entropy"], relative_error(a, n))

        centers = ClassCenters(rng.standard_normal(4), rng.standard_normal(4))
        a, n = _leaf_grad(lambda t: center_loss(t, labels, centers), rng.standard_normal((k, 4)))
        worst["center_loss"] = max(worst["center_loss"], relative_error(a, n))

        size = int(rng.integers(2, 17))
        d = rng.uniform(0.1, 3.0, size)
        a, n = _leaf_grad(lambda t: coherence_loss(t, d), rng.uniform(0.05, 0.95, size))
        worst["coherence_loss"] = max(worst["coherence_loss"], relative_error(a, n))

        worst["composite"] = max(worst["composite"], max(_composite_errors(seed)))
    elapsed = time.perf_counter() - start
    passed = max(worst.values()) < GRAD_TOL and elapsed < 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report_criterion(1, passed, f"max rel err {detail} (tol {GRAD_TOL}); {elapsed:.1f}s (limit 30s)")
    assert passed


def test_criterion_2_loss_oracles(report_criterion):
    errors = []
    for x, expected in (
        ([1.0, 0.0], [[1.0, 0.0], [0.0, 0.0]]),
        ([1.0, 1.0], [[0.5, 0.5], [0.5, 0.5]]),
        ([3.0, 4.0], [[0.36, 0.48], [0.48, 0.64]]),
    ):
        errors.append(np.abs(gram(x).data - np.array(expected)).max())
    errors.append(abs(coherence_loss([0.5, 0.5], [1.0, 1.0]).item() - 0.0))
    errors.append(abs(coherence_loss([0.5, 0.5], [1.0, 0.0]).item() - 1.0))
    worst_prop = worst_scale = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        size = int(rng.integers(2, 17))
        d = rng.uniform(0.1, 5.0, size)
        w = 1.0 - rng.uniform(0.05, 0.95) / d.max() * d
        worst_prop = max(worst_prop, coherence_loss(w, d).item())
        w = rng.uniform(0.05, 0.95, size)
        c = 10 ** rng.uniform(-3, 3)
        worst_scale = max(worst_scale, abs(coherence_loss(w, c * d).item() - coherence_loss(w, d).item()))
    worked = max(errors)
    passed = worked <= 1e-12 and worst_prop <= 1e-12 and worst_scale <= 1e-12
    report_criterion(
        2, passed, f"worked values err {worked:.1e}, proportional {worst_prop:.1e}, scale {worst_scale:.1e} (tol 1e-12)"
    )
    assert passed


def test_criterion_3_metric_oracles(report_criterion):
    start = time.perf_counter()
    cases = mismatches = 0
    for scores, labels in all_multisets(8):
        cases += 1
        thr, sens, spec = youden_threshold(scores, labels)
        bthr, bsens, bspec = brute_youden(scores, labels)
        if auc(scores, labels) != float(brute_auc(scores, labels)) or (thr, sens, spec) != (
            bthr,
            float(bsens),
            float(bspec),
        ):
            mismatches += 1
    elapsed = time.perf_counter() - start
    passed = mismatches == 0 and elapsed < 60.0
    report_criterion(
        3, passed, f"{cases} multisets of <= 8 (score, label) pairs, {mismatches} mismatches; {elapsed:.1f}s (limit 60s)"
    )
    assert passed


@pytest.fixture(scope="session")
def suite():
    train_split, test_split = generate(SyntheticConfig())
    runs = {}
    for ablation, _ in SUITE_ROWS:
        for seed in SEEDS:
            config = TrainConfig(ablation=ablation, seed=seed)
            start = time.perf_counter()
            report, attention = train_and_evaluate((config, train_split, test_split))
            runs[ablation, seed] = dict(report, seconds=time.perf_counter() - start, **attention)
    return runs


def _mean(runs, ablation, key):
    return float(np.mean([runs[ablation, s][key] for s in SEEDS]))


def test_criterion_4_full_model_auc(suite, report_criterion):
    aucs = [suite["full", s]["auc"] for s in SEEDS]
    slowest = max(suite["full", s]["seconds"] for s in SEEDS)
    hits = sum(a >= 0.95 for a in aucs)
    passed = hits >= 4 and slowest < 300.0
    report_criterion(
        4, passed, f"full AUC per seed {[round(a, 3) for a in aucs]}, {hits}/5 >= 0.95; slowest run {slowest:.1f}s"
    )
    assert passed


def test_criterion_5_ablation_ordering(suite, report_criterion):
    m = {ab: _mean(suite, ab, "auc") for ab, _ in SUITE_ROWS}
    sens_gap = _mean(suite, "full", "sensitivity") - _mean(suite, "no_coherence_no_attention", "sensitivity")
    gaps = {
        "full-no_coherence": m["full"] - m["no_coherence"],
        "no_coherence-no_image_guidance": m["no_coherence"] - m["no_image_guidance"],
        "full-no_coherence_no_attention": m["full"] - m["no_coherence_no_attention"],
    }
    passed = all(g >= 0.01 for g in gaps.values()) and sens_gap >= 0.05
    detail = ", ".join(f"{k} {v:.3f}" for k, v in m.items())
    detail += "; gaps " + ", ".join(f"{k} {v:+.3f}" for k, v in gaps.items())
    detail += f"; sensitivity gap full-no_attention {sens_gap:+.3f}"
    report_criterion(5, passed, f"mean AUC {detail}")
    assert passed


def test_criterion_6_attention_distance_correlation(suite, report_criterion):
    rs = [suite["full", s]["attention_distance_r"] for s in SEEDS]
    passed = all(r is not None and r <= -0.8 for r in rs)
    report_criterion(6, passed, f"pooled Pearson r per full-model seed {[round(r, 3) for r in rs]} (need <= -0.8)")
    assert passed


def test_criterion_7_keyframe_attention_gap(suite, report_criterion):
    gaps = [suite["full", s]["keyframe_gap"] for s in SEEDS]
    passed = all(g is not None and g >= 0.1 for g in gaps)
    report_criterion(7, passed, f"keyframe attention gap per full-model seed {[round(g, 3) for g in gaps]} (need >= 0.1)")
    assert passed


def test_criterion_8_determinism(tmp_path, report_criterion):
    data = str(tmp_path / "data")
    assert main(["gen-data", "--out", data]) == 0
    first, second, resumed = (str(tmp_path / n) for n in ("first", "second", "resumed"))
    assert main(["train", "--data", data, "--out", first]) == 0
    assert main(["train", "--data", data, "--out", second, "--manifest", f"{first}/manifest.json"]) == 0
    assert main(["train", "--data", data, "--out", resumed, "--stop-at", "400"]) == 0
    assert main(["train", "--data", data, "--out", resumed, "--resume", f"{resumed}/checkpoint.kgac"]) == 0

    def read(d, name):
        with open(f"{d}/{name}", "rb") as fh:
            return fh.read()

    repeat = all(read(first, n) == read(second, n) for n in ("checkpoint.kgac", "metrics.json", "manifest.json"))
    resume = all(read(first, n) == read(resumed, n) for n in ("checkpoint.kgac", "history.jsonl", "metrics.json"))
    passed = repeat and resume
    report_criterion(
        8, passed, f"repeat-from-manifest byte-identical: {repeat}; resume at 400 equals uninterrupted: {resume}"
    )
    assert passed
