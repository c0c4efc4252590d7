"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with ``pytest tests/test_acceptance.py -v -s``).

Criteria with stated runtime budgets assert them with a wall clock.
"""

import hashlib
import json
import math
import shutil
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from filterbench.cli import RunConfig, run_pipeline
from filterbench.metrics import (
    d_prime,
    d_prime_values,
    fmr_at,
    fmr_threshold,
    fnmr_at,
    summarize_bins,
)
from filterbench.mitigation import (
    TrainConfig,
    apply_mitigation,
    closed_form_map,
    collect_labeled_embeddings,
    collect_map_pairs,
    make_splits,
    mse_loss_and_grads,
    softmax_ce_loss_and_grads,
    train_filter_classifier,
    train_restoration_map,
)
from filterbench.pixel_analysis import otsu_threshold_from_histogram, select_filters
from filterbench.protocol import (
    ProtocolMode,
    build_protocol,
    expected_pair_counts,
    score_protocol,
)
from filterbench.synth import (
    SyntheticDatasetSpec,
    SyntheticFilterSpec,
    apply_filter_to_store,
    gen_embeddings,
)

from conftest import build_manifest
from test_metrics import fmr_threshold_oracle
from test_mitigation import _fd_grad
from test_pixel_analysis import otsu_oracle, stats_for_sizes
from test_protocol import brute_force_counts

CRITERIA = {
    "test_c1_pair_count_exactness": "criterion 1: pair-count exactness",
    "test_c2_table1_quota_reproduction": "criterion 2: quota reproduction",
    "test_c3_otsu_oracle_equivalence": "criterion 3: Otsu oracle equivalence",
    "test_c4_d_prime_analytic": "criterion 4: d-prime analytic check",
    "test_c5_fmr_fnmr_correctness": "criterion 5: FMR/FNMR correctness",
    "test_c6_mitigation_recovery": "criterion 6: mitigation recovery",
    "test_c7_filter_detection": "criterion 7: filter detection",
    "test_c8_gradient_correctness": "criterion 8: gradient correctness",
    "test_c9_scoring_throughput": "criterion 9: scoring throughput",
    "test_c10_pipeline_determinism": "criterion 10: pipeline determinism",
}


@pytest.fixture(autouse=True)
def announce(request):
    yield
    label = CRITERIA.get(request.node.name)
    rep = getattr(request.node, "rep_call", None)
    if label and rep is not None:
        print(f"\n[acceptance] {'PASS' if rep.passed else 'FAIL'} {label}")


# ---------------------------------------------------------------------------
# 1. Pair-count exactness
# ---------------------------------------------------------------------------

def test_c1_pair_count_exactness():
    t0 = time.monotonic()

    manifest = build_manifest(1000, 3)
    ovo = build_protocol(manifest, ProtocolMode("ovo"))
    assert (ovo.n_genuine, ovo.n_impostor) == (3000, 4495500)
    fvo = build_protocol(manifest, ProtocolMode("fvo", "f"))
    assert (fvo.n_genuine, fvo.n_impostor) == (6000, 8991000)

    for n in range(1, 51):
        for s in range(1, 6):
            for mode in (ProtocolMode("ovo"), ProtocolMode("fvo", "f")):
                want = brute_force_counts(n, s, mode.symmetric)
                assert expected_pair_counts(n, s, mode) == want, (n, s, mode.kind)
                proto = build_protocol(build_manifest(n, s), mode, require_impostors=False)
                assert (proto.n_genuine, proto.n_impostor) == want, (n, s, mode.kind)

    assert time.monotonic() - t0 < 60.0


# ---------------------------------------------------------------------------
# 2. Quota reproduction (reference per-bin vectors, zero tolerance)
# ---------------------------------------------------------------------------

def test_c2_table1_quota_reproduction():
    cases = [
        ((49, 18, 25, 8, 0), (8, 8, 8, 8, 0), 32),
        ((13, 10, 1, 1, 0), (10, 10, 0, 0, 0), 20),
        ((13, 28, 68, 41, 0), (13, 13, 13, 13, 0), 52),
        ((34, 1, 7, 9, 0), (7, 0, 7, 7, 0), 21),
    ]
    for sizes, per_bin, total in cases:
        result = select_filters(stats_for_sizes(sizes), rng_seed=2024)
        counts = tuple(result.counts()[b] for b in range(1, 6))
        assert counts == per_bin, sizes
        assert len(result.selected) == total, sizes


# ---------------------------------------------------------------------------
# 3. Otsu oracle equivalence
# ---------------------------------------------------------------------------

def test_c3_otsu_oracle_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(2718)
    hists = []
    for k in range(1000):
        kind = k % 4
        if kind == 0:
            h = rng.integers(0, 100, 256)
        elif kind == 1:
            h = np.zeros(256, dtype=int)
            idx = rng.integers(0, 256, size=int(rng.integers(2, 10)))
            h[idx] = rng.integers(1, 5000, size=len(idx))
        elif kind == 2:
            h = rng.integers(0, 8, 256)
        else:
            h = np.zeros(256, dtype=int)
            c = int(rng.integers(5, 250))
            h[c - 4 : c + 4] = rng.integers(1, 300, 8)
            h[rng.integers(0, 256)] += int(rng.integers(1, 300))
        if h.sum() == 0:
            h[int(rng.integers(0, 256))] = 1
        hists.append(h)
    # hand-built degenerate cases
    for v in (0, 7, 128, 255):
        h = np.zeros(256, dtype=int)
        h[v] = 123
        hists.append(h)
    two_spike = np.zeros(256, dtype=int)
    two_spike[0] = two_spike[255] = 50
    hists.append(two_spike)

    for h in hists:
        assert otsu_threshold_from_histogram(h.tolist()) == otsu_oracle(h)
    assert time.monotonic() - t0 < 10.0


# ---------------------------------------------------------------------------
# 4. d-prime analytic check + Table-2-shaped layout
# ---------------------------------------------------------------------------

def test_c4_d_prime_analytic():
    rng = np.random.default_rng(31415)
    g = rng.normal(1.0, 1.0, 100_000)
    i = rng.normal(0.0, 1.0, 100_000)
    assert abs(d_prime_values(g, i) - 1.0) < 0.05

    same_g = rng.normal(0.3, 0.5, 10_000)
    same_i = rng.normal(0.3, 0.5, 10_000)
    assert abs(d_prime_values(same_g, same_i)) < 0.05

    # report layout: bin x {all, female, male}, 8 filters per cell
    rows = [
        (f"f{b}_{k}", b, grp, 10.0 - b + 0.05 * k)
        for b in range(1, 5)
        for grp in ("all", "female", "male")
        for k in range(8)
    ]
    summaries = summarize_bins(rows)
    assert [(s.bin, s.group) for s in summaries] == [
        (b, g) for b in range(1, 5) for g in ("all", "female", "male")
    ]
    assert all(s.n_filters == 8 for s in summaries)


# ---------------------------------------------------------------------------
# 5. FMR/FNMR correctness
# ---------------------------------------------------------------------------

def test_c5_fmr_fnmr_correctness():
    rng = np.random.default_rng(5050)

    # exact agreement with the linear-scan oracle, lists up to 1e5
    for n in (10, 1000, 100_000):
        scores = rng.uniform(-1, 1, n)
        ties = rng.integers(0, 50, n) / 50.0
        for imp in (scores, ties):
            for target in (0.1, 0.01, 1e-3):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    got = fmr_threshold(imp, target)
                assert got == fmr_threshold_oracle(imp, target), (n, target)

    # monotonicity over 100 random score sets
    for _ in range(100):
        imp = rng.uniform(-1, 1, 300)
        gen = rng.uniform(-1, 1, 300)
        grid = np.linspace(-1.05, 1.05, 43)
        fmrs = [fmr_at(imp, t) for t in grid]
        fnmrs = [fnmr_at(gen, t) for t in grid]
        assert all(a >= b for a, b in zip(fmrs, fmrs[1:]))
        assert all(a <= b for a, b in zip(fnmrs, fnmrs[1:]))


# ---------------------------------------------------------------------------
# 6. Mitigation recovery on the 1000 x 3, D=512 synthetic dataset
# ---------------------------------------------------------------------------

def test_c6_mitigation_recovery():
    t0 = time.monotonic()

    spec = SyntheticDatasetSpec(n_subjects=1000, images_per_subject=3, dim=512,
                                intra_subject_noise=0.1, seed=2)
    manifest, store = gen_embeddings(spec)
    fspec = SyntheticFilterSpec(kind="affine", strength=1.0, seed=61)
    store = apply_filter_to_store(store, fspec, "aff")

    baseline = d_prime(score_protocol(build_protocol(manifest, ProtocolMode("ovo")), store))

    fvo = build_protocol(manifest, ProtocolMode("fvo", "aff"))
    pre_scores = score_protocol(fvo, store)

    split = make_splits(manifest, seed=7)
    train_pairs = collect_map_pairs(store, manifest, "aff", split.train)
    val_pairs = collect_map_pairs(store, manifest, "aff", split.val)
    assert len(train_pairs[0]) == 2100 and len(val_pairs[0]) == 300

    cfg = TrainConfig(learning_rate=3e-2, batch_size=256, max_epochs=1500,
                      patience=50, seed=6, min_improvement=1e-12)
    grad_map = train_restoration_map(train_pairs, val_pairs, cfg, filter_id="aff")
    oracle_map = closed_form_map(train_pairs, filter_id="aff")

    # (a) gradient solution matches the closed-form least squares oracle
    got = np.hstack([grad_map.matrix, grad_map.bias[:, None]])
    want = np.hstack([oracle_map.matrix, oracle_map.bias[:, None]])
    rel_frob = np.linalg.norm(got - want) / np.linalg.norm(want)
    assert rel_frob < 1e-3, rel_frob

    # (b) post-mitigation d' within 1% of the unfiltered baseline
    from filterbench.mitigation import ORIGINAL_CLASS, FilterClassifier

    dummy = FilterClassifier(np.zeros((2, 512)), np.zeros(2), [ORIGINAL_CLASS, "aff"])
    restored = apply_mitigation(store, dummy, {"aff": grad_map}, oracle_labels=True)
    post_scores = score_protocol(fvo, restored)
    post = d_prime(post_scores)
    assert abs(post - baseline) <= 0.01 * abs(baseline), (post, baseline)

    # (c) FNMR after mapping never exceeds FNMR before, at both FMR targets
    for target in (1e-4, 1e-5):
        t_pre = fmr_threshold(pre_scores.impostor, target)
        t_post = fmr_threshold(post_scores.impostor, target)
        fnmr_pre = fnmr_at(pre_scores.genuine, t_pre)
        fnmr_post = fnmr_at(post_scores.genuine, t_post)
        assert fnmr_post <= fnmr_pre, (target, fnmr_post, fnmr_pre)

    assert time.monotonic() - t0 < 600.0


# ---------------------------------------------------------------------------
# 7. Filter detection: 21 classes, strong vs weak filters, 5 splits
# ---------------------------------------------------------------------------

def _detection_accuracy(strength: float, seed0: int = 11) -> list[float]:
    spec = SyntheticDatasetSpec(n_subjects=150, images_per_subject=3, dim=64,
                                intra_subject_noise=0.05, seed=5)
    manifest, store = gen_embeddings(spec)
    filter_ids = [f"syn{k:02d}" for k in range(20)]
    for k, fid in enumerate(filter_ids):
        store = apply_filter_to_store(
            store, SyntheticFilterSpec(kind="affine", strength=strength, seed=100 + k), fid
        )
    accs = []
    for s in range(5):
        split = make_splits(manifest, seed0 + s)
        xt, yt, classes = collect_labeled_embeddings(store, manifest, filter_ids, split.train)
        xv, yv, _ = collect_labeled_embeddings(store, manifest, filter_ids, split.val)
        xe, ye, _ = collect_labeled_embeddings(store, manifest, filter_ids, split.test)
        assert len(classes) == 21
        cfg = TrainConfig(learning_rate=1e-2, batch_size=256, max_epochs=300,
                          patience=50, seed=s)
        clf = train_filter_classifier((xt, yt), (xv, yv), classes, cfg)
        accs.append(float(np.mean(clf.predict_indices(xe) == ye)))
    return accs


def test_c7_filter_detection():
    strong = _detection_accuracy(strength=1.0)
    assert float(np.mean(strong)) >= 0.99, strong

    weak = _detection_accuracy(strength=0.08)
    assert float(np.mean(weak)) < float(np.mean(strong)), (weak, strong)
    assert float(np.mean(weak)) < 0.99


# ---------------------------------------------------------------------------
# 8. Gradient correctness (D=8, K=3)
# ---------------------------------------------------------------------------

def test_c8_gradient_correctness():
    rng = np.random.default_rng(808)
    d, k, n = 8, 3, 12

    x = rng.standard_normal((n, d))
    y = rng.integers(0, k, n)
    w = rng.standard_normal((k, d)) * 0.4
    b = rng.standard_normal(k) * 0.4
    _, gw, gb = softmax_ce_loss_and_grads(w, b, x, y)
    fw = _fd_grad(lambda: softmax_ce_loss_and_grads(w, b, x, y)[0], w)
    fb = _fd_grad(lambda: softmax_ce_loss_and_grads(w, b, x, y)[0], b)
    assert np.max(np.abs(gw - fw)) / np.max(np.abs(fw)) < 1e-4
    assert np.max(np.abs(gb - fb)) / np.max(np.abs(fb)) < 1e-4

    ym = rng.standard_normal((n, d))
    m = rng.standard_normal((d, d)) * 0.4
    c = rng.standard_normal(d) * 0.4
    _, gm, gc = mse_loss_and_grads(m, c, x, ym)
    fm = _fd_grad(lambda: mse_loss_and_grads(m, c, x, ym)[0], m)
    fc = _fd_grad(lambda: mse_loss_and_grads(m, c, x, ym)[0], c)
    assert np.max(np.abs(gm - fm)) / np.max(np.abs(fm)) < 1e-4
    assert np.max(np.abs(gc - fc)) / np.max(np.abs(fc)) < 1e-4


# ---------------------------------------------------------------------------
# 9. Scoring throughput and worker bit-identity
# ---------------------------------------------------------------------------

def test_c9_scoring_throughput():
    import os

    spec = SyntheticDatasetSpec(n_subjects=1000, images_per_subject=3, dim=512,
                                intra_subject_noise=0.1, seed=9)
    manifest, store = gen_embeddings(spec)
    store = apply_filter_to_store(
        store, SyntheticFilterSpec(kind="affine", strength=0.5, seed=90), "f9"
    )
    protocol = build_protocol(manifest, ProtocolMode("fvo", "f9"))
    assert protocol.n_impostor == 8_991_000

    workers = min(8, os.cpu_count() or 1)
    t0 = time.monotonic()
    multi = score_protocol(protocol, store, workers=workers)
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0, elapsed

    single = score_protocol(protocol, store, workers=1)
    assert np.array_equal(single.genuine, multi.genuine)
    assert np.array_equal(single.impostor, multi.impostor)


# ---------------------------------------------------------------------------
# 10. Pipeline determinism (content hash over the report bundle)
# ---------------------------------------------------------------------------

def _bundle_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_c10_pipeline_determinism(tmp_path):
    out = tmp_path / "bundle"
    doc = {
        "output_dir": str(out),
        "synth": {
            "n_subjects": 24,
            "images_per_subject": 3,
            "dim": 32,
            "intra_subject_noise": 0.08,
            "seed": 13,
            "filters": [
                {"filter_id": "fa", "kind": "affine", "strength": 1.0, "seed": 21},
                {"filter_id": "fb", "kind": "affine", "strength": 0.3, "seed": 22},
                {"filter_id": "fc", "kind": "noise", "sigma": 0.05, "seed": 23},
            ],
        },
        "filters": ["fa", "fb", "fc"],
        "fmr_targets": [1e-2],
        "seed": 4,
        "split_count": 2,
        "hist_bins": 40,
        "train": {
            "learning_rate": 0.03,
            "batch_size": 64,
            "max_epochs": 150,
            "patience": 30,
            "min_improvement": 1e-12,
        },
    }
    run_pipeline(RunConfig.from_dict(doc))
    first = _bundle_hash(out)
    assert (out / "reports" / "mitigation.json").exists()
    assert (out / "reports" / "metrics" / "ovo_all.json").exists()

    shutil.rmtree(out)
    run_pipeline(RunConfig.from_dict(doc))
    assert _bundle_hash(out) == first
