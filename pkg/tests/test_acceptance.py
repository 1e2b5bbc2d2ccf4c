"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected and repeated in the pytest terminal summary.
Criteria 8 and 9 train toy networks and take several minutes on one core.
"""

import json
import time
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from posefix.checks import check_gaussian_spots, check_loss_gradient, check_network_gradient, check_target_roundtrip
from posefix.cli import EXIT_OK, main
from posefix.core import ERROR_TYPES, InstanceContext, Pose, anchor_set
from posefix.evaluator import average_precision
from posefix.pipeline import parse_coco_ground_truth, parse_coco_results, result_entry
from posefix.refiner import RefinerConfig, ablate, evaluate_refiner, summarize_ablation, train
from posefix.similarity import ks, ks_radius, oks
from posefix.synthesis import SynthesisConfig, available_error_types, jitter_heavy_table, synthesize_keypoint
from posefix.taxonomy import classify_keypoint
from posefix.toy import ToyArrays, generate_toy_dataset

from conftest import coco_gt_dict, gt_from_poses, multi_person_context, shift_to_oks, still_person
from oracles import constraint_holds, interpolated_ap, oks_direct

REPORT: list[str] = []


def record(n, passed, detail):
    line = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    REPORT.append(line)
    print(line)
    return passed


def test_01_oks_oracle(spec):
    rng = np.random.default_rng(101)
    cases, expected = [], []
    for _ in range(10_000):
        gt = rng.uniform(0, 640, (17, 2))
        s = float(rng.uniform(5, 400))
        est = gt + rng.normal(0, s * rng.uniform(0.01, 0.3), (17, 2))
        vis = rng.random(17) < rng.uniform(0.3, 1.0)
        vis[int(rng.integers(17))] = True
        truth = Pose.from_arrays(gt, np.where(vis, 2, 0))
        cases.append((Pose.from_arrays(est, 2), truth, InstanceContext(truth, (), s)))
        expected.append(oks_direct(est.tolist(), gt.tolist(), vis.tolist(), s * s))
    # only the library call is timed
    t0 = time.perf_counter()
    got = [oks(e, t, c, spec)[0] for e, t, c in cases]
    elapsed = time.perf_counter() - t0
    worst = max(abs(a - b) for a, b in zip(got, expected))
    ok = worst < 1e-12 and elapsed < 5
    assert record(1, ok, f"OKS vs direct formula on 10^4 instances: max |diff| {worst:.2e} (< 1e-12), {elapsed:.2f}s (< 5s)")


def test_02_ks_radius_inversion():
    rng = np.random.default_rng(202)
    worst = 0.0
    for k in (0.85, 0.5, 0.1):
        for _ in range(100):
            s, kap = float(rng.uniform(1, 500)), float(rng.uniform(0.01, 0.3))
            worst = max(worst, abs(ks(ks_radius(k, s, kap), s, kap) - k) / k)
    assert record(2, worst < 1e-10, f"ks(ks_radius(k)) = k over 3 x 100 (s, kappa): max rel err {worst:.2e} (< 1e-10)")


@pytest.fixture(scope="module")
def synthesized(spec):
    """At least 10^4 accepted samples of every status on multi-person fixtures."""
    rng = np.random.default_rng(303)
    cfg = SynthesisConfig()
    counts = Counter()
    samples = []
    fallbacks = 0
    t0 = time.perf_counter()
    while min(counts[t] for t in ERROR_TYPES) < 10_000:
        ctx = multi_person_context(rng, n_neighbors=int(rng.integers(1, 4)), spacing=float(rng.uniform(12, 40)))
        for j in np.flatnonzero(ctx.target.labeled):
            for t in available_error_types(anchor_set(ctx, spec, int(j))):
                if counts[t] >= 10_000:
                    continue
                out = synthesize_keypoint(t, ctx, spec, int(j), cfg, rng)
                if out.fell_back:
                    fallbacks += 1
                    continue
                counts[t] += 1
                samples.append((ctx, int(j), t, out.keypoint))
    return samples, counts, fallbacks, time.perf_counter() - t0


def test_03_synthesis_constraints(synthesized):
    samples, counts, fallbacks, elapsed = synthesized

    def lists(p):
        return [tuple(p.xy[i]) if p.labeled[i] else None for i in range(17)]

    bad = 0
    for ctx, j, t, kp in samples:
        tl, nl = lists(ctx.target), [lists(n) for n in ctx.neighbors]
        bad += not constraint_holds(kp.x, kp.y, t.value, j, tl, nl, ctx.scale_s)
    per_type = ", ".join(f"{t.value} {counts[t]}" for t in ERROR_TYPES)
    ok = bad == 0 and min(counts.values()) >= 10_000 and elapsed < 30
    assert record(3, ok, f"{len(samples)} accepted ({per_type}); {bad} violate band/nearest-anchor checks; {fallbacks} fallbacks; synthesis {elapsed:.1f}s (< 30s)")


def test_04_synthesis_taxonomy_round_trip(synthesized, spec):
    samples = synthesized[0]
    wrong = sum(classify_keypoint(kp, ctx, spec, j) is not t for ctx, j, t, kp in samples)
    assert record(4, wrong == 0, f"classify_keypoint recovers the synthesized status for {len(samples) - wrong}/{len(samples)} samples")


def test_05_codec_round_trips():
    rt = check_target_roundtrip(10_000, seed=5)
    gs = check_gaussian_spots()
    ok = rt.passed and gs.passed
    assert record(5, ok, f"soft_argmax(target_encode(c)) max err {rt.value:.1e} (< 1e-9) on 10^4 coords; gaussian spots err {gs.value:.1e} (< 1e-6)")


def test_06_gradient_checks():
    t0 = time.perf_counter()
    results = [check_loss_gradient(6, "integral"), check_loss_gradient(6, "mse")]
    for mode in ("C2F", "C2F_LH_only", "C2F_LC_only", "C2C", "F2F"):
        results.append(check_network_gradient(6, loss_mode=mode, dtype="float64"))
    results.append(check_network_gradient(6, loss_mode="C2F", dtype="float32"))
    elapsed = time.perf_counter() - t0
    worst64 = max(r.value for r in results if "float32" not in r.name)
    worst32 = results[-1].value
    ok = all(r.passed for r in results) and worst64 < 1e-5 and worst32 < 1e-3 and elapsed < 60
    assert record(6, ok, f"{len(results)} finite-difference checks: max rel err {worst64:.1e} at 64-bit (< 1e-5), {worst32:.1e} at 32-bit (< 1e-3), {elapsed:.1f}s (< 60s)")


def test_07_evaluator_fixtures(spec):
    def evaluate(gt, entries):
        return average_precision(parse_coco_ground_truth(gt, spec), parse_coco_results(entries, spec), spec)

    p = still_person(0)
    single = evaluate(gt_from_poses([(1, p)]), [result_entry(1, shift_to_oks(p, 0.9), score=1.0)])["AP"]

    # OKS 1.0 / far false positive / OKS 0.7 / OKS 0.3, scores descending;
    # hand-computed PR gives 56/101 at thresholds <= .70 and 34/101 above, mean 45/101
    a, b, c = still_person(1), still_person(2), still_person(3)
    entries = [
        result_entry(1, a, score=0.9),
        result_entry(1, a.translated(-250.0, 0.0), score=0.85),
        result_entry(2, shift_to_oks(b, 0.7), score=0.8),
        result_entry(3, shift_to_oks(c, 0.3), score=0.7),
    ]
    micro = evaluate(gt_from_poses([(1, a), (2, b), (3, c)]), entries)["AP"]
    hand = 45 / 101
    oracle = (5 * interpolated_ap([1, 0, 1, 0], 3) + 5 * interpolated_ap([1, 0, 0, 0], 3)) / 10
    # "exactly" up to float rounding in the 101-point mean
    ok = abs(single - 0.9) < 1e-12 and abs(micro - hand) < 1e-12 and abs(oracle - hand) < 1e-12
    assert record(7, ok, f"single OKS-0.9 detection AP {single:.15f} (0.9); micro-dataset AP {micro:.15f} (hand {hand:.15f})")


TOY_SEED = 11


@pytest.fixture(scope="module")
def toy_benchmark(spec):
    table = jitter_heavy_table(spec)
    tr = ToyArrays.stack(generate_toy_dataset(2000, spec, table, seed=TOY_SEED))
    ev = ToyArrays.stack(generate_toy_dataset(200, spec, table, seed=TOY_SEED, start=2000))
    return tr, ev


@pytest.mark.slow
def test_08_toy_refinement(toy_benchmark, spec):
    tr, ev = toy_benchmark
    t0 = time.perf_counter()
    cfg = RefinerConfig(seed=0)
    res = train(tr, cfg, spec)
    r = evaluate_refiner(res.params, ev, cfg, spec)
    elapsed = time.perf_counter() - t0
    gain = r["refined_oks"] - r["input_oks"]
    ok = gain >= 0.05 and elapsed < 15 * 60
    assert record(
        8,
        ok,
        f"C2F on 2000 toy samples, {cfg.epochs} epochs: held-out OKS {r['input_oks']:.4f} -> {r['refined_oks']:.4f} (gain {gain:+.4f}, need >= 0.05), {elapsed / 60:.1f} min (< 15)",
    )


ABLATION_TRAIN = 600  # reduced budget: 15 trainings must fit beside criterion 8
ABLATION_EPOCHS = 4


@pytest.mark.slow
def test_09_ablation_direction(toy_benchmark, spec):
    tr, ev = toy_benchmark
    base = replace(RefinerConfig(), epochs=ABLATION_EPOCHS)
    modes = ["C2F", "C2F_LH_only", "C2F_LC_only", "C2C", "F2F"]
    rows = ablate(tr.subset(np.arange(ABLATION_TRAIN)), ev, base, modes, (0, 1, 2), spec)
    summary = {s["mode"]: s for s in summarize_ablation(rows)}
    mean = {m: summary[m]["refined_oks_mean"] for m in modes}
    for m in modes:
        print(f"  {m:<12} mean refined OKS {mean[m]:.4f} +- {summary[m]['refined_oks_std']:.4f}")
    orderings = {
        "C2F >= C2F_LH_only": mean["C2F"] >= mean["C2F_LH_only"],
        "C2F_LH_only >= C2C": mean["C2F_LH_only"] >= mean["C2C"],
        "C2F >= F2F": mean["C2F"] >= mean["F2F"],
    }
    held = ", ".join(f"{k} {'holds' if v else 'INVERTED'}" for k, v in orderings.items())
    table = " ".join(f"{m}={mean[m]:.4f}" for m in modes)
    # only a C2C win by more than 0.01 fails the suite; the other orderings are reported
    ok = mean["C2C"] - mean["C2F"] <= 0.01
    assert record(9, ok, f"3 seeds, {ABLATION_TRAIN} samples x {ABLATION_EPOCHS} epochs each: {table}; {held}")


def test_10_end_to_end_determinism(tmp_path, monkeypatch):
    gt = json.dumps(coco_gt_dict(seed=21, n_images=5, people=3))
    artifacts = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        (d / "gt.json").write_text(gt)
        monkeypatch.chdir(d)
        codes = [
            main(["synthesize", "--gt", "gt.json", "--seed", "42", "--out", "syn.json"]),
            main(["diagnose", "--gt", "gt.json", "--dt", "syn.json", "--labels", "syn.json.labels.json", "--out", "diag.json", "--csv", "diag.csv"]),
            main(["evaluate", "--gt", "gt.json", "--dt", "syn.json", "--json", "eval.json", "--csv", "eval.csv"]),
        ]
        assert codes == [EXIT_OK] * 3
        artifacts.append({p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "gt.json"})
    same = artifacts[0] == artifacts[1]
    matched = json.loads(artifacts[0]["diag.json"])["recorded_counts_match"]
    ok = same and matched and len(artifacts[0]) == 9
    assert record(10, ok, f"synthesize -> diagnose -> evaluate twice: {len(artifacts[0])} artifacts byte-identical: {same}; diagnose reproduces labels: {matched}")
