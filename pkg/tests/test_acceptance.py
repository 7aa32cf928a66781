"""Acceptance suite: each test checks one release criterion at its stated
tolerance and prints a single pass/fail line (run with -s to see them live).
"""

import itertools
import json
import math
import shutil
import subprocess
import threading
import time
from pathlib import Path

import numpy as np
import pytest

import crossmine.ssm as ssm_module
from crossmine.al import SimulatedOracle
from crossmine.detector import (
    DetectorState,
    RegionProposal,
    detect,
    evaluate_map,
    extract_features,
    loss_cls,
    loss_loc,
)
from crossmine.engine import MiningConfig, MiningEngine, run as run_engine
from crossmine.geometry import BoundingBox, iou
from crossmine.ssm import (
    ConsistencyRecord,
    consistency_score,
    cross_image_validate,
    solve_pseudo_labels,
    update_weights,
)
from crossmine.synthbench import SceneSpec, generate_dataset
from crossmine.detector import LabelVector


def _report(criterion: str, passed: bool, detail: str = "") -> None:
    mark = "PASS" if passed else "FAIL"
    print(f"[{mark}] {criterion}" + (f" -- {detail}" if detail else ""))


def _random_state(m, rng, scale=0.8):
    state = DetectorState.initial(m)
    state.classifier[:] = rng.normal(0.0, scale, state.classifier.shape)
    state.regressor[:] = rng.normal(0.0, scale / 4, state.regressor.shape)
    return state


# ---------------------------------------------------------------- criterion 1


def _oracle_solve(phi, v):
    """Exhaustive 2^m enumeration filtered by the at-most-one-positive rule."""
    m = len(phi)
    best_key, best_vec = None, None
    for bits in itertools.product((-1, 1), repeat=m):
        y = np.array(bits)
        if np.abs(y + 1).sum() > 2:
            continue
        cost = 0.0
        for j in range(m):
            if v[j]:
                cost += -math.log(phi[j]) if y[j] == 1 else -math.log1p(-phi[j])
        positive = int(np.flatnonzero(y == 1)[0]) if (y == 1).any() else -1
        key = (cost, 0 if positive == -1 else 1, positive)
        if best_key is None or key < best_key:
            best_key, best_vec = key, y
    return best_vec


def test_criterion_1_solver_oracle_equivalence():
    """Pseudo-label solver equals exhaustive enumeration on 1000 instances."""
    rng = np.random.default_rng(2024)
    started = time.time()
    for _ in range(1000):
        m = int(rng.integers(2, 7))
        phi = rng.uniform(0.01, 0.99, m)
        v = rng.integers(0, 2, m)
        if not v.any():
            v[int(rng.integers(0, m))] = 1
        record = ConsistencyRecord(
            proposal_id="p", j_star=int(np.argmax(phi)), phi=phi,
            f_value=0.3, s_score=0.5, v=v.astype(np.int8), trace=[],
        )
        label = solve_pseudo_labels(record)
        expected = _oracle_solve(phi, v)
        if not np.array_equal(label.values, expected):
            _report("criterion 1 (solver-oracle equivalence)", False)
            assert False, f"solver {label.values} != oracle {expected} for phi={phi}, v={v}"
    elapsed = time.time() - started
    passed = elapsed < 5.0
    _report("criterion 1 (solver-oracle equivalence)", passed,
            f"1000 instances exact in {elapsed:.2f}s")
    assert passed, f"took {elapsed:.2f}s (limit 5s)"


# ---------------------------------------------------------------- criterion 2


def test_criterion_2_threshold_and_validation_arithmetic(monkeypatch):
    """Eq-level arithmetic: hand values to 1e-12 and exact trace replay."""
    ok = update_weights(0.20, 0.45) == 1
    ok &= update_weights(0.50, 0.45) == 0
    ok &= update_weights(0.30, 0.30) == 1

    dataset = generate_dataset(
        SceneSpec(num_categories=3, train_labeled=8, unlabeled=4, test=3, seed=5)
    )
    labeled = dataset.split("train-labeled")
    source = labeled[0]
    validation = [img for img in labeled[1:] if not img.has_category(0)][:1]
    box = source.objects[0].box
    proposal = RegionProposal(
        id="cand", image_id=source.id, box=box,
        features=extract_features(source, box),
    )
    config = MiningConfig(lambda_pace=0.9, iou_gamma=0.5, validation_images=5)

    phis = [0.8, 0.9, 0.6]

    def fake_propose(image, state):
        placed = fake_propose.placed
        third_x0 = max(0, placed.x_min - int(0.3 * placed.width))
        boxes = [
            placed,
            BoundingBox(0, 0, 4, 4),
            BoundingBox(third_x0, placed.y_min, third_x0 + placed.width, placed.y_max),
        ]
        return [
            RegionProposal(id=f"f{k}", image_id=image.id, box=b,
                           features=np.array([phis[k]]))
            for k, b in enumerate(boxes)
        ]

    real_paste = ssm_module.paste

    def tracking_paste(src, crop, target, seed):
        composited, placed = real_paste(src, crop, target, seed)
        fake_propose.placed = placed
        return composited, placed

    monkeypatch.setattr(ssm_module, "propose", fake_propose)
    monkeypatch.setattr(ssm_module, "paste", tracking_paste)
    monkeypatch.setattr(ssm_module, "classify", lambda s, f: np.full(3, float(f[0])))

    f_value, trace = cross_image_validate(
        proposal, source, 0, validation, DetectorState.initial(3), config, seed=3
    )
    ok &= abs(f_value - 0.42) <= 1e-12

    monkeypatch.undo()
    rng = np.random.default_rng(8)
    state = _random_state(3, rng, scale=0.6)
    replay_exact = True
    for image in dataset.split("unlabeled")[:3]:
        cand_box = image.objects[0].box
        cand = RegionProposal(
            id=f"{image.id}:c", image_id=image.id, box=cand_box,
            features=extract_features(image, cand_box),
        )
        record = consistency_score(cand, image, state, labeled, config, seed=17)
        terms = [
            0.0 if entry.empty or entry.omega_size == 0
            else sum(o.phi for o in entry.overlaps) / entry.omega_size
            for entry in record.trace
        ]
        replay_exact &= abs(float(np.mean(terms)) - record.s_score) <= 1e-12
        replay_exact &= abs(
            config.lambda_pace * float(np.mean(terms)) - record.f_value
        ) <= 1e-12
    ok &= replay_exact
    _report("criterion 2 (threshold rule + validation arithmetic)", bool(ok),
            f"f=0.42 hand value, trace replay exact")
    assert ok


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_gradient_correctness():
    """Analytic gradients match central finite differences (rel err <= 1e-4)."""
    dataset = generate_dataset(
        SceneSpec(num_categories=4, train_labeled=6, unlabeled=4, test=3, seed=11)
    )
    rng = np.random.default_rng(300)
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(2, 6))
        state = _random_state(m, rng)
        image = dataset.images[int(rng.integers(0, len(dataset.images)))]
        obj = image.objects[int(rng.integers(0, len(image.objects)))]
        feats = extract_features(image, obj.box)
        values = -np.ones(m, dtype=int)
        values[int(rng.integers(0, m))] = 1 if rng.random() < 0.7 else -1
        label = LabelVector(values, "ground-truth")
        _, grad = loss_cls(state, feats, label)
        for _ in range(2):
            j = int(rng.integers(0, m))
            i = int(rng.integers(0, feats.shape[0] + 1))
            plus = _random_state(m, rng)
            plus.classifier = state.classifier.copy()
            plus.classifier[j, i] += h
            up, _ = loss_cls(plus, feats, label)
            plus.classifier[j, i] -= 2 * h
            down, _ = loss_cls(plus, feats, label)
            numeric = (up.sum() - down.sum()) / (2 * h)
            denom = max(abs(numeric), abs(grad[j, i]), 1e-8)
            worst = max(worst, abs(grad[j, i] - numeric) / denom)
    for _ in range(100):
        state = _random_state(3, rng)
        image = dataset.images[int(rng.integers(0, len(dataset.images)))]
        feats = extract_features(image, image.objects[0].box)
        target = rng.normal(0, 0.5, 4)
        _, grad = loss_loc(state, feats, target)
        for _ in range(2):
            r = int(rng.integers(0, 4))
            i = int(rng.integers(0, feats.shape[0] + 1))
            plus = state.regressor.copy()
            plus[r, i] += h
            minus = state.regressor.copy()
            minus[r, i] -= h
            sp = DetectorState(state.classifier, plus, feats.shape[0], 3)
            sm = DetectorState(state.classifier, minus, feats.shape[0], 3)
            numeric = (loss_loc(sp, feats, target)[0] - loss_loc(sm, feats, target)[0]) / (2 * h)
            denom = max(abs(numeric), abs(grad[r, i]), 1e-8)
            worst = max(worst, abs(grad[r, i] - numeric) / denom)
    passed = worst <= 1e-4
    _report("criterion 3 (gradient correctness)", passed,
            f"worst relative error {worst:.2e}")
    assert passed


# ---------------------------------------------------------------- criterion 4


def _brute_force_ap(detections, gt_boxes):
    total_gt = sum(len(v) for v in gt_boxes.values())
    if total_gt == 0:
        return None
    taken = {img: [False] * len(boxes) for img, boxes in gt_boxes.items()}
    hits = []
    for _, image_id, box in detections:
        best, best_idx = 0.0, -1
        for idx, gt in enumerate(gt_boxes.get(image_id, [])):
            if taken[image_id][idx]:
                continue
            value = iou(box, gt)
            if value > best:
                best, best_idx = value, idx
        if best >= 0.5:
            taken[image_id][best_idx] = True
            hits.append(True)
        else:
            hits.append(False)
    if not detections:
        return 0.0
    recalls, precisions = [], []
    tp = 0
    for rank, hit in enumerate(hits, start=1):
        tp += int(hit)
        recalls.append(tp / total_gt)
        precisions.append(tp / rank)
    ap, prev = 0.0, 0.0
    for r in sorted(set(recalls)):
        ap += (r - prev) * max(p for rec, p in zip(recalls, precisions) if rec >= r)
        prev = r
    return ap


def test_criterion_4_map_oracle():
    """evaluate_map matches brute-force AP on 50 random small scenes to 1e-9."""
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(50):
        spec = SceneSpec(
            num_categories=3, train_labeled=3, unlabeled=3, test=3,
            seed=int(rng.integers(0, 10_000)),
        )
        data = generate_dataset(spec)
        state = _random_state(3, rng, scale=1.2)
        images = data.split("test")
        aps, mean_ap = evaluate_map(state, images)
        dets = {j: [] for j in range(3)}
        gts = {j: {img.id: [] for img in images} for j in range(3)}
        for img in sorted(images, key=lambda im: im.id):
            for d in detect(state, img):
                dets[d.best_category].append((d.confidence, img.id, d.box))
            for obj in img.objects:
                gts[obj.category][img.id].append(obj.box)
        expected = {}
        for j in range(3):
            ap = _brute_force_ap(
                sorted(dets[j], key=lambda d: (-d[0], d[1], d[2])), gts[j]
            )
            if ap is not None:
                expected[j] = ap
        assert set(aps) == set(expected)
        for j in expected:
            worst = max(worst, abs(aps[j] - expected[j]))
        if expected:
            worst = max(worst, abs(mean_ap - float(np.mean(list(expected.values())))))
    passed = worst <= 1e-9
    _report("criterion 4 (mAP oracle)", passed, f"worst deviation {worst:.2e}")
    assert passed


# ---------------------------------------------------------------- criterion 5


def _benchmark(seed):
    return generate_dataset(
        SceneSpec(num_categories=5, train_labeled=200, unlabeled=300, test=100,
                  seed=seed)
    )


def _final_map(log):
    evaluations = [e for e in log.events if e["event"] == "evaluation"]
    return evaluations[-1]["map"]


def test_criterion_5_beats_random_selection():
    """Full engine vs random selection at a 30% annotation budget, 5 seeds."""
    started = time.time()
    finals = {"ssm": [], "rand": []}
    for seed in (101, 102, 103, 104, 105):
        dataset = _benchmark(seed)
        probe = MiningConfig.from_preset("desk", seed=seed)
        budget = int(round(
            0.3 * MiningEngine(probe, dataset, SimulatedOracle(dataset)).initial_annotations
        ))
        for strategy in ("ssm", "rand"):
            config = MiningConfig.from_preset(
                "desk", seed=seed, strategy=strategy, annotation_budget=budget
            )
            _, log = run_engine(config, dataset, SimulatedOracle(dataset))
            finals[strategy].append(_final_map(log))
    elapsed = time.time() - started
    mean_ssm = float(np.mean(finals["ssm"]))
    mean_rand = float(np.mean(finals["rand"]))
    gap = mean_ssm - mean_rand
    passed = gap >= 0.02 and elapsed <= 600
    _report(
        "criterion 5 (SSM+AL > RAND at equal budget)", passed,
        f"mean mAP ssm {mean_ssm:.4f} vs rand {mean_rand:.4f}, "
        f"gap {gap*100:+.2f} points over 5 seeds in {elapsed:.0f}s",
    )
    assert elapsed <= 600, f"runtime {elapsed:.0f}s exceeds 10 minutes"
    assert gap >= 0.02, (
        f"gap {gap*100:+.2f} mAP points < +2.00 required; "
        f"per-seed ssm {finals['ssm']} rand {finals['rand']}"
    )


# ---------------------------------------------------------------- criterion 6


def _positive_pseudo_assignments(log):
    seen = {}
    for event in log.events:
        if event["event"] != "pseudo-assigned":
            continue
        for entry in event["labels"]:
            if entry["category"] >= 0 and entry["proposal_id"] not in seen:
                seen[entry["proposal_id"]] = entry
    return list(seen.values())


def _assignment_correct(entry, dataset):
    image = dataset.image(entry["image_id"])
    box = BoundingBox(*entry["box"])
    return any(
        obj.category == entry["category"] and iou(box, obj.box) >= 0.5
        for obj in image.objects
    )


def test_criterion_6_cross_image_validation_beats_single_image_confidence():
    """Positive pseudo-label precision: cross-image validation vs own-confidence."""
    precisions = {"ssm": [], "spl": []}
    for seed in (201, 202, 203, 204, 205):
        dataset = generate_dataset(
            SceneSpec(num_categories=5, train_labeled=60, unlabeled=90, test=30,
                      seed=seed)
        )
        assignments = {}
        for strategy in ("ssm", "spl"):
            config = MiningConfig.from_preset(
                "desk", seed=seed, strategy=strategy, annotation_budget=0,
                batches_per_round=60,
            )
            _, log = run_engine(config, dataset, SimulatedOracle(dataset))
            assignments[strategy] = _positive_pseudo_assignments(log)
        count = min(len(assignments["ssm"]), len(assignments["spl"]))
        assert count > 0, f"seed {seed}: no positive pseudo-labels to compare"
        for strategy in ("ssm", "spl"):
            subset = assignments[strategy][:count]
            correct = sum(_assignment_correct(e, dataset) for e in subset)
            precisions[strategy].append(correct / count)
    mean_ssm = float(np.mean(precisions["ssm"]))
    mean_spl = float(np.mean(precisions["spl"]))
    margin = mean_ssm - mean_spl
    passed = mean_ssm > mean_spl
    _report(
        "criterion 6 (pseudo-label precision: cross-image > single-image)", passed,
        f"precision {mean_ssm:.3f} vs {mean_spl:.3f}, margin {margin:+.3f} "
        f"(per seed ssm {np.round(precisions['ssm'], 3).tolist()} "
        f"spl {np.round(precisions['spl'], 3).tolist()})",
    )
    assert passed, f"margin {margin:+.4f} not strictly positive"


# ---------------------------------------------------------------- criterion 7


def test_criterion_7_disposability_and_termination():
    """Ten seeded runs: every pseudo-label discarded in-batch, clean termination."""
    reasons = []
    for seed in range(301, 311):
        dataset = generate_dataset(
            SceneSpec(num_categories=3, train_labeled=20, unlabeled=16, test=6,
                      seed=seed)
        )
        config = MiningConfig.from_preset(
            "desk", seed=seed, annotation_batch=3, batches_per_round=4,
            rescore_every=2, images_per_rescore=4, score_top_per_image=3,
            warmup_steps=800, annotation_fraction=0.7, tau_low=0.2,
            annotation_budget=6,
        )
        _, log = run_engine(config, dataset, SimulatedOracle(dataset))
        log.validate()  # raises if any pseudo-label outlives its batch
        assigned = [e for e in log.events if e["event"] == "pseudo-assigned"]
        for event in assigned:
            discards = [
                e for e in log.events
                if e["event"] == "pseudo-discarded"
                and (e["round"], e["batch"]) == (event["round"], event["batch"])
            ]
            ids = {entry["proposal_id"] for entry in event["labels"]}
            assert discards and ids <= set(discards[0]["proposal_ids"])
        term = [e["reason"] for e in log.events if e["event"] == "termination"]
        assert len(term) == 1 and term[0] in ("empty-U", "budget-exhausted")
        reasons.append(term[0])
    _report("criterion 7 (disposability + termination)", True,
            f"10 runs terminated: {dict((r, reasons.count(r)) for r in set(reasons))}")


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_determinism_and_resume(tmp_path):
    """Byte-identical runlogs and checkpoint/resume suffix equality."""
    dataset = generate_dataset(
        SceneSpec(num_categories=3, train_labeled=24, unlabeled=20, test=8, seed=23)
    )
    config = MiningConfig.from_preset(
        "desk", seed=77, annotation_batch=3, batches_per_round=6, rescore_every=3,
        images_per_rescore=6, score_top_per_image=4, warmup_steps=1200,
        annotation_fraction=0.6, tau_low=0.2, annotation_budget=9,
    )
    run_dir = tmp_path / "full"
    _, log_a = run_engine(config, dataset, SimulatedOracle(dataset), run_dir)
    _, log_b = run_engine(config, dataset, SimulatedOracle(dataset))
    identical = log_a.to_jsonl() == log_b.to_jsonl()

    checkpoints = sorted((run_dir / "checkpoints").glob("round-*.json"))
    assert checkpoints, "no checkpoints written"
    resume_round = int(checkpoints[0].stem.split("-")[1]) + 1
    engine = MiningEngine.resume(checkpoints[0], dataset, SimulatedOracle(dataset))
    _, log_resumed = engine.run()
    expected_suffix = [e for e in log_a.events if e["round"] >= resume_round]
    suffix_equal = log_resumed.events == expected_suffix
    passed = identical and suffix_equal
    _report("criterion 8 (determinism + resume)", passed,
            f"byte-identical={identical}, resume-suffix-equal={suffix_equal}")
    assert passed


# ------------------------------------------------------- criterion 9 (secondary)


_FRONTEND = Path(__file__).resolve().parents[1] / "frontend"


@pytest.mark.skipif(
    shutil.which("node") is None or not (_FRONTEND / "dist" / "session.js").exists(),
    reason="frontend build or node runtime unavailable",
)
def test_criterion_9_ui_round_trip(tmp_path):
    """Scripted browser session labels a live queue; the engine's labeled
    pool reflects exactly those labels."""
    from crossmine import service

    dataset = generate_dataset(
        SceneSpec(num_categories=3, train_labeled=24, unlabeled=20, test=8, seed=23)
    )
    config = MiningConfig.from_preset(
        "desk", seed=77, annotation_batch=3, batches_per_round=6, rescore_every=3,
        images_per_rescore=6, score_top_per_image=4, warmup_steps=1200,
        annotation_fraction=0.6, tau_low=0.2, annotation_budget=2,
    )
    annotator = service.QueueAnnotator(tmp_path)
    stats = service.EngineStats()
    engine = MiningEngine(config, dataset, annotator, run_dir=tmp_path)
    engine.observer = service.stats_observer(stats)
    server = service.serve(annotator, stats, 0)
    port = server.server_address[1]
    server_thread = threading.Thread(target=server.serve_forever, daemon=True)
    server_thread.start()

    outcome = {}

    def run_engine_thread():
        try:
            outcome["result"] = engine.run()
        finally:
            stats.update(finished=True)
            annotator.close()

    engine_thread = threading.Thread(target=run_engine_thread)
    engine_thread.start()
    try:
        proc = subprocess.run(
            ["node", str(_FRONTEND / "dist" / "session.js"),
             f"http://127.0.0.1:{port}", "90"],
            capture_output=True, text=True, timeout=120,
        )
    finally:
        engine_thread.join(timeout=60)
        server.shutdown()
    assert proc.returncode == 0, proc.stderr
    session = json.loads(proc.stdout.strip().splitlines()[-1])
    assert session["saw_queue"], "scripted session never saw a nonempty queue"
    submitted = session["submitted"]
    assert submitted, "scripted session submitted no labels"
    assert "result" in outcome, "engine did not terminate"

    applied = engine.queue.applied
    assert len(applied) == len(submitted)
    mismatches = []
    for entry in submitted:
        result = applied.get(entry["request_id"])
        if result is None or result.label != entry["label"]:
            mismatches.append(entry)
    count_match = engine.annotations_used == len(submitted)
    passed = not mismatches and count_match
    _report(
        "criterion 9 (UI round-trip, secondary)", passed,
        f"{len(submitted)} labels submitted; pool count match={count_match}",
    )
    assert passed, f"mismatches: {mismatches}"
