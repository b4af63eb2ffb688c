"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL ...`` line (shown even without
``-s``). The two training criteria are marked slow; deselect with
``-m "not slow"``.
"""

import json
import math
import os
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch

from scanqa.appearance import CSS21_COLORS, color_qa_to_records, generate_color_qa, nearest_named_color
from scanqa.benchmark import SyntheticSceneSpec, generate_synthetic_benchmark
from scanqa.cli import load_config, main as cli_main
from scanqa.dataset import (QUESTION_TYPES, AnswerSubmission, QARecord, QuestionTypeLexicon, accuracy,
                            classify_question_type, correct_answers, read_jsonl, reject_easy_question,
                            write_jsonl)
from scanqa.geometry import AABB, PECodebook, fps, iou_3d, nms_3d, positional_encode, spatial_vector
from scanqa.scene import compute_extents, export_ply, load_ply
from scanqa.training import TrainConfig, build_report, evaluate, train

from conftest import random_scene
from fusion_helpers import finite_difference_check, inputs, object_scene, relative_error, small_model
from robot_corpus import ROBOT_CASES
from test_dataset import random_record
from test_geometry import nms_oracle, pe_oracle, prop, random_box, spatial_oracle


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n}: {detail}"
    return emit


def test_metric_conformance(verdict):
    t0 = time.perf_counter()
    got = []
    for k in range(11):
        answers = [AnswerSubmission("red", "yes", f"a{i}") for i in range(k)]
        answers.append(AnswerSubmission("blue", "yes", "other"))
        got.append(accuracy("red", QARecord("q", "s", "what color", answers)))
    expected = [min(k / 2, 1.0) for k in range(11)]
    dt = time.perf_counter() - t0
    verdict(1, got == expected and dt < 1.0, f"scores {got[:4]}... exact={got == expected}, {dt * 1e3:.1f} ms")


def test_positional_encoding_conformance(verdict):
    rng = np.random.default_rng(2)
    worst, worst_norm = 0.0, 0.0
    for _ in range(1000):
        v = rng.uniform(-5, 5, 12)
        d = int(rng.choice([2, 4, 8, 16]))
        enc = positional_encode(v, PECodebook(d))
        worst = max(worst, float(np.abs(enc - np.array(pe_oracle(v, d, 1000.0))).max()))
        pairs = (enc.reshape(12, d) ** 2).sum(axis=1)
        worst_norm = max(worst_norm, float(np.abs(pairs - d / 2).max()))
    verdict(2, worst <= 1e-12 and worst_norm <= 1e-9,
            f"max |PE - direct| = {worst:.1e}, max |sum sin^2+cos^2 - d/2| = {worst_norm:.1e}")


def test_spatial_vector_scale_invariance(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        pts = rng.normal(size=(40, 3)) * 3 + rng.normal(size=3) * 5
        box = AABB.from_points(pts[rng.choice(40, 6, replace=False)])
        base = spatial_vector(box, compute_extents(pts))
        assert np.allclose(base, spatial_oracle(box, compute_extents(pts)), atol=1e-12)
        for lam in (0.1, 1.0, 17.3):
            scaled_box = AABB.from_points(np.array([box.lo, box.hi]) * lam)
            scaled = spatial_vector(scaled_box, compute_extents(pts * lam))
            worst = max(worst, float(np.abs(scaled - base).max()))
    verdict(3, worst <= 1e-9, f"max component change {worst:.1e} over 200 boxes x 3 scales")


def _mc_iou(a, b, rng, n=1_000_000, chunk=250_000):
    lo = np.minimum(a.lo, b.lo)
    hi = np.maximum(a.hi, b.hi)
    inter = union = 0
    for _ in range(n // chunk):
        pts = lo + rng.random((chunk, 3)) * (hi - lo)
        in_a = ((pts >= a.lo) & (pts <= a.hi)).all(axis=1)
        in_b = ((pts >= b.lo) & (pts <= b.hi)).all(axis=1)
        inter += int((in_a & in_b).sum())
        union += int((in_a | in_b).sum())
    return inter / union if union else 0.0


def test_geometry_kernels(verdict):
    rng = np.random.default_rng(4)
    iou_err = 0.0
    for _ in range(200):
        a, b = random_box(rng), random_box(rng)
        iou_err = max(iou_err, abs(iou_3d(a, b) - _mc_iou(a, b, rng)))

    nms_ok = 0
    for _ in range(100):
        props = [prop(random_box(rng), float(rng.choice([0.3, 0.5, rng.random()])))
                 for _ in range(int(rng.integers(0, 51)))]
        thr = float(rng.uniform(0.05, 0.7))
        nms_ok += nms_3d(props, thr) == [props[i] for i in nms_oracle(props, thr)]

    square = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
    best = max(np.linalg.norm(square[i] - square[j]) for i in range(4) for j in range(i + 1, 4))
    got = fps(square, 2)
    fps_ok = math.isclose(float(np.linalg.norm(square[got[0]] - square[got[1]])), best)

    verdict(4, iou_err <= 0.01 and nms_ok == 100 and fps_ok,
            f"IoU max |exact - MC(1e6)| = {iou_err:.4f}; NMS {nms_ok}/100 identical; FPS square diagonal {fps_ok}")


def test_gradient_correctness(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    model, vocab = small_model(d=8, layers=2, heads=2, init_std=0.3)
    scenes = [object_scene(rng, k=3, scene_id=f"s{i}") for i in range(3)]
    qb, sb, _ = inputs(model, vocab, scenes)
    target = torch.softmax(torch.as_tensor(rng.normal(size=(3, 5))), dim=-1)
    rows = finite_difference_check(model, qb, sb, target, 240, rng)
    errs = [relative_error(a, n, floor=1e-6) for _, _, a, n in rows]
    n_scales = sum(name == "scales" for name, *_ in rows)
    dt = time.perf_counter() - t0
    verdict(5, len(rows) >= 200 and n_scales == 12 and max(errs) < 1e-4 and dt < 120,
            f"{len(rows)} params ({n_scales} scales), max rel err {max(errs):.1e}, {dt:.1f} s")


def test_color_pipeline(verdict):
    rng = np.random.default_rng(6)
    refs = np.array([CSS21_COLORS[n] for n in sorted(CSS21_COLORS)], dtype=np.int64)
    names = sorted(CSS21_COLORS)
    triples = rng.integers(0, 256, (10_000, 3))
    mismatches = 0
    for t in triples:
        d = ((refs - t) ** 2).sum(axis=1)
        mismatches += nearest_named_color(t).name != names[int(np.argmin(d))]

    bench = generate_synthetic_benchmark(SyntheticSceneSpec(seed=16), 100)
    replay_bad, structural, n_q = 0, 0, 0
    for scene in bench.scenes:
        objs = bench.objects[scene.scene_id]
        for rec in generate_color_qa(scene):
            n_q += 1
            cls = rec.question.split()[-1].rstrip("?")
            structural += cls in ("wall", "floor", "ceiling")
            counts = Counter(o.color for o in objs if o.class_name == cls)
            ranked = sorted(counts, key=lambda c: (-counts[c], c))[:2]
            replay_bad += rec.answer != " and ".join(ranked)
    verdict(6, mismatches == 0 and replay_bad == 0 and structural == 0 and n_q > 0,
            f"nearest color mismatches {mismatches}/10000; color QA {n_q - replay_bad}/{n_q} match replay; "
            f"wall/floor/ceiling questions {structural}")


def test_question_filters(verdict):
    agree = sum(reject_easy_question(q) == label for q, label in ROBOT_CASES)
    bench = generate_synthetic_benchmark(SyntheticSceneSpec(seed=17), 200)
    corpus = [r.question for r in bench.records]
    corpus += [c.question for s in bench.scenes[:50] for c in generate_color_qa(s)]
    corpus += [q for q, _ in ROBOT_CASES]
    lex = QuestionTypeLexicon.default()
    bad = 0
    for q in corpus:
        got = classify_question_type(q, lex)
        hits = [t for t in QUESTION_TYPES if classify_question_type(q, QuestionTypeLexicon({t: lex.keywords[t]}))]
        bad += got != (hits[0] if hits else None)
    verdict(7, agree == len(ROBOT_CASES) == 30 and bad == 0,
            f"robot checker {agree}/{len(ROBOT_CASES)} agree; question type single first-match label on "
            f"{len(corpus) - bad}/{len(corpus)} corpus questions")


# -- training criteria ------------------------------------------------------

BENCH_SCENES = 200
SEEDS = (0, 1, 2)
DESK_CONFIG = load_config(Path(__file__).resolve().parents[1] / "configs" / "desk_scale.txt")


def _bench_config(ablation, seed):
    torch.set_num_threads(min(4, os.cpu_count() or 1))
    return TrainConfig.from_dict({**DESK_CONFIG, "ablation": ablation, "seed": seed})


@pytest.mark.slow
def test_desk_scale_end_to_end(verdict):
    t0 = time.perf_counter()
    rows = []
    for seed in SEEDS:
        bench = generate_synthetic_benchmark(SyntheticSceneSpec(seed=seed), BENCH_SCENES)
        scenes = bench.scene_map()
        test = [r for r in bench.records if r.split == "test"]
        spatial = [r for r in test if "taller" in r.question]
        acc = {}
        for ablation in ("full", "qonly", "geo_q"):
            res = train(bench.records, scenes, _bench_config(ablation, seed))
            acc[ablation] = (evaluate(res, test, scenes).overall, evaluate(res, spatial, scenes).overall)
        rows.append((len(bench.records), len(spatial), acc))
    dt = time.perf_counter() - t0
    mean = lambda a, i: float(np.mean([r[2][a][i] for r in rows]))
    gap_full = mean("full", 0) - mean("qonly", 0)
    gap_geo = mean("geo_q", 1) - mean("qonly", 1)
    per_seed = "; ".join(f"seed {s}: n={n}, full {a['full'][0]:.3f}, qonly {a['qonly'][0]:.3f}, "
                         f"geo_q {a['geo_q'][0]:.3f}, "
                         f"geo_q taller {a['geo_q'][1]:.3f} vs {a['qonly'][1]:.3f} (n={m})"
                         for s, (n, m, a) in zip(SEEDS, rows))
    verdict(8, gap_full >= 0.15 and gap_geo >= 0.10 and dt < 15 * 60,
            f"full - qonly = {100 * gap_full:+.1f} pts (need +15), geo_q - qonly on taller = "
            f"{100 * gap_geo:+.1f} pts (need +10), {dt / 60:.1f} min [{per_seed}]")


@pytest.mark.slow
def test_appearance_pretraining_analog(verdict):
    bench = generate_synthetic_benchmark(SyntheticSceneSpec(seed=9), BENCH_SCENES)
    scenes = bench.scene_map()
    split_of = {r.scene_id: r.split for r in bench.records}
    records = []
    for s in bench.scenes:
        records += color_qa_to_records(generate_color_qa(s), split=split_of[s.scene_id])
    test = [r for r in records if r.split == "test"]
    train_counts = Counter(a for r in records if r.split == "train" for a in correct_answers(r))
    top = min(train_counts, key=lambda a: (-train_counts[a], a))
    baseline = build_report(test, {r.question_id: top for r in test}).overall
    res = train(records, scenes, _bench_config("app_q", 9))
    got = evaluate(res, test, scenes).overall
    verdict(9, got - baseline >= 0.10,
            f"app_q {got:.3f} vs most-frequent '{top}' {baseline:.3f} on {len(test)} color questions "
            f"({100 * (got - baseline):+.1f} pts, need +10)")


# -- reproducibility and formats -------------------------------------------

def test_determinism(verdict, tmp_path, capsys):
    for run in ("a", "b"):
        assert cli_main(["gen-bench", "--scenes", "8", "--seed", "3", "--out", str(tmp_path / run / "bench")]) == 0
    bench = tmp_path / "a" / "bench"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 2, "batch_size": 8, "points_per_object": 16, "scene_points": 32,
                               "model": {"d_hidden": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32,
                                         "geo_width": 8, "app_width": 8, "pe_d_model": 4}}))
    for run in ("a", "b"):
        assert cli_main(["train", "--dataset", str(bench / "qa.jsonl"), "--scenes", str(bench / "scenes"),
                         "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / run / "ck")]) == 0
    capsys.readouterr()
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    same = [f for f in files if (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()]
    verdict(10, len(files) > 10 and same == files, f"{len(same)}/{len(files)} corpus and checkpoint files identical")


def test_format_round_trips(verdict, tmp_path):
    rng = np.random.default_rng(11)
    ply_ok = 0
    for k in range(100):
        s = random_scene(rng, dtype=np.float64 if k % 2 else np.float32, scene_id=f"scene{k}")
        export_ply(s, tmp_path / f"{k}.ply")
        back = load_ply(tmp_path / f"{k}.ply")
        ply_ok += back == s and back.xyz.tobytes() == s.xyz.tobytes()
    records = [random_record(rng, k) for k in range(100)]
    write_jsonl(records, tmp_path / "qa.jsonl")
    back = read_jsonl(tmp_path / "qa.jsonl")
    jsonl_ok = sum(a.to_dict() == b.to_dict() for a, b in zip(records, back)) if len(back) == 100 else 0
    verdict(11, ply_ok == 100 and jsonl_ok == 100, f"PLY {ply_ok}/100 lossless, JSONL {jsonl_ok}/100 lossless")
