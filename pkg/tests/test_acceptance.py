"""The twelve acceptance criteria, each at its stated tolerance.

Every test prints one PASS/FAIL line (also collected into the terminal
summary).  Criteria 10 and 11 run the full command-line pipeline twice on
the same seed, which takes a few minutes.
"""

import json
import math
import time

import numpy as np
import pytest

import gradcheck
import oracles
from poseloc import losses as L
from poseloc.cli import main
from poseloc.dataset_io import SyntheticSceneConfig, camera_orientation, generate_synthetic_scene, render_plane_depth
from poseloc.frustum import CameraIntrinsics, frustum_overlap, reproject_pixel
from poseloc.mining import MiningConfig, mine_quadruplets
from poseloc.model import EncoderConfig, backward, count_params, distilled_names, init_params, load_checkpoint
from poseloc.pose_core import (
    IDENTITY_QUAT,
    Pose,
    angular_distance,
    canonical,
    compose_absolute,
    compose_absolute_batch,
    quat_from_axis_angle,
    relative_pose,
    relative_pose_batch,
    rotation_error_degrees,
)
from poseloc.retrieval import RetrievalIndex
from poseloc.train_eval import finetune, TrainSchedule

DEEP = ("stage2.", "stage3.", "stage4.", "head2.", "head3.", "head4.")


def test_c01_pose_round_trip(verdict):
    rng = np.random.default_rng(101)
    t = rng.uniform(-100, 100, size=(2, 10_000, 3))
    q = canonical(rng.normal(size=(2, 10_000, 4)))
    start = time.perf_counter()
    dt, dq = relative_pose_batch(t[0], q[0], t[1], q[1])
    t_back, q_back = compose_absolute_batch(t[0], q[0], dt, dq)
    elapsed = time.perf_counter() - start
    t_err = float(np.max(np.linalg.norm(t_back - t[1], axis=1)))
    r_err = float(np.max(rotation_error_degrees(q_back, q[1])))
    # the object API wraps the same arithmetic; spot-check that it agrees
    for i in range(200):
        a, b = Pose(t[0, i], q[0, i]), Pose(t[1, i], q[1, i])
        back = compose_absolute(a, relative_pose(a, b))
        assert np.allclose(back.t, t_back[i], rtol=0, atol=1e-12) and np.allclose(back.q, q_back[i], atol=1e-15)
    ok = t_err <= 1e-9 and r_err <= 1e-6 and elapsed < 1.0
    verdict(1, "pose round trip", ok, f"max {t_err:.2e} m, {r_err:.2e} deg over 10000 pairs in {elapsed:.3f} s")
    assert ok


def test_c02_angular_distance(verdict):
    qx90 = quat_from_axis_angle([1, 0, 0], math.pi / 2)
    closed = [
        abs(angular_distance(IDENTITY_QUAT, IDENTITY_QUAT) - 0.0),
        abs(angular_distance(IDENTITY_QUAT, qx90) - 0.5),
        abs(angular_distance([1, 0, 0, 0], [0, 1, 0, 0]) - 1.0),
    ]
    rng = np.random.default_rng(102)
    a, b = canonical(rng.normal(size=(2, 1000, 4)))
    d = angular_distance(a, b)
    flip = max(np.max(np.abs(d - angular_distance(-a, b))), np.max(np.abs(d - angular_distance(a, -b))))
    ok = max(closed) <= 1e-12 and flip <= 1e-12
    verdict(2, "angular distance closed forms", ok, f"closed-form error {max(closed):.1e}, sign-flip {flip:.1e}")
    assert ok


def test_c03_frustum_oracle(verdict):
    rng = np.random.default_rng(103)
    K = CameraIntrinsics(40.0, 40.0, 32.0, 24.0, 64, 48)
    start = time.perf_counter()
    mismatches, nonzero = 0, 0
    for _ in range(25):
        poses = [Pose(rng.uniform([-1, -1, 0], [1, 1, 1]),
                      camera_orientation(*rng.uniform(-0.3, 0.3, 2), rng.uniform(-math.pi, math.pi)))
                 for _ in range(2)]
        frame = render_plane_depth(poses[0], K, 3.0)
        inside, total = oracles.overlap_count(frame, poses[0], poses[1])
        got = frustum_overlap(frame, poses[0], poses[1], stride=1)
        mismatches += got != inside / total
        nonzero += 0 < inside < total
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 30
    verdict(3, "frustum oracle equivalence", ok,
            f"{mismatches} mismatches over 25 pairs ({nonzero} partial overlaps) in {elapsed:.1f} s")
    assert ok


def test_c04_reprojection_closed_form(verdict):
    K = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
    out = reproject_pixel((60, 50), 2.0, Pose.identity(), Pose([0, 0, 1.0], IDENTITY_QUAT), K)
    err = float(np.max(np.abs(np.array(out) - [70.0, 50.0, 1.0])))
    ok = err <= 1e-9
    verdict(4, "reprojection closed form", ok, f"got ({out[0]:.12g}, {out[1]:.12g}, {out[2]:.12g}), error {err:.1e}")
    assert ok


def test_c05_miner_thresholds(verdict):
    scene = generate_synthetic_scene(SyntheticSceneConfig(n_database=500, n_query=0, layout="orbit", seed=105))
    frames = scene.frame_list("train")
    by_id = {f.id: f for f in frames}
    quads = mine_quadruplets(frames, MiningConfig(stride=4, per_anchor_cap=1))
    violations = 0
    for q in quads:
        for member, want in ((q.easy, "easy"), (q.medium, "medium"), (q.hard, "hard")):
            got, _, _ = oracles.pair_label(by_id[q.anchor], by_id[member], stride=4)
            violations += got != want
    ok = violations == 0 and len(quads) > 0
    verdict(5, "miner threshold soundness", ok,
            f"{violations} violations over {3 * len(quads)} pairs from {len(quads)} quadruplets")
    assert ok


def test_c06_gradient_correctness(verdict):
    start = time.perf_counter()
    params, pairs, quads = gradcheck.tiny_problem()
    worst = {label: gradcheck.max_violation(params, gradcheck.objective(label, pairs, quads))
             for label in L.VARIANT_LABELS}
    elapsed = time.perf_counter() - start
    label, value = max(worst.items(), key=lambda kv: kv[1])
    ok = value <= 1.0 and elapsed < 120
    verdict(6, "gradient correctness", ok,
            f"11 variants, worst error/tolerance {value:.2e} ({label}) in {elapsed:.1f} s")
    assert ok


def test_c07_homoscedastic_stationarity(verdict):
    worst, l_values = 0.0, []
    for seed in (0, 1, 2):
        params, _, quads = gradcheck.tiny_problem(seed=seed)
        pose_only = gradcheck.objective("PL", None, quads)
        l_pl = backward(params, pose_only, names=[])[0]
        l_values.append(l_pl)
        params["log_var.beta"] = np.array(math.log(l_pl))
        full = gradcheck.objective("PL+PA+H", None, quads)
        analytic = float(backward(params, full, names=["log_var.beta"])[1]["log_var.beta"])
        h = 1e-6

        def at(b):
            p = dict(params)
            p["log_var.beta"] = np.array(b)
            return backward(p, full, names=[])[0]

        numeric = (at(math.log(l_pl) + h) - at(math.log(l_pl) - h)) / (2 * h)
        worst = max(worst, abs(analytic), abs(numeric))
    ok = worst <= 1e-6 and len(set(l_values)) == 3
    verdict(7, "homoscedastic stationarity", ok,
            f"|dL/dbeta| <= {worst:.1e} at beta = ln(L_PL) for L_PL = {', '.join(f'{v:.3f}' for v in l_values)}")
    assert ok


def test_c08_index_exactness(verdict):
    rng = np.random.default_rng(108)
    emb = rng.integers(-2, 3, size=(1000, 16)).astype(np.float64)
    ids = [f"seq-{i % 4:02d}/frame-{i:06d}" for i in range(1000)]
    index = RetrievalIndex(16)
    for i in rng.permutation(1000):
        index.insert(ids[i], emb[i], Pose.identity())
    entries = list(zip(ids, emb))
    mismatches, ties = 0, 0
    for q in rng.integers(-2, 3, size=(100, 16)).astype(np.float64):
        got = index.query_knn(q, k=10)
        mismatches += [e.frame_id for e, _ in got] != oracles.knn(entries, q, 10)
        ties += len(got) - len({d for _, d in got})
    ok = mismatches == 0 and ties > 0
    verdict(8, "index exactness", ok, f"{mismatches} mismatching queries of 100 (top-10, {ties} tied ranks)")
    assert ok


def test_c09_distillation_masking(verdict):
    norms = {}
    for label in L.VARIANT_LABELS:
        params, _, quads = gradcheck.tiny_problem(n=8)
        out, _ = finetune(params, quads, L.LossConfig(variant=label, margin=2.0),
                          TrainSchedule("finetune", 3, "sgd", 1e-2, 4))
        deep = [k for k in params if k.startswith(DEEP)]
        norms[label] = float(np.sqrt(sum(np.sum((out[k] - params[k]) ** 2) for k in deep)))
        assert not np.array_equal(out["stage1.W"], params["stage1.W"])
    ok = all(v == 0.0 for v in norms.values())
    verdict(9, "distillation masking", ok, f"max stage-2..4 delta norm {max(norms.values())} over 11 variants")
    assert ok


# -- end-to-end pipeline (criteria 10 and 11) -----------------------------------


def run_pipeline(root, seed=0):
    """synth -> mine -> pretrain -> finetune PL+PA+H -> index -> eval, through the CLI."""
    scene, out = root / "scene", root / "run"
    steps = [
        ["synth", "--out", scene, "--seed", seed, "--n-database", 500, "--n-query", 100],
        ["mine", "--scene", scene, "--out", out, "--seed", seed],
        ["train", "--scene", scene, "--out", out, "--seed", seed, "--phase", "pretrain", "--preset", "desk"],
        ["train", "--scene", scene, "--out", out, "--seed", seed, "--phase", "finetune", "--preset", "desk",
         "--variant", "PL+PA+H", "--checkpoint", out / "pretrain.rfck"],
        ["index", "--scene", scene, "--out", out, "--checkpoint", out / "finetune.rfck"],
        ["eval", "--scene", scene, "--out", out, "--checkpoint", out / "finetune.rfck", "--index", out / "index.rfix"],
    ]
    start = time.perf_counter()
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    return out, time.perf_counter() - start


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    return [run_pipeline(tmp_path_factory.mktemp(f"e2e{i}")) for i in range(2)]


def test_c10_end_to_end(pipeline_runs, verdict):
    out, elapsed = pipeline_runs[0]
    row = json.loads((out / "report.json").read_text())["scenes"]["synthetic"]
    (rt, rr), (pt, pr) = row["retrieval"], row["pipeline"]
    curve = json.loads((out / "run-pretrain.json").read_text())["loss_curve"]
    ratio = curve[-1] / curve[0]
    checks = {"a": pt < rt, "b": pr < rr, "c": ratio <= 0.5, "time": elapsed < 600}
    ok = all(checks.values())
    verdict(10, "end-to-end synthetic localization", ok,
            f"pipeline {pt:.3f} m / {pr:.2f} deg vs retrieval {rt:.3f} m / {rr:.2f} deg; "
            f"pretrain loss ratio {ratio:.3f}; {elapsed:.0f} s; " + " ".join(f"{k}={v}" for k, v in checks.items()))
    assert ok


def test_c11_determinism(pipeline_runs, verdict):
    (a, _), (b, _) = pipeline_runs
    names = ["pretrain.rfck", "finetune.rfck", "index.rfix", "report.txt", "report.json",
             "run-pretrain.json", "run-finetune.json", "pairs.jsonl", "quadruplets.jsonl"]
    differing = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    ok = not differing
    verdict(11, "determinism", ok, f"{len(names) - len(differing)}/{len(names)} artifacts byte-identical"
            + (f"; differing: {', '.join(differing)}" if differing else ""))
    assert ok


def test_c12_model_size(pipeline_runs, verdict):
    cfg = EncoderConfig(block_dims=(64, 128, 256, 512))
    params = init_params(cfg)
    full, small = count_params(params), count_params(params, distilled_names(cfg))
    reduction = 1 - small / full
    # the trained checkpoint carries the same structure
    ck_cfg, _ = load_checkpoint(pipeline_runs[0][0] / "finetune.rfck")
    ok = reduction >= 0.95 and ck_cfg.block_dims == cfg.block_dims
    verdict(12, "model-size ledger", ok, f"full {full} params, distilled {small} ({100 * reduction:.2f}% smaller)")
    assert ok
