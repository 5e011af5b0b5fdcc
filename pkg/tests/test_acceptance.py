"""Acceptance criteria 1-9; each test records one PASS/FAIL line for the terminal summary."""
import filecmp
import itertools
import time

import numpy as np
import pytest

from conftest import record_acceptance, small_scene
from sfdeblur.blur import apply, apply_adjoint, build_kernel
from sfdeblur.cli import main
from sfdeblur.core import CameraRig, EnergyParams, divergence, gradient
from sfdeblur.datagen import generate, gt_model
from sfdeblur.deblur import (ISOTROPIC, build_problem, identity_problem, init_state, latent_objective,
                             pd_step)
from sfdeblur.energy import FeatureCorrespondences, total_energy
from sfdeblur.geometry import (REFERENCE, RigidMotion, SceneModel, flow_from_homography, homography,
                               project_points)
from sfdeblur.metrics import evaluate, outlier_rate, psnr, segmentation_prf
from sfdeblur.pipeline import InitialState, PipelineInput, PipelineOptions, run_pipeline
from sfdeblur.sceneflow import ProposalSet, assemble, discretize
from sfdeblur.superpixels import init_labels, partition_from_labels
from sfdeblur.trws import DiscreteProblem, brute_force, trws_solve

# thresholds of the acceptance criteria
BLUR_RMSE = 5e-3
BLUR_SECONDS = 30.0
ADJOINT_REL = 1e-6
DENSE_ABS = 1e-6
GEOMETRY_PX = 1e-8
DISCRETE_ABS = 1e-6
PD_SLACK = 1e-8
PD_ITERS = 50
E2E_PSNR_GAIN_DB = 1.0
E2E_FLOW_PCT = 15.0
E2E_DISP_PCT = 10.0
E2E_F = 0.70
E2E_SECONDS = 600.0

QUICK = PipelineOptions(sceneflow_rounds=1, deblur_iters=20)


# 1

def test_criterion_1_blur_model_equivalence(default_bundle):
    b = default_bundle
    t0 = time.perf_counter()
    ref = apply(build_kernel(b.flow_fwd, b.flow_bwd, 0.23), b.latent[REFERENCE])
    errs = {REFERENCE: float(np.sqrt(np.mean((ref - b.blurred[REFERENCE]) ** 2)))}
    # the other five images through the exact per-surface model
    prob = build_problem(gt_model(b, b.surface_map), b.blurred, b.rig, EnergyParams())
    for k in b.blurred:
        if k != REFERENCE:
            errs[k] = float(np.sqrt(np.mean((prob.blur(k, b.latent[k]) - b.blurred[k]) ** 2)))
    secs = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= BLUR_RMSE and secs <= BLUR_SECONDS
    record_acceptance(1, "blur-model equivalence",
                      ok, f"max RMSE {worst:.2e} <= {BLUR_RMSE:g} over 6 images, {secs:.1f} s <= {BLUR_SECONDS:g} s")
    assert ok, errs


# 2

def brute_dense(op) -> np.ndarray:
    h, w = op.height, op.width
    M = np.zeros((h * w, h * w))
    for y in range(h):
        for x in range(w):
            for (dx, dy), wt in op.kernel_at(x, y):
                M[y * w + x, min(max(y + dy, 0), h - 1) * w + min(max(x + dx, 0), w - 1)] += wt
    return M


def test_criterion_2_operator_correctness():
    rng = np.random.default_rng(2024)
    worst_adj, worst_dense = 0.0, 0.0
    for _ in range(20):
        h, w = rng.integers(2, 9, 2)
        op = build_kernel(rng.uniform(-3, 3, (h, w, 2)), rng.uniform(-3, 3, (h, w, 2)), 0.5)
        L, r = rng.standard_normal((h, w, 3)), rng.standard_normal((h, w, 3))
        lhs, rhs = np.sum(apply(op, L) * r), np.sum(L * apply_adjoint(op, r))
        worst_adj = max(worst_adj, abs(lhs - rhs) / max(1.0, abs(lhs)))
        p = rng.standard_normal((h, w, 3, 2))
        g_lhs, g_rhs = np.sum(gradient(L) * p), -np.sum(L * divergence(p))
        worst_adj = max(worst_adj, abs(g_lhs - g_rhs) / max(1.0, abs(g_lhs)))
        dense = (brute_dense(op) @ L.reshape(-1, 3)).reshape(L.shape)
        worst_dense = max(worst_dense, float(np.abs(apply(op, L) - dense).max()))
    ok = worst_adj <= ADJOINT_REL and worst_dense <= DENSE_ABS
    record_acceptance(2, "operator adjoints and dense equivalence", ok,
                      f"adjoint rel {worst_adj:.1e}, dense abs {worst_dense:.1e}, 20 instances up to 8x8")
    assert ok


# 3

def test_criterion_3_geometry_oracle():
    rng = np.random.default_rng(3)
    rig = CameraRig.from_focal(100.0, 40.0, 30.0, 0.5)
    worst = 0.0
    for _ in range(20):
        m = RigidMotion.from_params(*rng.uniform(-0.5, 0.5, 3), *rng.uniform(-0.1, 0.1, 3))
        n = np.array([*rng.uniform(-0.02, 0.02, 2), 1 / rng.uniform(4, 12)])
        xs, ys = rng.uniform(0, 80, 50), rng.uniform(0, 60, 50)
        rays = rig.K_inv @ np.vstack([xs, ys, np.ones(50)])
        X = rays / (n @ rays)  # on-plane points
        p = rig.K @ (m.R @ X - m.t[:, None])
        px, py, _ = project_points(homography(rig.K, m, n), xs, ys)
        worst = max(worst, np.abs(px - p[0] / p[2]).max(), np.abs(py - p[1] / p[2]).max())
        # disparity of the same points: f b / Z
        d_oracle = rig.focal * rig.baseline / X[2]
        d = rig.focal * rig.baseline * (n @ rays)
        worst = max(worst, float(np.abs(d - d_oracle).max()))
    zero = flow_from_homography(homography(rig.K, RigidMotion(), np.array([0.01, 0, 0.1])), (30, 40))
    ok = worst <= GEOMETRY_PX and not np.any(zero)
    record_acceptance(3, "geometry oracle", ok,
                      f"max deviation {worst:.1e} px on 20x50 points; identity flow exactly zero: {not np.any(zero)}")
    assert ok


# 4

def random_tree(rng, n, k):
    labels = rng.integers(1, k + 1, n)
    unary = [rng.normal(0, 1, c) for c in labels]
    edges, tables = [], []
    for pos in range(1, n):
        a = int(rng.integers(0, pos))
        edges.append((a, pos))
        tables.append(rng.normal(0, 1, (labels[a], labels[pos])))
    return DiscreteProblem(unary, edges, tables)


def quad_toy(seed):
    rng = np.random.default_rng(seed)
    h, w = 12, 16
    labels = np.zeros((h, w), dtype=np.intp)
    labels[:, w // 2:] = 1
    labels[h // 2:] += 2
    part = partition_from_labels(labels)
    rig = CameraRig.from_focal(40.0, w / 2, h / 2, 0.1)
    planes = np.column_stack([rng.uniform(-0.002, 0.002, (4, 2)), rng.uniform(0.1, 0.2, 4)])
    motions = [RigidMotion.from_params(tx=0.02), RigidMotion.from_params(tx=-0.05, ty=0.02)]
    model = SceneModel(labels, planes, np.array([1, 2, 1, 2]), motions)
    keys = [(v, f) for v in (0, 1) for f in (-1, 0, 1)]
    lat = {k: rng.uniform(0.2, 0.8, (h, w, 1)) for k in keys}
    blur = {k: np.clip(v + rng.normal(0, 0.02, v.shape), 0, 1) for k, v in lat.items()}
    props = ProposalSet([np.array([planes[i], planes[i] * (1 + rng.normal(0, 0.05, 3))]) for i in range(4)],
                        [np.array([model.objects[i], 3 - model.objects[i]]) for i in range(4)],
                        [[m] for m in motions])
    return model, part, lat, blur, rig, props


def test_criterion_4_trws_and_discretization():
    rng = np.random.default_rng(4)
    exact, monotone = True, True
    for _ in range(60):
        p = random_tree(rng, int(rng.integers(1, 11)), int(rng.integers(1, 4)))
        x, lbs, _ = trws_solve(p)
        _, best = brute_force(p)
        exact &= abs(p.energy(x) - best) <= 1e-9
        monotone &= all(b >= a - 1e-9 * max(1.0, abs(best)) for a, b in zip(lbs, lbs[1:]))
    worst = 0.0
    for seed in range(3):
        model, part, lat, blur, rig, props = quad_toy(seed)
        disc = discretize(model, part, props, lat, blur, FeatureCorrespondences(), rig, EnergyParams())
        for x in itertools.product(range(2), repeat=4):
            e = total_energy(assemble(model, disc.proposals, x), part, lat, blur, FeatureCorrespondences(), rig,
                             EnergyParams(), ownership=disc.ownership)
            worst = max(worst, abs(disc.problem.energy(x) - (e.total - e.tv)))
    ok = exact and monotone and worst <= DISCRETE_ABS
    record_acceptance(4, "TRW-S exactness and discretization", ok,
                      f"60 trees exact: {exact}, bounds monotone: {monotone}, "
                      f"4-node energy gap {worst:.1e} <= {DISCRETE_ABS:g}")
    assert ok


# 5

def test_criterion_5_primal_dual_monotone():
    rng = np.random.default_rng(5)
    step = np.full((24, 24, 1), 0.2)
    step[:, 12:] = 0.8
    B = np.clip(step + rng.normal(0, 0.05, step.shape), 0, 1)
    prob = identity_problem({REFERENCE: B}, EnergyParams(theta1=0.0, theta3=5.0))
    state = init_state(prob)
    objs = [latent_objective(prob, state.latents)]
    feasible = True
    for _ in range(PD_ITERS):
        state = pd_step(state, prob, ISOTROPIC)
        objs.append(latent_objective(prob, state.latents))
        feasible &= bool(np.all(np.linalg.norm(state.p[REFERENCE], axis=-1) <= 1 + 1e-12))
        feasible &= all(bool(np.all(np.abs(q) <= 1 + 1e-12)) for q in state.q.values())
    rises = sum(b > a + PD_SLACK * abs(a) for a, b in zip(objs, objs[1:]))
    ok = rises == 0 and feasible
    record_acceptance(5, "primal-dual monotone descent", ok,
                      f"{PD_ITERS} steps, objective {objs[0]:.1f} -> {objs[-1]:.1f}, increases {rises}, "
                      f"dual feasible: {feasible}")
    assert ok


# 6

def report_for(b, out):
    return evaluate(out.latents, out.flow_fwd, out.flow_bwd, out.disparity, out.moving_mask, b.latent,
                    b.flow_fwd, b.flow_bwd, {0: b.disparity[0], 1: b.disparity[1]}, b.moving_mask,
                    blurred=b.blurred)


def test_criterion_6_end_to_end_recovery(default_bundle):
    b = default_bundle
    inp = PipelineInput(b.blurred, b.prior_mask, b.rig, EnergyParams(), seed=0)
    t0 = time.perf_counter()
    out = run_pipeline(inp)
    secs = time.perf_counter() - t0
    rep = report_for(b, out)
    gains = [rep.psnr[k] - rep.blurred_psnr[k] for k in rep.psnr]
    flow = max(rep.flow_fwd_outliers, rep.flow_bwd_outliers)
    disp = max(rep.disp_outliers.values())

    # noise floor: the same pipeline started from the ground-truth model
    model = gt_model(b)
    part = partition_from_labels(model.labels)
    init = InitialState(model, part, init_labels(part, b.prior_mask, 2), FeatureCorrespondences(), [], {})
    floor = report_for(b, run_pipeline(inp, init))
    floor_gain = min(floor.psnr[k] - floor.blurred_psnr[k] for k in floor.psnr)
    margin_ok = floor_gain >= 2 * E2E_PSNR_GAIN_DB and floor.f_measure >= E2E_F
    margin_ok &= 2 * max(floor.flow_fwd_outliers, floor.flow_bwd_outliers) <= E2E_FLOW_PCT
    margin_ok &= 2 * max(floor.disp_outliers.values()) <= E2E_DISP_PCT

    ok = (min(gains) >= E2E_PSNR_GAIN_DB and flow <= E2E_FLOW_PCT and disp <= E2E_DISP_PCT
          and rep.f_measure >= E2E_F and secs <= E2E_SECONDS and margin_ok)
    record_acceptance(6, "end-to-end synthetic recovery", ok,
                      f"PSNR gain {min(gains):+.2f}..{max(gains):+.2f} dB, flow outliers {flow:.2f}%, "
                      f"disparity outliers {disp:.2f}%, F {rep.f_measure:.3f}, {secs:.0f} s; "
                      f"GT-initialised floor: gain >= {floor_gain:+.2f} dB, F {floor.f_measure:.3f}")
    assert ok


# 7

def test_criterion_7_alternation_descent():
    lines, ok = [], True
    for seed in range(5):
        b = generate(small_scene(seed))
        inp = PipelineInput(b.blurred, b.prior_mask, b.rig, EnergyParams(outer_iters=2), seed, QUICK)
        totals = [t.energy.total for t in run_pipeline(inp).trace]
        rises = sum(y > x for x, y in zip(totals, totals[1:]))
        ok &= rises == 0
        lines.append(f"{rises}/{len(totals) - 1}")
    record_acceptance(7, "alternation descent", ok,
                      f"energy increases per scene over half-steps: {', '.join(lines)}")
    assert ok


# 8

def test_criterion_8_metric_examples():
    a = np.full((10, 10, 3), 0.5)
    checks = [
        psnr(a, a) == 99.0,
        abs(psnr(a, a + 0.1) - 20.0) <= 1e-9,
        abs(psnr(a, a + np.sqrt(1e-3)) - 30.0) <= 1e-9,
        outlier_rate(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 0.0,
        outlier_rate(np.array([[[100.0, 4.0]]]), np.array([[[100.0, 0.0]]])) == 0.0,
        outlier_rate(np.array([[[10.0, 4.0]]]), np.array([[[10.0, 0.0]]])) == 100.0,
    ]
    perfect = np.eye(4, dtype=bool)
    checks.append(segmentation_prf(perfect, perfect) == (1.0, 1.0, 1.0))
    gt = np.r_[np.ones(10, bool), np.zeros(2, bool)]
    est = np.r_[np.ones(8, bool), np.zeros(2, bool), np.ones(2, bool)]
    checks.append(np.allclose(segmentation_prf(est, gt), (0.8, 0.8, 0.8), rtol=0, atol=1e-15))
    checks.append(segmentation_prf(np.zeros(12, bool), gt) == (0.0, 0.0, 0.0))
    ok = all(checks)
    record_acceptance(8, "metric examples", ok, f"{sum(checks)}/{len(checks)} examples exact")
    assert ok


# 9

SCENE = """height = 64
width = 96
camera_motion = 0.2 0 0 0 0 0
object.0.rect = 30 18 36 26
object.0.depth = 5
object.0.motion = -0.5 0 0 0 0 0
"""


def tree_differences(a, b) -> list:
    cmp = filecmp.dircmp(a, b)
    diffs = cmp.left_only + cmp.right_only + cmp.funny_files
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    diffs += mismatch + errors
    for sub in cmp.common_dirs:
        diffs += [f"{sub}/{d}" for d in tree_differences(a / sub, b / sub)]
    return diffs


def test_criterion_9_determinism(tmp_path):
    (tmp_path / "scene.txt").write_text(SCENE)
    (tmp_path / "cfg.txt").write_text("outer_iters = 1\nsceneflow_rounds = 1\ndeblur_iters = 10\n")
    for run in ("a", "b"):
        assert main(["--seed", "11", "synth", str(tmp_path / "scene.txt"), str(tmp_path / run / "data")]) == 0
        assert main(["--seed", "11", "run", str(tmp_path / "cfg.txt"), str(tmp_path / run / "data"),
                     str(tmp_path / run / "out")]) == 0
        assert main(["eval", str(tmp_path / run / "out"), str(tmp_path / run / "data"),
                     str(tmp_path / run / "out" / "report.csv")]) == 0
    diffs = tree_differences(tmp_path / "a", tmp_path / "b")
    n_files = sum(1 for p in (tmp_path / "a").rglob("*") if p.is_file())
    ok = not diffs
    record_acceptance(9, "determinism", ok, f"{n_files} files compared byte for byte, {len(diffs)} differ")
    assert ok, diffs
