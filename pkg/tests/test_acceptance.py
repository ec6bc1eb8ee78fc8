"""Acceptance criteria, one test each. Every test records a PASS/FAIL line shown in the terminal summary."""
import time

import numpy as np

from geomatch import matchnet as mn
from geomatch.benchmark import BenchmarkConfig, make_benchmark
from geomatch.checkpoint import save_checkpoint
from geomatch.datakit import Manifest, PairRecord, build_unlabeled, flip_record, random_image, synth_pair
from geomatch.evaluate import evaluate_dataset
from geomatch.experiment import PipelineConfig, run_pipeline
from geomatch.geometry import (
    IDENTITY_AFFINE,
    CompositeTransform,
    affine_apply,
    affine_compose,
    affine_inverse,
    control_points,
    make_grid,
    tps_apply,
    tps_solve,
)
from geomatch.gradcheck import NETWORK_TOL, TRANSFORM_TOL, run_suite
from geomatch.objective import LossValue, LossWeights, combined_loss, cycle_loss, grid_loss
from geomatch.optimize import TrainConfig, train


def translation(dx, dy=0.0):
    return CompositeTransform([1, 0, dx, 0, 1, dy])


def homogeneous(a):
    return np.array([[a[0], a[1], a[2]], [a[3], a[4], a[5]], [0.0, 0.0, 1.0]])


def stripped_with_images(recs):
    out = []
    for r in recs:
        s = r.stripped()
        s.images = r.images
        out.append(s)
    return out


def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = run_suite(seed=0, transform_tol=TRANSFORM_TOL, network_tol=NETWORK_TOL)
    elapsed = time.perf_counter() - t0
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results) and elapsed <= 120
    worst = max(r.worst for r in results)
    verdict("criterion 1 gradient suite", ok, f"{len(results)} checks, worst rel err {worst:.1e}, {elapsed:.0f}s")
    assert ok


def test_criterion_2_transform_exactness(verdict):
    rng = np.random.default_rng(2)
    c = control_points()
    pts = rng.uniform(-1.2, 1.2, (500, 2))

    co = tps_solve(np.zeros(18))
    zero_err = np.max(np.abs(tps_apply(co, pts) - pts))

    interp_err = 0.0
    for _ in range(100):
        off = rng.normal(0, 0.1, 18)
        moved = c + np.stack([off[:9], off[9:]], axis=1)
        interp_err = max(interp_err, np.max(np.abs(tps_apply(tps_solve(off), c) - moved)))

    comp_err = 0.0
    for _ in range(100):
        a, b = IDENTITY_AFFINE + rng.normal(0, 0.3, 6), IDENTITY_AFFINE + rng.normal(0, 0.3, 6)
        ref = (homogeneous(a) @ homogeneous(b))[:2].ravel()
        comp_err = max(comp_err, np.max(np.abs(affine_compose(a, b) - ref)))

    bend_err = 0.0
    for _ in range(100):
        a = IDENTITY_AFFINE + rng.normal(0, 0.3, 6)
        disp = affine_apply(a, c) - c
        co = tps_solve(np.concatenate([disp[:, 0], disp[:, 1]]))
        bend_err = max(bend_err, np.max(np.abs(co.weights)), np.max(np.abs(tps_apply(co, pts) - affine_apply(a, pts))))

    ok = zero_err <= 1e-9 and interp_err <= 1e-9 and comp_err <= 1e-12 and bend_err <= 1e-9
    verdict("criterion 2 transform exactness", ok,
            f"zero {zero_err:.1e}, interp {interp_err:.1e}, compose {comp_err:.1e}, affine-tps {bend_err:.1e}")
    assert ok


def test_criterion_3_loss_algebra(verdict):
    rng = np.random.default_rng(3)
    g = make_grid(20, 20)

    self_err = 0.0
    for _ in range(100):
        t = CompositeTransform(IDENTITY_AFFINE + rng.normal(0, 0.15, 6), rng.normal(0, 0.08, 18))
        self_err = max(self_err, grid_loss(t, t, g).value)

    inv_err = 0.0
    for _ in range(100):
        a = IDENTITY_AFFINE + rng.normal(0, 0.3, 6)
        inv_err = max(inv_err, cycle_loss(CompositeTransform(a), CompositeTransform(affine_inverse(a)), g).value)

    shift_err = abs(grid_loss(translation(0.1), CompositeTransform.identity(), g).value - 0.1)
    cycle_err = abs(cycle_loss(translation(0.1), translation(0.1), g).value - 0.2)

    sup = [LossValue(v, rng.normal(size=24)) for v in rng.random(3)]
    uns = [LossValue(v, rng.normal(size=48)) for v in rng.random(4)]
    base = combined_loss(sup, uns, LossWeights(0.0))
    unit = combined_loss(sup, uns, LossWeights(1.0))
    lin_err = 0.0
    for beta in (0.1, 0.5, 2.0, 10.0):
        out = combined_loss(sup, uns, LossWeights(beta))
        lin_err = max(lin_err, abs(out.value - (base.value + beta * (unit.value - base.value))),
                      np.max(np.abs(out.grad - (base.grad + beta * (unit.grad - base.grad)))))

    ok = self_err == 0.0 and inv_err <= 1e-12 and shift_err <= 1e-12 and cycle_err <= 1e-12 and lin_err <= 1e-12
    verdict("criterion 3 loss algebra", ok,
            f"self {self_err:.1e}, inverse {inv_err:.1e}, shift {shift_err:.1e}, cycle {cycle_err:.1e}, "
            f"beta-linearity {lin_err:.1e}")
    assert ok


def test_criterion_4_identity_degeneracy(verdict):
    t0 = time.perf_counter()
    rows = []
    for seed in (1, 2, 3):
        rng = np.random.default_rng(seed)
        recs = [synth_pair(random_image(64, rng), "composite", 0.25, int(rng.integers(2 ** 31)), n_keypoints=10,
                           source_ref=f"s{k}", target_ref=f"t{k}") for k in range(300)]
        unlabeled, test = stripped_with_images(recs[:200]), Manifest(recs[200:])
        p0 = mn.init_params(mn.ModelConfig(), seed)
        p, log = train(p0, unlabeled=unlabeled, cfg=TrainConfig(mode="unsup", epochs=0, max_steps=100, seed=seed))
        losses = log.losses()
        below = np.flatnonzero(losses < 1e-3)
        first = int(below[0]) + 1 if below.size else None
        rows.append((first, 100 * evaluate_dataset(p0, test).mean, 100 * evaluate_dataset(p, test).mean))
    elapsed = time.perf_counter() - t0
    firsts = [r[0] for r in rows]
    drift = float(np.median([r[2] - r[1] for r in rows]))
    ok = all(f is not None and f <= 2000 for f in firsts) and abs(drift) <= 5 and elapsed <= 600
    detail = ", ".join(f"seed {s}: L_us<1e-3 at step {f}, PCK {a:.1f}->{b:.1f}"
                       for s, (f, a, b) in zip((1, 2, 3), rows))
    verdict("criterion 4 identity degeneracy", ok, f"{detail}; median drift {drift:+.2f}, {elapsed:.0f}s")
    assert ok


def test_criterion_5_semi_supervised_gain(verdict):
    t0 = time.perf_counter()
    scores = {}
    for seed in (1, 2, 3):
        res = run_pipeline(PipelineConfig(seed=seed))
        scores[seed] = res.pck()
        print(f"seed {seed}: " + ", ".join(f"{k} {v:.2f}" for k, v in scores[seed].items()))
    elapsed = time.perf_counter() - t0
    gain = float(np.median([s["semi"] - s["sup"] for s in scores.values()]))
    sup_over_self = float(np.median([s["sup"] - s["self"] for s in scores.values()]))
    ok = gain >= 2.0 and sup_over_self > 0 and elapsed <= 1800
    verdict("criterion 5 semi-supervised gain", ok,
            f"median semi-sup {gain:+.2f} (need >= 2), median sup-self {sup_over_self:+.2f}, {elapsed:.0f}s")
    assert ok


def test_criterion_6_pck_oracle(verdict):
    from test_evaluate import CFG, brute_force, toy_manifest

    ok = True
    for alpha in (0.05, 0.1, 0.2):
        m = toy_manifest()
        model = mn.init_params(CFG, 2)
        rep = evaluate_dataset(model, m, alpha)
        correct, total, mean = brute_force(model, m, alpha)
        ok &= {c.category: c.correct for c in rep.categories} == correct
        ok &= {c.category: c.total for c in rep.categories} == total
        ok &= abs(rep.mean - mean) <= 1e-15
    verdict("criterion 6 PCK oracle", ok, "3 categories, 12 pairs, alpha 0.05/0.1/0.2, integer counts equal")
    assert ok


def test_criterion_7_determinism(verdict, tmp_path):
    cfg = mn.ModelConfig(image_size=16, feature_channels=(4, 8), head_channels=(8,), head_kernels=(3,),
                         fc_init_scale=0.1)
    rng = np.random.default_rng(7)
    recs = [synth_pair(random_image(16, rng), "affine", 0.15, k, n_keypoints=6, source_ref=f"s{k}",
                       target_ref=f"t{k}") for k in range(8)]
    labeled, unlabeled = recs[:4], stripped_with_images(recs[4:])
    p0 = mn.init_params(cfg, 1)

    def blob(params):
        path = tmp_path / "m.geom"
        save_checkpoint(path, params, {"seed": 5})
        return path.read_bytes()

    semi = TrainConfig(mode="semi", batch_size=3, epochs=3, seed=5)
    a, _ = train(p0, labeled=labeled, unlabeled=unlabeled, cfg=semi)
    b, _ = train(p0, labeled=labeled, unlabeled=unlabeled, cfg=semi)
    repeat_ok = blob(a) == blob(b)

    sup, _ = train(p0, labeled=labeled, cfg=TrainConfig(mode="sup", batch_size=3, epochs=3, seed=5))
    zero, _ = train(p0, labeled=labeled, unlabeled=unlabeled,
                    cfg=TrainConfig(mode="semi", beta=0.0, batch_size=3, epochs=3, seed=5))
    beta0_ok = blob(sup) == blob(zero)
    ok = repeat_ok and beta0_ok
    verdict("criterion 7 determinism", ok, f"repeat run identical: {repeat_ok}, beta=0 semi == sup: {beta0_ok}")
    assert ok


def test_criterion_8_dataset_rules(verdict):
    images = {f"c{c}": [f"c{c}/{k:02d}.png" for k in range(4 + 8 * c)] for c in range(5)}
    labeled = [PairRecord("c0/00.png", "c0/01.png", "c0", [(0.1, 0.1)], [(0.2, 0.2)], labeled=True),
               PairRecord("c4/07.png", "c4/03.png", "c4", [(0.5, 0.5)], [(0.4, 0.6)], labeled=True)]
    out = build_unlabeled(images, cap=100, labeled=labeled, seed=8)
    sampled = out[:-len(labeled)]
    cap_ok = all(sum(r.category == c for r in sampled) == min(100, len(v) * (len(v) - 1)) for c, v in images.items())
    stripped_ok = all(not r.labeled and r.keypoints_src is None and r.keypoints_tgt is None for r in out)
    tail = [(r.source, r.target) for r in out[-len(labeled):]]
    contains_ok = stripped_ok and tail == [(r.source, r.target) for r in labeled]

    rng = np.random.default_rng(8)
    flip_ok = True
    for width in (64, 63):
        rec = PairRecord("a.png", "b.png", "cat", rng.random((9, 2)), rng.random((9, 2)), labeled=True)
        rec.images = (rng.random((64, width, 3)), rng.random((64, width, 3)))
        back = flip_record(flip_record(rec))
        flip_ok &= back == rec and all(np.array_equal(x, y) for x, y in zip(back.images, rec.images))

    bench = make_benchmark(BenchmarkConfig(seed=1, n_synth=1))
    scale = bench["unlabeled"].metadata["reference_scale"]
    meta_ok = abs(scale["labeled_after_flip"] - 2500) <= 1 and "unlabeled_total" in scale and "note" in scale
    ok = cap_ok and contains_ok and flip_ok and meta_ok
    verdict("criterion 8 dataset rules", ok,
            f"cap {cap_ok}, stripped labeled included {contains_ok}, flip involution {flip_ok}, "
            f"reference-scale metadata {meta_ok} (700 -> {scale['labeled_after_flip']} labeled, "
            f"unlabeled total {scale['unlabeled_total']})")
    assert ok
