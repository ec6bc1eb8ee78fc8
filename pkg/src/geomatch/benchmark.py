"""Procedural semantic-matching benchmark.

Each category is a template of soft ellipse "parts" with landmarks at each
part's center and the two ends of its major axis. An instance jitters part
geometry and colors and adds background distractors; an image renders one
instance under a random composite pose. Pairs of images of different
instances of the same category therefore relate by a non-parametric,
semantic correspondence, known only at the landmarks.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .datakit import (
    Manifest,
    PairRecord,
    build_unlabeled,
    reference_scale_counts,
    quantize,
    random_transform,
    synth_pair,
    to_unit,
)
from .errors import SolverError
from .geometry import composite_apply, composite_inverse_apply, pixel_centers


@dataclass(frozen=True)
class BenchmarkConfig:
    image_size: int = 64
    n_categories: int = 5
    train_images_per_category: int = 20
    test_images_per_category: int = 10
    n_labeled: int = 50
    unlabeled_cap: int = 100
    n_test: int = 100
    n_synth: int = 500
    parts_per_category: int = 4
    pose_family: str = "composite"
    pose_strength: float = 0.12
    synth_strength: float = 0.12
    part_jitter: float = 0.06
    color_jitter: float = 0.2
    n_distractors: int = 3
    seed: int = 0


@dataclass
class Part:
    center: np.ndarray
    radii: np.ndarray
    angle: float
    color: np.ndarray

    def landmarks(self) -> np.ndarray:
        axis = np.array([np.cos(self.angle), np.sin(self.angle)]) * self.radii[0]
        return np.stack([self.center, self.center + axis, self.center - axis])

    def alpha(self, pts: np.ndarray) -> np.ndarray:
        d = pts - self.center
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = (c * d[:, 0] + s * d[:, 1]) / self.radii[0]
        v = (-s * d[:, 0] + c * d[:, 1]) / self.radii[1]
        return 1.0 / (1.0 + np.exp((np.sqrt(u * u + v * v) - 1.0) * 10.0))


@dataclass
class Instance:
    background: np.ndarray  # (3, 3): base color, x-gradient, y-gradient
    distractors: list[Part]
    parts: list[Part]

    def render(self, pts: np.ndarray) -> np.ndarray:
        """Colors at canonical points, (M, 3)."""
        bg = self.background
        col = bg[0] + pts[:, :1] * bg[1] + pts[:, 1:] * bg[2]
        for part in self.distractors + self.parts:
            a = part.alpha(pts)[:, None]
            col = col * (1 - a) + a * part.color
        return col

    def landmarks(self) -> np.ndarray:
        return np.concatenate([p.landmarks() for p in self.parts])


def make_template(rng: np.random.Generator, n_parts: int) -> Instance:
    parts = []
    for _ in range(n_parts):
        parts.append(Part(rng.uniform(-0.5, 0.5, 2), np.sort(rng.uniform(0.12, 0.32, 2))[::-1],
                          float(rng.uniform(0, np.pi)), rng.uniform(0, 1, 3)))
    bg = np.stack([rng.uniform(0.2, 0.8, 3), rng.uniform(-0.15, 0.15, 3), rng.uniform(-0.15, 0.15, 3)])
    return Instance(bg, [], parts)


def make_instance(template: Instance, cfg: BenchmarkConfig, rng: np.random.Generator) -> Instance:
    parts = []
    for p in template.parts:
        parts.append(Part(
            p.center + rng.normal(0.0, cfg.part_jitter, 2),
            p.radii * rng.uniform(0.85, 1.15, 2),
            p.angle + float(rng.normal(0.0, 0.15)),
            np.clip(p.color + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1),
        ))
    bg = template.background.copy()
    bg[0] = np.clip(bg[0] + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3), 0, 1)
    distractors = [Part(rng.uniform(-0.9, 0.9, 2), rng.uniform(0.08, 0.2, 2), float(rng.uniform(0, np.pi)),
                        rng.uniform(0, 1, 3)) for _ in range(cfg.n_distractors)]
    return Instance(bg, distractors, parts)


def render_view(inst: Instance, cfg: BenchmarkConfig, rng: np.random.Generator):
    """Image of ``inst`` under a random pose, plus landmark positions (NaN if outside the frame)."""
    s = cfg.image_size
    pose = random_transform(cfg.pose_family, cfg.pose_strength, rng)
    img = quantize(inst.render(composite_apply(pose, pixel_centers(s, s))).reshape(s, s, 3))
    try:
        lm = composite_inverse_apply(pose, inst.landmarks())
    except SolverError:
        lm = np.full((len(inst.parts) * 3, 2), np.nan)
    lm[np.any(np.abs(lm) > 1.0, axis=1)] = np.nan
    return img, lm


def _pair(images, landmarks, i, j, cat) -> PairRecord | None:
    ok = ~np.isnan(landmarks[i][:, 0]) & ~np.isnan(landmarks[j][:, 0])
    if not np.any(ok):
        return None
    rec = PairRecord(f"{cat}/{i:03d}.png", f"{cat}/{j:03d}.png", cat,
                     to_unit(landmarks[i][ok]), to_unit(landmarks[j][ok]), labeled=True)
    rec.images = (images[i], images[j])
    return rec


def make_benchmark(cfg: BenchmarkConfig = BenchmarkConfig()) -> dict[str, Manifest]:
    """Build ``labeled``, ``unlabeled``, ``test`` and ``synth`` manifests with images attached."""
    root = np.random.default_rng(cfg.seed)
    cats = [f"cat{c}" for c in range(cfg.n_categories)]
    per_cat_labeled = np.full(cfg.n_categories, cfg.n_labeled // cfg.n_categories)
    per_cat_labeled[: cfg.n_labeled % cfg.n_categories] += 1
    per_cat_test = np.full(cfg.n_categories, cfg.n_test // cfg.n_categories)
    per_cat_test[: cfg.n_test % cfg.n_categories] += 1

    labeled, test, train_images = [], [], {}
    pool: dict[str, np.ndarray] = {}
    n_train = cfg.train_images_per_category
    for c, cat in enumerate(cats):
        rng = np.random.default_rng(root.integers(2 ** 63))
        template = make_template(rng, cfg.parts_per_category)
        views = [render_view(make_instance(template, cfg, rng), cfg, rng)
                 for _ in range(n_train + cfg.test_images_per_category)]
        images = [v[0] for v in views]
        lms = [v[1] for v in views]
        for k in range(n_train):
            pool[f"{cat}/{k:03d}.png"] = images[k]
        train_images[cat] = [f"{cat}/{k:03d}.png" for k in range(n_train)]
        for split, count, lo, hi, out in (("train", per_cat_labeled[c], 0, n_train, labeled),
                                          ("test", per_cat_test[c], n_train, len(images), test)):
            seen = set()
            while sum(r.category == cat for r in out) < count:
                i, j = rng.choice(np.arange(lo, hi), 2, replace=False)
                if (i, j) in seen:
                    continue
                seen.add((i, j))
                rec = _pair(images, lms, i, j, cat)
                if rec is not None:
                    out.append(rec)

    test_refs = {(r.source, r.target) for r in test}
    unlabeled = build_unlabeled(train_images, cfg.unlabeled_cap, labeled, seed=int(root.integers(2 ** 31)),
                                exclude=test_refs)
    ref_images = {**pool}
    for rec in unlabeled:
        rec.images = (ref_images[rec.source], ref_images[rec.target])

    synth = []
    srng = np.random.default_rng(root.integers(2 ** 63))
    refs = sorted(pool)
    for k in range(cfg.n_synth):
        ref = refs[srng.integers(len(refs))]
        rec = synth_pair(pool[ref], "composite", cfg.synth_strength, int(srng.integers(2 ** 31)),
                         source_ref=ref, target_ref=f"synth/{k:04d}.png", category=ref.split("/")[0])
        synth.append(rec)

    meta = {"benchmark_config": asdict(cfg), "reference_scale": reference_scale_counts()}
    return {
        "labeled": Manifest(labeled, metadata={**meta, "split": "labeled", "count": len(labeled)}),
        "unlabeled": Manifest(unlabeled, metadata={**meta, "split": "unlabeled", "count": len(unlabeled)}),
        "test": Manifest(test, metadata={**meta, "split": "test", "count": len(test)}),
        "synth": Manifest(synth, metadata={**meta, "split": "synth", "count": len(synth)}),
    }
