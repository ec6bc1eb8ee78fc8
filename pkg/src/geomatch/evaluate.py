"""PCK keypoint-transfer evaluation and per-category reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .datakit import Manifest, PairRecord, to_normalized, to_unit
from .errors import InvalidInputError
from .geometry import CompositeTransform, as_points, composite_apply
from .matchnet import ModelParams, estimate_transform

DEFAULT_ALPHA = 0.1


@dataclass
class CategoryPck:
    category: str
    correct: int
    total: int

    @property
    def pck(self) -> float:
        return self.correct / self.total if self.total else 0.0


@dataclass
class PckReport:
    alpha: float
    categories: list[CategoryPck] = field(default_factory=list)
    distances: list[float] | None = None

    @property
    def mean(self) -> float:
        if not self.categories:
            return 0.0
        return float(np.mean([c.pck for c in self.categories]))

    def to_dict(self) -> dict:
        out = {
            "alpha": self.alpha,
            "mean": self.mean,
            "categories": [{"category": c.category, "correct": c.correct, "total": c.total, "pck": c.pck}
                           for c in self.categories],
        }
        if self.distances is not None:
            out["distances"] = self.distances
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def transfer_distances(pred: CompositeTransform, kp_src, kp_tgt) -> np.ndarray:
    """Per-keypoint distance in [0, 1] units between projected source keypoints and targets."""
    src = as_points(kp_src, "kp_src")
    tgt = as_points(kp_tgt, "kp_tgt")
    if src.shape != tgt.shape:
        raise InvalidInputError(f"keypoint sets differ in length: {src.shape[0]} vs {tgt.shape[0]}")
    proj = to_unit(composite_apply(pred, to_normalized(src)))
    return np.sqrt(np.sum((proj - tgt) ** 2, axis=1))


def pck_pair(pred: CompositeTransform, kp_src, kp_tgt, alpha: float = DEFAULT_ALPHA) -> tuple[int, int]:
    """``(correct, total)`` for one pair.

    ``pred`` must map source-frame points into the target frame, i.e. be the
    network's estimate for (source=target image, target=source image).
    A keypoint is correct when its transfer error is <= alpha.
    """
    d = transfer_distances(pred, kp_src, kp_tgt)
    return int(np.count_nonzero(d <= alpha)), int(d.size)


def _pck_transform(model: ModelParams, rec: PairRecord) -> CompositeTransform:
    src, tgt = rec.images
    return estimate_transform(tgt, src, model)


def evaluate_dataset(model: ModelParams, manifest: Manifest, alpha: float = DEFAULT_ALPHA,
                     keep_distances: bool = False) -> PckReport:
    """Per-category pooled PCK over every (labeled) record; images must be attached."""
    counts: dict[str, list[int]] = {}
    dists = []
    for i, rec in enumerate(manifest.pairs):
        if not rec.labeled or rec.keypoints_src is None:
            raise InvalidInputError(f"record {i} ({rec.source} -> {rec.target}) is unlabeled")
        if rec.images is None:
            raise InvalidInputError(f"record {i} has no images attached")
        d = transfer_distances(_pck_transform(model, rec), rec.keypoints_src, rec.keypoints_tgt)
        c = counts.setdefault(rec.category, [0, 0])
        c[0] += int(np.count_nonzero(d <= alpha))
        c[1] += int(d.size)
        if keep_distances:
            dists.extend(d.tolist())
    cats = [CategoryPck(k, *counts[k]) for k in sorted(counts)]
    return PckReport(alpha, cats, dists if keep_distances else None)


def format_table(reports: dict[str, PckReport]) -> str:
    """Aligned text table: categories as columns, one row per named report, values in percent."""
    cats = sorted({c.category for r in reports.values() for c in r.categories})
    name_w = max([len("method")] + [len(n) for n in reports])
    widths = [max(6, len(c)) for c in cats]
    alphas = sorted({r.alpha for r in reports.values()})
    lines = [f"alpha={', '.join(f'{a:g}' for a in alphas)}"]
    lines.append(" ".join(["method".ljust(name_w)] + [c.rjust(w) for c, w in zip(cats, widths)] + ["  mean"]))
    for name, rep in reports.items():
        by = {c.category: c.pck for c in rep.categories}
        cells = [(f"{100 * by[c]:.1f}" if c in by else "-").rjust(w) for c, w in zip(cats, widths)]
        lines.append(" ".join([name.ljust(name_w)] + cells + [f"{100 * rep.mean:6.1f}"]))
    return "\n".join(lines)
