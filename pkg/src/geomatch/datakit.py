"""Pair records, manifests, synthetic pairs and labeled/unlabeled set construction.

Keypoints are stored in [0, 1]^2 image-fraction coordinates and converted to
the [-1, 1]^2 convention of :mod:`geomatch.geometry` when used in losses.
Image references are paths relative to the manifest's ``image_root``; a
``#hflip`` suffix means "this file, mirrored horizontally".
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image

from .errors import InvalidInputError, SolverError
from .geometry import (
    CompositeTransform,
    IDENTITY_AFFINE,
    N_TPS,
    as_points,
    composite_apply,
    composite_inverse_apply,
    composite_spatial_jacobian,
    control_points,
    make_grid,
    warp_image,
)

FLIP_SUFFIX = "#hflip"
FAMILIES = ("affine", "tps", "composite")
MANIFEST_VERSION = 1
MAX_REJECTS = 100
# mapped control points may leave [-1, 1]^2 by at most this much
FRAME_MARGIN = 0.25

_SCALE = float(2 ** 53)


def _snap(x: np.ndarray) -> np.ndarray:
    # put unit coordinates on the 2^-53 lattice so 1 - x is exact in float64
    return np.round(np.asarray(x, dtype=np.float64) * _SCALE) / _SCALE


def to_normalized(unit_pts) -> np.ndarray:
    return 2.0 * as_points(unit_pts) - 1.0


def to_unit(norm_pts) -> np.ndarray:
    return (as_points(norm_pts) + 1.0) / 2.0


@dataclass
class PairRecord:
    source: str
    target: str
    category: str
    keypoints_src: np.ndarray | None = None
    keypoints_tgt: np.ndarray | None = None
    gt_transform: CompositeTransform | None = None
    labeled: bool = False
    images: tuple[np.ndarray, np.ndarray] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.category:
            raise InvalidInputError("category must be a nonempty string")
        if (self.keypoints_src is None) != (self.keypoints_tgt is None):
            raise InvalidInputError("keypoints_src and keypoints_tgt must be given together")
        if self.keypoints_src is not None:
            self.keypoints_src = _snap(as_points(self.keypoints_src, "keypoints_src"))
            self.keypoints_tgt = _snap(as_points(self.keypoints_tgt, "keypoints_tgt"))
            if self.keypoints_src.shape != self.keypoints_tgt.shape:
                raise InvalidInputError("keypoint sets differ in length")
        if self.labeled:
            if self.keypoints_src is None or self.keypoints_src.shape[0] == 0:
                raise InvalidInputError("labeled records need at least one keypoint correspondence")
            for kp in (self.keypoints_src, self.keypoints_tgt):
                if np.any(kp < 0.0) or np.any(kp > 1.0):
                    raise InvalidInputError("labeled keypoints must lie in [0, 1]^2")

    def __eq__(self, other):
        if not isinstance(other, PairRecord):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return np.array_equal(a, b)

        return (self.source == other.source and self.target == other.target
                and self.category == other.category and self.labeled == other.labeled
                and same(self.keypoints_src, other.keypoints_src)
                and same(self.keypoints_tgt, other.keypoints_tgt)
                and self.gt_transform == other.gt_transform)

    __hash__ = None

    def stripped(self) -> "PairRecord":
        """Copy without correspondences, marked unlabeled."""
        return replace(self, keypoints_src=None, keypoints_tgt=None, gt_transform=None, labeled=False)

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "target": self.target,
            "category": self.category,
            "keypoints_src": None if self.keypoints_src is None else self.keypoints_src.tolist(),
            "keypoints_tgt": None if self.keypoints_tgt is None else self.keypoints_tgt.tolist(),
            "gt_transform": None if self.gt_transform is None else self.gt_transform.to_dict(),
            "labeled": self.labeled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PairRecord":
        gt = d.get("gt_transform")
        return cls(
            source=d["source"], target=d["target"], category=d["category"],
            keypoints_src=d.get("keypoints_src"), keypoints_tgt=d.get("keypoints_tgt"),
            gt_transform=None if gt is None else CompositeTransform.from_dict(gt),
            labeled=bool(d["labeled"]),
        )


@dataclass
class Manifest:
    pairs: list[PairRecord] = field(default_factory=list)
    image_root: str = "."
    coord_convention: str = "unit"
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "image_root": self.image_root,
            "coord_convention": self.coord_convention,
            "metadata": self.metadata,
            "pairs": [p.to_dict() for p in self.pairs],
        }


_POINTS = {"oneOf": [{"type": "null"}, {"type": "array", "items": {
    "type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}}]}

MANIFEST_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "image_root", "coord_convention", "pairs"],
    "properties": {
        "version": {"const": MANIFEST_VERSION},
        "image_root": {"type": "string"},
        "coord_convention": {"const": "unit"},
        "metadata": {"type": "object"},
        "pairs": {"type": "array", "items": {
            "type": "object",
            "additionalProperties": False,
            "required": ["source", "target", "category", "labeled"],
            "properties": {
                "source": {"type": "string", "minLength": 1},
                "target": {"type": "string", "minLength": 1},
                "category": {"type": "string", "minLength": 1},
                "keypoints_src": _POINTS,
                "keypoints_tgt": _POINTS,
                "labeled": {"type": "boolean"},
                "gt_transform": {"oneOf": [{"type": "null"}, {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["affine", "tps"],
                    "properties": {
                        "affine": {"type": "array", "items": {"type": "number"}, "minItems": 6, "maxItems": 6},
                        "tps": {"type": "array", "items": {"type": "number"}, "minItems": 18, "maxItems": 18},
                    },
                }]},
            },
        }},
    },
}


def save_manifest(m: Manifest, path) -> None:
    Path(path).write_text(json.dumps(m.to_dict(), indent=1, sort_keys=True))


def load_manifest(path, check_images: bool = True) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: malformed JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path)
        raise InvalidInputError(f"{path}: schema violation at {where or '<root>'}: {exc.message}") from exc
    pairs = []
    for i, d in enumerate(doc["pairs"]):
        try:
            pairs.append(PairRecord.from_dict(d))
        except InvalidInputError as exc:
            raise InvalidInputError(f"{path}: record {i}: {exc}") from exc
    m = Manifest(pairs, doc["image_root"], doc["coord_convention"], doc.get("metadata", {}))
    if check_images:
        root = resolve_root(m, path)
        for i, rec in enumerate(m.pairs):
            for ref in (rec.source, rec.target):
                if not (root / ref.removesuffix(FLIP_SUFFIX)).is_file():
                    raise InvalidInputError(f"{path}: record {i}: image {ref!r} not found under {root}")
    return m


def resolve_root(m: Manifest, manifest_path) -> Path:
    root = Path(m.image_root)
    return root if root.is_absolute() else Path(manifest_path).parent / root


# --------------------------------------------------------------------------
# Images
# --------------------------------------------------------------------------

def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit levels a PNG round trip would produce."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def load_image(root, ref: str) -> np.ndarray:
    flip = ref.endswith(FLIP_SUFFIX)
    with Image.open(Path(root) / ref.removesuffix(FLIP_SUFFIX)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr[:, ::-1].copy() if flip else arr


def save_image(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(np.asarray(img), 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def attach_images(m: Manifest, manifest_path=None) -> Manifest:
    """Load every referenced image into ``record.images`` (cached per reference)."""
    root = resolve_root(m, manifest_path or ".")
    cache: dict[str, np.ndarray] = {}
    for rec in m.pairs:
        if rec.images is None:
            for ref in (rec.source, rec.target):
                if ref not in cache:
                    cache[ref] = load_image(root, ref)
            rec.images = (cache[rec.source], cache[rec.target])
    return m


def write_images(m: Manifest, root) -> None:
    """Write attached images to ``root`` under their references (flipped refs are derived, not written)."""
    for rec in m.pairs:
        if rec.images is None:
            continue
        for ref, img in zip((rec.source, rec.target), rec.images):
            if ref.endswith(FLIP_SUFFIX):
                continue
            path = Path(root) / ref
            if not path.exists():
                save_image(path, img)


def random_image(size: int, rng: np.random.Generator, n_shapes: int = 8) -> np.ndarray:
    """Procedural RGB test image: smooth background plus random soft ellipses."""
    grid = ((2.0 * np.arange(size) + 1.0) / size - 1.0)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    c0, cx, cy = rng.uniform(0.2, 0.8, 3), rng.uniform(-0.2, 0.2, 3), rng.uniform(-0.2, 0.2, 3)
    img = c0 + xx[..., None] * cx + yy[..., None] * cy
    for _ in range(n_shapes):
        center = rng.uniform(-0.8, 0.8, 2)
        radii = rng.uniform(0.1, 0.4, 2)
        ang = rng.uniform(0, np.pi)
        color = rng.uniform(0, 1, 3)
        dx, dy = xx - center[0], yy - center[1]
        u = (np.cos(ang) * dx + np.sin(ang) * dy) / radii[0]
        v = (-np.sin(ang) * dx + np.cos(ang) * dy) / radii[1]
        alpha = 1.0 / (1.0 + np.exp((np.sqrt(u * u + v * v) - 1.0) * 12.0))
        img = img * (1 - alpha[..., None]) + alpha[..., None] * color
    return quantize(img)


# --------------------------------------------------------------------------
# Synthetic pairs
# --------------------------------------------------------------------------

def _within_frame(t: CompositeTransform) -> bool:
    mapped = composite_apply(t, control_points())
    if np.any(np.abs(mapped) > 1.0 + FRAME_MARGIN):
        return False
    det = np.linalg.det(composite_spatial_jacobian(t, make_grid(9, 9)))
    return bool(np.all(det > 0.1))


def random_transform(family: str, strength: float, rng: np.random.Generator) -> CompositeTransform:
    """Uniform draw around the identity, rejection-resampled until it stays in frame."""
    if family not in FAMILIES:
        raise InvalidInputError(f"family must be one of {FAMILIES}; got {family!r}")
    if not strength > 0:
        raise InvalidInputError(f"strength must be > 0; got {strength}")
    for _ in range(MAX_REJECTS):
        aff = IDENTITY_AFFINE.copy()
        tps = np.zeros(N_TPS)
        if family in ("affine", "composite"):
            aff = aff + strength * rng.uniform(-1.0, 1.0, 6)
        if family in ("tps", "composite"):
            tps = strength * rng.uniform(-1.0, 1.0, N_TPS)
        t = CompositeTransform(aff, tps)
        if _within_frame(t):
            return t
    raise InvalidInputError(f"strength {strength} yields out-of-frame transforms after {MAX_REJECTS} draws")


def _transfer_keypoints(t: CompositeTransform, k: int, rng: np.random.Generator, margin: float = 0.9):
    """K source points with target-frame preimages inside the frame, as ``(src, tgt)`` normalized."""
    src, tgt = [], []
    for _ in range(MAX_REJECTS):
        cand = rng.uniform(-margin, margin, (4 * k, 2))
        try:
            pre = composite_inverse_apply(t, cand)
        except SolverError:
            continue
        ok = np.all(np.abs(pre) <= margin, axis=1)
        src.extend(cand[ok])
        tgt.extend(pre[ok])
        if len(src) >= k:
            return np.array(src[:k]), np.array(tgt[:k])
    raise InvalidInputError("could not place keypoints inside both frames")


def synth_pair(base_img, family: str, strength: float, seed: int, n_keypoints: int = 20,
               source_ref: str = "src.png", target_ref: str = "tgt.png",
               category: str = "synthetic") -> PairRecord:
    """Target = base warped by a random transform; keypoints transferred exactly.

    ``gt_transform`` maps target-frame points to source-frame points, the same
    direction the network estimates.
    """
    base = np.asarray(base_img, dtype=np.float64)
    rng = np.random.default_rng(seed)
    gt = random_transform(family, strength, rng)
    target = quantize(warp_image(base, gt))
    kp_src, kp_tgt = _transfer_keypoints(gt, n_keypoints, rng)
    rec = PairRecord(source_ref, target_ref, category, to_unit(kp_src), to_unit(kp_tgt), gt, labeled=True)
    rec.images = (base, target)
    return rec


# --------------------------------------------------------------------------
# Flip augmentation
# --------------------------------------------------------------------------

def _flip_ref(ref: str) -> str:
    return ref.removesuffix(FLIP_SUFFIX) if ref.endswith(FLIP_SUFFIX) else ref + FLIP_SUFFIX


# permutation of control indices under x -> -x on the 3x3 grid
_CTRL_MIRROR = np.array([2, 1, 0, 5, 4, 3, 8, 7, 6])


def flip_transform(t: CompositeTransform) -> CompositeTransform:
    """Conjugate by the horizontal mirror F: returns F o t o F (exact)."""
    a = t.affine * np.array([1, -1, -1, -1, 1, 1])
    dx, dy = t.tps[:9], t.tps[9:]
    tps = np.concatenate([-dx[_CTRL_MIRROR], dy[_CTRL_MIRROR]])
    return CompositeTransform(a, tps)


def flip_record(rec: PairRecord) -> PairRecord:
    """Mirror both images of a pair horizontally."""

    def flip_kp(kp):
        if kp is None:
            return None
        out = kp.copy()
        out[:, 0] = 1.0 - out[:, 0]
        return out

    out = replace(
        rec,
        source=_flip_ref(rec.source), target=_flip_ref(rec.target),
        keypoints_src=flip_kp(rec.keypoints_src), keypoints_tgt=flip_kp(rec.keypoints_tgt),
        gt_transform=None if rec.gt_transform is None else flip_transform(rec.gt_transform),
    )
    if rec.images is not None:
        out.images = tuple(img[:, ::-1].copy() for img in rec.images)
    return out


def flip_augment(records, seed: int, ratio: float = 1.0) -> list[PairRecord]:
    """Append ``round(ratio * len(records))`` flipped copies of randomly drawn records.

    Draws are with replacement, so a pair may be repeated.
    """
    records = list(records)
    if not records or ratio <= 0:
        return records
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(records), int(round(ratio * len(records))))
    return records + [flip_record(records[i]) for i in idx]


# --------------------------------------------------------------------------
# Unlabeled set
# --------------------------------------------------------------------------

def build_unlabeled(images_by_category: dict, cap: int, labeled, seed: int,
                    exclude=()) -> list[PairRecord]:
    """Capped same-category ordered pairs plus every labeled record stripped of correspondences.

    ``exclude`` is a deny-list of ``(source, target)`` refs (test / validation
    pairs) that may not appear in the output.
    """
    if cap < 1:
        raise InvalidInputError(f"cap must be >= 1; got {cap}")
    if not images_by_category:
        raise InvalidInputError("images_by_category is empty")
    deny = {tuple(p) for p in exclude}
    rng = np.random.default_rng(seed)
    out = []
    for cat in sorted(images_by_category):
        refs = list(images_by_category[cat])
        pairs = [p for p in itertools.permutations(refs, 2) if p not in deny]
        take = min(cap, len(pairs))
        for i in sorted(rng.choice(len(pairs), size=take, replace=False)) if take else []:
            out.append(PairRecord(pairs[i][0], pairs[i][1], cat))
    for rec in labeled:
        if (rec.source, rec.target) in deny:
            raise InvalidInputError(f"labeled pair ({rec.source}, {rec.target}) is on the test/validation deny-list")
        out.append(rec.stripped())
    return out


def reference_scale_counts(n_train: int = 700, flip_ratio: float = 2.57, n_categories: int = 20,
                           images_per_category: int = 30, cap: int = 100, seed: int = 0) -> dict:
    """Set sizes produced by the labeled/unlabeled construction rules at full dataset scale.

    Builds placeholder records (no images) and counts them. The unlabeled total
    depends on how many images each category has, so it is reported, not fixed.
    """
    rng = np.random.default_rng(seed)
    kp = np.full((1, 2), 0.5)
    cats = [f"class{c:02d}" for c in range(n_categories)]
    train = [PairRecord(f"{cats[i % n_categories]}/{i}a.png", f"{cats[i % n_categories]}/{i}b.png",
                        cats[i % n_categories], kp, kp, labeled=True) for i in range(n_train)]
    labeled = flip_augment(train, seed, flip_ratio)
    images = {c: [f"{c}/img{k}.png" for k in range(images_per_category)] for c in cats}
    unlabeled = build_unlabeled(images, cap, labeled, int(rng.integers(2**31)))
    return {
        "train_pairs": n_train,
        "flip_ratio": flip_ratio,
        "labeled_after_flip": len(labeled),
        "categories": n_categories,
        "images_per_category": images_per_category,
        "cap_per_category": cap,
        "capped_pairs": len(unlabeled) - len(labeled),
        "unlabeled_total": len(unlabeled),
        "note": "the unlabeled total depends on per-category image counts; the reference figure of 7400 is "
                "dataset-dependent and not asserted",
    }
