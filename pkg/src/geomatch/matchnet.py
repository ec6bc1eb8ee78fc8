"""Two-stage geometric matching network: features, correlation, affine then TPS regression.

Given a source and a target image the network returns the composite transform
that maps TARGET-frame points to SOURCE-frame points, i.e. the sampling map
that warps the source onto the target.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers
from .errors import InvalidInputError, StateError
from .geometry import IDENTITY_AFFINE, N_AFFINE, N_TPS, CompositeTransform, warp_image

HEADS = {"affine": N_AFFINE, "tps": N_TPS}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    in_channels: int = 3
    feature_channels: tuple[int, ...] = (16, 32, 64)
    feature_kernel: int = 3
    head_channels: tuple[int, ...] = (128, 64)
    head_kernels: tuple[int, ...] = (7, 5)
    fc_init_scale: float = 0.0
    corr_normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "feature_channels", tuple(int(c) for c in self.feature_channels))
        object.__setattr__(self, "head_channels", tuple(int(c) for c in self.head_channels))
        object.__setattr__(self, "head_kernels", tuple(int(k) for k in self.head_kernels))
        if len(self.head_channels) != len(self.head_kernels):
            raise InvalidInputError("head_channels and head_kernels must have equal length")
        if any(k % 2 == 0 for k in self.head_kernels + (self.feature_kernel,)):
            raise InvalidInputError("kernel sizes must be odd")
        if not self.feature_channels:
            raise InvalidInputError("at least one feature layer is required")
        if self.image_size % self.stride:
            raise InvalidInputError(
                f"image_size {self.image_size} is not divisible by the total stride {self.stride}")

    @property
    def stride(self) -> int:
        return 2 ** len(self.feature_channels)

    @property
    def feature_size(self) -> int:
        return self.image_size // self.stride

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def names(self, head: str | None = None) -> list[str]:
        prefix = "" if head is None else head + "."
        return [k for k in self.arrays if k.startswith(prefix)]

    def trainable_names(self, freeze_features: bool = True) -> list[str]:
        return [k for k in self.arrays if not (freeze_features and k.startswith("features."))]


def init_params(config: ModelConfig = ModelConfig(), seed: int = 0) -> ModelParams:
    """He-normal conv weights; FC heads start at the identity transform."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    cin = config.in_channels
    k = config.feature_kernel
    for i, cout in enumerate(config.feature_channels):
        arrays[f"features.conv{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / (k * k * cin)), (k, k, cin, cout))
        arrays[f"features.conv{i}.bias"] = np.zeros(cout)
        cin = cout
    side = config.feature_size
    for head, n_out in HEADS.items():
        cin = side * side
        for i, (cout, kk) in enumerate(zip(config.head_channels, config.head_kernels)):
            arrays[f"{head}.conv{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / (kk * kk * cin)), (kk, kk, cin, cout))
            arrays[f"{head}.conv{i}.bias"] = np.zeros(cout)
            cin = cout
        flat = side * side * cin
        arrays[f"{head}.fc.weight"] = rng.normal(0.0, 1.0, (flat, n_out)) * (config.fc_init_scale / np.sqrt(flat))
        arrays[f"{head}.fc.bias"] = IDENTITY_AFFINE.copy() if head == "affine" else np.zeros(N_TPS)
    return ModelParams(config, arrays)


# --------------------------------------------------------------------------
# Stage functions
# --------------------------------------------------------------------------

def _as_batch(imgs, config: ModelConfig) -> np.ndarray:
    x = np.asarray(imgs, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, :, :, None]
    elif x.ndim == 3:
        x = x[None] if x.shape[-1] == config.in_channels else x[..., None]
    if x.ndim != 4 or x.shape[1:] != (config.image_size, config.image_size, config.in_channels):
        raise InvalidInputError(
            f"expected images of shape ({config.image_size}, {config.image_size}, {config.in_channels}); "
            f"got {np.shape(imgs)}")
    return x


def _features(p: ModelParams, x: np.ndarray, keep: bool):
    pad = p.config.feature_kernel // 2
    cache = []
    h = x
    for i in range(len(p.config.feature_channels)):
        out, cols = layers.conv2d(h, p.arrays[f"features.conv{i}.weight"], p.arrays[f"features.conv{i}.bias"], 2, pad)
        out = layers.relu(out)
        if keep:
            cache.append((cols, h.shape, out))
        h = out
    return h, cache


def _features_backward(p: ModelParams, dout, cache, grads: dict):
    pad = p.config.feature_kernel // 2
    for i in reversed(range(len(cache))):
        cols, x_shape, out = cache[i]
        dpre = layers.relu_backward(dout, out)
        w = p.arrays[f"features.conv{i}.weight"]
        dout, dw, db = layers.conv2d_backward(dpre, cols, x_shape, w, 2, pad, need_dx=i > 0)
        grads[f"features.conv{i}.weight"] = grads.get(f"features.conv{i}.weight", 0.0) + dw
        grads[f"features.conv{i}.bias"] = grads.get(f"features.conv{i}.bias", 0.0) + db


def extract_features(img, p: ModelParams) -> np.ndarray:
    """Raw (un-normalized) feature map(s), shape (N, h, w, d) or (h, w, d) for one image."""
    single = np.ndim(img) == 2 or (np.ndim(img) == 3 and np.shape(img)[-1] == p.config.in_channels)
    f, _ = _features(p, _as_batch(img, p.config), keep=False)
    return f[0] if single else f


def l2_normalize(f) -> np.ndarray:
    """Unit-normalize every spatial location's feature vector; zero vectors stay zero."""
    return layers.l2_normalize(np.asarray(f, dtype=np.float64))[0]


def correlate(fa, fb) -> np.ndarray:
    """Correlation volume with entry (i, j, k) = <fb(i, j), fa(flat k)>.

    Accepts (h, w, d) or batched (N, h, w, d) maps; returns (..., h, w, h*w).
    """
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    if fa.shape != fb.shape or fa.ndim not in (3, 4):
        raise InvalidInputError(f"feature maps must share a (h, w, d) shape; got {fa.shape} and {fb.shape}")
    lead = fa.shape[:-3]
    h, w, d = fa.shape[-3:]
    a = fa.reshape(lead + (h * w, d))
    b = fb.reshape(lead + (h * w, d))
    return (b @ np.swapaxes(a, -1, -2)).reshape(lead + (h, w, h * w))


def _head(p: ModelParams, head: str, c: np.ndarray, keep: bool):
    cache = []
    h = c
    if p.config.corr_normalize:
        r = layers.relu(c)
        h, norm = layers.l2_normalize(r)
        if keep:
            cache.append((r, h, norm))
    for i, k in enumerate(p.config.head_kernels):
        out, cols = layers.conv2d(h, p.arrays[f"{head}.conv{i}.weight"], p.arrays[f"{head}.conv{i}.bias"], 1, k // 2)
        out = layers.relu(out)
        if keep:
            cache.append((cols, h.shape, out))
        h = out
    flat = h.reshape(h.shape[0], -1)
    out = flat @ p.arrays[f"{head}.fc.weight"] + p.arrays[f"{head}.fc.bias"]
    if keep:
        cache.append(flat)
    return out, cache


def _head_backward(p: ModelParams, head: str, dout, cache, grads: dict, need_input_grad: bool):
    flat = cache[-1]
    pre = 1 if p.config.corr_normalize else 0
    grads[f"{head}.fc.weight"] = grads.get(f"{head}.fc.weight", 0.0) + flat.T @ dout
    grads[f"{head}.fc.bias"] = grads.get(f"{head}.fc.bias", 0.0) + dout.sum(axis=0)
    n_layers = len(p.config.head_kernels)
    dh = (dout @ p.arrays[f"{head}.fc.weight"].T).reshape(cache[pre + n_layers - 1][2].shape)
    for i in reversed(range(n_layers)):
        cols, x_shape, out = cache[pre + i]
        dpre = layers.relu_backward(dh, out)
        w = p.arrays[f"{head}.conv{i}.weight"]
        dh, dw, db = layers.conv2d_backward(dpre, cols, x_shape, w, 1, p.config.head_kernels[i] // 2,
                                            need_dx=need_input_grad or i > 0)
        grads[f"{head}.conv{i}.weight"] = grads.get(f"{head}.conv{i}.weight", 0.0) + dw
        grads[f"{head}.conv{i}.bias"] = grads.get(f"{head}.conv{i}.bias", 0.0) + db
    if pre and need_input_grad:
        r, h, norm = cache[0]
        dh = layers.relu_backward(layers.l2_normalize_backward(dh, h, norm), r)
    return dh


def regress(c, head: str, p: ModelParams) -> np.ndarray:
    """Transformation parameters from a correlation volume: (6,) / (18,) or batched (N, 6|18)."""
    if head not in HEADS:
        raise InvalidInputError(f"unknown head {head!r}; expected one of {sorted(HEADS)}")
    c = np.asarray(c, dtype=np.float64)
    s = p.config.feature_size
    single = c.ndim == 3
    batch = c[None] if single else c
    if batch.ndim != 4 or batch.shape[1:] != (s, s, s * s):
        raise InvalidInputError(f"correlation volume must have shape ({s}, {s}, {s * s}); got {c.shape}")
    out, _ = _head(p, head, batch, keep=False)
    return out[0] if single else out


# --------------------------------------------------------------------------
# Full network with a recorded tape for reverse mode
# --------------------------------------------------------------------------

class Tape:
    """Intermediate values of one batched forward pass, consumed by :func:`backward`."""

    def __init__(self, **values):
        self.__dict__.update(values)
        self.consumed = False


def forward(p: ModelParams, src, tgt, *, record: bool = False, src_feats=None, tgt_feats=None,
            warp_affine=None, train_features: bool = False):
    """Batched two-stage estimate. Returns ``(params (N, 24), tape | None)``.

    ``src_feats`` / ``tgt_feats`` are optional precomputed *normalized* feature
    maps (ignored when ``train_features`` is set). ``warp_affine`` (N, 6)
    overrides the affine used for the inter-stage warp; the warp is never
    differentiated, so gradient checks hold it fixed this way.
    """
    cfg = p.config
    xs = _as_batch(src, cfg)
    xt = _as_batch(tgt, cfg)
    if xs.shape[0] != xt.shape[0]:
        raise InvalidInputError("source and target batches differ in size")
    keep_feats = record and train_features
    cache = {}

    def norm_feats(x, given, key):
        if given is not None and not train_features:
            return np.asarray(given, dtype=np.float64).reshape((x.shape[0],) + (cfg.feature_size,) * 2 + (-1,))
        raw, fcache = _features(p, x, keep_feats)
        out, norm = layers.l2_normalize(raw)
        if keep_feats:
            cache[key] = (fcache, out, norm)
        return out

    na = norm_feats(xs, src_feats, "src")
    nb = norm_feats(xt, tgt_feats, "tgt")
    c1 = correlate(na, nb)
    aff, aff_cache = _head(p, "affine", c1, record)
    if not np.all(np.isfinite(aff)):
        raise FloatingPointError("network produced non-finite affine parameters")

    used = aff if warp_affine is None else np.asarray(warp_affine, dtype=np.float64).reshape(-1, N_AFFINE)
    warped = np.stack([warp_image(xs[i], CompositeTransform(affine=used[i])) for i in range(xs.shape[0])])
    nw = norm_feats(warped, None, "warped")
    c2 = correlate(nw, nb)
    tps, tps_cache = _head(p, "tps", c2, record)

    out = np.concatenate([aff, tps], axis=1)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("network produced non-finite transform parameters")
    tape = None
    if record:
        tape = Tape(aff_cache=aff_cache, tps_cache=tps_cache, feat_cache=cache, train_features=train_features,
                    na=na, nb=nb, nw=nw, batch=xs.shape[0])
    return out, tape


def _corr_backward(dc, fa, fb):
    lead = fa.shape[:-3]
    h, w, d = fa.shape[-3:]
    g = dc.reshape(lead + (h * w, h * w))
    a = fa.reshape(lead + (h * w, d))
    b = fb.reshape(lead + (h * w, d))
    dfb = (g @ a).reshape(fa.shape)
    dfa = (np.swapaxes(g, -1, -2) @ b).reshape(fa.shape)
    return dfa, dfb


def backward(p: ModelParams, tape: Tape | None, grad_out) -> dict[str, np.ndarray]:
    """Vector-Jacobian product of a recorded forward pass.

    ``grad_out`` is (N, 24): upstream gradient per pair w.r.t. the affine and
    TPS outputs. Returns gradients for the trainable parameters only (feature
    weights are included iff the tape was recorded with ``train_features``).
    """
    if tape is None or not isinstance(tape, Tape):
        raise StateError("backward called without a recorded forward pass")
    if tape.consumed:
        raise StateError("tape was already consumed by a previous backward call")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != (tape.batch, N_AFFINE + N_TPS):
        raise InvalidInputError(f"grad_out must have shape ({tape.batch}, 24); got {g.shape}")
    tape.consumed = True
    grads: dict[str, np.ndarray] = {}
    tf = tape.train_features
    dc1 = _head_backward(p, "affine", g[:, :N_AFFINE], tape.aff_cache, grads, tf)
    dc2 = _head_backward(p, "tps", g[:, N_AFFINE:], tape.tps_cache, grads, tf)
    if tf:
        dna, dnb1 = _corr_backward(dc1, tape.na, tape.nb)
        dnw, dnb2 = _corr_backward(dc2, tape.nw, tape.nb)
        for key, dn in (("src", dna), ("tgt", dnb1 + dnb2), ("warped", dnw)):
            fcache, out, norm = tape.feat_cache[key]
            _features_backward(p, layers.l2_normalize_backward(dn, out, norm), fcache, grads)
    return {k: np.asarray(v, dtype=np.float64) for k, v in grads.items()}


def estimate_transform(src, tgt, p: ModelParams) -> CompositeTransform:
    """Composite transform mapping target-frame points to source-frame points."""
    out, _ = forward(p, src, tgt)
    if out.shape[0] != 1:
        raise InvalidInputError("estimate_transform takes a single image pair")
    return CompositeTransform(out[0, :N_AFFINE], out[0, N_AFFINE:])


def normalized_features(p: ModelParams, imgs) -> np.ndarray:
    return l2_normalize(extract_features(_as_batch(imgs, p.config), p))
