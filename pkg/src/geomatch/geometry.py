"""Parametric 2-D transformations in normalized [-1, 1] coordinates.

Points are ``(M, 2)`` float arrays of ``(x, y)``. Jacobians are returned as
``(2M, P)`` matrices whose rows interleave ``x0, y0, x1, y1, ...``.

Affine parameters are ordered ``(a11, a12, tx, a21, a22, ty)``. TPS parameters
are 18 displacement offsets of a fixed 3x3 control grid: the 9 x-offsets
followed by the 9 y-offsets, controls enumerated row-major (y outer, x inner).

A :class:`CompositeTransform` maps a point ``p`` to ``A(T(p))``: the image is
warped by the affine first and the TPS is then estimated (and applied) on the
affine-warped result, so under inverse warping the TPS acts on the
target-frame point before the affine does.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError, SolverError

IDENTITY_AFFINE = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
N_AFFINE = 6
N_TPS = 18

_CONTROL_AXIS = np.array([-1.0, 0.0, 1.0])


def control_points() -> np.ndarray:
    """The 9 fixed TPS control source locations, row-major over [-1, 1]^2."""
    ys, xs = np.meshgrid(_CONTROL_AXIS, _CONTROL_AXIS, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def as_points(pts, name: str = "pts") -> np.ndarray:
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInputError(f"{name} must have shape (M, 2); got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def _as_vector(values, size: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size != size:
        raise InvalidInputError(f"{name} must have {size} values; got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class CompositeTransform:
    """Affine parameters plus TPS control offsets."""

    affine: np.ndarray = field(default_factory=lambda: IDENTITY_AFFINE.copy())
    tps: np.ndarray = field(default_factory=lambda: np.zeros(N_TPS))

    def __post_init__(self):
        object.__setattr__(self, "affine", _as_vector(self.affine, N_AFFINE, "affine"))
        object.__setattr__(self, "tps", _as_vector(self.tps, N_TPS, "tps"))

    @classmethod
    def identity(cls) -> "CompositeTransform":
        return cls()

    @classmethod
    def from_vector(cls, vec) -> "CompositeTransform":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != N_AFFINE + N_TPS:
            raise InvalidInputError(f"expected 24 values; got {vec.size}")
        return cls(vec[:N_AFFINE], vec[N_AFFINE:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.affine, self.tps])

    def to_dict(self) -> dict:
        return {"affine": self.affine.tolist(), "tps": self.tps.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CompositeTransform":
        return cls(d["affine"], d["tps"])

    def __eq__(self, other):
        if not isinstance(other, CompositeTransform):
            return NotImplemented
        return bool(np.array_equal(self.affine, other.affine) and np.array_equal(self.tps, other.tps))

    __hash__ = None


# --------------------------------------------------------------------------
# Affine
# --------------------------------------------------------------------------

def affine_matrix(params) -> tuple[np.ndarray, np.ndarray]:
    """Split affine params into a 2x2 linear part and a translation."""
    a = _as_vector(params, N_AFFINE, "affine params")
    return np.array([[a[0], a[1]], [a[3], a[4]]]), np.array([a[2], a[5]])


def affine_apply(params, pts) -> np.ndarray:
    lin, t = affine_matrix(params)
    p = as_points(pts)
    return p @ lin.T + t


def affine_jacobian(pts) -> np.ndarray:
    """d(affine_apply)/d(params), shape (2M, 6). Independent of the parameters."""
    p = as_points(pts)
    m = p.shape[0]
    jac = np.zeros((2 * m, N_AFFINE))
    jac[0::2, 0] = p[:, 0]
    jac[0::2, 1] = p[:, 1]
    jac[0::2, 2] = 1.0
    jac[1::2, 3] = p[:, 0]
    jac[1::2, 4] = p[:, 1]
    jac[1::2, 5] = 1.0
    return jac


def affine_compose(outer, inner) -> np.ndarray:
    """Parameters of ``outer(inner(p))`` as a single affine."""
    l1, t1 = affine_matrix(outer)
    l2, t2 = affine_matrix(inner)
    lin = l1 @ l2
    t = l1 @ t2 + t1
    return np.array([lin[0, 0], lin[0, 1], t[0], lin[1, 0], lin[1, 1], t[1]])


def affine_inverse(params) -> np.ndarray:
    lin, t = affine_matrix(params)
    if abs(np.linalg.det(lin)) < 1e-12:
        raise InvalidInputError("affine transform is not invertible")
    inv = np.linalg.inv(lin)
    ti = -inv @ t
    return np.array([inv[0, 0], inv[0, 1], ti[0], inv[1, 0], inv[1, 1], ti[1]])


# --------------------------------------------------------------------------
# Thin-plate spline
# --------------------------------------------------------------------------

def tps_kernel(sq_dist: np.ndarray) -> np.ndarray:
    """U as a function of squared distance s = r^2: s * log(s), with U(0) = 0."""
    s = np.asarray(sq_dist, dtype=np.float64)
    out = np.zeros_like(s)
    pos = s > 0
    out[pos] = s[pos] * np.log(s[pos])
    return out


def _sq_dists(p: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = p[:, None, :] - c[None, :, :]
    return np.sum(d * d, axis=-1)


@lru_cache(maxsize=1)
def _system_matrix() -> np.ndarray:
    c = control_points()
    n = c.shape[0]
    mat = np.zeros((n + 3, n + 3))
    mat[:n, :n] = tps_kernel(_sq_dists(c, c))
    mat[:n, n] = 1.0
    mat[:n, n + 1:] = c
    mat[n, :n] = 1.0
    mat[n + 1:, :n] = c.T
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=1)
def _offset_solver() -> np.ndarray:
    """(12, 9) map from per-control displacement to [kernel weights; affine part]."""
    mat = _system_matrix()
    rhs = np.zeros((12, 9))
    rhs[:9, :9] = np.eye(9)
    try:
        sol = np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"TPS system is singular: {exc}") from exc
    sol.setflags(write=False)
    return sol


@dataclass(frozen=True)
class TpsCoefficients:
    """Solved TPS displacement field.

    ``weights`` is (9, 2) kernel weights, ``disp_affine`` is (3, 2) so that the
    displacement is ``[1, x, y] @ disp_affine + U(p) @ weights``.
    """

    weights: np.ndarray
    disp_affine: np.ndarray
    controls: np.ndarray

    @property
    def affine_part(self) -> np.ndarray:
        """Affine part of the full map as ``(a11, a12, tx, a21, a22, ty)``."""
        d = self.disp_affine
        return np.array([1.0 + d[1, 0], d[2, 0], d[0, 0], d[1, 1], 1.0 + d[2, 1], d[0, 1]])


def tps_solve(offsets) -> TpsCoefficients:
    off = _as_vector(offsets, N_TPS, "tps offsets")
    disp = np.stack([off[:9], off[9:]], axis=1)
    sol = _offset_solver() @ disp
    if not np.all(np.isfinite(sol)):
        raise SolverError("TPS solve produced non-finite coefficients")
    return TpsCoefficients(weights=sol[:9], disp_affine=sol[9:], controls=control_points())


def _basis(p: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """Rows ``[U(p - c_1..9), 1, x, y]`` for each point."""
    return np.concatenate([tps_kernel(_sq_dists(p, controls)), np.ones((p.shape[0], 1)), p], axis=1)


def tps_apply(coeffs: TpsCoefficients, pts) -> np.ndarray:
    p = as_points(pts)
    coef = np.concatenate([coeffs.weights, coeffs.disp_affine], axis=0)
    if not np.all(np.isfinite(coef)):
        raise InvalidInputError("TPS coefficients contain non-finite values")
    return p + _basis(p, coeffs.controls) @ coef


def _interp_weights(p: np.ndarray) -> np.ndarray:
    """(M, 9): displacement at p is this matrix times the control displacements."""
    return _basis(p, control_points()) @ _offset_solver()


def tps_jacobian(pts) -> np.ndarray:
    """d(tps_apply o tps_solve)/d(offsets), shape (2M, 18). Independent of the offsets."""
    p = as_points(pts)
    if p.shape[0] == 0:
        raise InvalidInputError("tps_jacobian needs at least one point")
    b = _interp_weights(p)
    m = p.shape[0]
    jac = np.zeros((2 * m, N_TPS))
    jac[0::2, :9] = b
    jac[1::2, 9:] = b
    return jac


def tps_spatial_jacobian(coeffs: TpsCoefficients, pts) -> np.ndarray:
    """d(tps_apply)/d(point), shape (M, 2, 2)."""
    p = as_points(pts)
    diff = p[:, None, :] - coeffs.controls[None, :, :]
    s = np.sum(diff * diff, axis=-1)
    # dU/dp = 2 (log s + 1) (p - c); the limit at s = 0 is zero
    scale = np.zeros_like(s)
    pos = s > 0
    scale[pos] = 2.0 * (np.log(s[pos]) + 1.0)
    du = scale[..., None] * diff  # (M, 9, 2)
    jac = np.einsum("mkj,ki->mij", du, coeffs.weights)
    jac[:, :, 0] += coeffs.disp_affine[1]
    jac[:, :, 1] += coeffs.disp_affine[2]
    jac[:, 0, 0] += 1.0
    jac[:, 1, 1] += 1.0
    return jac


# --------------------------------------------------------------------------
# Composite
# --------------------------------------------------------------------------

def composite_apply(t: CompositeTransform, pts) -> np.ndarray:
    if not np.any(t.tps):
        return affine_apply(t.affine, pts)
    return affine_apply(t.affine, tps_apply(tps_solve(t.tps), pts))


def composite_jacobian(t: CompositeTransform, pts) -> np.ndarray:
    """d(composite_apply)/d(affine ++ tps), shape (2M, 24)."""
    p = as_points(pts)
    mid = tps_apply(tps_solve(t.tps), p)
    lin, _ = affine_matrix(t.affine)
    j_tps = tps_jacobian(p).reshape(p.shape[0], 2, N_TPS)
    j_tps = np.einsum("ij,mjk->mik", lin, j_tps).reshape(2 * p.shape[0], N_TPS)
    return np.concatenate([affine_jacobian(mid), j_tps], axis=1)


def composite_spatial_jacobian(t: CompositeTransform, pts) -> np.ndarray:
    """d(composite_apply)/d(point), shape (M, 2, 2)."""
    lin, _ = affine_matrix(t.affine)
    return np.einsum("ij,mjk->mik", lin, tps_spatial_jacobian(tps_solve(t.tps), pts))


def composite_inverse_apply(t: CompositeTransform, pts, tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """Solve ``composite_apply(t, q) = p`` for q by Newton iteration."""
    target = as_points(pts)
    q = affine_apply(affine_inverse(t.affine), target)
    for _ in range(max_iter):
        resid = composite_apply(t, q) - target
        if np.max(np.abs(resid), initial=0.0) <= tol:
            return q
        jac = composite_spatial_jacobian(t, q)
        try:
            step = np.linalg.solve(jac, resid[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SolverError("transform is locally non-invertible") from exc
        q = q - step
        if not np.all(np.isfinite(q)):
            raise SolverError("Newton inversion diverged")
    resid = composite_apply(t, q) - target
    if np.max(np.abs(resid), initial=0.0) > 1e3 * tol:
        raise SolverError(f"Newton inversion did not converge (residual {np.max(np.abs(resid)):.3g})")
    return q


# --------------------------------------------------------------------------
# Grids and images
# --------------------------------------------------------------------------

def make_grid(h_g: int, w_g: int) -> np.ndarray:
    """Row-major ``h_g x w_g`` lattice over [-1, 1]^2, shape (h_g * w_g, 2)."""
    if int(h_g) != h_g or int(w_g) != w_g or h_g < 2 or w_g < 2:
        raise InvalidInputError(f"grid dimensions must be integers >= 2; got ({h_g}, {w_g})")
    ys, xs = np.meshgrid(np.linspace(-1.0, 1.0, int(h_g)), np.linspace(-1.0, 1.0, int(w_g)), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def pixel_centers(width: int, height: int) -> np.ndarray:
    """Normalized coordinates of every pixel center, row-major, shape (H*W, 2)."""
    xs = (2.0 * np.arange(width) + 1.0) / width - 1.0
    ys = (2.0 * np.arange(height) + 1.0) / height - 1.0
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def _check_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim not in (2, 3) or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidInputError(f"image must be a nonempty (H, W) or (H, W, C) array; got {arr.shape}")
    return arr


def bilinear_sample(img, pts) -> np.ndarray:
    """Sample ``img`` at normalized points with zero padding outside the frame.

    Returns (M,) for 2-D images and (M, C) otherwise.
    """
    arr = _check_image(img)
    p = as_points(pts)
    h, w = arr.shape[:2]
    u = ((p[:, 0] + 1.0) * w - 1.0) / 2.0
    v = ((p[:, 1] + 1.0) * h - 1.0) / 2.0
    # coordinate round trips leave ulp-level noise on exact pixel centers
    for c in (u, v):
        r = np.rint(c)
        snap = np.abs(c - r) < 1e-9
        c[snap] = r[snap]
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = u - u0
    fv = v - v0
    chans = arr.reshape(h, w, -1)
    out = np.zeros((p.shape[0], chans.shape[2]))
    for dv, wv in ((0, 1.0 - fv), (1, fv)):
        for du, wu in ((0, 1.0 - fu), (1, fu)):
            uu = u0 + du
            vv = v0 + dv
            wgt = wu * wv
            ok = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h) & (wgt != 0)
            out[ok] += wgt[ok, None] * chans[vv[ok], uu[ok]]
    return out[:, 0] if arr.ndim == 2 else out


def warp_image(src, t: CompositeTransform, out_size: tuple[int, int] | None = None) -> np.ndarray:
    """Inverse-warp ``src`` so that output pixel p shows ``src(t(p))``.

    ``out_size`` is ``(width, height)``; defaults to the source size.
    """
    arr = _check_image(src)
    if out_size is None:
        out_size = (arr.shape[1], arr.shape[0])
    w, h = int(out_size[0]), int(out_size[1])
    if w <= 0 or h <= 0:
        raise InvalidInputError(f"output size must be positive; got {out_size}")
    src_pts = composite_apply(t, pixel_centers(w, h))
    vals = bilinear_sample(arr, src_pts)
    return vals.reshape((h, w) + arr.shape[2:])
