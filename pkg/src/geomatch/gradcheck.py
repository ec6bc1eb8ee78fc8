"""Finite-difference checks of every analytic gradient used in training.

Shared by the ``gradcheck`` CLI subcommand and the test-suite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import matchnet
from .datakit import PairRecord
from .geometry import IDENTITY_AFFINE, CompositeTransform, make_grid
from .objective import cycle_loss, grid_loss, keypoint_loss
from .optimize import TrainConfig, batch_gradient

TRANSFORM_TOL = 1e-5
NETWORK_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    n_checked: int
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.n_checked} checked, worst rel err {self.worst:.2e} (tol {self.tol:.0e})"


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(analytic, numeric) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _random_transform(rng, aff=0.15, tps=0.08) -> CompositeTransform:
    return CompositeTransform(IDENTITY_AFFINE + rng.normal(0, aff, 6), rng.normal(0, tps, 18))


def check_transform_losses(seed: int = 0, draws: int = 100, tol: float = TRANSFORM_TOL) -> list[CheckResult]:
    """Grid, keypoint and cycle losses against central differences over ``draws`` random draws."""
    rng = np.random.default_rng(seed)
    grid = make_grid(5, 5)
    worst = {"grid_loss": 0.0, "keypoint_loss": 0.0, "cycle_loss": 0.0}
    for _ in range(draws):
        pred, gt = _random_transform(rng), _random_transform(rng)
        lv = grid_loss(pred, gt, grid)
        fd = central_diff(lambda x: grid_loss(CompositeTransform.from_vector(x), gt, grid).value, pred.as_vector())
        worst["grid_loss"] = max(worst["grid_loss"], rel_err(lv.grad, fd))

        pb, pa = rng.uniform(-1, 1, (6, 2)), rng.uniform(-1, 1, (6, 2))
        lv = keypoint_loss(pred, pb, pa)
        fd = central_diff(lambda x: keypoint_loss(CompositeTransform.from_vector(x), pb, pa).value, pred.as_vector())
        worst["keypoint_loss"] = max(worst["keypoint_loss"], rel_err(lv.grad, fd))

        ab, ba = _random_transform(rng), _random_transform(rng)
        lv = cycle_loss(ab, ba, grid)

        def cyc(x):
            return cycle_loss(CompositeTransform.from_vector(x[:24]), CompositeTransform.from_vector(x[24:]), grid).value

        fd = central_diff(cyc, np.concatenate([ab.as_vector(), ba.as_vector()]))
        worst["cycle_loss"] = max(worst["cycle_loss"], rel_err(lv.grad, fd))
    return [CheckResult(name, draws, w, tol) for name, w in worst.items()]


MINI_CONFIG = matchnet.ModelConfig(image_size=8, feature_channels=(2,), head_channels=(3, 2), head_kernels=(3, 3),
                                   fc_init_scale=1.0)


def _mini_data(rng, size: int):
    img = lambda: rng.random((size, size, 3))  # noqa: E731
    kp_a, kp_b = rng.uniform(0.1, 0.9, (5, 2)), rng.uniform(0.1, 0.9, (5, 2))
    lab = PairRecord("a", "b", "toy", kp_a, kp_b, labeled=True, images=(img(), img()))
    unl = PairRecord("c", "d", "toy", labeled=False, images=(img(), img()))
    return [lab], [unl]


def check_network(seed: int = 0, tol: float = NETWORK_TOL, train_features: bool = False, beta: float = 0.7,
                  h: float = 1e-6, config: matchnet.ModelConfig = MINI_CONFIG) -> CheckResult:
    """Combined-loss gradient w.r.t. every trainable weight of a miniature network.

    The inter-stage warp is held at its unperturbed value, matching the
    stop-gradient the analytic backward pass applies there.
    """
    rng = np.random.default_rng(seed)
    params = matchnet.init_params(config, seed)
    labeled, unlabeled = _mini_data(rng, config.image_size)
    cfg = TrainConfig(mode="semi", beta=beta, freeze_features=not train_features)
    grid = make_grid(4, 4)
    batch = [("l", 0), ("u", 0)]
    _, grads, _, warp = batch_gradient(params, batch, labeled, unlabeled, cfg, grid)

    def loss(p):
        return batch_gradient(p, batch, labeled, unlabeled, cfg, grid, warp_affine=warp)[0]

    worst, n = 0.0, 0
    for name in params.trainable_names(cfg.freeze_features):
        fd = np.zeros_like(params.arrays[name])
        for idx in np.ndindex(fd.shape):
            q = params.copy()
            q.arrays[name][idx] += h
            up = loss(q)
            q.arrays[name][idx] -= 2 * h
            fd[idx] = (up - loss(q)) / (2 * h)
            n += 1
        worst = max(worst, rel_err(grads[name], fd))
    label = "network (features trained)" if train_features else "network (heads)"
    return CheckResult(label, n, worst, tol)


def run_suite(seed: int = 0, transform_tol: float = TRANSFORM_TOL,
              network_tol: float = NETWORK_TOL) -> list[CheckResult]:
    results = check_transform_losses(seed, tol=transform_tol)
    results.append(check_network(seed, network_tol))
    results.append(check_network(seed, network_tol, train_features=True))
    return results

