"""Adam and the training loop for the self / sup / unsup / semi regimes.

Per batch every pair is pushed through the network in the direction its loss
needs (labeled and synthetic pairs once, unlabeled pairs in both directions),
the per-pair losses are summed as ``sum L_s + beta * sum L_us`` and one Adam
step is taken on the trainable weights.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import matchnet
from .datakit import PairRecord, to_normalized
from .errors import ConfigError, InvalidInputError, NonFiniteLossError
from .geometry import N_AFFINE, CompositeTransform, make_grid
from .matchnet import ModelParams
from .objective import LossWeights, combined_loss, cycle_loss, grid_loss, keypoint_loss

log = logging.getLogger(__name__)

MODES = ("self", "sup", "unsup", "semi")
# learning rates used with a pretrained ResNet-101 backbone
REFERENCE_LR_SELF_UNSUP = 5e-8
REFERENCE_LR_SUP_SEMI = 5e-6


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update of the entries named in ``grads``."""
    t = state.step + 1
    new_params = dict(params)
    m_new, v_new = dict(state.m), dict(state.v)
    for name, g in grads.items():
        if name not in params:
            raise InvalidInputError(f"gradient for unknown parameter {name!r}")
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise InvalidInputError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


@dataclass
class TrainConfig:
    mode: str = "semi"
    learning_rate: float = 1e-3
    batch_size: int = 16
    beta: float = 1.0
    epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    freeze_features: bool = True
    symmetric_cycle: bool = False
    grid: tuple[int, int] = (20, 20)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    threads: int = 1

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}; got {self.mode!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0; got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1; got {self.batch_size}")
        if not self.beta >= 0:
            raise ConfigError(f"beta must be >= 0; got {self.beta}")
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ConfigError("epochs and max_steps must be nonnegative")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1; got {self.threads}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


@dataclass
class TrainLog:
    config: dict
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def losses(self) -> np.ndarray:
        return np.array([s["loss"] for s in self.steps])

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"type": "config", "config": self.config, "seed": self.config.get("seed")}) + "\n")
            for s in self.steps:
                fh.write(json.dumps({"type": "step", **s}) + "\n")
            for e in self.epochs:
                fh.write(json.dumps({"type": "epoch", **e}) + "\n")
            fh.write(json.dumps({"type": "summary", "wall_clock": self.wall_clock, "n_steps": len(self.steps)}) + "\n")


def batch_scheduler(labeled, unlabeled, batch_size: int, seed: int,
                    epochs: int | None = None) -> Iterator[list[tuple[str, int]]]:
    """Shuffled passes over the union of both sets, cut into batches.

    Yields lists of ``("l", i)`` / ``("u", j)`` items indexing into the two
    sequences. One epoch visits every pair exactly once; the last batch of an
    epoch may be short. Runs forever unless ``epochs`` is given.
    """
    n_l, n_u = len(labeled), len(unlabeled)
    if n_l + n_u == 0:
        raise InvalidInputError("batch_scheduler needs at least one pair")
    if batch_size < 1:
        raise InvalidInputError(f"batch_size must be >= 1; got {batch_size}")
    items = [("l", i) for i in range(n_l)] + [("u", j) for j in range(n_u)]
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(items))
        for start in range(0, len(items), batch_size):
            yield [items[k] for k in order[start:start + batch_size]]
        epoch += 1


def _images(rec: PairRecord):
    if rec.images is None:
        raise InvalidInputError(f"pair {rec.source} -> {rec.target} has no images attached")
    return rec.images


class _FeatureCache:
    """Normalized features of frozen-extractor images, keyed by array identity."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.store: dict[int, np.ndarray] = {}

    def get(self, img: np.ndarray) -> np.ndarray:
        key = id(img)
        if key not in self.store:
            self.store[key] = matchnet.normalized_features(self.params, img)[0]
        return self.store[key]


def _batch_rows(batch, labeled, unlabeled, mode):
    """Forward rows (src, tgt) for a batch and the bookkeeping to route losses back."""
    rows, jobs = [], []
    for tag, idx in batch:
        rec = labeled[idx] if tag == "l" else unlabeled[idx]
        a, b = _images(rec)
        if tag == "l":
            jobs.append(("grid" if mode == "self" else "kp", rec, len(rows)))
            rows.append((a, b))
        else:
            jobs.append(("cycle", rec, len(rows)))
            rows.append((a, b))  # estimate(A, B): maps B -> A
            rows.append((b, a))  # estimate(B, A): maps A -> B
    return rows, jobs


def batch_gradient(params: ModelParams, batch, labeled, unlabeled, cfg: TrainConfig, grid: np.ndarray,
                   cache: _FeatureCache | None = None, warp_affine=None):
    """Combined loss and trainable-weight gradients for one batch.

    ``warp_affine`` (one row per forward row) pins the inter-stage warp, which
    finite-difference checks need. Returns ``(loss, grads, info, warp_used)``.
    """
    rows, jobs = _batch_rows(batch, labeled, unlabeled, cfg.mode)
    train_features = not cfg.freeze_features

    def run(chunk):
        lo, hi = chunk
        src = np.stack([rows[r][0] for r in range(lo, hi)])
        tgt = np.stack([rows[r][1] for r in range(lo, hi)])
        sf = tf = None
        if cache is not None and not train_features:
            sf = np.stack([cache.get(rows[r][0]) for r in range(lo, hi)])
            tf = np.stack([cache.get(rows[r][1]) for r in range(lo, hi)])
        warp = None if warp_affine is None else np.asarray(warp_affine)[lo:hi]
        return matchnet.forward(params, src, tgt, record=True, src_feats=sf, tgt_feats=tf,
                                warp_affine=warp, train_features=train_features)

    bounds = np.linspace(0, len(rows), min(cfg.threads, len(rows)) + 1).astype(int)
    chunks = [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]
    if len(chunks) > 1:
        with ThreadPoolExecutor(len(chunks)) as ex:
            fwd = list(ex.map(run, chunks))
    else:
        fwd = [run(chunks[0])]
    out = np.concatenate([f[0] for f in fwd])
    preds = [CompositeTransform(o[:N_AFFINE], o[N_AFFINE:]) for o in out]

    labeled_terms, unlabeled_terms, routes = [], [], []
    for kind, rec, r in jobs:
        if kind == "grid":
            if rec.gt_transform is None:
                raise InvalidInputError(f"synthetic pair {rec.target} has no ground-truth transform")
            labeled_terms.append(grid_loss(preds[r], rec.gt_transform, grid))
            routes.append(("l", [r]))
        elif kind == "kp":
            labeled_terms.append(keypoint_loss(preds[r], to_normalized(rec.keypoints_tgt),
                                               to_normalized(rec.keypoints_src)))
            routes.append(("l", [r]))
        else:
            # rows r (B -> A) and r + 1 (A -> B)
            unlabeled_terms.append(cycle_loss(preds[r + 1], preds[r], grid, symmetric=cfg.symmetric_cycle))
            routes.append(("u", [r + 1, r]))
    total = combined_loss(labeled_terms, unlabeled_terms, LossWeights(cfg.beta))

    grad_rows = np.zeros_like(out)
    pos = 0
    for _, targets in [x for x in routes if x[0] == "l"] + [x for x in routes if x[0] == "u"]:
        for r in targets:
            grad_rows[r] += total.grad[pos:pos + 24]
            pos += 24

    def back(i):
        lo, hi = chunks[i]
        return matchnet.backward(params, fwd[i][1], grad_rows[lo:hi])

    if len(chunks) > 1:
        with ThreadPoolExecutor(len(chunks)) as ex:
            parts = list(ex.map(back, range(len(chunks))))
    else:
        parts = [back(0)]
    grads = parts[0]
    for extra in parts[1:]:
        for k, v in extra.items():
            grads[k] = grads[k] + v
    l_s = float(sum(t.value for t in labeled_terms))
    l_us = float(sum(t.value for t in unlabeled_terms))
    info = {"l_s": l_s, "l_us": l_us, "n_l": len(labeled_terms), "n_u": len(unlabeled_terms)}
    return total.value, grads, info, out[:, :N_AFFINE]


def _check_datasets(cfg: TrainConfig, labeled, unlabeled, synth):
    need = {"self": ("synth", synth), "sup": ("labeled", labeled), "unsup": ("unlabeled", unlabeled)}
    if cfg.mode in need:
        name, data = need[cfg.mode]
        if not data:
            raise ConfigError(f"mode={cfg.mode} needs a nonempty {name} dataset")
    if cfg.mode == "semi":
        if not labeled:
            raise ConfigError("mode=semi needs a nonempty labeled dataset")
        if not unlabeled and cfg.beta > 0:
            raise ConfigError("mode=semi needs a nonempty unlabeled dataset")
    if cfg.mode == "self":
        missing = [i for i, r in enumerate(synth) if r.gt_transform is None]
        if missing:
            raise ConfigError(f"synthetic pairs without ground truth at indices {missing[:5]}")
    if cfg.mode in ("sup", "semi"):
        bad = [i for i, r in enumerate(labeled) if not r.labeled]
        if bad:
            raise ConfigError(f"labeled dataset contains unlabeled records at indices {bad[:5]}")


def train(model: ModelParams, labeled=(), unlabeled=(), synth=(), cfg: TrainConfig = TrainConfig(),
          on_epoch=None, log_every: int = 0) -> tuple[ModelParams, TrainLog]:
    """Train ``model`` (not modified in place) under ``cfg.mode``.

    ``on_epoch(epoch, params)`` may return a dict that is stored in the epoch
    log (e.g. validation PCK) and is also the hook for periodic checkpoints.
    """
    labeled, unlabeled, synth = list(labeled), list(unlabeled), list(synth)
    _check_datasets(cfg, labeled, unlabeled, synth)
    if cfg.mode == "self":
        pool_l, pool_u = synth, []
    elif cfg.mode == "sup":
        pool_l, pool_u = labeled, []
    elif cfg.mode == "unsup":
        pool_l, pool_u = [], unlabeled
    else:
        # zero-weight unlabeled pairs are dropped so beta = 0 reduces exactly to sup
        pool_l, pool_u = labeled, (unlabeled if cfg.beta > 0 else [])

    params = model.copy()
    trainable = params.trainable_names(cfg.freeze_features)
    grid = make_grid(*cfg.grid)
    state = AdamState()
    cache = _FeatureCache(params) if cfg.freeze_features else None
    tlog = TrainLog(config=cfg.to_dict())
    t0 = time.perf_counter()
    n_items = len(pool_l) + len(pool_u)
    per_epoch = -(-n_items // cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps) if cfg.epochs else cfg.max_steps
    sched = batch_scheduler(pool_l, pool_u, cfg.batch_size, cfg.seed)
    for step in range(total_steps):
        batch = next(sched)
        try:
            value, grads, parts, _ = batch_gradient(params, batch, pool_l, pool_u, cfg, grid, cache)
        except FloatingPointError as exc:
            raise NonFiniteLossError(f"{exc} at step {step} (batch {batch})") from exc
        if not np.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss {value} at step {step} (batch {batch})")
        new_arrays, state = adam_step(params.arrays, {k: grads[k] for k in trainable}, state,
                                      cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        params = ModelParams(params.config, new_arrays)
        epoch = step // per_epoch
        tlog.steps.append({"step": step, "epoch": epoch, "loss": value, **parts})
        if log_every and step % log_every == 0:
            log.info("step %d epoch %d loss %.6f (L_s %.5f, L_us %.5f)", step, epoch, value,
                     parts["l_s"], parts["l_us"])
        if (step + 1) % per_epoch == 0 or step + 1 == total_steps:
            entry = {"epoch": epoch, "step": step}
            if on_epoch is not None:
                entry.update(on_epoch(epoch, params) or {})
            tlog.epochs.append(entry)
    tlog.wall_clock = time.perf_counter() - t0
    return params, tlog
