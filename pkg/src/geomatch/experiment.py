"""End-to-end comparison on the procedural benchmark: identity, self, sup, semi."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .benchmark import BenchmarkConfig, make_benchmark
from .checkpoint import save_checkpoint
from .evaluate import PckReport, evaluate_dataset
from .matchnet import ModelConfig, init_params
from .optimize import TrainConfig, train


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 1
    # stronger synthetic warps than the benchmark default give the self stage something to learn
    synth_strength: float = 0.25
    n_synth: int = 2000
    self_epochs: int = 6
    # sup and semi share one schedule so only the objective differs
    epochs: int = 5
    beta: float = 0.03
    learning_rate: float = 1e-3
    batch_size: int = 16
    model: ModelConfig = field(default_factory=ModelConfig)


@dataclass
class PipelineResult:
    config: PipelineConfig
    reports: dict[str, PckReport]
    seconds: dict[str, float]

    def pck(self) -> dict[str, float]:
        return {k: 100.0 * r.mean for k, r in self.reports.items()}


def run_pipeline(cfg: PipelineConfig = PipelineConfig(), out_dir=None, log=None) -> PipelineResult:
    """Self-pretrain on synthetic pairs, then fine-tune sup and semi from the same start."""
    say = log or (lambda msg: None)
    seconds = {}
    t0 = time.perf_counter()
    bench = make_benchmark(BenchmarkConfig(seed=cfg.seed, synth_strength=cfg.synth_strength, n_synth=cfg.n_synth))
    seconds["benchmark"] = time.perf_counter() - t0
    test = bench["test"]
    labeled, unlabeled = bench["labeled"].pairs, bench["unlabeled"].pairs

    models = {"identity": init_params(cfg.model, cfg.seed)}
    stages = [
        ("self", "identity", TrainConfig(mode="self", epochs=cfg.self_epochs, freeze_features=False,
                                         learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, seed=cfg.seed),
         {"synth": bench["synth"].pairs}),
        ("sup", "self", TrainConfig(mode="sup", epochs=cfg.epochs, learning_rate=cfg.learning_rate,
                                    batch_size=cfg.batch_size, seed=cfg.seed),
         {"labeled": labeled}),
        ("semi", "self", TrainConfig(mode="semi", beta=cfg.beta, epochs=cfg.epochs, learning_rate=cfg.learning_rate,
                                     batch_size=cfg.batch_size, seed=cfg.seed),
         {"labeled": labeled, "unlabeled": unlabeled}),
    ]
    for name, start, tcfg, data in stages:
        t0 = time.perf_counter()
        models[name], _ = train(models[start], cfg=tcfg, **data)
        seconds[name] = time.perf_counter() - t0
        say(f"{name}: trained in {seconds[name]:.0f}s")

    reports = {}
    for name, model in models.items():
        reports[name] = evaluate_dataset(model, test)
        say(f"{name}: PCK {100 * reports[name].mean:.2f}")
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out / f"{name}.geom", model, {"pipeline": asdict(cfg), "stage": name})
            (out / f"{name}_report.json").write_text(reports[name].to_json())
    return PipelineResult(cfg, reports, seconds)
