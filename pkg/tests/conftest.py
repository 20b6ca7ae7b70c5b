"""Shared fixtures, including the benchmark battery used by several suites.

The benchmark runs pretrain + four fine-tuning variants + certification for
three seeds once per session; the comparison tests all read from it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import pytest

from smoothlab import ftcadis
from smoothlab.certify import CertifyConfig, EvalReport, MixturePipeline, evaluate
from smoothlab.config import benchmark_world_dict
from smoothlab.net import LoraConfig, MlpSpec, attach_adapters
from smoothlab.numerics import RngStream
from smoothlab.world import Dataset, DiffusionSchedule, MixtureSpec, sample_dataset

BENCH_SEEDS = (0, 1, 2)
BENCH_SIGMA = 0.5


def make_benchmark_world() -> MixtureSpec:
    return MixtureSpec.from_dict(benchmark_world_dict())


def make_benchmark_finetune(seed: int) -> ftcadis.FinetuneConfig:
    return ftcadis.FinetuneConfig(sigma=BENCH_SIGMA, m_copies=4, t_steps=4, epsilon=0.25,
                                  lambda_adv=2.0, epochs=12, lr=1.5e-4, batch_size=32,
                                  seed=seed)


@dataclass
class BenchmarkRun:
    acr: float
    clean_accuracy: float
    mask_ratios: list[float]
    report: EvalReport


@dataclass
class BenchmarkResults:
    world: MixtureSpec
    schedule: DiffusionSchedule
    train: Dataset
    test: Dataset
    runs: dict[tuple[str, int], BenchmarkRun]  # (variant, seed) -> run

    def acrs(self, variant: str) -> list[float]:
        return [self.runs[(variant, s)].acr for s in BENCH_SEEDS]


@pytest.fixture(scope="session")
def benchmark() -> BenchmarkResults:
    world = make_benchmark_world()
    schedule = DiffusionSchedule.linear()
    spec = MlpSpec((8, 128, 128, 128, 2), activation="relu")
    train = sample_dataset(world, 256, RngStream(0).child("data", "train"))
    test = sample_dataset(world, 200, RngStream(0).child("data", "test"))
    cert = CertifyConfig(sigma=BENCH_SIGMA, n0=100, n=1000, alpha=0.001)
    runs: dict[tuple[str, int], BenchmarkRun] = {}
    for seed in BENCH_SEEDS:
        base_cfg = make_benchmark_finetune(seed)
        clf0, _ = ftcadis.pretrain(train, spec, epochs=30, lr=1e-3, seed=seed)
        lora0 = attach_adapters(clf0, LoraConfig(rank=4, scale=4.0), seed)
        variants = [
            ("ce", clf0, ftcadis.ce_baseline_config(base_cfg)),
            ("ftcadis", clf0, base_cfg),
            ("no_mask", clf0, replace(base_cfg, madv_mask=False)),
            ("lora", lora0, replace(base_cfg, lr=5e-4)),
        ]
        for name, start, cfg in variants:
            tuned, train_report = ftcadis.finetune(start, train, cfg, world, schedule)
            report = evaluate(MixturePipeline(world, schedule, tuned), test, cert,
                              RngStream(0).child("certify"))
            runs[(name, seed)] = BenchmarkRun(acr=report.acr,
                                              clean_accuracy=report.clean_accuracy,
                                              mask_ratios=train_report.mask_ratios,
                                              report=report)
    return BenchmarkResults(world=world, schedule=schedule, train=train, test=test, runs=runs)
