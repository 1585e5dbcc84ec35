"""Desk-scale synthetic benchmark: source-only baseline vs adapted model."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Optional

from .data import DEFAULT_SHIFT, ShiftSpec, make_benchmark
from .model import Arch, build_model, pretrain_source
from .trainer import AdaptConfig, evaluate, run_adaptation

# Step-count-matched settings for the small benchmark: a handful of epochs over
# 600 target samples is ~60 optimiser steps, far fewer than the full-scale
# setting the library defaults describe.
BENCH_CONFIG = AdaptConfig(epochs=2, lr=1e-4, ema_alpha=0.99)
PRETRAIN_EPOCHS = 3
PRETRAIN_LR = 1e-3


@dataclass
class BenchResult:
    seed: int
    source_f1: float
    source_only_f1: float
    adapted_f1: float
    ablation_f1: Optional[float]
    seconds: float


def run_benchmark(seed: int, config: AdaptConfig = BENCH_CONFIG, shift: ShiftSpec = DEFAULT_SHIFT,
                  ablation: bool = False, pretrain_epochs: int = PRETRAIN_EPOCHS) -> BenchResult:
    t0 = time.perf_counter()
    bench = make_benchmark(seed, shift=shift)
    meta = bench.source_train.meta
    model = build_model(Arch(meta.channels, meta.length, meta.classes), init_seed=seed)
    model = pretrain_source(model, bench.source_train, pretrain_epochs, PRETRAIN_LR, seed)
    src = evaluate(model, bench.source_test)
    base = evaluate(model, bench.target_test)
    cfg = replace(config, seed=seed)
    ts, _ = run_adaptation(model, bench.target_train, cfg)
    adapted = evaluate(ts.teacher, bench.target_test)
    abl = None
    if ablation:
        ts_a, _ = run_adaptation(model, bench.target_train, replace(cfg, use_freq=False))
        abl = evaluate(ts_a.teacher, bench.target_test, use_freq=False)
    return BenchResult(seed, src, base, adapted, abl, time.perf_counter() - t0)
