"""Multi-seed comparisons on the synthetic alignment task."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .data import SynthSpec, Utterance, Vocab, apply_normalization, generate_synthetic, normalize_global
from .model import DecoderConfig, EncoderConfig, ModelConfig
from .training import EpochLog, TrainConfig, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Benchmark:
    vocab_size: int = 10
    train_utterances: int = 200
    dev_utterances: int = 20
    tokens_min: int = 3
    tokens_max: int = 8
    dmin: int = 2
    dmax: int = 6
    feature_dim: int = 16
    noise_std: float = 0.3
    epochs: int = 15


def benchmark_data(bench: Benchmark, seed: int) -> tuple[list[Utterance], list[Utterance], Vocab]:
    """Normalized train and dev sets; dev frames never enter the statistics."""
    spec = SynthSpec(vocab_size=bench.vocab_size, utterances=bench.train_utterances,
                     dmin=bench.dmin, dmax=bench.dmax, tokens_min=bench.tokens_min,
                     tokens_max=bench.tokens_max, feature_dim=bench.feature_dim,
                     noise_std=bench.noise_std, seed=2 * seed, prefix="train")
    train_set, vocab = generate_synthetic(spec)
    dev_set, _ = generate_synthetic(replace(spec, utterances=bench.dev_utterances,
                                            seed=2 * seed + 1, prefix="dev"))
    train_set, (mean, var) = normalize_global(train_set)
    return train_set, apply_normalization(dev_set, mean, var), vocab


def desk_model(feature_dim: int, vocab_size: int, ctc_head: bool = False) -> ModelConfig:
    return ModelConfig(EncoderConfig(input_dim=feature_dim), DecoderConfig(vocab_size=vocab_size),
                       ctc_head=ctc_head)


def run_grid(bench: Benchmark, variants: Mapping[str, TrainConfig], seeds: Sequence[int],
             ) -> dict[str, list[list[EpochLog]]]:
    """Train every variant on every seed; the seed fixes data, init, shuffling and dropout."""
    out: dict[str, list[list[EpochLog]]] = {name: [] for name in variants}
    for seed in seeds:
        train_set, dev_set, vocab = benchmark_data(bench, seed)
        for name, cfg in variants.items():
            cfg = replace(cfg, seed=seed, epochs=bench.epochs)
            mc = desk_model(bench.feature_dim, len(vocab), ctc_head=cfg.lambda_ctc > 0)
            _, logs = train(train_set, dev_set, mc, cfg)
            log.info("%s seed %d done", name, seed)
            out[name].append(logs)
    return out


def dev_curve(runs: Sequence[Sequence[EpochLog]], field: str) -> np.ndarray:
    """Median over seeds of a dev-split metric, indexed by epoch - 1."""
    table = np.array([[getattr(r, field) for r in logs if r.split == "dev"] for logs in runs])
    return np.median(table, axis=0)


def final_dev(runs: Sequence[Sequence[EpochLog]], field: str) -> float:
    curve = dev_curve(runs, field)
    return float(curve[-1]) if curve.size else math.nan
