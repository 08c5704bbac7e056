"""Teacher-forced training with Adadelta, an attention-loss weight schedule,
and per-epoch train/dev logging."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .alignment import build_target, build_uniform, normalize_representation
from .data import Utterance
from .diffcore import NumericError
from .evaluation import evaluate, summarize
from .losses import LossBreakdown, attention_loss, combine, cross_entropy, ctc_loss
from .model import ModelConfig, ModelParams, ctc_logits, forward_teacher_forced, init_params

log = logging.getLogger(__name__)

NO_SUPERVISION = "none"


class TrainingDataError(ValueError):
    """An utterance lacks what the configured losses need."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    gamma: float = 0.5
    gamma_off_epoch: int | None = None
    dropout: float = 0.4
    lambda_ctc: float = 0.0
    representation: str = "uniform"
    seed: int = 0
    rho: float = 0.95
    eps: float = 1e-6
    clip_norm: float | None = None
    max_len_extra: int = 10

    def __post_init__(self):
        if self.representation != NO_SUPERVISION:
            object.__setattr__(self, "representation", normalize_representation(self.representation))
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.gamma_off_epoch is not None and not 0 <= self.gamma_off_epoch <= self.epochs:
            raise ValueError(f"gamma_off_epoch must lie in [0, {self.epochs}]")
        if not 0.0 <= self.lambda_ctc <= 1.0:
            raise ValueError("lambda_ctc must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def supervised(self) -> bool:
        return self.representation != NO_SUPERVISION and self.gamma > 0


def gamma_schedule(epoch: int, config: TrainConfig) -> float:
    """Attention-loss weight for 0-based ``epoch``; zero from ``gamma_off_epoch`` on."""
    if config.representation == NO_SUPERVISION:
        return 0.0
    if config.gamma_off_epoch is not None and epoch >= config.gamma_off_epoch:
        return 0.0
    return config.gamma


# ------------------------------------------------------------------ adadelta


@dataclass
class AdadeltaState:
    sq_grad: dict[str, np.ndarray] = field(default_factory=dict)  # E[g^2]
    sq_delta: dict[str, np.ndarray] = field(default_factory=dict)  # E[dx^2]


def adadelta_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdadeltaState,
                  rho: float = 0.95, eps: float = 1e-6) -> tuple[ModelParams, AdadeltaState]:
    """One Adadelta update (Zeiler 2012).  Parameters are replaced, never written in place.

    A non-finite gradient aborts the whole step before anything changes.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    for name, g in grads.items():
        eg = state.sq_grad.get(name)
        ed = state.sq_delta.get(name)
        if eg is None:
            eg = np.zeros_like(g)
            ed = np.zeros_like(g)
        eg = rho * eg + (1.0 - rho) * g * g
        delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed = rho * ed + (1.0 - rho) * delta * delta
        state.sq_grad[name] = eg
        state.sq_delta[name] = ed
        params.tensors[name] = params.tensors[name] + delta
    return params, state


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class EpochLog:
    epoch: int  # 1-based
    split: str
    ce: float
    attn: float
    per: float  # percent
    gamma: float


LOG_HEADER = ("epoch", "split", "ce", "attn", "per", "gamma")


def _f6(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def write_log_csv(path, logs: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in logs:
            w.writerow([r.epoch, r.split, _f6(r.ce), _f6(r.attn), _f6(r.per), _f6(r.gamma)])


def read_log_csv(path) -> list[EpochLog]:
    with open(path, newline="") as f:
        return [EpochLog(int(r["epoch"]), r["split"], float(r["ce"]), float(r["attn"]),
                         float(r["per"]), float(r["gamma"])) for r in csv.DictReader(f)]


def check_dataset(utts: Sequence[Utterance], model_config: ModelConfig, config: TrainConfig) -> None:
    needs_alignment = config.supervised and config.representation != "even"
    for u in utts:
        if needs_alignment and u.alignment is None:
            raise TrainingDataError(
                f"utterance {u.id} has no alignment but representation "
                f"{config.representation} needs one")
        if u.alignment is not None and u.alignment.total_frames != u.num_frames:
            raise TrainingDataError(
                f"utterance {u.id}: alignment covers {u.alignment.total_frames} frames, "
                f"features have {u.num_frames}")


def train_step(utt: Utterance, params: ModelParams, opt_state: AdadeltaState,
               model_config: ModelConfig, config: TrainConfig, gamma: float,
               rng: np.random.Generator) -> tuple[LossBreakdown, float]:
    """Forward, backward and one Adadelta update on a single utterance.

    Returns the loss breakdown and the attention distance from the uniform
    target (NaN without an alignment).
    """
    P = params.as_nodes()
    fwd = forward_teacher_forced(utt.features, utt.tokens, P, model_config, training=True,
                                 dropout=config.dropout, rng=rng)
    ce = cross_entropy(fwd.logits, utt.tokens)
    r = model_config.encoder.factor
    K = len(utt.tokens) - 1
    attn_rows = dc.slice_(fwd.attention, slice(0, K))
    attn = None
    if gamma > 0:
        target = build_target(config.representation, r, align=utt.alignment,
                              total_frames=utt.num_frames, num_tokens=K)
        attn = attention_loss(attn_rows, target)
    ctc = None
    if config.lambda_ctc > 0:
        ctc = ctc_loss(ctc_logits(fwd.encoded.states, P), utt.tokens[:-1])
    total, breakdown = combine(ce, attn, ctc, gamma, config.lambda_ctc)
    dist = math.nan
    if utt.alignment is not None:
        if attn is not None and config.representation == "uniform":
            dist = breakdown.attn
        else:
            dist = float(((attn_rows.value - build_uniform(utt.alignment, r).matrix) ** 2).sum())
    dc.backward(total)
    grads = {k: node.grad for k, node in P.items()}
    if config.clip_norm:
        grads = clip_by_global_norm(grads, config.clip_norm)
    adadelta_step(params, grads, opt_state, config.rho, config.eps)
    return breakdown, dist


def _nanmean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else math.nan


def train(dataset: Sequence[Utterance], dev_set: Sequence[Utterance], model_config: ModelConfig,
          config: TrainConfig, params: ModelParams | None = None,
          on_epoch_end: Callable[[int, ModelParams, list[EpochLog]], None] | None = None,
          jobs: int = 1) -> tuple[ModelParams, list[EpochLog]]:
    """Train per utterance (batch size 1) and log a train and a dev row per epoch.

    The dev attention distance is always measured against uniform-in-segment
    targets, whatever representation drives training.
    """
    if config.lambda_ctc > 0 and not model_config.ctc_head:
        raise ValueError("lambda_ctc > 0 needs a model built with a CTC head")
    check_dataset(dataset, model_config, config)
    init_seq, run_seq = np.random.SeedSequence(config.seed).spawn(2)
    if params is None:
        params = init_params(model_config, np.random.default_rng(init_seq))
    else:
        params = params.copy()
    rng = np.random.default_rng(run_seq)
    opt_state = AdadeltaState()
    logs: list[EpochLog] = []
    for epoch in range(config.epochs):
        gamma = gamma_schedule(epoch, config)
        ces, dists = [], []
        for i in rng.permutation(len(dataset)):
            breakdown, dist = train_step(dataset[i], params, opt_state, model_config, config, gamma, rng)
            ces.append(breakdown.ce)
            dists.append(dist)
        logs.append(EpochLog(epoch + 1, "train", float(np.mean(ces)), _nanmean(dists), math.nan, gamma))
        if dev_set:
            ce, dist, counts = summarize(evaluate(dev_set, params, model_config,
                                                  config.max_len_extra, jobs))
            logs.append(EpochLog(epoch + 1, "dev", ce, dist, 100.0 * counts.per, gamma))
        log.info("epoch %d: %s", epoch + 1, ", ".join(
            f"{r.split} ce={r.ce:.4f} attn={r.attn:.4f} per={r.per:.2f}"
            for r in logs if r.epoch == epoch + 1))
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, params, logs)
    return params, logs


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
