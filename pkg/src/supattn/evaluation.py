"""Greedy decoding, phone error rate scoring, and attention distance reports."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .alignment import Alignment, build_uniform
from .losses import attention_loss, cross_entropy
from .model import (Encoded, ModelConfig, ParamsLike, _nodes, attention_keys, decode_step,
                    encode, forward_teacher_forced)

END_TOKEN = "end-token"
LENGTH_CAP = "length-cap"


@dataclass
class DecodeResult:
    tokens: list[int]
    attention: np.ndarray  # one row per returned token
    stopped_by: str


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    reference_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def per(self) -> float:
        if self.reference_length == 0:
            raise ValueError("error rate is undefined for an empty reference")
        return self.errors / self.reference_length

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(self.substitutions + other.substitutions,
                           self.insertions + other.insertions,
                           self.deletions + other.deletions,
                           self.reference_length + other.reference_length)


def greedy_decode(features, params: ParamsLike, config: ModelConfig,
                  max_len: int | None = None) -> DecodeResult:
    """Feed back the arg-max token until the end token or ``max_len`` tokens.

    ``max_len`` defaults to the encoder output length plus 10.  Ties go to the
    lowest token id.
    """
    P = _nodes(params)
    states = encode(features, P, config)
    if max_len is None:
        max_len = states.shape[0] + 10
    return _greedy(Encoded(states, attention_keys(states, P)), P, config, max_len)


def _greedy(encoded: Encoded, P, config: ModelConfig, max_len: int) -> DecodeResult:
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    eos = config.decoder.eos
    prev, state = config.decoder.sos, None
    tokens: list[int] = []
    rows: list[np.ndarray] = []
    while True:
        logits, attn, state = decode_step(prev, state, encoded, P, config)
        tok = int(np.argmax(logits.value))
        if tok == eos:
            stopped = END_TOKEN
            break
        tokens.append(tok)
        rows.append(attn.value)
        if len(tokens) >= max_len:
            stopped = LENGTH_CAP
            break
        prev = tok
    attention = np.array(rows) if rows else np.zeros((0, encoded.states.shape[0]))
    return DecodeResult(tokens, attention, stopped)


def edit_distance(hyp: Sequence, ref: Sequence) -> ErrorCounts:
    """Levenshtein alignment of ``hyp`` against ``ref`` with unit costs.

    Among minimal-cost alignments the one with the most substitutions is
    used, so errors are attributed to substitutions before insertions and
    deletions.  With S fixed, I and D follow from the two lengths.
    """
    n, m = len(hyp), len(ref)
    # cells hold (errors, -substitutions); tuple min picks the preferred alignment
    prev = [(j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        row = [(i, 0)]
        for j in range(1, m + 1):
            c, ns = prev[j - 1]
            if hyp[i - 1] != ref[j - 1]:
                c, ns = c + 1, ns - 1
            row.append(min((c, ns), (prev[j][0] + 1, prev[j][1]), (row[j - 1][0] + 1, row[j - 1][1])))
        prev = row
    errors, neg_s = prev[m]
    s = -neg_s
    ins = (errors - s + n - m) // 2
    return ErrorCounts(s, ins, errors - s - ins, m)


def attention_report(attention, align: Alignment, subsample: int) -> float:
    """Squared Frobenius distance of ``attention`` from the uniform-in-segment target."""
    target = build_uniform(align, subsample)
    return float(attention_loss(dc.const(attention), target).value)


def format_per(counts: ErrorCounts) -> str:
    return f"{100.0 * counts.per:.1f}"


def _fmt_dist(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


@dataclass(frozen=True)
class UttScore:
    utt_id: str
    counts: ErrorCounts
    attn_dist: float


def write_scores(path, scores: Sequence[UttScore]) -> ErrorCounts:
    """Per-utterance TSV plus a final ``TOTAL`` line; returns the aggregate counts."""
    total = ErrorCounts()
    dists = [s.attn_dist for s in scores if not math.isnan(s.attn_dist)]
    with open(path, "w") as f:
        f.write("utt_id\tS\tI\tD\tref_len\tper\tattn_dist\n")
        for s in scores:
            c = s.counts
            total = total + c
            f.write(f"{s.utt_id}\t{c.substitutions}\t{c.insertions}\t{c.deletions}\t"
                    f"{c.reference_length}\t{format_per(c)}\t{_fmt_dist(s.attn_dist)}\n")
        mean_dist = float(np.mean(dists)) if dists else math.nan
        f.write(f"TOTAL\t{total.substitutions}\t{total.insertions}\t{total.deletions}\t"
                f"{total.reference_length}\t{format_per(total)}\t{_fmt_dist(mean_dist)}\n")
    return total


@dataclass(frozen=True)
class UttEval:
    utt_id: str
    ce: float
    attn_dist: float
    counts: ErrorCounts
    decoded: DecodeResult


def evaluate_utterance(utt, params: ParamsLike, config: ModelConfig,
                       max_len_extra: int = 10) -> UttEval:
    """Teacher-forced CE and attention distance plus a greedy-decode error count."""
    P = _nodes(params)
    fwd = forward_teacher_forced(utt.features, utt.tokens, P, config)
    ce = float(cross_entropy(fwd.logits, utt.tokens).value)
    dist = math.nan
    if utt.alignment is not None:
        K = len(utt.alignment)
        dist = attention_report(fwd.attention.value[:K], utt.alignment, config.encoder.factor)
    Tp = fwd.attention.shape[1]
    decoded = _greedy(fwd.encoded, P, config, Tp + max_len_extra)
    counts = edit_distance(decoded.tokens, list(utt.tokens[:-1]))
    return UttEval(utt.id, ce, dist, counts, decoded)


def _evaluate_job(args):
    utt, params, config, max_len_extra = args
    return evaluate_utterance(utt, params, config, max_len_extra)


def evaluate(utts, params, config: ModelConfig, max_len_extra: int = 10,
             jobs: int = 1) -> list[UttEval]:
    """Evaluate every utterance; results come back in input order whatever ``jobs`` is."""
    if jobs > 1 and len(utts) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_evaluate_job, [(u, params, config, max_len_extra) for u in utts]))
    return [evaluate_utterance(u, params, config, max_len_extra) for u in utts]


def summarize(results: Sequence[UttEval]) -> tuple[float, float, ErrorCounts]:
    """Mean CE per utterance, mean attention distance, and pooled error counts."""
    total = ErrorCounts()
    for r in results:
        total = total + r.counts
    dists = [r.attn_dist for r in results if not math.isnan(r.attn_dist)]
    ce = float(np.mean([r.ce for r in results])) if results else math.nan
    return ce, (float(np.mean(dists)) if dists else math.nan), total
