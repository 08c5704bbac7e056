"""Training objectives: cross entropy, supervised attention, CTC, and their mix."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .alignment import AttentionTarget
from .diffcore import Node

NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """The CTC label sequence cannot be emitted in the available frames."""


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    attn: float
    ctc: float
    total: float
    gamma_used: float
    lambda_used: float


def cross_entropy(logits: Node, targets: Sequence[int]) -> Node:
    """Summed negative log-likelihood of ``targets`` under row-wise softmax of ``logits``."""
    targets = np.asarray(targets, dtype=np.intp)
    V = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError(f"target id out of range for vocabulary of size {V}")
    return dc.scale(dc.sum_(dc.pick(dc.log_softmax_rows(logits), targets)), -1.0)


def attention_loss(attn: Node, target: AttentionTarget | np.ndarray) -> Node:
    """Squared Frobenius distance between model attention and a target matrix."""
    matrix = target.matrix if isinstance(target, AttentionTarget) else np.asarray(target, dtype=np.float64)
    if attn.shape != matrix.shape:
        raise dc.DimensionError(
            f"attention {attn.shape} and target {matrix.shape} differ; "
            "alignment and feature lengths are inconsistent")
    diff = dc.sub(attn, dc.const(matrix))
    return dc.sum_(dc.mul(diff, diff))


def ctc_min_frames(targets: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return len(targets) + repeats


def _ctc_lattice(log_probs: np.ndarray, targets: np.ndarray, blank: int):
    """Forward and backward log-space recursions over the blank-augmented labels.

    ``alpha[t, s]`` includes the emission at ``t``; ``beta[t, s]`` covers frames
    after ``t`` only, so ``alpha + beta`` is the joint log-probability of
    passing through state ``s`` at frame ``t``.
    """
    T = log_probs.shape[0]
    ext = np.full(2 * len(targets) + 1, blank, dtype=np.intp)
    ext[1::2] = targets
    S = len(ext)
    # a skip from s-2 to s is allowed onto a label differing from the label two back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = log_probs[:, ext]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    return ext, alpha, beta, log_p


def ctc_loss(frame_logits: Node, targets: Sequence[int], blank: int | None = None) -> Node:
    """Negative log marginal probability of ``targets`` over all CTC paths.

    The blank symbol defaults to the last column of ``frame_logits``.
    """
    T, C = frame_logits.shape
    blank = C - 1 if blank is None else blank
    targets = np.asarray(targets, dtype=np.intp)
    if targets.size and (targets.min() < 0 or targets.max() >= C or (targets == blank).any()):
        raise ValueError("CTC targets must be non-blank ids within the output range")
    need = ctc_min_frames(list(targets))
    if T < max(need, 1):
        raise InfeasibleTargetError(f"{T} frames cannot emit {len(targets)} labels (need {need})")
    x = frame_logits.value
    shifted = x - x.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    ext, alpha, beta, log_p = _ctc_lattice(log_probs, targets, blank)
    return dc._make(np.asarray(-log_p), (frame_logits,), "ctc",
                    (log_probs, ext, alpha, beta, log_p))


def _ctc_backward(node: Node, g: np.ndarray):
    log_probs, ext, alpha, beta, log_p = node.ctx
    occupancy = np.exp(alpha + beta - log_p)
    posterior = np.zeros_like(log_probs)
    np.add.at(posterior.T, ext, occupancy.T)
    return (float(g) * (np.exp(log_probs) - posterior),)


dc.BACKWARD["ctc"] = _ctc_backward


def combine(ce: Node, attn: Node | None = None, ctc: Node | None = None,
            gamma: float = 0.0, lam: float = 0.0) -> tuple[Node, LossBreakdown]:
    """``(1 - lam) * ce + lam * ctc + gamma * attn``; absent terms count as zero."""
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam and ctc is None:
        raise ValueError("a nonzero CTC weight needs a CTC loss term")
    total = dc.scale(ce, 1.0 - lam) if lam else ce
    if ctc is not None and lam:
        total = dc.add(total, dc.scale(ctc, lam))
    if attn is not None and gamma:
        total = dc.add(total, dc.scale(attn, gamma))
    attn_v = float(attn.value) if attn is not None else 0.0
    ctc_v = float(ctc.value) if ctc is not None else 0.0
    breakdown = LossBreakdown(
        ce=float(ce.value), attn=attn_v, ctc=ctc_v, total=float(total.value),
        gamma_used=float(gamma), lambda_used=float(lam))
    return total, breakdown
