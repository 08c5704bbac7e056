"""Alignments and the attention targets built from them.

Frames are 0-based and segments are half-open ``[start, end)``.  Targets are
built at the input frame rate and then reduced to the encoder rate by summing
disjoint buckets of ``r`` frames; frames past ``r * (T // r)`` are dropped and
the affected rows renormalized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

REPRESENTATIONS = ("uniform", "first", "center", "last", "even")
# short names used in configs and logs
REPRESENTATION_ALIASES = {"uni": "uniform", "f": "first", "c": "center", "l": "last"}


class Segment(NamedTuple):
    start: int
    end: int
    token: int


@dataclass(frozen=True)
class Alignment:
    segments: tuple[Segment, ...]
    total_frames: int

    def __init__(self, segments, total_frames: int):
        object.__setattr__(self, "segments", tuple(Segment(*s) for s in segments))
        object.__setattr__(self, "total_frames", int(total_frames))

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def tokens(self) -> list[int]:
        return [s.token for s in self.segments]


@dataclass(frozen=True)
class AttentionTarget:
    matrix: np.ndarray
    representation: str


class AlignmentError(ValueError):
    """An alignment cannot be turned into a target."""


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    info: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(align: Alignment) -> ValidationReport:
    """Check segment ordering and ranges.  Gaps are legal and reported as info."""
    report = ValidationReport()
    T = align.total_frames
    prev_end = None
    for k, (s, e, _) in enumerate(align.segments):
        if e <= s:
            report.violations.append(f"segment {k}: reversed or empty span [{s},{e})")
        if s < 0 or e > T:
            report.violations.append(f"segment {k}: span [{s},{e}) outside [0,{T})")
        if prev_end is not None:
            if s < prev_end:
                report.violations.append(f"segment {k}: overlaps previous segment ending at {prev_end}")
            elif s > prev_end:
                report.info.append(f"gap at frames [{prev_end},{s})")
        prev_end = e
    return report


def subsampled_length(total_frames: int, r: int) -> int:
    return total_frames // r


def bucket_sum(matrix: np.ndarray, r: int) -> np.ndarray:
    """Sum frame columns into disjoint windows ``[r*t', r*t' + r)``; trailing frames are dropped."""
    if r < 1:
        raise ValueError(f"subsample factor must be >= 1, got {r}")
    K, T = matrix.shape
    Tp = T // r
    if Tp < 1:
        raise AlignmentError(f"{T} frames leave no output frame at subsample factor {r}")
    return matrix[:, :Tp * r].reshape(K, Tp, r).sum(axis=2)


def _reduce(frame_level: np.ndarray, r: int, representation: str) -> AttentionTarget:
    out = bucket_sum(frame_level, r)
    truncated = frame_level[:, out.shape[1] * r:].sum(axis=1) > 0
    if truncated.any():
        sums = out.sum(axis=1)
        empty = sums <= 0
        if empty.any():
            warnings.warn(f"{int(empty.sum())} target row(s) fell entirely in truncated frames; "
                          "mass moved to the last bucket", stacklevel=3)
            out[empty, -1] = 1.0
            sums[empty] = 1.0
        out[truncated] /= sums[truncated, None]
    return AttentionTarget(out, representation)


def _check(align: Alignment) -> None:
    if not align.segments:
        raise AlignmentError("alignment has no segments")
    report = validate(align)
    if not report.ok:
        raise AlignmentError("; ".join(report.violations))


def build_uniform(align: Alignment, subsample: int = 1) -> AttentionTarget:
    _check(align)
    m = np.zeros((len(align), align.total_frames))
    for k, (s, e, _) in enumerate(align.segments):
        m[k, s:e] = 1.0 / (e - s)
    return _reduce(m, subsample, "uniform")


def point_mass_frame(start: int, end: int, position: str) -> int:
    if position == "first":
        return start
    if position == "center":
        return (start + end) // 2
    if position == "last":
        return end - 1
    raise ValueError(f"unknown point-mass position {position!r}")


def build_point_mass(align: Alignment, position: str, subsample: int = 1) -> AttentionTarget:
    _check(align)
    T = align.total_frames
    last_valid = (T // subsample) * subsample - 1
    m = np.zeros((len(align), T))
    for k, (s, e, _) in enumerate(align.segments):
        t = point_mass_frame(s, e, position)
        if t > last_valid >= 0:
            warnings.warn(f"segment {k}: {position} frame {t} lies in truncated frames; "
                          "mass moved to the last bucket", stacklevel=2)
            t = last_valid
        m[k, t] = 1.0
    return _reduce(m, subsample, position)


def build_even(total_frames: int, num_tokens: int, subsample: int = 1) -> AttentionTarget:
    """Split ``total_frames`` evenly over ``num_tokens`` segments of real-valued length."""
    if num_tokens < 1:
        raise AlignmentError("even target needs at least one output token")
    T, K = total_frames, num_tokens
    d = T / K
    t = np.arange(T, dtype=np.float64)
    lo = np.arange(K, dtype=np.float64)[:, None] * d
    hi = lo + d
    overlap = np.clip(np.minimum(t + 1.0, hi) - np.maximum(t, lo), 0.0, None)
    return _reduce(overlap / d, subsample, "even")


def normalize_representation(name: str) -> str:
    name = REPRESENTATION_ALIASES.get(name, name)
    if name not in REPRESENTATIONS:
        raise ValueError(f"unknown target representation {name!r}")
    return name


def build_target(representation: str, subsample: int, *, align: Alignment | None = None,
                 total_frames: int | None = None, num_tokens: int | None = None) -> AttentionTarget:
    """Dispatch to the builder for ``representation``; ``even`` needs only lengths."""
    representation = normalize_representation(representation)
    if representation == "even":
        if align is not None:
            total_frames = align.total_frames if total_frames is None else total_frames
            num_tokens = len(align) if num_tokens is None else num_tokens
        return build_even(total_frames, num_tokens, subsample)
    if align is None:
        raise AlignmentError(f"{representation} targets need an alignment")
    if representation == "uniform":
        return build_uniform(align, subsample)
    return build_point_mass(align, representation, subsample)
