"""Dataset files, global normalization, checkpoints, and the synthetic task.

File formats (all text, whitespace separated):

* features: ``UTT <id> <T> <D>`` header followed by T rows of D floats
* tokens: ``<utt_id> <tok1> <tok2> ...``; the end token is implicit
* alignments: ``<utt_id> <start> <end> <token>`` one segment per line
* vocab: one token per line, in id order
* stats: ``<dim> <mean> <var>`` per line

Floats are written with ``repr`` so every file round-trips bit-exactly.
"""

from __future__ import annotations

import logging
import warnings
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .alignment import Alignment, validate
from .model import ModelParams

log = logging.getLogger(__name__)

EOS = "</s>"


class DataError(ValueError):
    """Malformed or inconsistent dataset files."""


class Vocab:
    """Token strings in id order; the end token is appended as the last decoder id.

    The CTC blank takes id ``len(vocab)``, one past the decoder vocabulary.
    """

    def __init__(self, tokens: Sequence[str]):
        tokens = [t for t in tokens if t != EOS]
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.tokens = list(tokens) + [EOS]
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def eos(self) -> int:
        return len(self.tokens) - 1

    @property
    def blank(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise DataError(f"unknown token {token!r}") from None

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True, eq=False)
class Utterance:
    id: str
    features: np.ndarray  # T x D
    tokens: tuple[int, ...]  # end-token terminated
    alignment: Alignment | None = None

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


# ------------------------------------------------------------------ file io


def _fmt(x: float) -> str:
    return repr(float(x))


def write_features(path, items: Iterable[tuple[str, np.ndarray]]) -> None:
    with open(path, "w") as f:
        for utt_id, feats in items:
            feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
            T, D = feats.shape
            f.write(f"UTT {utt_id} {T} {D}\n")
            for row in feats:
                f.write(" ".join(_fmt(v) for v in row) + "\n")


def read_features(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path) as f:
        lines = f.read().splitlines()
    i = 0
    while i < len(lines):
        head = lines[i].split()
        if not head:
            i += 1
            continue
        if len(head) != 4 or head[0] != "UTT":
            raise DataError(f"{path}:{i + 1}: expected 'UTT <id> <T> <D>' header")
        utt_id = head[1]
        try:
            T, D = int(head[2]), int(head[3])
        except ValueError:
            raise DataError(f"{path}:{i + 1}: bad frame count or dimension") from None
        rows = np.empty((T, D))
        for t in range(T):
            line_no = i + 2 + t
            if line_no > len(lines):
                raise DataError(f"{path}:{line_no}: file ends inside utterance {utt_id}")
            fields = lines[line_no - 1].split()
            if len(fields) != D:
                raise DataError(f"{path}:{line_no}: expected {D} values, got {len(fields)}")
            try:
                rows[t] = [float(v) for v in fields]
            except ValueError:
                raise DataError(f"{path}:{line_no}: non-numeric value") from None
        if utt_id in out:
            raise DataError(f"{path}:{i + 1}: duplicate utterance {utt_id}")
        out[utt_id] = rows
        i += T + 1
    return out


def write_tokens(path, items: Iterable[tuple[str, Sequence[str]]]) -> None:
    with open(path, "w") as f:
        for utt_id, toks in items:
            f.write(" ".join([utt_id, *toks]) + "\n")


def read_tokens(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            out[fields[0]] = fields[1:]
    return out


def write_alignments(path, items: Iterable[tuple[str, Sequence[tuple[int, int, str]]]]) -> None:
    with open(path, "w") as f:
        for utt_id, segments in items:
            for s, e, tok in segments:
                f.write(f"{utt_id} {s} {e} {tok}\n")


def read_alignments(path) -> dict[str, list[tuple[int, int, str]]]:
    out: dict[str, list[tuple[int, int, str]]] = {}
    last = None
    with open(path) as f:
        for n, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 4:
                raise DataError(f"{path}:{n}: expected '<utt_id> <start> <end> <token>'")
            utt_id = fields[0]
            if utt_id != last and utt_id in out:
                raise DataError(f"{path}:{n}: segments of {utt_id} are not contiguous")
            try:
                seg = (int(fields[1]), int(fields[2]), fields[3])
            except ValueError:
                raise DataError(f"{path}:{n}: start and end must be integers") from None
            out.setdefault(utt_id, []).append(seg)
            last = utt_id
    return out


def write_vocab(path, vocab: Vocab) -> None:
    with open(path, "w") as f:
        for tok in vocab.tokens[:-1]:
            f.write(tok + "\n")


def read_vocab(path) -> Vocab:
    with open(path) as f:
        return Vocab([line.strip() for line in f if line.strip()])


def write_stats(path, mean: np.ndarray, var: np.ndarray) -> None:
    with open(path, "w") as f:
        for d, (m, v) in enumerate(zip(mean, var)):
            f.write(f"{d} {_fmt(m)} {_fmt(v)}\n")


def read_stats(path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3 or int(fields[0]) != len(rows):
                raise DataError(f"{path}:{n}: expected '<dim> <mean> <var>' in dimension order")
            rows.append((float(fields[1]), float(fields[2])))
    arr = np.array(rows, dtype=np.float64).reshape(-1, 2)
    return arr[:, 0].copy(), arr[:, 1].copy()


def save_checkpoint(path, params: ModelParams) -> None:
    """One named array per parameter path in an uncompressed ``.npz`` container."""
    with open(path, "wb") as f:
        np.savez(f, **params.tensors)


def load_checkpoint(path) -> ModelParams:
    with np.load(path, allow_pickle=False) as z:
        return ModelParams({k: z[k] for k in z.files})


# ----------------------------------------------------------------- datasets

FEATURES_FILE = "features.txt"
TOKENS_FILE = "tokens.txt"
ALIGNMENTS_FILE = "alignments.txt"
VOCAB_FILE = "vocab.txt"


def load_dataset(feature_path, alignment_path, vocab_path, tokens_path=None,
                 ) -> tuple[list[Utterance], Vocab]:
    """Join features, tokens and (optional) alignments by utterance id.

    Utterances without tokens are skipped with a warning, as are alignments
    naming unknown utterances.  A frame-count disagreement is an error.
    """
    vocab = read_vocab(vocab_path)
    feats = read_features(feature_path)
    if tokens_path is None:
        tokens_path = Path(feature_path).with_name(TOKENS_FILE)
    toks = read_tokens(tokens_path)
    aligns = read_alignments(alignment_path) if alignment_path and Path(alignment_path).exists() else {}
    for utt_id in aligns.keys() - feats.keys():
        log.warning("alignment for unknown utterance %s skipped", utt_id)
    utts = []
    for utt_id, x in feats.items():
        if utt_id not in toks:
            log.warning("utterance %s has no transcript; skipped", utt_id)
            continue
        ids = tuple(vocab.encode(toks[utt_id])) + (vocab.eos,)
        align = None
        if utt_id in aligns:
            segs = [(s, e, vocab.id(t)) for s, e, t in aligns[utt_id]]
            align = Alignment(segs, x.shape[0])
            report = validate(align)
            if not report.ok:
                raise DataError(f"alignment of {utt_id}: " + "; ".join(report.violations))
            if align.tokens != list(ids[:-1]):
                raise DataError(f"alignment of {utt_id} disagrees with its transcript")
        utts.append(Utterance(utt_id, x, ids, align))
    return utts, vocab


def load_dataset_dir(directory) -> tuple[list[Utterance], Vocab]:
    d = Path(directory)
    return load_dataset(d / FEATURES_FILE, d / ALIGNMENTS_FILE, d / VOCAB_FILE, d / TOKENS_FILE)


def save_dataset_dir(directory, utts: Sequence[Utterance], vocab: Vocab) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_vocab(d / VOCAB_FILE, vocab)
    write_features(d / FEATURES_FILE, ((u.id, u.features) for u in utts))
    write_tokens(d / TOKENS_FILE, ((u.id, vocab.decode(u.tokens[:-1])) for u in utts))
    write_alignments(d / ALIGNMENTS_FILE, (
        (u.id, [(s, e, vocab.tokens[k]) for s, e, k in u.alignment.segments])
        for u in utts if u.alignment is not None))


def split_train_dev(utts: Sequence[Utterance], dev_every: int = 10) -> tuple[list[Utterance], list[Utterance]]:
    """Deterministic 9:1 split by CRC32 of the utterance id."""
    train, dev = [], []
    for u in utts:
        (dev if zlib.crc32(u.id.encode()) % dev_every == 0 else train).append(u)
    return train, dev


# ------------------------------------------------------------ normalization

VAR_FLOOR = 1e-8


def feature_stats(utts: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    frames = np.concatenate([u.features for u in utts], axis=0)
    if frames.shape[0] == 0:
        raise DataError("no frames to compute normalization statistics from")
    mean = frames.mean(axis=0)
    var = frames.var(axis=0)
    low = var < VAR_FLOOR
    if low.any():
        warnings.warn(f"dimension(s) {np.flatnonzero(low).tolist()} have near-zero variance; "
                      f"floored at {VAR_FLOOR}", stacklevel=2)
        var = np.where(low, VAR_FLOOR, var)
    return mean, var


def apply_normalization(utts: Sequence[Utterance], mean: np.ndarray, var: np.ndarray) -> list[Utterance]:
    std = np.sqrt(var)
    return [replace(u, features=(u.features - mean) / std) for u in utts]


def normalize_global(utts: Sequence[Utterance]):
    """Normalize with pooled per-dimension statistics; returns ``(utts, (mean, var))``."""
    mean, var = feature_stats(utts)
    return apply_normalization(utts, mean, var), (mean, var)


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int = 10
    utterances: int = 220
    dmin: int = 2
    dmax: int = 6
    tokens_min: int = 3
    tokens_max: int = 8
    feature_dim: int = 16
    noise_std: float = 0.3
    seed: int = 0
    prefix: str = "utt"

    def __post_init__(self):
        if self.utterances < 1:
            raise DataError("synthetic dataset needs at least one utterance")
        if self.vocab_size < 1:
            raise DataError("synthetic vocabulary needs at least one token")
        if self.dmin < 1 or self.dmax < self.dmin:
            raise DataError("segment durations need 1 <= dmin <= dmax")
        if self.tokens_min < 1 or self.tokens_max < self.tokens_min:
            raise DataError("token counts need 1 <= tokens_min <= tokens_max")
        if self.feature_dim < 1:
            raise DataError("feature_dim must be positive")


def synth_vocab(n: int) -> Vocab:
    width = len(str(n - 1))
    return Vocab([f"p{i:0{width}d}" for i in range(n)])


def prototypes(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """One fixed feature vector per token: one-hots when they fit, else Gaussian."""
    if spec.feature_dim >= spec.vocab_size:
        return np.eye(spec.vocab_size, spec.feature_dim)
    return rng.normal(size=(spec.vocab_size, spec.feature_dim))


def generate_synthetic(spec: SynthSpec) -> tuple[list[Utterance], Vocab]:
    """Segments of noisy token prototypes with exact alignments.

    Consecutive tokens always differ, so every segment boundary is visible
    in the features.
    """
    rng = np.random.default_rng(spec.seed)
    protos = prototypes(spec, rng)
    vocab = synth_vocab(spec.vocab_size)
    width = len(str(spec.utterances - 1))
    utts = []
    for n in range(spec.utterances):
        K = int(rng.integers(spec.tokens_min, spec.tokens_max + 1))
        toks: list[int] = []
        for _ in range(K):
            if toks and spec.vocab_size > 1:
                tok = int(rng.integers(spec.vocab_size - 1))
                tok += tok >= toks[-1]
            else:
                tok = int(rng.integers(spec.vocab_size))
            toks.append(tok)
        durs = rng.integers(spec.dmin, spec.dmax + 1, size=K)
        ends = np.cumsum(durs)
        starts = ends - durs
        T = int(ends[-1])
        feats = np.repeat(protos[toks], durs, axis=0)
        if spec.noise_std > 0:
            feats = feats + rng.normal(scale=spec.noise_std, size=feats.shape)
        align = Alignment(list(zip(starts.tolist(), ends.tolist(), toks)), T)
        utts.append(Utterance(f"{spec.prefix}{n:0{width}d}", feats, tuple(toks) + (vocab.eos,), align))
    return utts, vocab
