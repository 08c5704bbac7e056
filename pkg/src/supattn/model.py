"""Attention encoder-decoder: pyramidal bidirectional LSTM encoder, LSTM decoder
over past tokens, dot-product attention, and a fully connected output stack.

Parameters live in :class:`ModelParams` as plain arrays.  Each forward pass
wraps them in fresh leaf nodes (see :meth:`ModelParams.as_nodes`) so the graph
is rebuilt per step.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Node

SUBSAMPLE_MODES = ("concat", "stride")


class ConfigError(ValueError):
    """Model configuration is inconsistent."""


class InputTooShortError(ValueError):
    """Fewer input frames than the encoder's subsampling factor."""


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    layers: int = 2
    cells_per_direction: int = 32
    subsample_after: tuple[int, ...] = (1,)
    subsample_mode: str = "concat"

    def __post_init__(self):
        object.__setattr__(self, "subsample_after", tuple(sorted(set(self.subsample_after))))
        if self.layers < 1:
            raise ConfigError("encoder needs at least one layer")
        if any(not 1 <= i <= self.layers - 1 for i in self.subsample_after):
            raise ConfigError(f"subsample_after {self.subsample_after} must lie in 1..{self.layers - 1}")
        if self.subsample_mode not in SUBSAMPLE_MODES:
            raise ConfigError(f"subsample_mode must be one of {SUBSAMPLE_MODES}")

    @property
    def factor(self) -> int:
        return 2 ** len(self.subsample_after)

    @property
    def output_dim(self) -> int:
        return 2 * self.cells_per_direction


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    embed_dim: int = 16
    hidden_dim: int = 64
    fc_layers: int = 2

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must count at least one token plus the end token")
        if self.fc_layers < 1:
            raise ConfigError("decoder needs at least one output layer")

    @property
    def eos(self) -> int:
        return self.vocab_size - 1

    @property
    def sos(self) -> int:
        # extra embedding row, never predicted
        return self.vocab_size


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    decoder: DecoderConfig
    ctc_head: bool = False


class ModelParams:
    """Named parameter arrays, e.g. ``enc.l0.fwd.W_ih`` or ``dec.fc1.W``."""

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def as_nodes(self) -> dict[str, Node]:
        return {k: Node(v) for k, v in self.tensors.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k]).tobytes())
        return h.hexdigest()

    def num_values(self) -> int:
        return sum(v.size for v in self.tensors.values())


ParamsLike = Union[ModelParams, Mapping[str, Node]]


def _nodes(params: ParamsLike) -> Mapping[str, Node]:
    return params.as_nodes() if isinstance(params, ModelParams) else params


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform(-0.1, 0.1) matrices, zero biases, forget-gate biases at 1."""
    enc, dec = config.encoder, config.decoder
    t: dict[str, np.ndarray] = {}

    def matrix(name, *shape):
        t[name] = rng.uniform(-0.1, 0.1, size=shape)

    def lstm(prefix, n_in, H):
        matrix(f"{prefix}.W_ih", n_in, 4 * H)
        matrix(f"{prefix}.W_hh", H, 4 * H)
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0
        t[f"{prefix}.b"] = b

    n_in = enc.input_dim
    H = enc.cells_per_direction
    for layer in range(enc.layers):
        for direction in ("fwd", "bwd"):
            lstm(f"enc.l{layer}.{direction}", n_in, H)
        n_in = 2 * H
        if layer + 1 in enc.subsample_after and enc.subsample_mode == "concat":
            n_in *= 2
    matrix("att.W", enc.output_dim, dec.hidden_dim)
    matrix("dec.embed", dec.vocab_size + 1, dec.embed_dim)
    lstm("dec.lstm", dec.embed_dim, dec.hidden_dim)
    width = enc.output_dim + dec.hidden_dim
    for j in range(dec.fc_layers):
        out = dec.vocab_size if j == dec.fc_layers - 1 else dec.hidden_dim
        matrix(f"dec.fc{j}.W", width, out)
        t[f"dec.fc{j}.b"] = np.zeros(out)
        width = out
    if config.ctc_head:
        matrix("ctc.W", enc.output_dim, dec.vocab_size + 1)
        t["ctc.b"] = np.zeros(dec.vocab_size + 1)
    return ModelParams(t)


def _subsample(h: Node, mode: str) -> Node:
    T, width = h.shape
    half = T // 2
    if mode == "concat":
        # adjacent frame pairs side by side; an odd trailing frame is dropped
        trimmed = h if 2 * half == T else dc.slice_(h, slice(0, 2 * half))
        return dc.reshape(trimmed, (half, 2 * width))
    return dc.take_rows(h, range(0, 2 * half, 2))


class Encoded(NamedTuple):
    states: Node  # T' x 2C hidden vectors
    keys: Node  # T' x hidden_dim, states projected for dot-product scoring


def encode(features, params: ParamsLike, config: ModelConfig, training: bool = False,
           dropout: float = 0.0, rng: np.random.Generator | None = None) -> Node:
    """Return the ``floor(T / r) x 2C`` top-layer hidden states."""
    enc = config.encoder
    P = _nodes(params)
    x = dc.const(features)
    T, D = x.shape
    if D != enc.input_dim:
        raise ConfigError(f"features have dimension {D}, encoder expects {enc.input_dim}")
    if T < enc.factor:
        raise InputTooShortError(f"{T} frames is shorter than subsampling factor {enc.factor}")
    h = x
    for layer in range(enc.layers):
        pre = f"enc.l{layer}"
        fwd = dc.lstm_sequence(h, P[f"{pre}.fwd.W_ih"], P[f"{pre}.fwd.W_hh"], P[f"{pre}.fwd.b"])
        bwd = dc.lstm_sequence(h, P[f"{pre}.bwd.W_ih"], P[f"{pre}.bwd.W_hh"], P[f"{pre}.bwd.b"],
                               reverse=True)
        h = dc.dropout(dc.concat([fwd, bwd], axis=1), dropout, rng, training)
        if layer + 1 in enc.subsample_after:
            h = _subsample(h, enc.subsample_mode)
    return h


def attention_keys(states: Node, params: ParamsLike) -> Node:
    return dc.matmul(states, _nodes(params)["att.W"])


def _output_stack(context: Node, dstate: Node, P, config: ModelConfig, training, dropout, rng):
    z = dc.concat([context, dstate], axis=-1)
    n = config.decoder.fc_layers
    for j in range(n):
        W, b = P[f"dec.fc{j}.W"], P[f"dec.fc{j}.b"]
        if z.value.ndim == 1:
            z = dc.reshape(dc.matmul(dc.reshape(z, (1, -1)), W), (W.shape[1],))
        else:
            z = dc.matmul(z, W)
        z = dc.add(z, b)
        if j < n - 1:
            z = dc.dropout(dc.tanh(z), dropout, rng, training)
    return z


@dataclass
class DecoderState:
    h: Node
    c: Node


def initial_state(config: ModelConfig) -> DecoderState:
    H = config.decoder.hidden_dim
    return DecoderState(dc.const(np.zeros(H)), dc.const(np.zeros(H)))


def decode_step(prev_token: int, state: DecoderState | None, encoded: Encoded,
                params: ParamsLike, config: ModelConfig, training: bool = False,
                dropout: float = 0.0, rng: np.random.Generator | None = None,
                ) -> tuple[Node, Node, DecoderState]:
    """Advance the decoder by one token; returns ``(logits, attention_row, new_state)``."""
    P = _nodes(params)
    if state is None:
        state = initial_state(config)
    H = config.decoder.hidden_dim
    if encoded.keys.shape[1] != H:
        raise ConfigError(f"attention keys have width {encoded.keys.shape[1]}, decoder state {H}")
    emb = dc.reshape(dc.take_rows(P["dec.embed"], [prev_token]), (config.decoder.embed_dim,))
    hc = dc.lstm_cell(emb, state.h, state.c, P["dec.lstm.W_ih"], P["dec.lstm.W_hh"], P["dec.lstm.b"])
    h_new, c_new = dc.slice_(hc, slice(0, H)), dc.slice_(hc, slice(H, 2 * H))
    d = dc.dropout(h_new, dropout, rng, training)
    d_row = dc.reshape(d, (1, H))
    scores = dc.matmul(d_row, dc.transpose(encoded.keys))
    attn = dc.softmax_rows(scores)
    context = dc.reshape(dc.matmul(attn, encoded.states), (encoded.states.shape[1],))
    logits = _output_stack(context, d, P, config, training, dropout, rng)
    return logits, dc.reshape(attn, (attn.shape[1],)), DecoderState(h_new, c_new)


@dataclass
class ForwardResult:
    logits: Node  # K x V
    attention: Node  # K x T'
    encoded: Encoded
    decoder_states: Node = field(repr=False, default=None)  # K x hidden, after dropout


def forward_teacher_forced(features, targets: Sequence[int], params: ParamsLike,
                           config: ModelConfig, training: bool = False, dropout: float = 0.0,
                           rng: np.random.Generator | None = None) -> ForwardResult:
    """Score ``targets`` (end-token terminated) feeding the gold previous token at each step."""
    if len(targets) == 0:
        raise ValueError("target sequence is empty")
    if targets[-1] != config.decoder.eos:
        raise ValueError("target sequence must end with the end-of-sequence token")
    P = _nodes(params)
    states = encode(features, P, config, training, dropout, rng)
    encoded = Encoded(states, attention_keys(states, P))
    inputs = [config.decoder.sos] + list(targets[:-1])
    emb = dc.take_rows(P["dec.embed"], inputs)
    d = dc.lstm_sequence(emb, P["dec.lstm.W_ih"], P["dec.lstm.W_hh"], P["dec.lstm.b"])
    d = dc.dropout(d, dropout, rng, training)
    attn = dc.softmax_rows(dc.matmul(d, dc.transpose(encoded.keys)))
    context = dc.matmul(attn, states)
    logits = _output_stack(context, d, P, config, training, dropout, rng)
    return ForwardResult(logits, attn, encoded, d)


def ctc_logits(states: Node, params: ParamsLike) -> Node:
    """Frame-level scores over the decoder vocabulary plus a trailing blank."""
    P = _nodes(params)
    if "ctc.W" not in P:
        raise ConfigError("model was built without a CTC head")
    return dc.add(dc.matmul(states, P["ctc.W"]), P["ctc.b"])
