"""Central finite-difference checks for every differentiable op and a full model step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node

EPS = 1e-5
TOLERANCE = 1e-4
# gradient magnitudes below this are compared absolutely; central differences
# at EPS carry ~1e-10 of rounding and truncation noise
MAGNITUDE_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = MAGNITUDE_FLOOR) -> float:
    """Worst element of ``|a - n| / max(|a|, |n|, floor)``."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float = EPS,
                     indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    it = indices if indices is not None else list(np.ndindex(x.shape))
    for idx in it:
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def check(fn: Callable[..., Node], inputs: Sequence[np.ndarray], rng: np.random.Generator,
          eps: float = EPS, wrt: Sequence[int] | None = None,
          max_entries: int | None = None) -> float:
    """Worst relative error between backprop and finite differences for ``fn(*nodes)``.

    Non-scalar outputs are reduced with a fixed random weighting so every
    output element contributes.  ``max_entries`` samples that many entries per
    input instead of perturbing all of them.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    out = fn(*[Node(a) for a in arrays])
    weights = rng.normal(size=out.shape) if out.value.ndim else None

    def scalar(nodes):
        y = fn(*nodes)
        return y if weights is None else dc.sum_(dc.mul(y, dc.const(weights)))

    nodes = [Node(a) for a in arrays]
    dc.backward(scalar(nodes))
    worst = 0.0
    for i in (range(len(arrays)) if wrt is None else wrt):
        x = arrays[i]
        idx = list(np.ndindex(x.shape))
        if max_entries is not None and len(idx) > max_entries:
            pick = rng.choice(len(idx), size=max_entries, replace=False)
            idx = [idx[j] for j in pick]

        def f():
            return float(scalar([Node(a) for a in arrays]).value)

        num = numeric_gradient(f, x, eps, idx)
        sel = tuple(np.array(idx).T)
        worst = max(worst, relative_error(nodes[i].grad[sel], num[sel]))
    return worst


@dataclass(frozen=True)
class CheckResult:
    name: str
    worst: float
    ok: bool
    error: str | None = None


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    from .losses import attention_loss, cross_entropy, ctc_loss

    n = rng.normal
    H = 3
    lstm_w = [n(size=(4, 4 * H)) * 0.5, n(size=(H, 4 * H)) * 0.5, n(size=4 * H) * 0.5]
    mask_rng = np.random.default_rng(7)
    mask_state = mask_rng.bit_generator.state

    def dropped(a):
        mask_rng.bit_generator.state = mask_state
        return dc.dropout(a, 0.4, mask_rng, training=True)

    target = rng.dirichlet(np.ones(5), size=3)
    return [
        ("matmul", dc.matmul, [n(size=(3, 4)), n(size=(4, 2))]),
        ("add", dc.add, [n(size=(3, 4)), n(size=(3, 4))]),
        ("add_broadcast", dc.add, [n(size=(3, 4)), n(size=4)]),
        ("mul", dc.mul, [n(size=(3, 4)), n(size=(3, 4))]),
        ("scale", lambda a: dc.scale(a, -1.7), [n(size=(2, 3))]),
        ("tanh", dc.tanh, [n(size=(3, 4))]),
        ("sigmoid", dc.sigmoid, [n(size=(3, 4)) * 3]),
        ("concat", lambda a, b: dc.concat([a, b], axis=1), [n(size=(2, 3)), n(size=(2, 2))]),
        ("slice", lambda a: dc.slice_(a, (slice(1, 3), slice(0, 2))), [n(size=(4, 3))]),
        ("sum", dc.sum_, [n(size=(3, 4))]),
        ("transpose", dc.transpose, [n(size=(2, 3))]),
        ("reshape", lambda a: dc.reshape(a, (3, 4)), [n(size=(6, 2))]),
        ("take_rows", lambda a: dc.take_rows(a, [2, 0, 2]), [n(size=(3, 4))]),
        ("pick", lambda a: dc.pick(a, [1, 0, 3]), [n(size=(3, 4))]),
        ("softmax_rows", dc.softmax_rows, [n(size=(3, 5)) * 2]),
        ("log_softmax_rows", dc.log_softmax_rows, [n(size=(3, 5)) * 2]),
        ("dropout", dropped, [n(size=(4, 5))]),
        ("lstm_sequence", lambda x, a, b, c: dc.lstm_sequence(x, a, b, c), [n(size=(5, 4)), *lstm_w]),
        ("lstm_sequence_reverse", lambda x, a, b, c: dc.lstm_sequence(x, a, b, c, reverse=True),
         [n(size=(5, 4)), *lstm_w]),
        ("lstm_cell", dc.lstm_cell, [n(size=4), n(size=H) * 0.5, n(size=H), *lstm_w]),
        ("cross_entropy", lambda a: cross_entropy(a, [1, 4, 0]), [n(size=(3, 5))]),
        ("attention_loss", lambda a: attention_loss(dc.softmax_rows(a), target), [n(size=(3, 5))]),
        ("ctc_loss", lambda a: ctc_loss(a, [0, 1, 1]), [n(size=(6, 4))]),
    ]


def _model_case(rng: np.random.Generator):
    """Loss of one full training step (CE + attention + CTC) on a tiny model."""
    from .alignment import Alignment, build_uniform
    from .losses import attention_loss, combine, cross_entropy, ctc_loss
    from .model import DecoderConfig, EncoderConfig, ModelConfig, ctc_logits, forward_teacher_forced, init_params

    cfg = ModelConfig(EncoderConfig(input_dim=3, layers=2, cells_per_direction=3, subsample_after=(1,)),
                      DecoderConfig(vocab_size=4, embed_dim=3, hidden_dim=4, fc_layers=2), ctc_head=True)
    params = init_params(cfg, rng)
    # larger weights than the default init so gradients are not vanishingly small
    params = type(params)({k: v * 5 for k, v in params.items()})
    feats = rng.normal(size=(8, 3))
    tokens = (0, 2, 1, cfg.decoder.eos)
    target = build_uniform(Alignment([(0, 3, 0), (3, 5, 2), (5, 8, 1)], 8), cfg.encoder.factor)
    names = list(params)

    def loss(*nodes):
        P = dict(zip(names, nodes))
        fwd = forward_teacher_forced(feats, tokens, P, cfg)
        ce = cross_entropy(fwd.logits, tokens)
        attn = attention_loss(dc.slice_(fwd.attention, slice(0, 3)), target)
        ctc = ctc_loss(ctc_logits(fwd.encoded.states, P), tokens[:-1])
        return combine(ce, attn, ctc, gamma=0.5, lam=0.3)[0]

    return "model_step", loss, [params[k] for k in names]


def run_all(seed: int = 0, tolerance: float = TOLERANCE, include_model: bool = True,
            model_entries: int = 6) -> list[CheckResult]:
    """Check every registered op, then a full model step on sampled parameter entries."""
    rng = np.random.default_rng(seed)
    cases = _op_cases(rng)
    results = []
    for name, fn, inputs in cases:
        results.append(_run(name, lambda: check(fn, inputs, rng), tolerance))
    if include_model:
        name, fn, inputs = _model_case(rng)
        results.append(_run(name, lambda: check(fn, inputs, rng, max_entries=model_entries), tolerance))
    return results


def _run(name: str, thunk: Callable[[], float], tolerance: float) -> CheckResult:
    try:
        worst = thunk()
    except Exception as exc:  # a crashing rule is a failed check, not an abort
        return CheckResult(name, float("inf"), False, f"{type(exc).__name__}: {exc}")
    return CheckResult(name, worst, worst < tolerance)


def format_report(results: Sequence[CheckResult]) -> str:
    lines = [f"{'op':<24}{'worst_rel_err':>16}  status"]
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        extra = f"  ({r.error})" if r.error else ""
        lines.append(f"{r.name:<24}{r.worst:>16.3e}  {status}{extra}")
    failed = sum(not r.ok for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)
