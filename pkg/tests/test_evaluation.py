import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import levenshtein
from supattn.alignment import Alignment, build_uniform
from supattn.data import SynthSpec, generate_synthetic
from supattn.diffcore import Node
from supattn.evaluation import (
    END_TOKEN, LENGTH_CAP, ErrorCounts, UttScore, attention_report, edit_distance, evaluate,
    format_per, greedy_decode, summarize, write_scores,
)
from supattn.losses import attention_loss
from supattn.model import DecoderConfig, EncoderConfig, ModelConfig, ModelParams, init_params

seqs = st.lists(st.integers(0, 3), max_size=7)


def test_edit_distance_examples():
    assert edit_distance([1, 2], [1, 2]) == ErrorCounts(0, 0, 0, 2)
    c = edit_distance([], [1, 2, 3, 4, 5])
    assert c == ErrorCounts(0, 0, 5, 5) and format_per(c) == "100.0"
    c = edit_distance(["a", "b", "c"], ["a", "c"])
    assert c == ErrorCounts(0, 1, 0, 2) and c.per == 0.5
    assert edit_distance([1, 9, 3], [1, 2, 3]) == ErrorCounts(1, 0, 0, 3)


def test_empty_reference_per_undefined():
    with pytest.raises(ValueError):
        edit_distance([1], []).per


@given(seqs, seqs)
def test_edit_distance_matches_oracle_and_swaps(a, b):
    ab, ba = edit_distance(a, b), edit_distance(b, a)
    assert ab.errors == levenshtein(a, b)
    assert (ab.substitutions, ab.insertions, ab.deletions) == (ba.substitutions, ba.deletions, ba.insertions)
    assert ab.insertions - ab.deletions == len(a) - len(b)


@given(seqs, seqs, seqs)
def test_edit_distance_triangle(a, b, c):
    assert edit_distance(a, c).errors <= edit_distance(a, b).errors + edit_distance(b, c).errors


def test_attention_report_examples(rng):
    align = Alignment([(0, 1, 0), (1, 2, 1)], 2)
    assert attention_report(np.eye(2), align, 1) == 0.0
    assert attention_report(np.full((2, 2), 0.5), align, 1) == 1.0
    align = Alignment([(0, 3, 0), (3, 8, 1)], 8)
    a = rng.dirichlet(np.ones(4), size=2)
    assert attention_report(a, align, 2) == attention_loss(Node(a), build_uniform(align, 2)).value


def _cfg(V=4):
    return ModelConfig(EncoderConfig(3, 2, 3), DecoderConfig(V, 3, 4, 1))


def _biased(cfg, token, rng):
    """Parameters whose output bias makes ``token`` the arg-max at every step."""
    p = init_params(cfg, rng)
    t = dict(p.items())
    b = np.zeros(cfg.decoder.vocab_size)
    b[token] = 100.0
    t["dec.fc0.b"] = b
    return ModelParams(t)


def test_greedy_stops_at_end_token(rng):
    cfg = _cfg()
    out = greedy_decode(rng.normal(size=(6, 3)), _biased(cfg, cfg.decoder.eos, rng), cfg)
    assert out.tokens == [] and out.stopped_by == END_TOKEN and out.attention.shape == (0, 3)


def test_greedy_length_cap(rng):
    cfg = _cfg()
    out = greedy_decode(rng.normal(size=(6, 3)), _biased(cfg, 1, rng), cfg, max_len=1)
    assert out.tokens == [1] and out.stopped_by == LENGTH_CAP
    out = greedy_decode(rng.normal(size=(6, 3)), _biased(cfg, 1, rng), cfg)
    assert len(out.tokens) == 3 + 10
    assert np.allclose(out.attention.sum(axis=1), 1.0, atol=1e-9)


def test_greedy_deterministic(rng):
    cfg = _cfg()
    p = init_params(cfg, rng)
    x = rng.normal(size=(8, 3))
    a, b = greedy_decode(x, p, cfg), greedy_decode(x, p, cfg)
    assert a.tokens == b.tokens and np.array_equal(a.attention, b.attention)


def test_greedy_validates_max_len(rng):
    cfg = _cfg()
    with pytest.raises(ValueError):
        greedy_decode(rng.normal(size=(6, 3)), init_params(cfg, rng), cfg, max_len=0)


def test_write_scores(tmp_path):
    scores = [UttScore("u1", ErrorCounts(1, 0, 1, 4), 0.5), UttScore("u2", ErrorCounts(0, 2, 0, 4), math.nan)]
    total = write_scores(tmp_path / "s.tsv", scores)
    lines = (tmp_path / "s.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["utt_id", "S", "I", "D", "ref_len", "per", "attn_dist"]
    assert lines[1] == "u1\t1\t0\t1\t4\t50.0\t0.500000"
    assert lines[2].endswith("\tnan")
    assert lines[-1] == "TOTAL\t1\t2\t1\t8\t50.0\t0.500000"
    assert total == ErrorCounts(1, 2, 1, 8)


def test_evaluate_parallel_matches_serial():
    utts, vocab = generate_synthetic(SynthSpec(utterances=4, seed=2))
    cfg = ModelConfig(EncoderConfig(16, 2, 4), DecoderConfig(len(vocab), 4, 6, 2))
    p = init_params(cfg, np.random.default_rng(0))
    serial = evaluate(utts, p, cfg)
    parallel = evaluate(utts, p, cfg, jobs=2)
    assert [r.utt_id for r in parallel] == [u.id for u in utts]
    assert summarize(serial)[:2] == summarize(parallel)[:2]
    assert [r.counts for r in serial] == [r.counts for r in parallel]
