import logging

import numpy as np
import pytest

from oracles import pooled_stats
from supattn import data as D
from supattn.alignment import validate
from supattn.model import ModelParams


@pytest.fixture
def synth():
    return D.generate_synthetic(D.SynthSpec(utterances=12, seed=3))


def test_vocab_layout():
    v = D.Vocab(["a", "b"])
    assert v.tokens == ["a", "b", D.EOS] and v.eos == 2 and v.blank == 3
    assert v.encode(["b", "a"]) == [1, 0] and v.decode([0, 2]) == ["a", D.EOS]
    with pytest.raises(D.DataError):
        D.Vocab(["a", "a"])
    with pytest.raises(D.DataError):
        v.id("c")


def test_dataset_round_trip(tmp_path, synth):
    utts, vocab = synth
    D.save_dataset_dir(tmp_path, utts, vocab)
    back, vocab2 = D.load_dataset_dir(tmp_path)
    assert vocab2 == vocab
    assert [u.id for u in back] == [u.id for u in utts]
    for a, b in zip(utts, back):
        assert np.array_equal(a.features, b.features)
        assert a.tokens == b.tokens
        assert a.alignment == b.alignment


def test_files_round_trip_byte_identical(tmp_path, synth):
    utts, vocab = synth
    D.save_dataset_dir(tmp_path / "a", utts, vocab)
    D.save_dataset_dir(tmp_path / "b", *D.load_dataset_dir(tmp_path / "a"))
    for name in (D.FEATURES_FILE, D.TOKENS_FILE, D.ALIGNMENTS_FILE, D.VOCAB_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_alignments_load_without(tmp_path, synth):
    utts, vocab = synth
    D.save_dataset_dir(tmp_path, utts, vocab)
    (tmp_path / D.ALIGNMENTS_FILE).write_text("")
    back, _ = D.load_dataset_dir(tmp_path)
    assert len(back) == len(utts) and all(u.alignment is None for u in back)


def test_unknown_alignment_skipped_with_warning(tmp_path, synth, caplog):
    utts, vocab = synth
    D.save_dataset_dir(tmp_path, utts, vocab)
    with open(tmp_path / D.ALIGNMENTS_FILE, "a") as f:
        f.write("ghost 0 2 p0\n")
    with caplog.at_level(logging.WARNING):
        back, _ = D.load_dataset_dir(tmp_path)
    assert len(back) == len(utts)
    assert "ghost" in caplog.text


def test_utterance_without_transcript_skipped(tmp_path, synth, caplog):
    utts, vocab = synth
    D.save_dataset_dir(tmp_path, utts, vocab)
    lines = (tmp_path / D.TOKENS_FILE).read_text().splitlines()
    (tmp_path / D.TOKENS_FILE).write_text("\n".join(lines[1:]) + "\n")
    with caplog.at_level(logging.WARNING):
        back, _ = D.load_dataset_dir(tmp_path)
    assert len(back) == len(utts) - 1 and utts[0].id in caplog.text


def test_parse_error_has_line_number(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("UTT a 2 2\n1 2\n3 x\n")
    with pytest.raises(D.DataError, match=":3:"):
        D.read_features(p)
    p.write_text("UTT a 2\n")
    with pytest.raises(D.DataError, match=":1:"):
        D.read_features(p)
    q = tmp_path / "a.txt"
    q.write_text("u 0 2 p0\nu 2 x p1\n")
    with pytest.raises(D.DataError, match=":2:"):
        D.read_alignments(q)


def test_frame_count_mismatch_is_error(tmp_path, synth):
    utts, vocab = synth
    D.save_dataset_dir(tmp_path, utts, vocab)
    u = utts[0]
    s, e, k = u.alignment.segments[-1]
    text = (tmp_path / D.ALIGNMENTS_FILE).read_text()
    text = text.replace(f"{u.id} {s} {e} {vocab.tokens[k]}", f"{u.id} {s} {e + 5} {vocab.tokens[k]}")
    (tmp_path / D.ALIGNMENTS_FILE).write_text(text)
    with pytest.raises(D.DataError):
        D.load_dataset_dir(tmp_path)


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    p = ModelParams({"a.W": rng.normal(size=(3, 4)), "b": rng.normal(size=5) * 1e-300})
    D.save_checkpoint(tmp_path / "c.npz", p)
    q = D.load_checkpoint(tmp_path / "c.npz")
    assert q.checksum() == p.checksum()


def test_stats_round_trip(tmp_path, rng):
    mean, var = rng.normal(size=4), rng.random(4)
    D.write_stats(tmp_path / "s", mean, var)
    m2, v2 = D.read_stats(tmp_path / "s")
    assert np.array_equal(mean, m2) and np.array_equal(var, v2)


def test_normalize_matches_pooled_oracle(rng):
    utts = [D.Utterance("a", rng.normal(3, 2, size=(5, 3)), (0,)),
            D.Utterance("b", rng.normal(-1, 0.5, size=(8, 3)), (0,))]
    normed, (mean, var) = D.normalize_global(utts)
    om, ov = pooled_stats([u.features for u in utts])
    assert np.allclose(mean, om, atol=1e-12) and np.allclose(var, ov, atol=1e-12)
    frames = np.concatenate([u.features for u in normed])
    assert np.abs(frames.mean(axis=0)).max() < 1e-9
    assert np.abs(frames.var(axis=0) - 1).max() < 1e-6
    again, _ = D.normalize_global(normed)
    assert all(np.allclose(a.features, b.features, atol=1e-9) for a, b in zip(again, normed))


def test_constant_dimension_floored():
    x = np.ones((4, 2))
    x[:, 1] = [0, 1, 2, 3]
    with pytest.warns(UserWarning, match="variance"):
        normed, (_, var) = D.normalize_global([D.Utterance("a", x, (0,))])
    assert var[0] == D.VAR_FLOOR and np.all(normed[0].features[:, 0] == 0)


def test_dev_frames_never_enter_train_stats(synth):
    utts, _ = synth
    train, dev = D.split_train_dev(utts, dev_every=3)
    _, stats = D.normalize_global(train)
    perturbed = [D.Utterance(u.id, u.features + 100, u.tokens, u.alignment) for u in dev]
    _, stats2 = D.normalize_global(train)
    assert all(np.array_equal(a, b) for a, b in zip(stats, stats2))
    assert D.apply_normalization(perturbed, *stats)[0].features.mean() > 50


def test_split_is_deterministic_and_roughly_nine_to_one():
    utts, _ = D.generate_synthetic(D.SynthSpec(utterances=400, seed=0))
    train, dev = D.split_train_dev(utts)
    assert (train, dev) == D.split_train_dev(utts)
    assert 20 <= len(dev) <= 60 and len(train) + len(dev) == 400


def test_synthetic_exact_prototypes():
    utts, vocab = D.generate_synthetic(D.SynthSpec(vocab_size=2, utterances=5, dmin=1, dmax=1,
                                                   tokens_min=2, tokens_max=4, feature_dim=2,
                                                   noise_std=0.0))
    for u in utts:
        K = len(u.tokens) - 1
        assert u.features.shape == (K, 2)
        assert np.array_equal(u.features, np.eye(2)[list(u.tokens[:-1])])
        assert u.alignment.segments == tuple((k, k + 1, t) for k, t in enumerate(u.tokens[:-1]))


def test_synthetic_deterministic():
    a, _ = D.generate_synthetic(D.SynthSpec(utterances=6, seed=5))
    b, _ = D.generate_synthetic(D.SynthSpec(utterances=6, seed=5))
    assert all(np.array_equal(x.features, y.features) and x.tokens == y.tokens for x, y in zip(a, b))


def test_synthetic_alignments_cover_without_gaps(synth):
    utts, _ = synth
    for u in utts:
        rep = validate(u.alignment)
        assert rep.ok and not rep.info
        assert u.alignment.segments[0].start == 0 and u.alignment.segments[-1].end == u.num_frames
        assert u.alignment.tokens == list(u.tokens[:-1])
        assert all(a != b for a, b in zip(u.tokens[:-2], u.tokens[1:-1]))


def test_synthetic_segment_means_near_prototype():
    spec = D.SynthSpec(utterances=40, seed=11, noise_std=0.3)
    utts, _ = D.generate_synthetic(spec)
    protos = np.eye(spec.vocab_size, spec.feature_dim)
    for u in utts:
        for s, e, k in u.alignment.segments:
            bound = 3 * spec.noise_std / np.sqrt(e - s)
            # a 3-sigma band holds per dimension with probability ~0.997
            dev = np.abs(u.features[s:e].mean(axis=0) - protos[k])
            assert np.mean(dev <= bound) > 0.9


@pytest.mark.parametrize("kwargs", [dict(utterances=0), dict(dmin=0), dict(dmin=4, dmax=3),
                                    dict(tokens_min=0)])
def test_synth_spec_validation(kwargs):
    with pytest.raises(D.DataError):
        D.SynthSpec(**kwargs)


def test_small_feature_dim_uses_gaussian_prototypes():
    utts, _ = D.generate_synthetic(D.SynthSpec(vocab_size=10, feature_dim=4, utterances=2, noise_std=0))
    assert utts[0].features.shape[1] == 4
