import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alignrefine.align import Alignment, collapse, timestamps, validate_rnnt
from alignrefine.synth import (CorruptionConfig, Task, TaskConfig, corpus_wer, corrupt, first_pass_wer,
                               generate, load_corpus, save_corpus)

TASK = TaskConfig()


def test_deterministic_corpus():
    a = generate(20, TASK, seed=3, corruption=CorruptionConfig(seed=1))
    b = generate(20, TASK, seed=3, corruption=CorruptionConfig(seed=1))
    for u, v in zip(a, b):
        assert u.reference == v.reference and u.first_pass == v.first_pass
        assert np.array_equal(u.features, v.features)


def test_order_independent_seeding():
    whole = generate(10, TASK, seed=5)
    assert generate(4, TASK, seed=5)[3].reference == whole[3].reference


def test_empty_corpus():
    assert generate(0, TASK, seed=0) == []


def test_gold_alignments_valid():
    for u in generate(1000, TASK, seed=11):
        assert validate_rnnt(u.gold_alignment)
        assert tuple(collapse(u.gold_alignment)) == u.reference
        assert u.features.shape == (u.audio_len, TASK.audio_dim)
        assert TASK.min_labels <= len(u.reference) <= TASK.max_labels


def test_reference_has_no_adjacent_repeats():
    for u in generate(200, TASK, seed=12):
        assert all(a != b for a, b in zip(u.reference, u.reference[1:]))


def test_corrupt_identity_at_zero_rates():
    for u in generate(50, TASK, seed=2):
        assert corrupt(u.gold_alignment, CorruptionConfig(0, 0, 0), TASK.vocab_size) == u.gold_alignment


def test_corrupt_full_deletion():
    for u in generate(50, TASK, seed=2):
        out = corrupt(u.gold_alignment, CorruptionConfig(0, 0.99999999, 0), TASK.vocab_size)
        assert set(out.tokens) == {0} and len(out) == u.audio_len


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.floats(0, 0.3), st.floats(0, 0.3), st.floats(0, 0.3))
def test_corrupt_preserves_blanks(seed, s, d, i):
    cfg = CorruptionConfig(s, d, i, seed)
    for u in generate(5, TASK, seed=seed):
        out = corrupt(u.gold_alignment, cfg, TASK.vocab_size)
        assert out.audio_len == u.audio_len and validate_rnnt(out)
        assert timestamps(out).max() < out.audio_len


def test_default_corruption_wer_regression():
    # seeded Monte-Carlo estimate; the design target is 20% +- 3%
    corpus = generate(1000, TASK, seed=21, corruption=CorruptionConfig(seed=22))
    wer = first_pass_wer(corpus)
    assert 0.17 <= wer <= 0.23
    assert wer == first_pass_wer(generate(1000, TASK, seed=21, corruption=CorruptionConfig(seed=22)))


def test_corpus_wer_examples():
    assert corpus_wer(["a b", "c"], ["a b", "c"]) == 0.0
    assert corpus_wer(["a b"], ["a c"]) == 0.5
    with pytest.raises(ValueError):
        corpus_wer(["a"], [])


def test_corpus_wer_additivity():
    h1, r1 = ["a b c", "x"], ["a b d", "x y"]
    h2, r2 = ["q r"], ["q s t u"]
    w1, w2 = corpus_wer(h1, r1), corpus_wer(h2, r2)
    n1, n2 = 5, 4
    assert corpus_wer(h1 + h2, r1 + r2) == pytest.approx((w1 * n1 + w2 * n2) / (n1 + n2))


def test_invalid_rates():
    with pytest.raises(ValueError):
        CorruptionConfig(0.5, 0.3, 0.3)


def test_corpus_roundtrip(tmp_path):
    corpus = generate(7, TASK, seed=4, corruption=CorruptionConfig(seed=9))
    save_corpus(corpus, tmp_path / "train", TASK)
    loaded, task = load_corpus(tmp_path / "train")
    assert task == TASK
    for u, v in zip(corpus, loaded):
        assert u.gold_alignment == v.gold_alignment and u.first_pass == v.first_pass
        assert u.reference == v.reference
        assert np.allclose(u.features, v.features, atol=1e-6)



@pytest.mark.parametrize("emit", ["first", "last"])
def test_emission_frame(emit):
    cfg = TaskConfig(emit=emit, noise=0.0)
    E = Task(cfg).embeddings
    for u in generate(20, cfg, seed=5):
        a = u.gold_alignment
        frames = [t for tok, t in zip(a.tokens, timestamps(a)) if tok != 0]
        for k, (lab, t) in enumerate(zip(u.reference, frames)):
            assert np.allclose(u.features[t], E[lab])
            # the segment starts (or ends) exactly at the emission frame
            edge = t - 1 if emit == "first" else t + 1
            if 0 <= edge < u.audio_len:
                assert not np.allclose(u.features[edge], E[lab])


def test_unknown_emit():
    with pytest.raises(ValueError):
        generate(1, TaskConfig(emit="middle"), seed=0)
