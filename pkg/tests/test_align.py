import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alignrefine.align import (Alignment, InvalidInput, collapse, make_alignment, parse_alignments,
                               format_alignment, timestamps, validate_rnnt)

B = 0
HELLO, WOR, LD = 1, 2, 3
HELLO_WORLD = Alignment((B, HELLO, B, B, B, WOR, LD, B), 5)


def test_timestamps_hello_world():
    assert timestamps(HELLO_WORLD).tolist() == [0, 1, 1, 2, 3, 4, 4, 4]


def test_timestamps_all_blank():
    assert timestamps(Alignment((B, B, B), 3)).tolist() == [0, 1, 2]


def test_timestamps_clamped_to_last_frame():
    # prefix blank counts are 0, 0, 1, 2, 3; frames above T-1 = 1 clamp to 1
    a = Alignment((4, B, B, B, 4), 2)
    assert timestamps(a).tolist() == [0, 0, 1, 1, 1]


def test_timestamps_empty_rejected():
    with pytest.raises(InvalidInput):
        timestamps(Alignment((), 3))


@pytest.mark.parametrize("tokens,expected", [
    ((1, 1, B, 2), [1, 2]),
    ((1, B, 1), [1, 1]),
    ((B, B), []),
])
def test_collapse(tokens, expected):
    assert collapse(Alignment(tokens, 1)) == expected


@pytest.mark.parametrize("a,ok", [
    (HELLO_WORLD, True),
    (Alignment((1,), 1), False),
    (Alignment((B, 1), 1), True),
])
def test_validate_rnnt(a, ok):
    assert validate_rnnt(a) is ok


def test_make_alignment_hello_world():
    assert make_alignment([HELLO, WOR, LD], [1, 4, 4], 5) == HELLO_WORLD


def test_make_alignment_edge_cases():
    assert make_alignment([], [], 3).tokens == (B, B, B)
    a = make_alignment([1, 2], [0, 0], 1)
    assert a.tokens == (1, 2, B)
    assert timestamps(a).tolist() == [0, 0, 0]


@pytest.mark.parametrize("labels,times,T", [
    ([1, 2], [1, 0], 3),
    ([1], [3], 3),
    ([1], [-1], 3),
    ([1, 2], [0], 3),
])
def test_make_alignment_rejects_bad_times(labels, times, T):
    with pytest.raises(InvalidInput):
        make_alignment(labels, times, T)


@st.composite
def labelled_times(draw):
    T = draw(st.integers(1, 12))
    n = draw(st.integers(0, 10))
    labels = draw(st.lists(st.integers(1, 5), min_size=n, max_size=n))
    times = sorted(draw(st.lists(st.integers(0, T - 1), min_size=n, max_size=n)))
    return labels, times, T


@given(labelled_times())
def test_make_alignment_roundtrip(case):
    labels, times, T = case
    a = make_alignment(labels, times, T)
    assert validate_rnnt(a)
    assert len(a) == T + len(labels)
    nonblank = np.asarray(a.tokens) != B
    assert timestamps(a)[nonblank].tolist() == times
    assert [t for t in a.tokens if t != B] == labels


@given(st.lists(st.integers(0, 4), min_size=1, max_size=30), st.integers(1, 10))
def test_timestamps_unit_steps(tokens, T):
    ts = timestamps(Alignment(tuple(tokens), T))
    assert ts[0] == 0
    assert set(np.diff(ts).tolist()) <= {0, 1}
    assert ts.max() <= T - 1


@settings(max_examples=200)
@given(st.lists(st.integers(0, 4), max_size=20), st.data())
def test_collapse_ignores_extra_blanks(tokens, data):
    # Blanks may be added anywhere except inside a run of a repeated label,
    # where they would split the run into two emissions.
    out = []
    for i, t in enumerate(tokens):
        out.append(t)
        nxt = tokens[i + 1] if i + 1 < len(tokens) else None
        if nxt != t or t == B:
            out.extend([B] * data.draw(st.integers(0, 2)))
    assert collapse(out) == collapse(tokens)


def test_collapse_idempotent_without_repeats():
    y = collapse((1, 1, B, 2, 2, B, 3, 3, 1))
    assert y == [1, 2, 3, 1]
    assert collapse(y) == y


def test_text_roundtrip():
    text = format_alignment(HELLO_WORLD, 1024)
    assert text.splitlines()[0] == "T=5 V=1024"
    [(a, V)] = parse_alignments(text)
    assert a == HELLO_WORLD and V == 1024


def test_text_rejects_out_of_vocab():
    with pytest.raises(InvalidInput):
        parse_alignments("T=2 V=3\n0 4 0")
