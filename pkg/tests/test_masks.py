import numpy as np
import pytest
from hypothesis import given, strategies as st

from alignrefine.align import Alignment, make_alignment, timestamps
from alignrefine.masks import (UNBOUNDED, DelayConfig, MaskSpec, band_self_mask, model_delay,
                               parse_mask, receptive_bound, render_mask, time_aligned_cross_mask,
                               total_delay)


def test_causal_band_is_lower_triangular():
    m = band_self_mask(3, MaskSpec(UNBOUNDED, 0))
    assert (m == np.tril(np.ones((3, 3), bool))).all()


def test_tridiagonal_band():
    m = band_self_mask(4, MaskSpec(1, 1))
    expected = np.abs(np.subtract.outer(np.arange(4), np.arange(4))) <= 1
    assert (m == expected).all()


def test_band_row_with_right_context():
    m = band_self_mask(8, MaskSpec(UNBOUNDED, 2))
    assert np.flatnonzero(m[4]).tolist() == list(range(7))


def test_cross_mask_figure_row():
    # 8 alignment frames over 7 audio frames; alignment frame 4 sits at audio frame 3
    a = make_alignment([1], [2], 7)
    times = timestamps(a)
    assert len(a) == 8 and times[4] == 3
    m = time_aligned_cross_mask(times, 7, MaskSpec(2, 1))
    assert m.shape == (8, 7)
    assert np.flatnonzero(m[4]).tolist() == [1, 2, 3, 4]


def test_cross_mask_single_frame():
    for spec in (MaskSpec(UNBOUNDED, 0), MaskSpec(3, 5)):
        assert time_aligned_cross_mask([0], 1, spec).tolist() == [[True]]


def test_cross_mask_shared_time():
    m = time_aligned_cross_mask([0, 0, 1], 2, MaskSpec(0, 0))
    assert m.tolist() == [[True, False], [True, False], [False, True]]


def test_cross_mask_rejects_out_of_range():
    with pytest.raises(ValueError):
        time_aligned_cross_mask([0, 2], 2, MaskSpec(0, 0))


specs = st.builds(MaskSpec, st.one_of(st.none(), st.integers(0, 6)), st.integers(0, 6))


@given(st.integers(1, 20), specs)
def test_rows_nonempty(n, spec):
    assert band_self_mask(n, spec).any(axis=1).all()


@given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.integers(1, 8), specs)
def test_cross_rows_nonempty(tokens, T, spec):
    ts = timestamps(Alignment(tuple(tokens), T))
    assert time_aligned_cross_mask(ts, T, spec).any(axis=1).all()


@given(st.integers(1, 15), specs, st.integers(0, 3), st.integers(0, 3))
def test_monotone_in_context(n, spec, dl, dr):
    wider = MaskSpec(None if spec.left is None else spec.left + dl, spec.right + dr)
    small, big = band_self_mask(n, spec), band_self_mask(n, wider)
    assert not (small & ~big).any()


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(0, 9)), max_size=8), st.integers(0, 5))
def test_position_band_within_frame_budget(emissions, C):
    # C positions ahead never reach more than C frames ahead in RNN-T topology
    emissions = sorted(emissions, key=lambda e: e[1])
    a = make_alignment([e[0] for e in emissions], [e[1] for e in emissions], 10)
    ts = timestamps(a)
    m = band_self_mask(len(a), MaskSpec(UNBOUNDED, C))
    for i, row in enumerate(m):
        assert ts[row].max() <= ts[i] + C


def test_offline_is_just_large_right_context():
    m = band_self_mask(6, MaskSpec(UNBOUNDED, 6))
    assert m.all()


# delays in seconds for L=6, 60 ms frames
TABLE_DELAYS = [
    (1, False, 0.36), (2, False, 0.72), (5, False, 1.80),
    (1, True, 0.42), (2, True, 0.84), (5, True, 2.10),
]


@pytest.mark.parametrize("C,audio_sa,expected", TABLE_DELAYS)
def test_model_delay_table(C, audio_sa, expected):
    assert model_delay(DelayConfig(6, C, 0.06, audio_sa)) == pytest.approx(expected, abs=1e-9)


def test_zero_right_context_has_no_delay():
    for L in (1, 3, 6):
        assert model_delay(DelayConfig(L, 0, 0.06, True)) == 0.0


def test_total_delay_two_steps():
    assert total_delay(DelayConfig(6, 5, 0.06, True, steps=2)) == pytest.approx(4.20, abs=1e-9)


@pytest.mark.parametrize("cfg,bound", [
    (DelayConfig(6, 2, 0.06, False), 12),
    (DelayConfig(3, 1, 0.06, True), 4),
    (DelayConfig(3, 0, 0.06, True), 0),
    (DelayConfig(3, 2, 0.06, True, bottom_audio_sa=False), 6),
])
def test_receptive_bound(cfg, bound):
    assert receptive_bound(cfg) == bound


def test_ascii_roundtrip():
    m = time_aligned_cross_mask([0, 1, 1, 2, 3, 3, 3, 3], 7, MaskSpec(2, 1))
    text = render_mask(m)
    assert text.splitlines()[4] == ".####.."
    assert (parse_mask(text) == m).all()
