import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from alignrefine.mwer import (GAMMA, composite_loss, hyp_logprob, merge_duplicates, mwer_loss,
                              word_edit_distance)


def brute_edit_distance(h, r):
    # exhaustive recursion, independent of the DP table
    if not h:
        return len(r)
    if not r:
        return len(h)
    return min(brute_edit_distance(h[1:], r) + 1, brute_edit_distance(h, r[1:]) + 1,
               brute_edit_distance(h[1:], r[1:]) + (h[0] != r[0]))


@pytest.mark.parametrize("hyp,ref,d", [
    ("a b c", "a b c", 0),
    ("a x c", "a b c", 1),
    ("a b", "b a", 2),
    ("", "a b", 2),
    ("a b c d", "", 4),
])
def test_word_edit_distance(hyp, ref, d):
    assert word_edit_distance(hyp, ref) == d


@given(st.lists(st.integers(0, 3), max_size=6), st.lists(st.integers(0, 3), max_size=6))
def test_edit_distance_matches_recursion(h, r):
    assert word_edit_distance(h, r) == brute_edit_distance(tuple(h), tuple(r))


def test_hyp_logprob():
    assert hyp_logprob([-1.5]) == -1.5
    assert hyp_logprob([-0.7] * 3) == pytest.approx(-0.7)
    assert hyp_logprob([-1.0, -3.0]) == -2.0
    assert float(hyp_logprob(torch.tensor([[-1.0, -3.0]]))[0]) == -2.0


def test_mwer_constant_errors():
    lp = torch.tensor([-0.3, -2.0, -5.0])
    assert float(mwer_loss(lp, [3, 3, 3])) == pytest.approx(3.0)


def test_mwer_uniform_two():
    assert float(mwer_loss(torch.tensor([-1.0, -1.0]), [0, 2])) == pytest.approx(1.0)


def test_mwer_weighted_three():
    lp = torch.log(torch.tensor([0.5, 0.25, 0.25], dtype=torch.float64))
    assert float(mwer_loss(lp, [1, 0, 2])) == pytest.approx(1.0, abs=1e-12)


def test_mwer_ignores_padding():
    lp = torch.tensor([[-1.0, -1.0, -np.inf]])
    assert float(mwer_loss(lp, [[0, 2, 100]])[0]) == pytest.approx(1.0)


def test_composite():
    assert composite_loss(1.0, 2.0) == pytest.approx(1.01)
    assert composite_loss(0.7, 5.0, gamma=0.0) == 0.7
    assert GAMMA == 0.005


@given(st.lists(st.floats(-20, 0), min_size=1, max_size=6), st.floats(-50, 50), st.data())
def test_shift_invariance_and_bounds(logps, shift, data):
    errs = data.draw(st.lists(st.integers(0, 5), min_size=len(logps), max_size=len(logps)))
    lp = torch.tensor(logps, dtype=torch.float64)
    base = float(mwer_loss(lp, errs))
    assert float(mwer_loss(lp + shift, errs)) == pytest.approx(base, abs=1e-9)
    assert min(errs) - 1e-12 <= base <= max(errs) + 1e-12


def test_limit_of_confident_correct_hypothesis():
    errs = [0, 2, 1]
    values = [float(mwer_loss(torch.tensor([m, 0.0, 0.0], dtype=torch.float64), errs))
              for m in (0.0, 2.0, 5.0, 10.0, 40.0)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-15


def test_single_hypothesis_has_no_gradient():
    lp = torch.tensor([-2.0], dtype=torch.float64, requires_grad=True)
    mwer_loss(lp, [3]).backward()
    assert float(lp.grad[0]) == 0.0


def test_gradient_wrt_logps_finite_differences():
    rng = np.random.default_rng(0)
    base = rng.normal(size=4)
    errs = [0, 1, 3, 2]
    lp = torch.tensor(base, requires_grad=True)
    mwer_loss(lp, errs).backward()
    h = 1e-6

    def f(x):
        p = np.exp(x - x.max())
        p /= p.sum()
        return float(p @ errs)

    fd = np.array([(f(base + h * e) - f(base - h * e)) / (2 * h) for e in np.eye(4)])
    assert np.allclose(lp.grad.numpy(), fd, atol=1e-8)


def test_merge_duplicates():
    labels, scores = merge_duplicates([(1,), (2,), (1,)], [np.log(0.2), np.log(0.3), np.log(0.1)])
    assert labels == [(1,), (2,)]
    assert np.exp(scores) == pytest.approx([0.3, 0.3])
