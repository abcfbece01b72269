"""Minimum word error rate objective over an N-best list."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

GAMMA = 0.005


def _words(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def word_edit_distance(hyp, ref) -> int:
    """Unit-cost Levenshtein distance over words.

    Strings are split on whitespace; any other sequence is taken as a list of
    words already (each synthetic label id is one word).
    """
    h, r = _words(hyp), _words(ref)
    prev = list(range(len(r) + 1))
    for i, hw in enumerate(h, 1):
        cur = [i] + [0] * len(r)
        for j, rw in enumerate(r, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (hw != rw))
        prev = cur
    return prev[-1]


def hyp_logprob(step_logps):
    """Mean of a hypothesis' per-step CTC log-probabilities (last axis)."""
    if isinstance(step_logps, torch.Tensor):
        return step_logps.mean(dim=-1)
    return float(np.mean(step_logps))


def mwer_loss(hyp_logps, errors) -> torch.Tensor:
    """Expected word errors under the renormalized top-K distribution.

    Args:
        hyp_logps: ``(K,)`` or ``(B, K)`` hypothesis log-probabilities.  Entries
            equal to ``-inf`` mark padding and get zero weight.
        errors: word errors of each hypothesis against the reference, same shape.
    """
    lp = torch.as_tensor(hyp_logps)
    err = torch.as_tensor(errors, dtype=lp.dtype)
    weights = torch.softmax(lp, dim=-1)
    return (weights * err).sum(dim=-1)


def composite_loss(mwer, mle, gamma: float = GAMMA):
    return mwer + gamma * mle


def merge_duplicates(labels: Sequence[tuple], logps: Sequence[float]) -> tuple[list[tuple], list[float]]:
    """Merge repeated label sequences, log-summing their scores."""
    merged: dict[tuple, float] = {}
    for y, s in zip(labels, logps):
        merged[y] = np.logaddexp(merged[y], s) if y in merged else s
    return list(merged), list(merged.values())
