"""CTC marginal likelihood, greedy alignment, prefix beam search and an
enumeration oracle.

Frame log-probabilities are ``N x (V + 1)`` matrices with the blank at
column 0.  Everything is accumulated in float64 log space.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .align import BLANK, Alignment, collapse

# Finite stand-in for log(0): keeps logsumexp gradients free of NaN.
_NEG = -1e30


@dataclass
class Hypothesis:
    labels: tuple[int, ...]
    score: float
    per_step_logp: list[float] = field(default_factory=list)


def ctc_log_likelihood(log_probs: torch.Tensor, input_lengths: torch.Tensor,
                       targets: torch.Tensor, target_lengths: torch.Tensor,
                       blank: int = BLANK, impl: str = "native") -> torch.Tensor:
    """Batched CTC log-likelihood, differentiable in ``log_probs``.

    Args:
        log_probs: ``(B, N, V+1)`` log-normalized frame scores.
        input_lengths: ``(B,)`` valid frames per row.
        targets: ``(B, U)`` label ids, padded arbitrarily past ``target_lengths``.
        target_lengths: ``(B,)``.
        impl: ``"native"`` uses torch's fused CTC kernel; ``"dp"`` runs the
            forward recursion below (slower, kept as the reference).

    Returns:
        ``(B,)`` float64 log-likelihoods; ``-inf`` where the target cannot be
        aligned within its input length.
    """
    if impl == "dp":
        return _forward_dp(log_probs, input_lengths, targets, target_lengths, blank)
    if impl != "native":
        raise ValueError(f"unknown CTC implementation {impl!r}")
    lp = log_probs.to(torch.float64)
    tgt = targets.long()
    if tgt.shape[1] == 0:
        tgt = torch.zeros((tgt.shape[0], 1), dtype=torch.long, device=tgt.device)
    # zero_infinity keeps gradients of infeasible rows at exactly zero; they are
    # reported as -inf from the length test instead
    nll = torch.nn.functional.ctc_loss(lp.transpose(0, 1), tgt, input_lengths, target_lengths,
                                       blank=blank, reduction="none", zero_infinity=True)
    U = tgt.shape[1]
    pos = torch.arange(U, device=tgt.device)[None, :]
    repeats = ((tgt[:, 1:] == tgt[:, :-1]) & (pos[:, 1:] < target_lengths[:, None])).sum(1) \
        if U > 1 else torch.zeros_like(target_lengths)
    feasible = target_lengths + repeats <= input_lengths
    return torch.where(feasible, -nll, torch.full_like(nll, -np.inf))


def _forward_dp(log_probs, input_lengths, targets, target_lengths, blank):
    lp = log_probs.to(torch.float64)
    B, N, _ = lp.shape
    U = targets.shape[1]
    S = 2 * U + 1
    device = lp.device
    ext = torch.full((B, S), blank, dtype=torch.long, device=device)
    if U:
        ext[:, 1::2] = targets.long()
    # Skip transition s-2 -> s is allowed into a label differing from the previous label.
    skip = torch.zeros((B, S), dtype=torch.bool, device=device)
    if U > 1:
        skip[:, 3::2] = ext[:, 3::2] != ext[:, 1:-2:2]
    s_valid = torch.arange(S, device=device)[None, :] < (2 * target_lengths[:, None] + 1)
    emit = torch.gather(lp, 2, ext[:, None, :].expand(B, N, S))  # (B, N, S)

    neg = torch.full((B, 1), _NEG, dtype=torch.float64, device=device)
    init = torch.full((B, S), _NEG, dtype=torch.float64, device=device)
    init[:, 0] = 0.0
    if U:
        init[:, 1] = torch.where(target_lengths > 0, 0.0, _NEG)
    alpha = init + emit[:, 0]
    alpha = torch.where(s_valid, alpha, torch.full_like(alpha, _NEG))
    for t in range(1, N):
        prev1 = torch.cat([neg, alpha[:, :-1]], dim=1)
        prev2 = torch.cat([neg, neg, alpha[:, :-2]], dim=1)[:, :S]
        prev2 = torch.where(skip, prev2, torch.full_like(prev2, _NEG))
        nxt = torch.logsumexp(torch.stack([alpha, prev1, prev2]), dim=0) + emit[:, t]
        nxt = torch.where(s_valid, nxt, torch.full_like(nxt, _NEG))
        alpha = torch.where((t < input_lengths)[:, None], nxt, alpha)

    last = (2 * target_lengths).long()
    end_blank = alpha.gather(1, last[:, None])[:, 0]
    end_label = alpha.gather(1, (last - 1).clamp(min=0)[:, None])[:, 0]
    end_label = torch.where(target_lengths > 0, end_label, torch.full_like(end_label, _NEG))
    ll = torch.logaddexp(end_blank, end_label)
    return torch.where(ll < _NEG / 2, torch.full_like(ll, -np.inf), ll)


def ctc_logprob(log_probs, labels: Sequence[int], impl: str = "dp") -> float:
    """``log P_ctc(labels | frames)`` for a single ``N x (V+1)`` matrix."""
    lp = torch.as_tensor(np.asarray(log_probs, dtype=np.float64))[None]
    y = torch.as_tensor(list(labels) or [0], dtype=torch.long)[None]
    ll = ctc_log_likelihood(lp, torch.tensor([lp.shape[1]]), y, torch.tensor([len(labels)]), impl=impl)
    return float(ll[0])


def ctc_greedy(log_probs, audio_len: int | None = None) -> Alignment:
    """Per-frame argmax; ties go to the smallest id, so blank wins ties.

    ``audio_len`` defaults to the number of frames when not supplied.
    """
    lp = np.asarray(log_probs)
    tokens = tuple(int(i) for i in np.argmax(lp, axis=-1))
    return Alignment(tokens, audio_len if audio_len is not None else len(tokens))


def ctc_beam_search(log_probs, K: int) -> list[Hypothesis]:
    """Prefix beam search over collapsed label sequences.

    Each prefix carries the mass of alignments ending in blank and ending in
    its last label; beams are pruned to ``K`` by their combined mass.  Returns
    at most ``K`` hypotheses, best first.
    """
    if K < 1:
        raise ValueError("beam size must be >= 1")
    lp = np.asarray(log_probs, dtype=np.float64)
    num_tokens = lp.shape[1]
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, -np.inf)}
    for frame in lp:
        nxt: dict[tuple[int, ...], list[float]] = {}

        def add(prefix, pb=-np.inf, pnb=-np.inf):
            cur = nxt.setdefault(prefix, [-np.inf, -np.inf])
            cur[0] = np.logaddexp(cur[0], pb)
            cur[1] = np.logaddexp(cur[1], pnb)

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            add(prefix, pb=total + frame[BLANK])
            last = prefix[-1] if prefix else None
            if last is not None:
                add(prefix, pnb=pnb + frame[last])
            for c in range(num_tokens):
                if c == BLANK:
                    continue
                # A repeat directly after its own label folds into the prefix.
                src = pb if c == last else total
                add(prefix + (c,), pnb=src + frame[c])
        ranked = sorted(((p, v) for p, v in nxt.items() if np.logaddexp(*v) > -np.inf),
                        key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = {p: (v[0], v[1]) for p, v in ranked[:K]}
    return [Hypothesis(p, float(np.logaddexp(*v))) for p, v in beams.items()]


# -- enumeration oracle ------------------------------------------------------

_MAX_ORACLE_FRAMES = 8
_MAX_ORACLE_LABELS = 4


def _check_oracle_size(lp: np.ndarray) -> None:
    N, V1 = lp.shape
    if N > _MAX_ORACLE_FRAMES or V1 - 1 > _MAX_ORACLE_LABELS:
        raise ValueError(f"enumeration oracle refuses N={N}, |V|={V1 - 1}")


def ctc_posterior_table(log_probs) -> dict[tuple[int, ...], float]:
    """Probability of every label sequence, by summing all (V+1)^N paths."""
    lp = np.asarray(log_probs, dtype=np.float64)
    _check_oracle_size(lp)
    N, V1 = lp.shape
    table: dict[tuple[int, ...], float] = {}
    for path in itertools.product(range(V1), repeat=N):
        y = tuple(collapse(path))
        table[y] = table.get(y, 0.0) + float(np.exp(lp[np.arange(N), path].sum()))
    return table


def ctc_bruteforce(log_probs, labels: Sequence[int]) -> float:
    """Explicit path sum of ``log P_ctc(labels)``; tiny instances only."""
    p = ctc_posterior_table(log_probs).get(tuple(labels), 0.0)
    return float(np.log(p)) if p > 0 else -np.inf
