"""Oracle and invariant checks shared by ``alignrefine selftest`` and the test suite.

Every check returns a :class:`CheckResult`; none of them raise on failure.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .align import Alignment, make_alignment, timestamps
from .ctc import ctc_beam_search, ctc_bruteforce, ctc_logprob, ctc_posterior_table
from .masks import DelayConfig, model_delay, receptive_bound, total_delay
from .model import AlignRefineDecoder, DecoderConfig, init_params, make_batch, mle_loss, refine_batch, refine_step
from .synth import Utterance


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, ok, detail, time.perf_counter() - t0)


def random_log_probs(rng: np.random.Generator, N: int, V: int, scale: float = 1.0) -> np.ndarray:
    x = scale * rng.normal(size=(N, V + 1))
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


# -- closed-form quantities ---------------------------------------------------

# (C, audio self-attention, per-step seconds) for L=6 and 60 ms frames
DELAY_TABLE = [(1, False, 0.36), (2, False, 0.72), (5, False, 1.80),
               (1, True, 0.42), (2, True, 0.84), (5, True, 2.10)]
# (C, steps, total seconds) with audio self-attention
TOTAL_DELAYS = [(2, 2, 1.68), (5, 2, 4.20), (0, 2, 0.0), (2, 1, 0.84)]


def check_delays(tol: float = 1e-9) -> CheckResult:
    def run():
        worst = 0.0
        for C, asa, want in DELAY_TABLE:
            worst = max(worst, abs(model_delay(DelayConfig(6, C, 0.06, asa)) - want))
        for C, S, want in TOTAL_DELAYS:
            worst = max(worst, abs(total_delay(DelayConfig(6, C, 0.06, True, S)) - want))
        n = len(DELAY_TABLE) + len(TOTAL_DELAYS)
        return worst <= tol, f"{n} delay values, max abs error {worst:.1e}"
    return _timed("delay arithmetic", run)


def check_timestamp_example() -> CheckResult:
    def run():
        got = timestamps(Alignment((0, 1, 0, 0, 0, 2, 3, 0), 5)).tolist()
        return got == [0, 1, 1, 2, 3, 4, 4, 4], f"frame indices {got}"
    return _timed("timestamp example", run)


# -- CTC oracles -------------------------------------------------------------

def check_ctc_oracle(instances: int = 200, seed: int = 0, tol: float = 1e-6) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(instances):
            N, V = int(rng.integers(1, 7)), int(rng.integers(1, 4))
            lp = random_log_probs(rng, N, V)
            y = rng.integers(1, V + 1, size=int(rng.integers(0, 4))).tolist()
            a, b = ctc_logprob(lp, y), ctc_bruteforce(lp, y)
            if np.isinf(a) or np.isinf(b):
                if a != b:
                    return False, f"feasibility mismatch on N={N}, y={y}: {a} vs {b}"
                continue
            worst = max(worst, abs(a - b))
        return worst <= tol, f"{instances} instances, max |DP - enumeration| {worst:.1e}"
    return _timed("CTC forward vs enumeration", run)


def check_posterior_completeness(seed: int = 1, tol: float = 1e-6) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        cases = 0
        for N in range(1, 5):
            for V in range(1, 4):
                lp = random_log_probs(rng, N, V)
                seqs = (y for n in range(N + 1) for y in itertools.product(range(1, V + 1), repeat=n))
                total = sum(math.exp(ctc_logprob(lp, y)) for y in seqs)
                worst = max(worst, abs(total - 1.0))
                cases += 1
        return worst <= tol, f"{cases} instances with N<=4, max |sum P(y) - 1| {worst:.1e}"
    return _timed("CTC posterior completeness", run)


def check_beam_oracle(instances: int = 50, seed: int = 2) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        for i in range(instances):
            N, V = int(rng.integers(1, 4)), int(rng.integers(1, 3))
            lp = random_log_probs(rng, N, V, scale=2.0)
            table = ctc_posterior_table(lp)
            exact = sorted(table.items(), key=lambda kv: (-kv[1], kv[0]))
            K = sum(V ** n for n in range(N + 1))  # every label sequence of length <= N
            hyps = ctc_beam_search(lp, K)
            if [h.labels for h in hyps] != [y for y, _ in exact]:
                return False, f"ranking differs on instance {i}"
            if not np.allclose([math.exp(h.score) for h in hyps], [p for _, p in exact], rtol=1e-9, atol=0):
                return False, f"scores differ on instance {i}"
        return True, f"{instances} instances (N<=3, |V|<=2) ranked exactly"
    return _timed("beam search vs enumeration", run)


# -- decoder invariants ------------------------------------------------------

def tiny_config(**kw) -> DecoderConfig:
    base = dict(vocab_size=3, audio_dim=4, model_dim=8, heads=2, layers=2, max_len=64)
    return DecoderConfig(**{**base, **kw})


def check_causality(configs: int = 50, seed: int = 3, tol: float = 1e-12) -> CheckResult:
    """Frames past ``t + D*C`` never reach positions timestamped ``<= t``; frame ``t + D*C`` does."""
    def run():
        rng = np.random.default_rng(seed)
        worst_leak, weakest = 0.0, math.inf
        for _ in range(configs):
            L, C = int(rng.choice([2, 3, 4])), int(rng.choice([0, 1, 2]))
            asa = bool(rng.integers(2))
            cfg = tiny_config(layers=L, right_context=C, audio_self_attention=asa)
            model = init_params(cfg, int(rng.integers(1 << 30)), torch.float64)
            D = receptive_bound(cfg.delay_config())
            t = int(rng.integers(1, 6))
            T = t + D + 4
            # emissions all at or before t keep a blank run ahead of frame t, so the bound is reachable
            n_lab = int(rng.integers(1, 4))
            labels = rng.integers(1, 4, size=n_lab).tolist()
            a = make_alignment(labels, sorted(rng.integers(0, t + 1, size=n_lab).tolist()), T)
            f = rng.normal(size=(T, cfg.audio_dim))
            sel = timestamps(a) <= t
            base, _ = refine_step(a, f, model)
            far = f.copy()
            far[t + D + 1:] += rng.normal(size=far[t + D + 1:].shape)
            leak = np.abs(refine_step(a, far, model)[0] - base)[sel].max()
            edge = f.copy()
            edge[t + D] += rng.normal(size=cfg.audio_dim)
            reach = np.abs(refine_step(a, edge, model)[0] - base)[sel].max()
            # arbitrary (non RNN-T) alignments must not leak either
            b = Alignment(tuple(rng.integers(0, 4, size=T + 3).tolist()), T)
            sel_b = timestamps(b) <= t
            leak_b = np.abs(refine_step(b, far, model)[0] - refine_step(b, f, model)[0])[sel_b].max()
            worst_leak = max(worst_leak, leak, leak_b)
            weakest = min(weakest, reach)
        ok = worst_leak <= tol and weakest > tol
        return ok, f"{configs} configs, max leak {worst_leak:.1e}, min change at bound {weakest:.1e}"
    return _timed("streaming causality", run)


def reference_forward(model: AlignRefineDecoder, tokens: Sequence[int], features: np.ndarray) -> torch.Tensor:
    """Mask-free forward pass over the same weights (full attention everywhere)."""
    def attn(m, q_in, kv_in):
        h, d = m.heads, q_in.shape[-1]
        q = F.linear(q_in, m.q.weight, m.q.bias).view(-1, h, d // h).transpose(0, 1)
        k = F.linear(kv_in, m.k.weight, m.k.bias).view(-1, h, d // h).transpose(0, 1)
        v = F.linear(kv_in, m.v.weight, m.v.bias).view(-1, h, d // h).transpose(0, 1)
        w = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(d // h), dim=-1)
        return F.linear((w @ v).transpose(0, 1).reshape(-1, d), m.out.weight, m.out.bias)

    def ffn(m, x):
        return F.linear(F.gelu(F.linear(x, m.up.weight, m.up.bias)), m.down.weight, m.down.bias)

    def norm(m, x):
        return F.layer_norm(x, x.shape[-1:], m.weight, m.bias, m.eps)

    dtype = model.output.weight.dtype
    text = model.token_embedding.weight[torch.as_tensor(list(tokens))] \
        + model.position_embedding.weight[: len(tokens)]
    audio = F.linear(torch.as_tensor(features, dtype=dtype), model.audio_in.weight, model.audio_in.bias)
    for layer in model.layers:
        if layer.audio_sa:
            a = norm(layer.audio_norm1, audio)
            audio = audio + attn(layer.audio_attn, a, a)
            audio = audio + ffn(layer.audio_ffn, norm(layer.audio_norm2, audio))
        x = norm(layer.text_norm1, text)
        text = text + attn(layer.text_sa, x, x)
        text = text + attn(layer.cross, norm(layer.text_norm2, text), norm(layer.audio_kv_norm, audio))
        text = text + ffn(layer.text_ffn, norm(layer.text_norm3, text))
    return torch.log_softmax(F.linear(norm(model.final_norm, text), model.output.weight, model.output.bias), -1)


def check_offline_equivalence(instances: int = 10, seed: int = 4, tol: float = 1e-10) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for i in range(instances):
            T = int(rng.integers(3, 15))
            cfg = tiny_config(layers=int(rng.integers(1, 4)), right_context=64, cross_left=None,
                              audio_self_attention=bool(i % 2))
            model = init_params(cfg, i, torch.float64)
            a = Alignment(tuple(rng.integers(0, 4, size=T + int(rng.integers(0, 4))).tolist()), T)
            f = rng.normal(size=(T, cfg.audio_dim))
            lp, _ = refine_step(a, f, model)
            with torch.no_grad():
                ref = reference_forward(model, a.tokens, f).numpy()
            worst = max(worst, float(np.abs(lp - ref).max()))
        return worst <= tol, f"{instances} instances, max |masked - reference| {worst:.1e}"
    return _timed("offline equivalence", run)


# -- gradients ---------------------------------------------------------------

def finite_difference_errors(loss_fn: Callable[[], torch.Tensor], model: torch.nn.Module,
                             h: float = 1e-5, max_coords: Optional[int] = None,
                             seed: int = 0, zero_tol: float = 1e-7) -> dict[str, float]:
    """Relative error ``|g_ad - g_fd| / max(|g_ad|, |g_fd|)`` per parameter tensor.

    ``loss_fn`` must treat every discrete decision as fixed so the loss is a
    smooth function of the weights.  ``max_coords`` subsamples coordinates.
    A tensor whose gradient norms are both below ``zero_tol`` counts as
    exactly zero (attention key biases cancel inside the softmax); its
    entry is the absolute norm of the difference instead.
    """
    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in model.named_parameters():
        ad = p.grad.detach().clone().reshape(-1)
        flat = p.data.view(-1)
        coords = np.arange(flat.numel())
        if max_coords is not None and len(coords) > max_coords:
            coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
        fd = torch.zeros(len(coords), dtype=torch.float64)
        with torch.no_grad():
            for j, c in enumerate(coords):
                orig = flat[c].item()
                flat[c] = orig + h
                up = loss_fn().item()
                flat[c] = orig - h
                down = loss_fn().item()
                flat[c] = orig
                fd[j] = (up - down) / (2 * h)
        ad = ad[torch.as_tensor(coords)].to(torch.float64)
        scale = max(float(ad.norm()), float(fd.norm()))
        diff = float((ad - fd).norm())
        errors[name] = diff / scale if scale > zero_tol else diff
    return errors


def gradient_fixture(seed: int = 5, n_utts: int = 2):
    """Tiny float64 decoder plus utterances with alignments of at most 6 positions."""
    from .synth import corrupt, CorruptionConfig

    rng = np.random.default_rng(seed)
    cfg = tiny_config(layers=2, right_context=1, max_len=8)
    model = init_params(cfg, seed, torch.float64)
    utts = []
    for i in range(n_utts):
        T = 4
        labels = rng.choice([1, 2, 3], size=2, replace=False).tolist()
        gold = make_alignment(labels, sorted(rng.integers(0, T, size=2).tolist()), T)
        first = corrupt(gold, CorruptionConfig(0.5, 0.0, 0.0), 3, rng)
        utts.append(Utterance(f"g{i}", rng.normal(size=(T, cfg.audio_dim)), tuple(labels), gold, first))
    return model, utts


def mle_loss_fn(model: AlignRefineDecoder, utts: Sequence[Utterance], steps: int = 3):
    """Step-averaged CTC loss with the inter-step greedy alignments frozen."""
    from .train import corpus_batch

    with torch.no_grad():
        inputs, _ = refine_batch(model, corpus_batch(utts, model), steps)
    refs = [u.reference for u in utts]

    def loss():
        lps = [model(b) for b in inputs]
        return mle_loss(lps, inputs[0].lengths, refs)[0]
    return loss


def composite_loss_fn(model: AlignRefineDecoder, utts: Sequence[Utterance], mcfg=None):
    """Composite MWER objective with the beam-search hypotheses frozen."""
    from .train import MwerConfig, mwer_objective

    mcfg = mcfg or MwerConfig()
    with torch.no_grad():
        hyps = mwer_objective(model, utts, mcfg)[3]

    def loss():
        return mwer_objective(model, utts, mcfg, hyps=hyps)[0]
    return loss


def check_gradients(tol: float = 1e-4, max_coords: Optional[int] = None) -> CheckResult:
    def run():
        model, utts = gradient_fixture()
        worst_name, worst = "", 0.0
        for label, make in (("mle", mle_loss_fn), ("composite", composite_loss_fn)):
            for name, err in finite_difference_errors(make(model, utts), model, max_coords=max_coords).items():
                if err > worst:
                    worst_name, worst = f"{label}:{name}", err
        return worst <= tol, f"max relative error {worst:.1e} ({worst_name})"
    return _timed("finite-difference gradients", run)


def selftest(quick: bool = True) -> list[CheckResult]:
    return [
        check_delays(),
        check_timestamp_example(),
        check_ctc_oracle(instances=50 if quick else 200),
        check_posterior_completeness(),
        check_beam_oracle(instances=20 if quick else 50),
        check_causality(configs=10 if quick else 50),
        check_offline_equivalence(),
        check_gradients(max_coords=8 if quick else None),
    ]
