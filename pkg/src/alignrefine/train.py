"""Training loops (MLE and MWER finetuning) and per-step evaluation."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .align import Alignment, collapse
from .ctc import ctc_beam_search, ctc_log_likelihood
from .model import (AlignRefineDecoder, Batch, init_params, load_checkpoint, make_batch,
                    mle_loss, refine_batch, save_checkpoint, step_ctc_logprobs)
from .mwer import GAMMA, composite_loss, hyp_logprob, merge_duplicates, mwer_loss, word_edit_distance
from .synth import Utterance, corpus_wer

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    pass


@dataclass
class MwerConfig:
    beam: int = 4
    steps: int = 1
    gamma: float = GAMMA

    def __post_init__(self):
        if self.beam < 1 or self.steps < 1 or self.gamma < 0:
            raise ValueError(f"invalid MWER config: {self}")


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 200
    max_steps: int = 2000
    steps: int = 3  # refinement steps in the MLE objective
    clip: float = 1.0
    eval_every: int = 500
    seed: int = 0
    mwer: MwerConfig = field(default_factory=MwerConfig)

    def __post_init__(self):
        if self.max_steps < 1 or self.batch_size < 1 or self.lr <= 0 or self.steps < 1:
            raise ValueError(f"invalid training config: {self}")


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to ``cfg.lr`` then inverse square-root decay (``step`` is 1-based)."""
    if cfg.warmup <= 0:
        return cfg.lr
    return cfg.lr * min(step / cfg.warmup, math.sqrt(cfg.warmup / step))


def batch_indices(lengths: Sequence[int], cfg: TrainConfig, step: int, bucket: int = 16) -> np.ndarray:
    """Utterance indices of optimizer step ``step`` (1-based).

    Each epoch is a seeded shuffle; windows of ``bucket`` batches are sorted
    by length to cut padding, and the batches of the epoch are shuffled
    again.  Depends only on (seed, step), so a resumed run sees the same data.
    """
    n = len(lengths)
    per_epoch = max(n // cfg.batch_size, 1)
    epoch, pos = divmod(step - 1, per_epoch)
    rng = np.random.default_rng([cfg.seed, epoch])
    perm = rng.permutation(n)
    lengths = np.asarray(lengths)
    window = cfg.batch_size * bucket
    for i in range(0, n, window):
        chunk = perm[i:i + window]
        perm[i:i + window] = chunk[np.argsort(lengths[chunk], kind="stable")]
    order = rng.permutation(per_epoch)
    b = order[pos]
    return np.sort(perm[b * cfg.batch_size:(b + 1) * cfg.batch_size])


def corpus_batch(corpus: Sequence[Utterance], model: AlignRefineDecoder,
                 use_gold: bool = False) -> Batch:
    aligns = [u.gold_alignment if use_gold else u.first_pass for u in corpus]
    return make_batch(aligns, [u.features for u in corpus], model.cfg)


class MetricsLog:
    """Append-only JSON-lines records."""

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._t0 = time.perf_counter()

    def write(self, **record) -> None:
        record["wall_time"] = round(time.perf_counter() - self._t0, 3)
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")


def _optimizer(model: AlignRefineDecoder, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.98), eps=1e-9)


def _apply(model, opt, loss, cfg: TrainConfig, step: int) -> float:
    if not torch.isfinite(loss):
        raise NumericalFailure(f"non-finite loss {float(loss)} at step {step}")
    opt.zero_grad()
    loss.backward()
    norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip)
    for g in opt.param_groups:
        g["lr"] = learning_rate(cfg, step)
    opt.step()
    return float(norm)


# -- evaluation --------------------------------------------------------------

def decode(model: AlignRefineDecoder, corpus: Sequence[Utterance], steps: int,
           batch_size: int = 64) -> list[list[list[int]]]:
    """Collapsed greedy output of every utterance after each of ``steps`` steps."""
    outs: list[list[list[int]]] = [[] for _ in range(steps)]
    model.eval()
    with torch.no_grad():
        for i in range(0, len(corpus), batch_size):
            chunk = corpus[i:i + batch_size]
            inputs, lps = refine_batch(model, corpus_batch(chunk, model), steps)
            for s, lp in enumerate(lps):
                toks = torch.argmax(lp, dim=-1).numpy()
                for b, n in enumerate(inputs[s].lengths.tolist()):
                    outs[s].append(collapse(toks[b, :n]))
    return outs


def evaluate(model: AlignRefineDecoder, corpus: Sequence[Utterance], steps: int,
             batch_size: int = 64) -> dict:
    refs = [u.reference for u in corpus]
    first = corpus_wer([collapse(u.first_pass) for u in corpus], refs)
    per_step = [corpus_wer(h, refs) for h in decode(model, corpus, steps, batch_size)] if steps else []
    return {"first_pass": first, "steps": per_step}


# -- MLE ---------------------------------------------------------------------

def train_mle(corpus: Sequence[Utterance], cfg: TrainConfig, model: AlignRefineDecoder,
              eval_corpus: Optional[Sequence[Utterance]] = None, metrics: Optional[MetricsLog] = None,
              start_step: int = 0, optimizer: Optional[torch.optim.Adam] = None,
              checkpoint_every: int = 0, checkpoint_path: Optional[str | Path] = None):
    """Minimize the step-averaged CTC loss; returns ``(model, optimizer, metrics)``."""
    metrics = metrics or MetricsLog()
    opt = optimizer or _optimizer(model, cfg)
    torch.manual_seed(cfg.seed)
    skipped = 0
    lengths = [len(u.first_pass) for u in corpus]
    for step in range(start_step + 1, cfg.max_steps + 1):
        model.train()
        chunk = [corpus[i] for i in batch_indices(lengths, cfg, step)]
        inputs, lps = refine_batch(model, corpus_batch(chunk, model), cfg.steps)
        loss, n_skip = mle_loss(lps, inputs[0].lengths, [u.reference for u in chunk])
        skipped += n_skip
        norm = _apply(model, opt, loss, cfg, step)
        record = {"phase": "mle", "step": step, "loss": round(loss.item(), 6),
                  "grad_norm": round(norm, 6), "lr": learning_rate(cfg, step), "skipped": skipped}
        if eval_corpus is not None and cfg.eval_every and step % cfg.eval_every == 0:
            record["wer"] = evaluate(model, eval_corpus, cfg.steps)
        if step % 50 == 0 or "wer" in record:
            log.info("mle step %d loss %.4f", step, loss.item())
            metrics.write(**record)
        if checkpoint_every and checkpoint_path and step % checkpoint_every == 0:
            save_training_state(checkpoint_path, model, opt, step)
    return model, opt, metrics


# -- MWER --------------------------------------------------------------------

def mwer_objective(model: AlignRefineDecoder, chunk: Sequence[Utterance], mcfg: MwerConfig,
                   hyps: Optional[list[list[tuple[int, ...]]]] = None):
    """Composite MWER objective for a batch.

    Hypotheses come from prefix beam search on the last step's output unless
    given; they are constants of the objective.  Returns
    ``(loss, expected_errors, mle, hyps)`` with batch-mean tensors.
    """
    inputs, lps = refine_batch(model, corpus_batch(chunk, model), mcfg.steps)
    lengths = inputs[0].lengths
    refs = [u.reference for u in chunk]
    if hyps is None:
        hyps = []
        final = lps[-1].detach().numpy()
        for b, n in enumerate(lengths.tolist()):
            beam = ctc_beam_search(final[b, :n], mcfg.beam)
            labels, _ = merge_duplicates([h.labels for h in beam], [h.score for h in beam])
            hyps.append(labels)
    K = max(len(h) for h in hyps)
    flat = [h[k] if k < len(h) else () for h in hyps for k in range(K)]
    valid = torch.tensor([[k < len(h) for k in range(K)] for h in hyps])
    rep_lengths = lengths.repeat_interleave(K)
    step_ll = step_ctc_logprobs([lp.repeat_interleave(K, dim=0) for lp in lps], rep_lengths, flat)
    hyp_lp = hyp_logprob(step_ll.T.reshape(len(chunk), K, -1))
    hyp_lp = torch.where(valid, hyp_lp, torch.full_like(hyp_lp, -math.inf))
    errors = torch.tensor([[word_edit_distance(h[k], r) if k < len(h) else 0 for k in range(K)]
                           for h, r in zip(hyps, refs)], dtype=torch.float64)
    expected = mwer_loss(hyp_lp, errors)
    mle, _ = mle_loss(lps, lengths, refs)
    return composite_loss(expected.mean(), mle, mcfg.gamma), expected.mean(), mle, hyps


def expected_errors(model: AlignRefineDecoder, corpus: Sequence[Utterance], mcfg: MwerConfig,
                    batch_size: int = 64) -> float:
    """Mean expected-NWE term of the MWER objective over ``corpus``."""
    total = 0.0
    model.eval()
    with torch.no_grad():
        for i in range(0, len(corpus), batch_size):
            chunk = corpus[i:i + batch_size]
            _, exp_err, _, _ = mwer_objective(model, chunk, mcfg)
            total += float(exp_err) * len(chunk)
    return total / len(corpus)


def finetune_mwer(model: AlignRefineDecoder, corpus: Sequence[Utterance], cfg: TrainConfig,
                  eval_corpus: Optional[Sequence[Utterance]] = None,
                  monitor: Optional[Sequence[Utterance]] = None,
                  metrics: Optional[MetricsLog] = None):
    """Finetune all decoder weights on MWER + gamma * MLE.

    ``cfg.max_steps`` counts finetuning updates; the learning rate is held at
    ``cfg.lr``.  ``monitor`` (a fixed slice of training data) tracks the
    expected-NWE term before and after.
    """
    metrics = metrics or MetricsLog()
    mcfg = cfg.mwer
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.98), eps=1e-9)
    torch.manual_seed(cfg.seed)
    flat = TrainConfig(**{**cfg.__dict__, "warmup": 0})
    lengths = [len(u.first_pass) for u in corpus]
    if monitor is not None:
        metrics.write(phase="mwer", step=0, expected_nwe=round(expected_errors(model, monitor, mcfg), 6))
    for step in range(1, cfg.max_steps + 1):
        model.train()
        chunk = [corpus[i] for i in batch_indices(lengths, cfg, step)]
        loss, exp_err, mle, _ = mwer_objective(model, chunk, mcfg)
        norm = _apply(model, opt, loss, flat, step)
        record = {"phase": "mwer", "step": step, "loss": round(loss.item(), 6),
                  "batch_expected_nwe": round(exp_err.item(), 6), "mle": round(mle.item(), 6),
                  "grad_norm": round(norm, 6)}
        last = step == cfg.max_steps
        if monitor is not None and (last or (cfg.eval_every and step % cfg.eval_every == 0)):
            record["expected_nwe"] = round(expected_errors(model, monitor, mcfg), 6)
        if eval_corpus is not None and (last or (cfg.eval_every and step % cfg.eval_every == 0)):
            record["wer"] = evaluate(model, eval_corpus, cfg.steps)
        if step % 25 == 0 or last or "wer" in record:
            metrics.write(**record)
    return model, metrics


# -- resumable state ---------------------------------------------------------

def save_training_state(path: str | Path, model: AlignRefineDecoder, opt: torch.optim.Adam,
                        step: int) -> None:
    """Checkpoint the weights plus Adam moments so training can resume exactly."""
    path = Path(path)
    save_checkpoint(model, path, extra={"step": step})
    moments = {}
    names = {id(p): n for n, p in model.named_parameters()}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if st:
                moments[names[id(p)]] = st
    blob, entries, offset = [], [], 0
    for name, st in moments.items():
        for key in ("exp_avg", "exp_avg_sq"):
            arr = st[key].detach().numpy().astype("<f4")
            entries.append({"name": f"{name}.{key}", "shape": list(arr.shape), "offset": offset,
                            "step": float(st["step"])})
            blob.append(arr.tobytes())
            offset += arr.nbytes
    path.with_name(path.name + ".optim.bin").write_bytes(b"".join(blob))
    path.with_name(path.name + ".optim.json").write_text(
        json.dumps({"version": 1, "step": step, "tensors": entries}))


def load_training_state(path: str | Path, cfg: TrainConfig):
    """Inverse of :func:`save_training_state`; returns ``(model, optimizer, step)``."""
    path = Path(path)
    model = load_checkpoint(path)
    opt = _optimizer(model, cfg)
    manifest = json.loads(path.with_name(path.name + ".optim.json").read_text())
    blob = path.with_name(path.name + ".optim.bin").read_bytes()
    params = dict(model.named_parameters())
    for e in manifest["tensors"]:
        name, key = e["name"].rsplit(".", 1)
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        st = opt.state[params[name]]
        st[key] = torch.from_numpy(arr.copy())
        st["step"] = torch.tensor(e["step"])
    return model, opt, manifest["step"]
