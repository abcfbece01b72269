"""End-to-end runs on the synthetic task.

:func:`run_mle` trains one decoder per right context and reports per-step
WER; :func:`run_mwer` finetunes the first of them with the composite MWER
objective.  Both write to one :class:`MetricsLog`, so two runs with the same
seed can be compared record by record.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .model import AlignRefineDecoder, DecoderConfig, init_params
from .synth import CorruptionConfig, TaskConfig, Utterance, generate
from .train import MetricsLog, MwerConfig, TrainConfig, evaluate, expected_errors, finetune_mwer, train_mle


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    n_train: int = 10000
    n_eval: int = 500
    n_monitor: int = 500  # training utterances that track the expected-NWE term
    model: DecoderConfig = field(default_factory=DecoderConfig)
    rights: tuple[int, ...] = (2, 0)  # the first one is finetuned
    mle: TrainConfig = field(default_factory=lambda: TrainConfig(max_steps=2000, eval_every=0))
    mwer: TrainConfig = field(default_factory=lambda: TrainConfig(
        lr=1e-4, warmup=0, max_steps=150, eval_every=0, mwer=MwerConfig()))


def corpora(cfg: ExperimentConfig, seed: int) -> tuple[list[Utterance], list[Utterance]]:
    """Train and eval splits; every seed below is derived from ``seed``."""
    ss = np.random.SeedSequence(seed).generate_state(4)
    train = generate(cfg.n_train, cfg.task, int(ss[0]), replace(cfg.corruption, seed=int(ss[1])), "train")
    ev = generate(cfg.n_eval, cfg.task, int(ss[2]), replace(cfg.corruption, seed=int(ss[3])), "eval")
    return train, ev


def run_mle(cfg: ExperimentConfig, seed: int, metrics: MetricsLog,
            data: Optional[tuple[Sequence[Utterance], Sequence[Utterance]]] = None) -> dict:
    """Train one model per entry of ``cfg.rights``; returns WERs, models and timings."""
    train, ev = data or corpora(cfg, seed)
    out = {"wer": {}, "models": {}, "seconds": {}}
    for C in cfg.rights:
        t0 = time.perf_counter()
        mcfg = replace(cfg.model, right_context=C, vocab_size=cfg.task.vocab_size,
                       audio_dim=cfg.task.audio_dim, steps=cfg.mle.steps)
        model = init_params(mcfg, seed)
        tcfg = replace(cfg.mle, seed=seed)
        train_mle(train, tcfg, model, metrics=_Tagged(metrics, right=C))
        wer = evaluate(model, ev, cfg.mle.steps)
        metrics.write(phase="mle-eval", right=C, wer=wer)
        out["wer"][C], out["models"][C] = wer, model
        out["seconds"][C] = time.perf_counter() - t0
    return out


def run_mwer(model: AlignRefineDecoder, cfg: ExperimentConfig, seed: int, metrics: MetricsLog,
             data: Optional[tuple[Sequence[Utterance], Sequence[Utterance]]] = None) -> dict:
    """Finetune ``model`` in place; returns eval WER and the expected-NWE term before and after."""
    train, ev = data or corpora(cfg, seed)
    t0 = time.perf_counter()
    monitor = train[: cfg.n_monitor]
    before = evaluate(model, ev, cfg.mle.steps)
    tcfg = replace(cfg.mwer, seed=seed, steps=cfg.mle.steps)
    log = _Tagged(metrics, right=model.cfg.right_context)
    finetune_mwer(model, train, tcfg, monitor=monitor, metrics=log)
    nwe = [r["expected_nwe"] for r in log.records if "expected_nwe" in r]
    after = evaluate(model, ev, cfg.mle.steps)
    metrics.write(phase="mwer-eval", wer_before=before, wer_after=after,
                  expected_nwe_before=nwe[0], expected_nwe_after=nwe[-1])
    return {"wer_before": before, "wer_after": after, "expected_nwe": (nwe[0], nwe[-1]),
            "seconds": time.perf_counter() - t0}


class _Tagged:
    """Forwards records to a MetricsLog with fixed extra fields."""

    def __init__(self, base: MetricsLog, **tags):
        self.base, self.tags, self.records = base, tags, []

    def write(self, **record) -> None:
        record = {**self.tags, **record}
        self.records.append(record)
        self.base.write(**record)


# configuration of the acceptance runs: about 9 minutes per model on one core
ACCEPTANCE = ExperimentConfig()
