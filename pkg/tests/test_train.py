import json

import numpy as np
import pytest
import torch

from alignrefine.model import DecoderConfig, init_params, mle_loss, refine_batch
from alignrefine.synth import CorruptionConfig, TaskConfig, first_pass_wer, generate
from alignrefine.train import (MetricsLog, MwerConfig, TrainConfig, batch_indices, corpus_batch, evaluate,
                               finetune_mwer, learning_rate, load_training_state, mwer_objective,
                               save_training_state, train_mle)

TASK = TaskConfig()
SMALL = dict(model_dim=16, heads=2, layers=1)


@pytest.fixture(scope="module")
def corpus():
    return generate(96, TASK, seed=31, corruption=CorruptionConfig(seed=32))


def small_model(seed=0, **kw):
    return init_params(DecoderConfig(**{**SMALL, **kw}), seed)


def strip(records):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


def test_zero_step_config_rejected():
    for bad in (dict(max_steps=0), dict(steps=0), dict(batch_size=0), dict(lr=0.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        MwerConfig(beam=0)


def test_learning_rate_schedule():
    cfg = TrainConfig(lr=1.0, warmup=100)
    assert learning_rate(cfg, 50) == pytest.approx(0.5)
    assert learning_rate(cfg, 100) == pytest.approx(1.0)
    assert learning_rate(cfg, 400) == pytest.approx(0.5)


def test_batches_cover_each_epoch_once():
    lengths = np.random.default_rng(0).integers(5, 50, size=200)
    cfg = TrainConfig(batch_size=20, seed=3)
    seen = np.concatenate([batch_indices(lengths, cfg, s) for s in range(1, 11)])
    assert sorted(seen.tolist()) == list(range(200))
    assert np.array_equal(batch_indices(lengths, cfg, 4), batch_indices(lengths, cfg, 4))


def test_steps_zero_gives_first_pass(corpus):
    res = evaluate(small_model(), corpus, 0)
    assert res == {"first_pass": first_pass_wer(corpus), "steps": []}


def test_untrained_model_no_better_than_first_pass(corpus):
    res = evaluate(small_model(), corpus, 2)
    assert min(res["steps"]) >= res["first_pass"]


def corpus_loss(model, corpus):
    with torch.no_grad():
        inputs, lps = refine_batch(model, corpus_batch(corpus, model), 3)
        return float(mle_loss(lps, inputs[0].lengths, [u.reference for u in corpus])[0])


def test_loss_decreases_over_200_updates(corpus):
    model = small_model()
    before = corpus_loss(model, corpus)
    cfg = TrainConfig(batch_size=16, lr=3e-3, warmup=20, max_steps=200, eval_every=0)
    train_mle(corpus, cfg, model)
    assert corpus_loss(model, corpus) < 0.8 * before


def test_resume_is_bit_exact(corpus, tmp_path):
    cfg = TrainConfig(batch_size=16, warmup=5, max_steps=100, eval_every=0, seed=2)
    full = MetricsLog()
    ref, _, _ = train_mle(corpus, cfg, small_model(1), metrics=full)

    head = MetricsLog()
    half = TrainConfig(**{**cfg.__dict__, "max_steps": 50})
    m, opt, _ = train_mle(corpus, half, small_model(1), metrics=head)
    save_training_state(tmp_path / "state", m, opt, 50)
    m2, opt2, start = load_training_state(tmp_path / "state", cfg)
    assert start == 50
    tail = MetricsLog()
    resumed, _, _ = train_mle(corpus, cfg, m2, metrics=tail, start_step=start, optimizer=opt2)
    assert strip(head.records + tail.records) == strip(full.records)
    sa, sb = ref.state_dict(), resumed.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_metrics_log_file(tmp_path, corpus):
    path = tmp_path / "m.jsonl"
    cfg = TrainConfig(batch_size=16, max_steps=50, eval_every=50)
    train_mle(corpus, cfg, small_model(), corpus[:16], MetricsLog(path))
    [rec] = [json.loads(l) for l in path.read_text().splitlines()]
    assert rec["step"] == 50 and len(rec["wer"]["steps"]) == 3 and "wall_time" in rec


def test_single_hypothesis_mwer_has_no_gradient(corpus):
    model = init_params(DecoderConfig(**SMALL), 0, torch.float64)
    loss, exp_err, mle, hyps = mwer_objective(model, corpus[:4], MwerConfig(beam=1, gamma=0.0))
    assert all(len(h) == 1 for h in hyps)
    model.zero_grad()
    loss.backward()
    assert all(p.grad is None or float(p.grad.abs().max()) < 1e-12 for p in model.parameters())


def test_mwer_objective_gamma_adds_mle(corpus):
    model = init_params(DecoderConfig(**SMALL), 0, torch.float64)
    with torch.no_grad():
        l0, e0, m0, hyps = mwer_objective(model, corpus[:4], MwerConfig(gamma=0.0))
        l1, e1, m1, _ = mwer_objective(model, corpus[:4], MwerConfig(gamma=0.5), hyps)
    assert float(l0) == pytest.approx(float(e0))
    assert float(l1) == pytest.approx(float(e1) + 0.5 * float(m1))


def test_finetune_logs_expected_errors(corpus):
    metrics = MetricsLog()
    cfg = TrainConfig(batch_size=8, lr=1e-4, max_steps=3, eval_every=0, mwer=MwerConfig())
    finetune_mwer(small_model(), corpus, cfg, corpus[:8], corpus[:8], metrics)
    nwe = [r for r in metrics.records if "expected_nwe" in r]
    assert [r["step"] for r in nwe] == [0, 3]
    assert "wer" in metrics.records[-1]
