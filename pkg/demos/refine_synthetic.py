"""Train a small refiner on the synthetic task and watch it fix a first pass.

This takes a few minutes on one CPU core.  Run with
``python3 demos/refine_synthetic.py``.
"""
import torch

from alignrefine.align import collapse
from alignrefine.model import DecoderConfig, init_params, refine
from alignrefine.synth import CorruptionConfig, TaskConfig, first_pass_wer, generate
from alignrefine.train import TrainConfig, evaluate, train_mle

torch.set_num_threads(1)
task = TaskConfig()
train = generate(3000, task, seed=1, corruption=CorruptionConfig(seed=2))
dev = generate(200, task, seed=3, corruption=CorruptionConfig(seed=4), prefix="dev")
print(f"first pass WER on dev: {100 * first_pass_wer(dev):.1f}%")

model = init_params(DecoderConfig(layers=2, right_context=2), seed=0)
train_mle(train, TrainConfig(max_steps=300, eval_every=100), model, eval_corpus=dev)

wer = evaluate(model, dev, steps=3)
print("WER after each step:", " ".join(f"{100 * w:.1f}%" for w in wer["steps"]))

# One utterance, step by step.
u = dev[0]
trace = refine(u.first_pass, u.features, model, steps=2)
print("\nreference ", list(u.reference))
print("first pass", collapse(u.first_pass))
for i, s in enumerate(trace.steps, 1):
    print(f"step {i}    ", collapse(s.output))
