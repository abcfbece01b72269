"""Alignments, timestamps and the streaming masks built from them.

Run with ``python3 demos/alignments_and_masks.py``.
"""
import numpy as np

from alignrefine.align import Alignment, collapse, timestamps
from alignrefine.masks import (DelayConfig, MaskSpec, band_self_mask, model_delay, render_mask,
                               time_aligned_cross_mask, total_delay)

# An RNN-T alignment over 4 frames: every blank (0) moves to the next frame.
a = Alignment((1, 0, 0, 2, 0, 3, 4, 0), audio_len=4)
print("tokens     ", a.tokens)
print("timestamps ", timestamps(a).tolist())
print("labels     ", collapse(a))

# Text self-attention: unbounded history, C positions of lookahead.
C = 2
print(f"\ntext self-attention, right={C}")
print(render_mask(band_self_mask(len(a.tokens), MaskSpec(None, C))))

# Cross-attention: each token reads the frames around its own timestamp.
print(f"\ncross-attention, frames [t-2, t+{C}]")
print(render_mask(time_aligned_cross_mask(timestamps(a), a.audio_len, MaskSpec(2, C))))

# Each layer adds C frames of lookahead; audio self-attention adds one more hop.
print("\ndelay per refinement step (6 layers, 60 ms frames)")
for C in (1, 2, 5):
    plain = model_delay(DelayConfig(6, C, 0.06, audio_self_attention=False))
    with_sa = model_delay(DelayConfig(6, C, 0.06))
    print(f"  C={C}: {plain:.2f} s, {with_sa:.2f} s with audio self-attention")
print(f"two steps at C=5: {total_delay(DelayConfig(6, 5, 0.06, steps=2)):.2f} s")

# The bound is tight: the output at step t changes once frame t + D*C changes.
assert np.isclose(model_delay(DelayConfig(6, 5, 0.06)), 7 * 5 * 0.06)
