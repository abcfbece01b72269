"""The CTC forward recursion against brute force, and beam search.

Run with ``python3 demos/ctc_oracles.py``.
"""
import numpy as np

from alignrefine.checks import random_log_probs
from alignrefine.ctc import ctc_beam_search, ctc_bruteforce, ctc_logprob, ctc_posterior_table

rng = np.random.default_rng(0)
lp = random_log_probs(rng, 4, 3)  # 4 frames, blank plus labels 1..3

for y in ([1], [1, 2], [2, 2], [1, 2, 3]):
    print(f"y={y}: recursion {ctc_logprob(lp, y):.6f}  enumeration {ctc_bruteforce(lp, y):.6f}")

# Too many labels for the frames (a repeat needs a blank in between).
print("y=[1,1,1,1]:", ctc_logprob(lp, [1, 1, 1, 1]))

# The posterior over every label sequence the frames can produce sums to one.
table = ctc_posterior_table(lp)
print(f"\n{len(table)} label sequences, total probability {sum(table.values()):.12f}")

# A beam at least as wide as the table recovers its exact ranking.
exact = sorted(table.items(), key=lambda kv: -kv[1])[:5]
beam = ctc_beam_search(lp, K=len(table))[:5]
for (seq, p), h in zip(exact, beam):
    print(f"  {str(list(seq)):12s} exact {np.log(p):8.4f}  beam {list(h.labels)} {h.score:8.4f}")
