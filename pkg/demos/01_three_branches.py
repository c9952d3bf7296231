"""Augmented attention as the sum of its three branches.

Build a small random problem, run the vectorised forward pass, then rebuild
the same output from the slow loop oracles one branch at a time. Finally
perturb a future token and watch which outputs move: nothing at or before
the perturbed position in causal mode, something in the leaky debug mode.
"""

from dataclasses import replace

import numpy as np

from augla import AttnConfig, augmented_attention_forward
from augla.oracles import conv_oracle, global_oracle, local_oracle

rng = np.random.default_rng(0)
cfg = AttnConfig(d_model=8, group_size=4, conv_kernel=3, alpha=0.5)
n = 10
Q, K, V = rng.normal(size=(3, n, cfg.d_model))
W = rng.normal(size=(cfg.conv_kernel, cfg.d_model))

out, _ = augmented_attention_forward(Q, K, V, W, cfg)

local = local_oracle(Q, K, V, cfg.group_size)
glob = global_oracle(Q, K, V, cfg.group_size, cfg.feature_map)
conv = conv_oracle(V, W)
print("groups of", cfg.group_size, "over", n, "tokens")
print("first group sees no global context:", np.abs(glob[: cfg.group_size]).max() == 0.0)
print("max |fast - (local + alpha*global + conv)| =",
      np.abs(out - (local + cfg.alpha * glob + conv)).max())

t = 5
V2 = V.copy()
V2[t + 1] += 1.0
for leaky in (False, True):
    c = replace(cfg, unmasked_conv=leaky)
    a = augmented_attention_forward(Q, K, V, W, c)[0]
    b = augmented_attention_forward(Q, K, V2, W, c)[0]
    moved = np.flatnonzero(np.abs(a - b).max(axis=1) > 0)
    print(f"{'leaky ' if leaky else 'causal'} conv: rows changed by editing token {t + 1}: {moved.tolist()}")
