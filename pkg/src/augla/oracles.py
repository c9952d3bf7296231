"""Slow, loop-based oracles for the augmented attention branches.

They share nothing with the vectorised code beyond the feature maps and the
plain softmax reference, and serve both the test-suite and ``invariants``.
"""

import numpy as np

from .features import feature_map
from .reference import AttnConfig, softmax_attention_ref


def local_oracle(Q, K, V, G):
    n = Q.shape[0]
    out = np.zeros_like(V)
    for lo in range(0, n, G):
        hi = min(n, lo + G)
        out[lo:hi] = softmax_attention_ref(Q[lo:hi], K[lo:hi], V[lo:hi], causal=True)
    return out


def global_oracle(Q, K, V, G, kind="relu", global_scale="none"):
    n, d = Q.shape
    out = np.zeros((n, V.shape[1]))
    for t in range(n):
        start = (t // G) * G
        S = np.zeros((d, V.shape[1]))
        for i in range(start):
            S += np.outer(feature_map(K[i], kind), V[i])
        row = feature_map(Q[t], kind) @ S
        if global_scale == "inverse_count":
            row = row / start if start else row * 0.0
        out[t] = row
    return out


def conv_oracle(V, W, unmasked=False):
    n, d = V.shape
    k = W.shape[0]
    ahead = k // 2 if unmasked else 0
    out = np.zeros((n, d))
    for t in range(n):
        for j in range(k):
            src = t - (k - 1) + ahead + j
            if 0 <= src < n:
                out[t] += W[j] * V[src]
    return out


def augmented_oracle(Q, K, V, W, cfg):
    return (
        local_oracle(Q, K, V, cfg.group_size)
        + cfg.alpha * global_oracle(Q, K, V, cfg.group_size, cfg.feature_map, cfg.global_scale)
        + conv_oracle(V, W, cfg.unmasked_conv)
    )


def random_config(rng, n_max=64, d_choices=(1, 2, 3, 4, 8)):
    d = int(rng.choice(d_choices))
    return AttnConfig(
        d_model=d,
        group_size=int(rng.integers(1, 12)),
        conv_kernel=int(rng.integers(1, 10)),
        alpha=float(rng.uniform(0, 2)),
        feature_map=str(rng.choice(["relu", "elu_plus_one", "identity"])),
        global_scale=str(rng.choice(["none", "inverse_count"])),
    ), int(rng.integers(1, n_max + 1))
