"""Brute-force attention oracles and the shared attention config.

Everything here favours obviousness over speed. The fast paths in
:mod:`augla.augmented`, :mod:`augla.decode` and :mod:`augla.specdecode`
are checked against these functions.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .features import FEATURE_MAPS, feature_map
from .tensor import NEG_FILL, Tensor, masked_fill, row_softmax

GLOBAL_SCALES = ("none", "inverse_count")


@dataclass(frozen=True)
class AttnConfig:
    """Hyperparameters of the augmented attention operator.

    ``alpha`` scales only the grouped global branch. ``unmasked_conv`` turns
    the value convolution into a centred (leaky) window and exists only for
    the leakage negative control.
    """

    d_model: int = 64
    n_heads: int = 1
    group_size: int = 64
    conv_kernel: int = 63
    alpha: float = 1.0
    feature_map: str = "relu"
    global_scale: str = "none"
    unmasked_conv: bool = False

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1:
            raise ConfigError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        if self.conv_kernel < 1:
            raise ConfigError("conv_kernel must be >= 1")
        if not self.alpha >= 0:
            raise ConfigError("alpha must be >= 0")
        if self.feature_map not in FEATURE_MAPS:
            raise ConfigError(f"feature_map must be one of {FEATURE_MAPS}")
        if self.global_scale not in GLOBAL_SCALES:
            raise ConfigError(f"global_scale must be one of {GLOBAL_SCALES}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _check_qkv(Q, K, V):
    Q, K, V = (np.asarray(x) for x in (Q, K, V))
    if Q.ndim != 2 or K.shape != Q.shape or V.ndim != 2 or V.shape[0] != Q.shape[0]:
        raise DimensionError(f"incompatible Q/K/V shapes {Q.shape}, {K.shape}, {V.shape}")
    return Q, K, V


def softmax_attention_ref(Q, K, V, causal: bool = True, block_rows: int | None = None) -> Tensor:
    """Quadratic softmax attention with ``1/sqrt(d_k)`` scaling.

    ``block_rows`` processes query rows in chunks to bound peak memory; the
    arithmetic per row is unchanged.
    """
    Q, K, V = _check_qkv(Q, K, V)
    n, d_k = Q.shape
    scale = 1.0 / np.sqrt(d_k)
    step = n if block_rows is None else max(1, int(block_rows))
    out = np.empty((n, V.shape[1]), dtype=np.result_type(Q, V))
    cols = np.arange(n)
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        scores = Q[lo:hi] @ K.T
        if causal:
            mask = cols[None, :] <= np.arange(lo, hi)[:, None]
            scores = masked_fill(scores, mask, NEG_FILL)
        out[lo:hi] = row_softmax(scores, scale) @ V
    return out


def causal_linear_attention_ref(
    Q, K, V, feature_map_kind: str = "relu", include_current: bool = True,
    global_scale: str = "none",
) -> Tensor:
    """Unnormalised causal linear attention, one token at a time.

    ``out_t = phi(Q_t) @ S_t`` where ``S_t`` sums ``phi(K_i)^T V_i`` over
    ``i <= t`` (``include_current``) or ``i < t``. With
    ``global_scale="inverse_count"`` each row is divided by the number of
    summed terms (rows with an empty sum stay zero).
    """
    Q, K, V = _check_qkv(Q, K, V)
    if global_scale not in GLOBAL_SCALES:
        raise ConfigError(f"global_scale must be one of {GLOBAL_SCALES}")
    n = Q.shape[0]
    S = np.zeros((Q.shape[1], V.shape[1]))
    out = np.zeros((n, V.shape[1]))
    for t in range(n):
        if include_current:
            S = S + np.outer(feature_map(K[t], feature_map_kind), V[t])
        count = t + 1 if include_current else t
        row = feature_map(Q[t], feature_map_kind) @ S
        if global_scale == "inverse_count":
            row = row / count if count else row * 0.0
        out[t] = row
        if not include_current:
            S = S + np.outer(feature_map(K[t], feature_map_kind), V[t])
    return out

