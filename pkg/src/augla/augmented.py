"""Augmented linear attention: local softmax + grouped global LA + masked conv.

All branch functions accept arrays with arbitrary leading batch dimensions,
shaped ``(..., n, d_k)``. Convolution taps are shaped ``(..., k, d_k)`` with
tap 0 the oldest position and tap ``k - 1`` the current one.

The combined operator is::

    out = local(Q, K, V) + alpha * global(Q, K, V) + conv(V, W)
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .features import feature_map, feature_map_grad
from .reference import AttnConfig
from .tensor import NEG_FILL, Tensor, fill_value, row_softmax

__all__ = [
    "ForwardCache",
    "augmented_attention_backward",
    "augmented_attention_forward",
    "conv_window",
    "feature_map",
    "grouped_global_la_backward",
    "grouped_global_la_forward",
    "local_group_attention_backward",
    "local_group_attention_forward",
    "masked_dwconv_backward",
    "masked_dwconv_forward",
    "multi_head_augmented",
    "multi_head_augmented_backward",
    "multi_head_augmented_forward",
]


def _sum_to_shape(x: Tensor, shape) -> Tensor:
    """Reduce a broadcast result back to ``shape``."""
    while x.ndim > len(shape):
        x = x.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and x.shape[axis] != 1:
            x = x.sum(axis=axis, keepdims=True)
    return x


def _pad_rows(x: Tensor, before: int, after: int) -> Tensor:
    if before == 0 and after == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(before, after), (0, 0)]
    return np.pad(x, widths)


def _split_groups(x: Tensor, width: int) -> Tensor:
    n = x.shape[-2]
    ng = -(-n // width)
    x = _pad_rows(x, 0, ng * width - n)
    return x.reshape(x.shape[:-2] + (ng, width, x.shape[-1]))


def _merge_groups(x: Tensor, n: int) -> Tensor:
    return x.reshape(x.shape[:-3] + (-1, x.shape[-1]))[..., :n, :]


def _group_width(n: int, G: int) -> int:
    # A single (possibly partial) group needs no padding.
    return G if n > G else max(n, 1)


# ---------------------------------------------------------------- conv branch


def conv_window(k: int, unmasked: bool = False) -> tuple[int, int]:
    """Rows of zero padding ``(before, after)`` for a length-``k`` window.

    The causal window covers ``t-k+1 .. t``. The leaky variant is centred and
    reaches ``t + k // 2``.
    """
    ahead = k // 2 if unmasked else 0
    return k - 1 - ahead, ahead


def _check_taps(V: Tensor, W: Tensor) -> None:
    if W.ndim < 2 or W.shape[-1] != V.shape[-1]:
        raise DimensionError(f"conv taps {W.shape} incompatible with values {V.shape}")


def masked_dwconv_forward(V, W, unmasked: bool = False, context=None) -> Tensor:
    """Depthwise convolution over time, restricted to current and past rows.

    ``out[t, c] = sum_j W[j, c] * V[t - (k-1) + j, c]`` with rows before the
    start read from ``context`` (the ``k - 1`` preceding rows) or as zeros.
    """
    V = np.asarray(V)
    W = np.asarray(W)
    _check_taps(V, W)
    k = W.shape[-2]
    n = V.shape[-2]
    before, after = conv_window(k, unmasked)
    if context is not None:
        if unmasked:
            raise ContractError("left context is only defined for the causal convolution")
        context = np.asarray(context)
        if context.shape[-2] != k - 1:
            raise DimensionError(f"conv context needs {k - 1} rows, got {context.shape[-2]}")
        Vp = np.concatenate([np.broadcast_to(context, V.shape[:-2] + context.shape[-2:]), V], axis=-2)
    else:
        Vp = _pad_rows(V, before, after)
    # windows[..., t, c, j] = Vp[..., t + j, c]: a strided view, no copy
    windows = np.lib.stride_tricks.sliding_window_view(Vp, k, axis=-2)[..., :n, :, :]
    return np.einsum("...tcj,...jc->...tc", windows, W)


def masked_dwconv_backward(V, W, dOut, unmasked: bool = False) -> tuple[Tensor, Tensor]:
    """Gradients ``(dV, dW)`` of :func:`masked_dwconv_forward` (zero padding)."""
    V = np.asarray(V)
    W = np.asarray(W)
    dOut = np.asarray(dOut)
    k = W.shape[-2]
    n = V.shape[-2]
    before, after = conv_window(k, unmasked)
    Vp = _pad_rows(V, before, after)
    dVp = np.zeros(np.broadcast_shapes(Vp.shape, dOut.shape[:-2] + Vp.shape[-2:]), dtype=dOut.dtype)
    dW = np.zeros(np.broadcast_shapes(W.shape, dOut.shape[:-2] + W.shape[-2:]), dtype=dOut.dtype)
    for j in range(k):
        dVp[..., j : j + n, :] += W[..., j : j + 1, :] * dOut
    windows = np.lib.stride_tricks.sliding_window_view(Vp, k, axis=-2)[..., :n, :, :]
    dW[...] = np.einsum("...tcj,...tc->...jc", windows, dOut)
    dV = dVp[..., before : before + n, :]
    return _sum_to_shape(dV, V.shape), _sum_to_shape(dW, W.shape)


# --------------------------------------------------------------- local branch


def local_group_attention_forward(Q, K, V, G: int) -> tuple[Tensor, dict]:
    """Causal softmax attention restricted to contiguous groups of ``G`` rows."""
    Q, K, V = np.asarray(Q), np.asarray(K), np.asarray(V)
    n, d_k = Q.shape[-2], Q.shape[-1]
    width = _group_width(n, G)
    Qg, Kg, Vg = (_split_groups(x, width) for x in (Q, K, V))
    scale = 1.0 / np.sqrt(d_k)
    scores = Qg @ np.swapaxes(Kg, -1, -2)
    tril = np.tril(np.ones((width, width), dtype=bool))
    scores = np.where(tril, scores, fill_value(NEG_FILL, scores.dtype))
    P = row_softmax(scores, scale)
    out = _merge_groups(P @ Vg, n)
    return out, {"Qg": Qg, "Kg": Kg, "Vg": Vg, "P": P, "scale": scale, "n": n}


def local_group_attention_backward(cache: dict, dOut) -> tuple[Tensor, Tensor, Tensor]:
    n = cache["n"]
    P, Qg, Kg, Vg, scale = cache["P"], cache["Qg"], cache["Kg"], cache["Vg"], cache["scale"]
    dOg = _split_groups(np.asarray(dOut), P.shape[-1])
    dVg = np.swapaxes(P, -1, -2) @ dOg
    dP = dOg @ np.swapaxes(Vg, -1, -2)
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
    dQg = dS @ Kg
    dKg = np.swapaxes(dS, -1, -2) @ Qg
    return _merge_groups(dQg, n), _merge_groups(dKg, n), _merge_groups(dVg, n)


# -------------------------------------------------------------- global branch


def grouped_global_la_forward(
    Q, K, V, G: int, feature_map_kind: str = "relu", global_scale: str = "none",
    S0=None, folded0: int = 0,
) -> tuple[Tensor, dict]:
    """Linear attention where cross-group context arrives only via group sums.

    A token in group ``g`` reads ``phi(Q_t) @ (S0 + sum of phi(K)^T V over
    groups < g)``. ``S0``/``folded0`` carry history already folded by a
    decode state; they default to an empty history.
    """
    Q, K, V = np.asarray(Q), np.asarray(K), np.asarray(V)
    n = Q.shape[-2]
    width = _group_width(n, G) if S0 is None else G
    phiQ = _split_groups(feature_map(Q, feature_map_kind), width)
    phiK = _split_groups(feature_map(K, feature_map_kind), width)
    Vg = _split_groups(V, width)
    kv = np.swapaxes(phiK, -1, -2) @ Vg
    incl = np.cumsum(kv, axis=-3)
    excl = np.concatenate([np.zeros_like(incl[..., :1, :, :]), incl[..., :-1, :, :]], axis=-3)
    if S0 is not None:
        excl = excl + np.asarray(S0)[..., None, :, :]
    ng = kv.shape[-3]
    row_scale = None
    if global_scale == "inverse_count":
        counts = folded0 + np.arange(ng) * width
        row_scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)[:, None, None]
    out = phiQ @ excl
    if row_scale is not None:
        out = out * row_scale
    cache = {
        "Q": Q, "K": K, "phiQ": phiQ, "phiK": phiK, "Vg": Vg, "excl": excl,
        "row_scale": row_scale, "kind": feature_map_kind, "n": n, "width": width,
        "kv_total": incl[..., -1, :, :],
    }
    return _merge_groups(out, n), cache


def grouped_global_la_backward(cache: dict, dOut) -> tuple[Tensor, Tensor, Tensor]:
    n, width = cache["n"], cache["width"]
    dOg = _split_groups(np.asarray(dOut), width)
    if cache["row_scale"] is not None:
        dOg = dOg * cache["row_scale"]
    phiQ, phiK, Vg, excl = cache["phiQ"], cache["phiK"], cache["Vg"], cache["excl"]
    dphiQ = dOg @ np.swapaxes(excl, -1, -2)
    dexcl = np.swapaxes(phiQ, -1, -2) @ dOg
    # Group g's product feeds every later group's prefix: reverse exclusive cumsum.
    rev = np.cumsum(dexcl[..., ::-1, :, :], axis=-3)[..., ::-1, :, :]
    dkv = np.concatenate([rev[..., 1:, :, :], np.zeros_like(rev[..., :1, :, :])], axis=-3)
    dphiK = Vg @ np.swapaxes(dkv, -1, -2)
    dVg = phiK @ dkv
    dQ = _merge_groups(dphiQ, n) * feature_map_grad(cache["Q"], cache["kind"])
    dK = _merge_groups(dphiK, n) * feature_map_grad(cache["K"], cache["kind"])
    return dQ, dK, _merge_groups(dVg, n)


# ------------------------------------------------------------- full operator


@dataclass
class ForwardCache:
    """Saved activations of one :func:`augmented_attention_forward` call.

    A cache may be consumed by exactly one backward call.
    """

    cfg: AttnConfig
    shape: tuple
    V: Tensor
    W: Tensor
    local: dict
    global_: dict
    consumed: bool = field(default=False, repr=False)


def _check_inputs(Q, K, V, W, cfg: AttnConfig):
    Q, K, V, W = (np.asarray(x) for x in (Q, K, V, W))
    if Q.ndim < 2 or Q.shape != K.shape or Q.shape != V.shape:
        raise DimensionError(f"Q/K/V shapes differ: {Q.shape}, {K.shape}, {V.shape}")
    if Q.shape[-1] != cfg.head_dim:
        raise DimensionError(f"head width {Q.shape[-1]} != cfg.head_dim {cfg.head_dim}")
    if W.ndim < 2 or W.shape[-2:] != (cfg.conv_kernel, cfg.head_dim):
        raise DimensionError(
            f"conv taps must end in ({cfg.conv_kernel}, {cfg.head_dim}), got {W.shape}"
        )
    return Q, K, V, W


def augmented_attention_forward(Q, K, V, W, cfg: AttnConfig) -> tuple[Tensor, ForwardCache]:
    """Single-head (or batched) augmented attention for a full sequence."""
    Q, K, V, W = _check_inputs(Q, K, V, W, cfg)
    local, lcache = local_group_attention_forward(Q, K, V, cfg.group_size)
    glob, gcache = grouped_global_la_forward(
        Q, K, V, cfg.group_size, cfg.feature_map, cfg.global_scale
    )
    conv = masked_dwconv_forward(V, W, unmasked=cfg.unmasked_conv)
    out = local + cfg.alpha * glob + conv
    return out, ForwardCache(cfg, Q.shape, V, W, lcache, gcache)


def augmented_attention_backward(cache: ForwardCache, dOut):
    """Gradients ``(dQ, dK, dV, dW)`` for a cached forward call."""
    if not isinstance(cache, ForwardCache):
        raise ContractError("expected a ForwardCache from augmented_attention_forward")
    if cache.consumed:
        raise ContractError("ForwardCache already consumed by a previous backward call")
    dOut = np.asarray(dOut)
    if dOut.shape != cache.shape:
        raise ContractError(f"dOut shape {dOut.shape} does not match cached forward {cache.shape}")
    cache.consumed = True
    cfg = cache.cfg
    dQ, dK, dV = local_group_attention_backward(cache.local, dOut)
    gQ, gK, gV = grouped_global_la_backward(cache.global_, cfg.alpha * dOut)
    cV, dW = masked_dwconv_backward(cache.V, cache.W, dOut, unmasked=cfg.unmasked_conv)
    return dQ + gQ, dK + gK, dV + gV + cV, dW


# ---------------------------------------------------------------- multi-head


def _split_heads(x: Tensor, h: int) -> Tensor:
    # (..., n, h*dk) -> (..., h, n, dk)
    return np.swapaxes(x.reshape(x.shape[:-1] + (h, -1)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    x = np.swapaxes(x, -2, -3)
    return x.reshape(x.shape[:-2] + (-1,))


def multi_head_augmented_forward(X, Wq, Wk, Wv, Wo, Wc, cfg: AttnConfig):
    """Project, run augmented attention per head, concatenate and project out.

    ``X`` is ``(..., n, d_model)``, projection matrices are ``(d_model, d_model)``
    applied as ``X @ W``, and ``Wc`` holds per-head taps ``(n_heads, k, d_k)``.
    Returns ``(out, cache)``.
    """
    X = np.asarray(X)
    d = cfg.d_model
    if X.shape[-1] != d:
        raise DimensionError(f"input width {X.shape[-1]} != d_model {d}")
    for name, M in (("Wq", Wq), ("Wk", Wk), ("Wv", Wv), ("Wo", Wo)):
        if np.shape(M) != (d, d):
            raise DimensionError(f"{name} must be ({d}, {d}), got {np.shape(M)}")
    Wc = np.asarray(Wc)
    if Wc.shape != (cfg.n_heads, cfg.conv_kernel, cfg.head_dim):
        raise DimensionError(
            f"Wc must be ({cfg.n_heads}, {cfg.conv_kernel}, {cfg.head_dim}), got {Wc.shape}"
        )
    h = cfg.n_heads
    Q, K, V = (_split_heads(X @ M, h) for M in (Wq, Wk, Wv))
    heads, acache = augmented_attention_forward(Q, K, V, Wc, cfg)
    concat = _merge_heads(heads)
    out = concat @ Wo
    return out, {"X": X, "W": (Wq, Wk, Wv, Wo), "attn": acache, "concat": concat}


def multi_head_augmented(X, Wq, Wk, Wv, Wo, Wc, cfg: AttnConfig) -> Tensor:
    return multi_head_augmented_forward(X, Wq, Wk, Wv, Wo, Wc, cfg)[0]


def multi_head_augmented_backward(cache: dict, dOut):
    """Returns ``(dX, dWq, dWk, dWv, dWo, dWc)``."""
    X = cache["X"]
    Wq, Wk, Wv, Wo = cache["W"]
    dOut = np.asarray(dOut)
    lead = X.shape[:-2]

    def contract(a, b):
        # sum over all leading axes and rows: a^T b
        return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])

    dWo = contract(cache["concat"], dOut)
    dheads = _split_heads(dOut @ Wo.T, cache["attn"].cfg.n_heads)
    dQ, dK, dV, dWc = augmented_attention_backward(cache["attn"], dheads)
    dQ, dK, dV = (_merge_heads(g) for g in (dQ, dK, dV))
    dX = dQ @ Wq.T + dK @ Wk.T + dV @ Wv.T
    assert dX.shape[:-2] == lead
    return dX, contract(X, dQ), contract(X, dK), contract(X, dV), dWo, dWc
