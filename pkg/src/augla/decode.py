"""Streaming (token-by-token) form of augmented attention for one head.

A :class:`DecodeState` carries everything later tokens can see:

* ``S``: sum of ``phi(K)^T V`` over every folded group,
* ``group_K`` / ``group_V``: raw rows of the current, still open group,
* ``conv_tail``: the last ``k - 1`` committed value rows (zeros before the start),
* ``pos``: number of committed tokens.

Groups are folded eagerly, so the open group always holds fewer than ``G``
rows. Stepwise decoding and :func:`prefill` produce the same outputs and
the same state.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .augmented import (
    grouped_global_la_forward,
    local_group_attention_forward,
    masked_dwconv_forward,
)
from .errors import ConfigError, ContractError, DimensionError
from .features import feature_map
from .reference import AttnConfig
from .tensor import Tensor, row_softmax

SNAPSHOT_MAGIC = b"ALDS"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIQ")


@dataclass
class DecodeState:
    cfg: AttnConfig
    taps: Tensor
    S: Tensor
    group_K: Tensor
    group_V: Tensor
    conv_tail: Tensor
    pos: int = 0

    @property
    def folded(self) -> int:
        """Tokens already summarised in ``S``."""
        return self.pos - self.group_K.shape[0]

    def clone(self) -> "DecodeState":
        return DecodeState(
            self.cfg, self.taps, self.S.copy(), self.group_K.copy(),
            self.group_V.copy(), self.conv_tail.copy(), self.pos,
        )

    def fields_equal(self, other: "DecodeState", atol: float = 0.0) -> bool:
        """Compare every mutable field; ``atol=0`` demands bitwise equality."""
        if self.pos != other.pos or self.group_K.shape != other.group_K.shape:
            return False
        pairs = [
            (self.S, other.S), (self.group_K, other.group_K),
            (self.group_V, other.group_V), (self.conv_tail, other.conv_tail),
        ]
        if atol == 0.0:
            return all(np.array_equal(a, b) for a, b in pairs)
        return all(np.allclose(a, b, rtol=0.0, atol=atol) for a, b in pairs)

    def check_invariants(self) -> None:
        G, k, d = self.cfg.group_size, self.cfg.conv_kernel, self.cfg.head_dim
        if not 0 <= self.group_K.shape[0] < G:
            raise ContractError(f"open group holds {self.group_K.shape[0]} rows, limit {G - 1}")
        if self.group_K.shape != self.group_V.shape or self.group_K.shape[1] != d:
            raise ContractError("group buffers out of sync")
        if self.conv_tail.shape != (k - 1, d):
            raise ContractError(f"conv tail shape {self.conv_tail.shape} != {(k - 1, d)}")
        if self.S.shape != (d, d):
            raise ContractError("S has wrong shape")
        if self.folded % G:
            raise ContractError("folded token count is not a whole number of groups")

    def nbytes(self) -> int:
        return self.S.nbytes + self.group_K.nbytes + self.group_V.nbytes + self.conv_tail.nbytes

    # -- snapshot / restore ---------------------------------------------------

    def to_bytes(self) -> bytes:
        """Versioned little-endian snapshot of ``S``, buffers, tail and ``pos``."""
        cfg = self.cfg
        header = _HEADER.pack(
            SNAPSHOT_MAGIC, SNAPSHOT_VERSION, cfg.head_dim, cfg.group_size,
            cfg.conv_kernel, self.group_K.shape[0], self.pos,
        )
        body = b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes()
            for a in (self.S, self.group_K, self.group_V, self.conv_tail)
        )
        return header + body

    @classmethod
    def from_bytes(cls, blob: bytes, cfg: AttnConfig, taps=None) -> "DecodeState":
        magic, version, d, G, k, rows, pos = _HEADER.unpack_from(blob)
        if magic != SNAPSHOT_MAGIC:
            raise ContractError("not a decode-state snapshot")
        if version != SNAPSHOT_VERSION:
            raise ContractError(f"unsupported snapshot version {version}")
        if (d, G, k) != (cfg.head_dim, cfg.group_size, cfg.conv_kernel):
            raise ConfigError(f"snapshot geometry {(d, G, k)} does not match config")
        sizes = [(d, d), (rows, d), (rows, d), (k - 1, d)]
        total = sum(a * b for a, b in sizes)
        flat = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
        if flat.size != total:
            raise ContractError(f"snapshot body has {flat.size} scalars, expected {total}")
        parts, at = [], 0
        for shape in sizes:
            size = shape[0] * shape[1]
            parts.append(flat[at : at + size].reshape(shape).astype(np.float64))
            at += size
        state = init_state(cfg, taps)
        state.S, state.group_K, state.group_V, state.conv_tail = parts
        state.pos = pos
        state.check_invariants()
        return state


def init_state(cfg: AttnConfig, taps=None) -> DecodeState:
    """Fresh state for one head. ``taps`` defaults to an all-zero kernel."""
    if not isinstance(cfg, AttnConfig):
        raise ConfigError("init_state needs an AttnConfig")
    if cfg.unmasked_conv:
        raise ConfigError("the leaky (unmasked) convolution has no streaming form")
    d, k = cfg.head_dim, cfg.conv_kernel
    if taps is None:
        taps = np.zeros((k, d))
    taps = np.asarray(taps, dtype=np.float64)
    if taps.shape != (k, d):
        raise DimensionError(f"taps must be ({k}, {d}), got {taps.shape}")
    return DecodeState(
        cfg=cfg,
        taps=taps,
        S=np.zeros((d, d)),
        group_K=np.zeros((0, d)),
        group_V=np.zeros((0, d)),
        conv_tail=np.zeros((k - 1, d)),
    )


def fold_group(state: DecodeState) -> None:
    """Add the full open group's ``phi(K)^T V`` to ``S`` and clear it."""
    if state.group_K.shape[0] != state.cfg.group_size:
        raise ContractError(
            f"fold_group needs {state.cfg.group_size} buffered rows, has {state.group_K.shape[0]}"
        )
    state.S = state.S + feature_map(state.group_K, state.cfg.feature_map).T @ state.group_V
    d = state.cfg.head_dim
    state.group_K = np.zeros((0, d))
    state.group_V = np.zeros((0, d))


def commit_row(state: DecodeState, k_row, v_row) -> None:
    """Append one token's key/value, roll the conv tail, fold if the group filled."""
    state.group_K = np.vstack([state.group_K, k_row[None, :]])
    state.group_V = np.vstack([state.group_V, v_row[None, :]])
    if state.conv_tail.shape[0]:
        state.conv_tail = np.vstack([state.conv_tail[1:], v_row[None, :]])
    state.pos += 1
    if state.group_K.shape[0] == state.cfg.group_size:
        fold_group(state)


def _global_scale(state: DecodeState) -> float:
    if state.cfg.global_scale == "inverse_count":
        return 1.0 / state.folded if state.folded else 0.0
    return 1.0


def _check_row(state: DecodeState, *rows) -> list[Tensor]:
    d = state.cfg.head_dim
    out = []
    for r in rows:
        r = np.asarray(r, dtype=np.float64).reshape(-1)
        if r.shape != (d,):
            raise DimensionError(f"expected a row of width {d}, got {np.shape(r)}")
        out.append(r)
    return out


def step_output(state: DecodeState, q, k_row, v_row) -> Tensor:
    """Output for the next token without committing it."""
    cfg = state.cfg
    keys = np.vstack([state.group_K, k_row[None, :]])
    vals = np.vstack([state.group_V, v_row[None, :]])
    p = row_softmax(keys @ q, 1.0 / np.sqrt(cfg.head_dim))
    local = p @ vals
    glob = (feature_map(q, cfg.feature_map) @ state.S) * _global_scale(state)
    window = np.vstack([state.conv_tail, v_row[None, :]])
    conv = (state.taps * window).sum(axis=0)
    return local + cfg.alpha * glob + conv


def decode_step(state: DecodeState, q, k_row, v_row) -> Tensor:
    """Emit the output for one new token, then commit it into ``state``."""
    q, k_row, v_row = _check_row(state, q, k_row, v_row)
    out = step_output(state, q, k_row, v_row)
    commit_row(state, k_row, v_row)
    return out


def prefill(state: DecodeState, Q, K, V) -> Tensor:
    """Batched equivalent of ``len(Q)`` calls to :func:`decode_step`.

    The open group rows are prepended so group boundaries line up with the
    absolute token positions; the conv tail serves as left context.
    """
    cfg = state.cfg
    d = cfg.head_dim
    Q, K, V = (np.asarray(x, dtype=np.float64) for x in (Q, K, V))
    if Q.ndim != 2 or Q.shape[1] != d or K.shape != Q.shape or V.shape != Q.shape:
        raise DimensionError(f"prefill expects three (n, {d}) arrays")
    n = Q.shape[0]
    if n == 0:
        return np.zeros((0, d))
    b = state.group_K.shape[0]
    Qc = np.vstack([np.zeros((b, d)), Q])
    Kc = np.vstack([state.group_K, K])
    Vc = np.vstack([state.group_V, V])
    local, _ = local_group_attention_forward(Qc, Kc, Vc, cfg.group_size)
    glob, _ = grouped_global_la_forward(
        Qc, Kc, Vc, cfg.group_size, cfg.feature_map, cfg.global_scale,
        S0=state.S, folded0=state.folded,
    )
    context = state.conv_tail if cfg.conv_kernel > 1 else None
    conv = masked_dwconv_forward(V, state.taps, context=context)
    out = local[b:] + cfg.alpha * glob[b:] + conv

    G = cfg.group_size
    full = (b + n) // G
    for g in range(full):
        state.group_K = Kc[g * G : (g + 1) * G]
        state.group_V = Vc[g * G : (g + 1) * G]
        fold_group(state)
    state.group_K = Kc[full * G :].copy()
    state.group_V = Vc[full * G :].copy()
    k = cfg.conv_kernel
    if k > 1:
        state.conv_tail = np.vstack([state.conv_tail, V])[-(k - 1) :].copy()
    state.pos += n
    return out
