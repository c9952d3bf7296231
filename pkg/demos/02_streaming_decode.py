"""Streaming decode with a bounded state.

A prompt is prefilled in one call, then tokens arrive one at a time. The
state holds the folded KV sum, the still-open group and the last k-1 values,
so its size stops growing however long the stream runs. The state can be
snapshotted to bytes and restored mid-stream.
"""

import numpy as np

from augla import AttnConfig, DecodeState, augmented_attention_forward, decode_step, init_state, prefill

rng = np.random.default_rng(1)
cfg = AttnConfig(d_model=16, group_size=8, conv_kernel=5)
W = rng.normal(size=(cfg.conv_kernel, cfg.d_model)) / cfg.conv_kernel
Q, K, V = rng.normal(size=(3, 200, cfg.d_model))

state = init_state(cfg, W)
outs = [prefill(state, Q[:37], K[:37], V[:37])]
print(f"after prefill: pos={state.pos}, folded={state.folded}, open group rows={state.group_K.shape[0]}")

for t in range(37, 120):
    outs.append(decode_step(state, Q[t], K[t], V[t])[None])

blob = state.to_bytes()
restored = DecodeState.from_bytes(blob, cfg, W)
print(f"snapshot at pos={state.pos}: {len(blob)} bytes")

for t in range(120, 200):
    outs.append(decode_step(restored, Q[t], K[t], V[t])[None])

stream = np.vstack(outs)
batch, _ = augmented_attention_forward(Q, K, V, W, cfg)
print("max |streamed - one-shot| =", np.abs(stream - batch).max())
print("state bytes at the end:", restored.nbytes())
