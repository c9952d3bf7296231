"""Prefill cost against sequence length.

The augmented layer does a fixed amount of work per token (one group of
softmax attention, one KV-state product, k convolution taps), so its time
grows linearly. Full softmax attention grows quadratically. Lengths are kept
modest so the script finishes quickly; the command
``augla bench --seq 1024,8192`` runs the full comparison.
"""

from augla import AttnConfig
from augla.bench import BENCH_HEADER, bench_prefill, to_csv

cfg = AttnConfig(d_model=128, n_heads=2, group_size=64, conv_kernel=63)
rows = bench_prefill([512, 1024, 2048, 4096], cfg, repeats=2)
print(to_csv(rows, BENCH_HEADER))
by = {(r["variant"], r["seq_len"]): r["ms_p50"] for r in rows}
for v in ("augmented", "quadratic"):
    print(f"{v}: 8x longer input costs {by[v, 4096] / by[v, 512]:.1f}x the time")
