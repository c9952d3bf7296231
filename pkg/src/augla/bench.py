"""Timing harnesses behind the ``bench``, ``spec-bench`` and ``train-demo`` commands.

Every function returns plain rows (lists of dicts) so callers can write CSV
or assert on the numbers directly. Timing uses ``time.perf_counter``; peak
memory is measured in a separate, untimed call under ``tracemalloc`` so the
tracing overhead never leaks into the latency columns.
"""

import csv
import io
import time
import tracemalloc
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from multiprocessing import get_context

import numpy as np

from .augmented import multi_head_augmented
from .decode import init_state, prefill
from .model import init_model
from .reference import AttnConfig, softmax_attention_ref
from .specdecode import decode_paths_independently, tree_attention_forward
from .train import chance_accuracy, leakage_config, train_synthetic

BENCH_HEADER = ("variant", "seq_len", "ms_mean", "ms_p50", "mem_bytes")
SPEC_HEADER = ("mode", "nodes", "leaves", "ms_mean")
TRAIN_HEADER = ("step", "loss", "eval_accuracy", "train_accuracy", "chance", "leaky")
VARIANTS = ("augmented", "quadratic")
DTYPES = {"f64": np.float64, "f32": np.float32}

# Query rows per block for the quadratic reference; bounds its score matrix
# to block x n entries so that n = 8192 fits in a few hundred MB.
QUADRATIC_BLOCK = 1024


def to_csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in header})
    return buf.getvalue()


def _timeit(fn, repeats):
    fn()  # warm-up (allocator, BLAS threads)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.mean(times)), float(np.median(times))


def _peak_bytes(fn):
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def quadratic_prefill(X, Wq, Wk, Wv, Wo, n_heads, block_rows=QUADRATIC_BLOCK):
    """Multi-head causal softmax attention with the same projections."""
    n, d = X.shape
    dk = d // n_heads
    # (heads, n, dk) with each head contiguous, as the augmented path uses
    Q, K, V = (np.ascontiguousarray((X @ w).reshape(n, n_heads, dk).transpose(1, 0, 2)) for w in (Wq, Wk, Wv))
    heads = [softmax_attention_ref(Q[h], K[h], V[h], causal=True, block_rows=block_rows) for h in range(n_heads)]
    return np.concatenate(heads, axis=-1) @ Wo


def prefill_callables(cfg: AttnConfig, n: int, seed=0, dtype="f64"):
    """Closures running one prefill of length ``n`` for each variant."""
    gen = np.random.default_rng([seed, n])
    dt = DTYPES[dtype]
    d, h = cfg.d_model, cfg.n_heads
    X = gen.normal(size=(n, d)).astype(dt)
    Wq, Wk, Wv, Wo = (gen.uniform(-1, 1, size=(d, d)) / np.sqrt(d) for _ in range(4))
    Wq, Wk, Wv, Wo = (w.astype(dt) for w in (Wq, Wk, Wv, Wo))
    Wc = (gen.uniform(-1, 1, size=(h, cfg.conv_kernel, d // h)) / np.sqrt(cfg.conv_kernel)).astype(dt)
    return {
        "augmented": lambda: multi_head_augmented(X, Wq, Wk, Wv, Wo, Wc, cfg),
        "quadratic": lambda: quadratic_prefill(X, Wq, Wk, Wv, Wo, h),
    }


def _measure_prefill(cfg: AttnConfig, n: int, variant: str, repeats: int, seed, dtype, measure_memory):
    fn = prefill_callables(cfg, n, seed, dtype)[variant]
    mean, p50 = _timeit(fn, repeats)
    mem = _peak_bytes(fn) if measure_memory else 0
    return dict(variant=variant, seq_len=n, ms_mean=round(mean, 3), ms_p50=round(p50, 3), mem_bytes=int(mem))


def bench_prefill(seq_lens, cfg: AttnConfig | None = None, repeats=3, seed=0, dtype="f64",
                  variants=VARIANTS, measure_memory=True, isolate=True):
    """Rows of ``variant, seq_len, ms_mean, ms_p50, mem_bytes``.

    With ``isolate`` every (variant, length) pair is measured in a fresh
    interpreter, one after another, so allocator state left behind by
    earlier work cannot skew the comparison between lengths.
    """
    cfg = cfg or AttnConfig(d_model=256, n_heads=4, group_size=64, conv_kernel=63)
    rows = []
    for n in seq_lens:
        for v in variants:
            args = (cfg, int(n), v, repeats, seed, dtype, measure_memory)
            if isolate:
                with ProcessPoolExecutor(max_workers=1, mp_context=get_context("spawn")) as pool:
                    rows.append(pool.submit(_measure_prefill, *args).result())
            else:
                rows.append(_measure_prefill(*args))
    return rows


def spec_setup(tree, cfg: AttnConfig | None = None, history=100, seed=0):
    """A decode state with ``history`` committed tokens plus Q/K/V rows for ``tree``."""
    cfg = cfg or AttnConfig(d_model=64, group_size=64, conv_kernel=63)
    gen = np.random.default_rng(seed)
    d = cfg.d_model
    state = init_state(cfg, gen.normal(size=(cfg.conv_kernel, d)) / cfg.conv_kernel)
    if history:
        prefill(state, *gen.normal(size=(3, history, d)))
    Q, K, V = gen.normal(size=(3, len(tree), d))
    return state, Q, K, V


def bench_spec(tree, rounds=100, cfg: AttnConfig | None = None, history=100, seed=0):
    """Rows of ``mode, nodes, leaves, ms_mean`` for one tree evaluated ``rounds`` times."""
    state, Q, K, V = spec_setup(tree, cfg, history=history, seed=seed)
    runs = {
        "tree": lambda: tree_attention_forward(state, tree, Q, K, V),
        "per-path": lambda: decode_paths_independently(state, tree, Q, K, V, atol=np.inf),
    }
    rows = []
    for mode, fn in runs.items():
        mean, _ = _timeit(fn, rounds)
        rows.append(dict(mode=mode, nodes=len(tree), leaves=len(tree.leaves()), ms_mean=round(mean, 4)))
    return rows


def train_demo(task="copy", leaky=False, steps=1000, lr=0.3, seed=0, alpha=None, group=None,
               kernel=None, base=None, log_every=0):
    """Train the leakage toy model once and return per-step CSV rows.

    The eval and training accuracies are only known at the end, so every row
    repeats them; ``step`` and ``loss`` carry the curve.
    """
    cfg = replace(base, unmasked_conv=leaky) if base is not None else leakage_config(leaky, seed)
    changes = {k: v for k, v in (("alpha", alpha), ("group_size", group), ("conv_kernel", kernel)) if v is not None}
    cfg = replace(cfg, **changes)
    res = train_synthetic(init_model(cfg), task=task, steps=steps, lr=lr, seed=seed, log_every=log_every)
    return [
        dict(step=s, loss=f"{loss:.6g}", eval_accuracy=f"{res.eval_accuracy:.4f}",
             train_accuracy=f"{res.train_accuracy:.4f}", chance=f"{chance_accuracy(cfg.vocab_size):.4f}",
             leaky=int(leaky))
        for s, loss in zip(res.steps, res.losses)
    ], res
