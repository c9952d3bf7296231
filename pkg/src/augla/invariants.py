"""Randomised equivalence checks against the loop oracles.

Each ``check_*`` function draws its own seeded cases and returns a
:class:`CheckResult` carrying the worst error seen. The ``invariants``
command runs them at reduced counts; the acceptance tests run them at
full size.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from .augmented import (
    augmented_attention_forward,
    grouped_global_la_forward,
    multi_head_augmented_backward,
    multi_head_augmented_forward,
)
from .decode import decode_step, init_state, prefill
from .model import (
    ModelConfig,
    backward,
    cross_entropy,
    forward,
    generate_greedy,
    generate_speculative,
    init_model,
)
from .oracles import augmented_oracle, random_config
from .reference import AttnConfig, causal_linear_attention_ref
from .specdecode import ROOT, SpecTree, commit_path, tree_attention_forward


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn):
    def run(*args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - t0
        return res

    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


def random_tree(gen, max_depth=4, max_branch=3, vocab=16) -> SpecTree:
    parents, frontier = [], [ROOT]
    for _ in range(int(gen.integers(1, max_depth + 1))):
        nxt = []
        for p in frontier:
            low = 1 if p == ROOT else 0
            for _ in range(int(gen.integers(low, max_branch + 1))):
                nxt.append(len(parents))
                parents.append(p)
        if not nxt:
            break
        frontier = nxt
    return SpecTree(tuple(parents), tuple(int(t) for t in gen.integers(0, vocab, size=len(parents))))


@_timed
def check_branch_sum(n_configs=200, n_max=64, seed=0, tol=1e-12) -> CheckResult:
    """Vectorised forward against the sum of the three loop oracles."""
    gen = np.random.default_rng([seed, 1])
    worst = 0.0
    for i in range(n_configs):
        cfg, n = random_config(gen, n_max)
        if i % 2:
            cfg = replace(cfg, unmasked_conv=True)
        d = cfg.d_model
        Q, K, V = gen.normal(size=(3, n, d))
        W = gen.normal(size=(cfg.conv_kernel, d))
        out, _ = augmented_attention_forward(Q, K, V, W, cfg)
        worst = max(worst, float(np.abs(out - augmented_oracle(Q, K, V, W, cfg)).max()))
    return CheckResult("branch-sum", worst <= tol, f"{n_configs} configs, max err {worst:.2e} <= {tol:g}")


@_timed
def check_prefill_decode(n=512, groups=(1, 2, 3, 64), kernels=(1, 3, 63), n_splits=30, seed=0,
                         tol=1e-10) -> CheckResult:
    """Stepwise decode vs one-shot forward over a (G, k) grid, plus split prefills."""
    gen = np.random.default_rng([seed, 2])
    worst = 0.0
    state_ok = True
    for G in groups:
        for k in kernels:
            cfg = AttnConfig(d_model=4, group_size=G, conv_kernel=k, alpha=float(gen.uniform(0, 2)),
                             feature_map="elu_plus_one")
            W = gen.normal(size=(k, 4))
            Q, K, V = gen.normal(size=(3, n, 4))
            ref, _ = augmented_attention_forward(Q, K, V, W, cfg)
            s = init_state(cfg, W)
            steps = np.array([decode_step(s, Q[t], K[t], V[t]) for t in range(n)])
            worst = max(worst, float(np.abs(steps - ref).max()))
            whole = init_state(cfg, W)
            prefill(whole, Q, K, V)
            state_ok &= whole.fields_equal(s, atol=tol)
    for _ in range(n_splits):
        cfg, _ = random_config(gen, 1)
        n_s = int(gen.integers(1, 200))
        cuts = np.sort(gen.integers(0, n_s + 1, size=int(gen.integers(1, 4))))
        W = gen.normal(size=(cfg.conv_kernel, cfg.d_model))
        Q, K, V = gen.normal(size=(3, n_s, cfg.d_model))
        ref, _ = augmented_attention_forward(Q, K, V, W, cfg)
        s = init_state(cfg, W)
        bounds = [0, *cuts.tolist(), n_s]
        out = np.vstack([prefill(s, Q[a:b], K[a:b], V[a:b]) for a, b in zip(bounds, bounds[1:])])
        worst = max(worst, float(np.abs(out - ref).max()))
    ok = worst <= tol and state_ok
    return CheckResult("prefill-decode", ok,
                       f"n={n} grid {len(groups)}x{len(kernels)} + {n_splits} split cases, max err {worst:.2e}"
                       f"{'' if state_ok else ', state mismatch'}")


@_timed
def check_tree_sequential(n_trees=500, seed=0, tol=1e-10) -> CheckResult:
    """Every root path of a random tree against cloned sequential decode, then commit."""
    gen = np.random.default_rng([seed, 3])
    worst = 0.0
    commits_ok = True
    for _ in range(n_trees):
        cfg, hist = random_config(gen, 40)
        d = cfg.d_model
        s = init_state(cfg, gen.normal(size=(cfg.conv_kernel, d)))
        prefill(s, *gen.normal(size=(3, hist, d)))
        tree = random_tree(gen)
        Q, K, V = gen.normal(size=(3, len(tree), d))
        out = tree_attention_forward(s, tree, Q, K, V)
        paths = tree.root_paths()
        for path in paths:
            seq = s.clone()
            rows = np.array([decode_step(seq, Q[i], K[i], V[i]) for i in path])
            worst = max(worst, float(np.abs(out[path] - rows).max()))
        path = paths[int(gen.integers(len(paths)))]
        seq = s.clone()
        for i in path:
            decode_step(seq, Q[i], K[i], V[i])
        committed = s.clone()
        commit_path(committed, K[path], V[path])
        commits_ok &= committed.fields_equal(seq)
    ok = worst <= tol and commits_ok
    return CheckResult("tree-sequential", ok,
                       f"{n_trees} trees, max err {worst:.2e}, commit states equal: {commits_ok}")


@_timed
def check_causality(n_cases=1000, seed=0) -> CheckResult:
    """Future perturbations: masked outputs <= t unchanged bitwise, leaky ones move."""
    gen = np.random.default_rng([seed, 4])
    masked_violations = leaky_misses = 0
    for _ in range(n_cases):
        cfg, n = random_config(gen, 48)
        n = max(n, 2)
        cfg = replace(cfg, conv_kernel=max(cfg.conv_kernel, 2))
        d = cfg.d_model
        Q, K, V = gen.normal(size=(3, n, d))
        W = gen.normal(size=(cfg.conv_kernel, d))
        t = int(gen.integers(0, n - 1))
        Q2, K2, V2 = Q.copy(), K.copy(), V.copy()
        for a in (Q2, K2, V2):
            a[t + 1 :] += gen.normal(size=a[t + 1 :].shape)
        for leaky in (False, True):
            c = replace(cfg, unmasked_conv=leaky)
            a = augmented_attention_forward(Q, K, V, W, c)[0][: t + 1]
            b = augmented_attention_forward(Q2, K2, V2, W, c)[0][: t + 1]
            same = np.array_equal(a, b)
            if leaky:
                leaky_misses += same
            else:
                masked_violations += not same
    ok = masked_violations == 0 and leaky_misses == 0
    return CheckResult("causality", ok,
                       f"{n_cases} cases, masked violations {masked_violations}, "
                       f"leaky cases without a violation {leaky_misses}")


def central_diff(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic, numeric, floor=1e-8):
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.where(diff <= floor, 0.0, diff / scale).max())


@_timed
def check_gradients(n_configs=10, n_max=8, seed=0, tol=1e-4) -> CheckResult:
    """Multi-head backward against central differences for every input and weight."""
    gen = np.random.default_rng([seed, 5])
    worst = worst_abs = 0.0
    for i in range(n_configs):
        h = int(gen.integers(1, 3))
        dk = int(gen.integers(1, 4))
        base, _ = random_config(gen, 1)
        cfg = replace(base, d_model=h * dk, n_heads=h, unmasked_conv=bool(i % 2))
        n, d, k = int(gen.integers(1, n_max + 1)), h * dk, cfg.conv_kernel
        X = gen.normal(size=(n, d))
        Ws = [gen.normal(size=(d, d)) / np.sqrt(d) for _ in range(4)]
        Wc = gen.normal(size=(h, k, dk))
        R = gen.normal(size=(n, d))
        params = [X, *Ws, Wc]

        def loss():
            return float(np.sum(R * multi_head_augmented_forward(X, *Ws, Wc, cfg)[0]))

        _, cache = multi_head_augmented_forward(X, *Ws, Wc, cfg)
        grads = multi_head_augmented_backward(cache, R)
        for p, g in zip(params, grads):
            numeric = central_diff(loss, p)
            worst = max(worst, rel_error(g, numeric))
            worst_abs = max(worst_abs, float(np.abs(g - numeric).max()))
    return CheckResult("gradients", worst < tol,
                       f"{n_configs} configs, max rel err {worst:.2e} < {tol:g} (max abs diff {worst_abs:.1e})")


@_timed
def check_model_gradients(n_configs=10, seed=0, tol=1e-4) -> CheckResult:
    """Every toy-model parameter against central differences of the training loss."""
    gen = np.random.default_rng([seed, 8])
    worst = worst_abs = 0.0
    for i in range(n_configs):
        base, _ = random_config(gen, 1)
        h = int(gen.integers(1, 3))
        cfg = ModelConfig(vocab_size=int(gen.integers(3, 7)), d_model=h * int(gen.integers(1, 4)), n_heads=h,
                          n_layers=int(gen.integers(1, 3)), ffn_mult=int(gen.integers(1, 3)), max_seq=8,
                          group_size=base.group_size, conv_kernel=base.conv_kernel, alpha=base.alpha,
                          feature_map=base.feature_map, global_scale=base.global_scale,
                          unmasked_conv=bool(i % 2), seed=i)
        model = init_model(cfg)
        n = int(gen.integers(1, 9))
        toks = gen.integers(0, cfg.vocab_size, size=(2, n))
        targets = gen.integers(0, cfg.vocab_size, size=(2, n))

        def loss():
            return cross_entropy(forward(model, toks)[0], targets)[0]

        logits, cache = forward(model, toks)
        grads = backward(model, cache, cross_entropy(logits, targets)[1])
        for name, value in model.params.items():
            numeric = central_diff(loss, value)
            worst = max(worst, rel_error(grads[name], numeric))
            worst_abs = max(worst_abs, float(np.abs(grads[name] - numeric).max()))
    return CheckResult("model-gradients", worst < tol,
                       f"{n_configs} toy models, all parameters, max rel err {worst:.2e} < {tol:g} "
                       f"(max abs diff {worst_abs:.1e})")


@_timed
def check_g1_reduction(n_instances=100, seed=0, tol=1e-12) -> CheckResult:
    """With one token per group the global branch is strict-causal linear attention."""
    gen = np.random.default_rng([seed, 6])
    worst = 0.0
    for _ in range(n_instances):
        n, d = int(gen.integers(1, 65)), int(gen.integers(1, 9))
        kind = str(gen.choice(["relu", "elu_plus_one", "identity"]))
        scale = str(gen.choice(["none", "inverse_count"]))
        Q, K, V = gen.normal(size=(3, n, d))
        out, _ = grouped_global_la_forward(Q, K, V, 1, kind, scale)
        ref = causal_linear_attention_ref(Q, K, V, kind, include_current=False, global_scale=scale)
        worst = max(worst, float(np.abs(out - ref).max()))
    return CheckResult("g1-reduction", worst <= tol, f"{n_instances} instances, max err {worst:.2e}")


def _tree_spec_text(gen) -> str:
    if gen.random() < 0.3:
        tree = random_tree(gen, max_depth=4, max_branch=2)
        return "parents: " + ",".join("r" if p == ROOT else str(p) for p in tree.parents)
    return ",".join(str(int(x)) for x in gen.integers(1, 4, size=int(gen.integers(1, 5))))


@_timed
def check_spec_greedy(n_pairs=50, seed=0, n_new=16) -> CheckResult:
    """Speculative generation emits exactly the greedy token stream."""
    gen = np.random.default_rng([seed, 7])
    models = [
        init_model(ModelConfig(vocab_size=8, d_model=16, n_heads=2, n_layers=2, ffn_mult=2, max_seq=64,
                               group_size=G, conv_kernel=k, seed=s))
        for s, (G, k) in enumerate([(1, 1), (3, 4), (4, 2), (8, 13)])
    ]
    mismatches = 0
    for i in range(n_pairs):
        model = models[i % len(models)]
        prompt = gen.integers(0, 8, size=int(gen.integers(1, 12)))
        spec = _tree_spec_text(gen)
        out, _ = generate_speculative(model, prompt, n_new, tree_spec=spec, seed=int(gen.integers(1 << 30)))
        mismatches += out != generate_greedy(model, prompt, n_new)
    return CheckResult("spec-equals-greedy", mismatches == 0, f"{n_pairs} (prompt, tree) pairs, {mismatches} mismatches")


FULL = {
    "branch-sum": (check_branch_sum, {}),
    "prefill-decode": (check_prefill_decode, {}),
    "tree-sequential": (check_tree_sequential, {}),
    "causality": (check_causality, {}),
    "gradients": (check_gradients, {}),
    "model-gradients": (check_model_gradients, {}),
    "g1-reduction": (check_g1_reduction, {}),
    "spec-equals-greedy": (check_spec_greedy, {}),
}

QUICK = {
    "branch-sum": {"n_configs": 40},
    "prefill-decode": {"n": 128, "n_splits": 10},
    "tree-sequential": {"n_trees": 60},
    "causality": {"n_cases": 100},
    "gradients": {"n_configs": 3},
    "model-gradients": {"n_configs": 2},
    "g1-reduction": {"n_instances": 30},
    "spec-equals-greedy": {"n_pairs": 8},
}


def run_all(quick=True, seed=0, only=None) -> list[CheckResult]:
    results = []
    for name, (fn, kw) in FULL.items():
        if only and name not in only:
            continue
        args = {**kw, **(QUICK[name] if quick else {}), "seed": seed}
        results.append(fn(**args))
    return results
