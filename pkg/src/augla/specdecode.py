"""Tree speculative decoding on top of a :class:`~augla.decode.DecodeState`.

Candidate tokens form a tree whose nodes are stored in topological order
(parents before children). Node ``x`` at depth ``d`` sits at absolute
position ``state.pos + d - 1``. All candidates are evaluated in a single
pass that only reads the committed state; nothing is written until
:func:`commit_path` receives the verified rows.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .decode import DecodeState, commit_row, decode_step
from .errors import ConfigError, ConsistencyError, DimensionError, StructureError
from .features import feature_map
from .tensor import NEG_FILL, Tensor, fill_value, row_softmax

ROOT = -1
DEFAULT_MAX_DEPTH = 8


@dataclass(frozen=True)
class SpecTree:
    """Parent-indexed candidate tree. ``parents[i] == ROOT`` marks a depth-1 node."""

    parents: tuple
    tokens: tuple
    max_depth: int = DEFAULT_MAX_DEPTH
    depth: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        tokens = tuple(int(t) for t in self.tokens)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "tokens", tokens)
        if not parents:
            raise StructureError("a speculation tree needs at least one node")
        if len(tokens) != len(parents):
            raise StructureError(f"{len(parents)} parents but {len(tokens)} tokens")
        depth = []
        for i, p in enumerate(parents):
            if p != ROOT and not 0 <= p < i:
                raise StructureError(f"node {i} has parent {p}; parents must precede children")
            depth.append(1 if p == ROOT else depth[p] + 1)
        object.__setattr__(self, "depth", tuple(depth))
        if max(depth) > self.max_depth:
            raise ConfigError(f"tree depth {max(depth)} exceeds max_depth={self.max_depth}")

    def __len__(self) -> int:
        return len(self.parents)

    def children(self, node: int = ROOT) -> list[int]:
        return [i for i, p in enumerate(self.parents) if p == node]

    def path_to(self, node: int) -> list[int]:
        """Node indices from depth 1 down to ``node``."""
        path = []
        while node != ROOT:
            path.append(node)
            node = self.parents[node]
        return path[::-1]

    def leaves(self) -> list[int]:
        has_child = set(p for p in self.parents if p != ROOT)
        return [i for i in range(len(self)) if i not in has_child]

    def root_paths(self) -> list[list[int]]:
        return [self.path_to(leaf) for leaf in self.leaves()]


@dataclass
class VerifyResult:
    accepted: list
    bonus_token: int


# ------------------------------------------------------------- construction


def tree_from_child_counts(levels, tokens=None, max_depth: int = DEFAULT_MAX_DEPTH) -> SpecTree:
    """Build a tree breadth-first from per-level child counts.

    ``levels[0]`` is ``[n_root_children]``; ``levels[i]`` lists the child count
    of every node at depth ``i`` in order.
    """
    parents = []
    frontier = [ROOT]
    for counts in levels:
        if len(counts) != len(frontier):
            raise StructureError(f"level lists {len(counts)} counts for {len(frontier)} nodes")
        nxt = []
        for parent, c in zip(frontier, counts):
            for _ in range(int(c)):
                nxt.append(len(parents))
                parents.append(parent)
        frontier = nxt
    if tokens is None:
        tokens = [0] * len(parents)
    return SpecTree(tuple(parents), tuple(tokens), max_depth)


def fan_out_levels(fan_out) -> list[list[int]]:
    """Expand ``[3, 2, 1]`` into per-level child counts."""
    fan_out = [int(f) for f in fan_out]
    if not fan_out or any(f < 1 for f in fan_out):
        raise ConfigError("fan_out must be a nonempty list of positive integers")
    levels, width = [], 1
    for f in fan_out:
        levels.append([f] * width)
        width *= f
    return levels


def reference_tree_64(tokens=None) -> SpecTree:
    """A fixed depth-4 tree with 64 nodes and 42 leaves."""
    levels = [
        [8],
        [3, 3, 3, 3, 2, 2, 2, 2],
        [3, 3, 3, 3, 2, 2, 2, 2] + [0] * 12,
        [3, 3, 3, 3, 2, 2] + [0] * 14,
        [0] * 16,
    ]
    return tree_from_child_counts(levels, tokens)


_FANOUT_RE = re.compile(r"^(?:fan_?out:)?(\d+(?:,\d+)*)$")
_PARENTS_RE = re.compile(r"^parents:((?:-1|r|\d+)(?:,(?:-1|r|\d+))*)$")


def parse_tree_spec(text: str) -> list[int]:
    """Parse a textual tree topology into a parent list.

    Grammar (whitespace is ignored)::

        spec     := fanout | parents
        fanout   := ["fanout:"] INT ("," INT)*          e.g. "4,2,2"
        parents  := "parents:" PARENT ("," PARENT)*     e.g. "parents: r, r, 0, 0, 1"
        PARENT   := "r" | "-1" | INT                    (r / -1 = attached to the root)
    """
    compact = re.sub(r"\s+", "", text).lower()
    m = _FANOUT_RE.match(compact)
    if m:
        levels = fan_out_levels(m.group(1).split(","))
        return list(tree_from_child_counts(levels, max_depth=len(levels)).parents)
    m = _PARENTS_RE.match(compact)
    if m:
        parents = [ROOT if p in ("r", "-1") else int(p) for p in m.group(1).split(",")]
        # validate structure, depth limit is checked by the caller
        SpecTree(tuple(parents), (0,) * len(parents), max_depth=len(parents))
        return parents
    raise StructureError(f"cannot parse tree spec {text!r}")


def draft_stub(context, fan_out, vocab_size: int = 16, seed: int = 0,
               max_depth: int = DEFAULT_MAX_DEPTH) -> SpecTree:
    """Deterministic pseudo-random proposal tree shaped by ``fan_out``.

    Tokens come from a generator seeded by ``seed`` and the context tokens,
    so the same context always yields the same tree. Siblings get distinct
    tokens when the vocabulary allows it.
    """
    if isinstance(fan_out, str):
        parents = parse_tree_spec(fan_out)
    else:
        if len(fan_out) == 0:
            raise ConfigError("fan_out must be nonempty")
        parents = list(tree_from_child_counts(fan_out_levels(fan_out), max_depth=len(fan_out)).parents)
    ctx = [int(t) for t in (context or [])]
    gen = np.random.default_rng([seed, len(ctx)] + ctx[-16:])
    tokens = [0] * len(parents)
    by_parent: dict[int, list[int]] = {}
    for i, p in enumerate(parents):
        by_parent.setdefault(p, []).append(i)
    for sibs in by_parent.values():
        replace = len(sibs) > vocab_size
        for i, t in zip(sibs, gen.choice(vocab_size, size=len(sibs), replace=replace)):
            tokens[i] = int(t)
    return SpecTree(tuple(parents), tuple(tokens), max_depth)


# ------------------------------------------------------------------ masking


def tree_mask(tree: SpecTree) -> Tensor:
    """``mask[i, j]`` is true iff ``j`` is ``i`` or an ancestor of ``i``."""
    if not isinstance(tree, SpecTree):
        raise StructureError("tree_mask expects a SpecTree")
    m = len(tree)
    mask = np.zeros((m, m), dtype=bool)
    for i, p in enumerate(tree.parents):
        if p != ROOT:
            mask[i] = mask[p]
        mask[i, i] = True
    return mask


def _conv_index(tree: SpecTree, k: int) -> np.ndarray:
    """Row indices into ``[zero, tail_0 .. tail_{k-2}, node_0 .. node_{m-1}]``."""
    m = len(tree)
    base = k  # first node row
    root = np.arange(k)  # zero row, then the committed tail oldest -> newest
    idx = np.empty((m, k), dtype=np.intp)
    for i, p in enumerate(tree.parents):
        prev = root if p == ROOT else idx[p]
        idx[i, :-1] = prev[1:]
        idx[i, -1] = base + i
    return idx


def unfold_conv_rows(tree: SpecTree, node_V, state: DecodeState) -> Tensor:
    """Gather the ``k`` most recent value rows along each node's root path.

    Block ``x`` is (committed tail ... ancestors ..., V[x]) with the newest
    row last, so ``(blocks * taps).sum(1)`` is the causal convolution along
    every path. Siblings never appear in each other's blocks.
    """
    node_V = np.asarray(node_V, dtype=np.float64)
    k, d = state.cfg.conv_kernel, state.cfg.head_dim
    if node_V.shape != (len(tree), d):
        raise DimensionError(f"node_V must be ({len(tree)}, {d}), got {node_V.shape}")
    table = np.vstack([np.zeros((1, d)), state.conv_tail, node_V])
    return table[_conv_index(tree, k)]


# ------------------------------------------------------------- tree forward


def _check_nodes(state: DecodeState, tree: SpecTree, Q, K, V):
    d = state.cfg.head_dim
    Q, K, V = (np.asarray(x, dtype=np.float64) for x in (Q, K, V))
    for name, x in (("Q", Q), ("K", K), ("V", V)):
        if x.shape != (len(tree), d):
            raise DimensionError(f"{name} must be ({len(tree)}, {d}), got {x.shape}")
    return Q, K, V


def tree_attention_forward(state: DecodeState, tree: SpecTree, Q, K, V, W=None,
                           max_depth: int | None = None, stats: dict | None = None) -> Tensor:
    """Augmented attention outputs for every tree node in one pass.

    Local branch: softmax over the node's visible tokens in its own group
    (open-group rows from the state plus same-group ancestors). Global
    branch: ``phi(q) @ S`` plus the contribution of visible tokens lying in
    groups that completed during speculation, applied as a masked linear
    attention instead of a per-node copy of ``S``. Conv branch: taps applied
    to the unfolded path windows. ``state`` is only read.
    """
    cfg = state.cfg
    limit = tree.max_depth if max_depth is None else max_depth
    if max(tree.depth) > limit:
        raise ConfigError(f"tree depth {max(tree.depth)} exceeds max_depth={limit}")
    Q, K, V = _check_nodes(state, tree, Q, K, V)
    taps = state.taps if W is None else np.asarray(W, dtype=np.float64)
    if taps.shape != state.taps.shape:
        raise DimensionError(f"taps must be {state.taps.shape}, got {taps.shape}")
    if stats is not None:
        stats["qkv_rows"] = stats.get("qkv_rows", 0) + len(tree)

    G = cfg.group_size
    b = state.group_K.shape[0]
    open_group = state.pos // G
    node_group = (state.pos + np.asarray(tree.depth) - 1) // G
    ctx_group = np.concatenate([np.full(b, open_group), node_group])
    visible = np.hstack([np.ones((len(tree), b), dtype=bool), tree_mask(tree)])
    same = visible & (ctx_group[None, :] == node_group[:, None])
    earlier = visible & (ctx_group[None, :] < node_group[:, None])

    Kc = np.vstack([state.group_K, K])
    Vc = np.vstack([state.group_V, V])

    scores = Q @ Kc.T
    scores = np.where(same, scores, fill_value(NEG_FILL, scores.dtype))
    local = row_softmax(scores, 1.0 / np.sqrt(cfg.head_dim)) @ Vc

    phiQ = feature_map(Q, cfg.feature_map)
    phiK = feature_map(Kc, cfg.feature_map)
    glob = phiQ @ state.S + ((phiQ @ phiK.T) * earlier) @ Vc
    if cfg.global_scale == "inverse_count":
        counts = node_group * G
        glob = glob * np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)[:, None]

    blocks = unfold_conv_rows(tree, V, state)
    conv = np.einsum("mkd,kd->md", blocks, taps)
    return local + cfg.alpha * glob + conv


def decode_paths_independently(state: DecodeState, tree: SpecTree, Q, K, V, W=None,
                               stats: dict | None = None, atol: float = 1e-10) -> Tensor:
    """Per-path baseline: clone the state for every root path and decode it.

    Shared prefixes are recomputed once per path; their results must agree
    across paths to ``atol``.
    """
    Q, K, V = _check_nodes(state, tree, Q, K, V)
    base = state
    if W is not None:
        base = state.clone()
        base.taps = np.asarray(W, dtype=np.float64)
    out = np.full((len(tree), state.cfg.head_dim), np.nan)
    done = np.zeros(len(tree), dtype=bool)
    for path in tree.root_paths():
        Qp, Kp, Vp = Q[path], K[path], V[path]
        if stats is not None:
            stats["qkv_rows"] = stats.get("qkv_rows", 0) + len(path)
        s = base.clone()
        for i, node in enumerate(path):
            row = decode_step(s, Qp[i], Kp[i], Vp[i])
            if done[node]:
                if np.max(np.abs(out[node] - row)) > atol:
                    raise ConsistencyError(f"node {node} differs between paths")
            else:
                out[node] = row
                done[node] = True
    return out


# ------------------------------------------------------- verify and commit


def verify_greedy(tree: SpecTree, verifier_argmax, root_argmax: int) -> VerifyResult:
    """Walk down from the root accepting the child that matches the verifier.

    Ties between matching siblings go to the lowest node index. The token
    the verifier predicts at the stopping point is returned as the bonus.
    """
    verifier_argmax = [int(t) for t in verifier_argmax]
    if len(verifier_argmax) != len(tree):
        raise DimensionError(f"need one verifier token per node ({len(tree)})")
    kids: dict[int, list[int]] = {}
    for i, p in enumerate(tree.parents):
        kids.setdefault(p, []).append(i)
    accepted = []
    node, target = ROOT, int(root_argmax)
    while True:
        match = next((c for c in kids.get(node, []) if tree.tokens[c] == target), None)
        if match is None:
            break
        accepted.append(match)
        node, target = match, verifier_argmax[match]
    return VerifyResult(accepted, target)


def commit_path(state: DecodeState, K_rows, V_rows) -> None:
    """Commit verified key/value rows in path order, exactly like decode steps."""
    d = state.cfg.head_dim
    K_rows = np.asarray(K_rows, dtype=np.float64).reshape(-1, d)
    V_rows = np.asarray(V_rows, dtype=np.float64).reshape(-1, d)
    if K_rows.shape != V_rows.shape:
        raise DimensionError("K and V row counts differ")
    for k_row, v_row in zip(K_rows, V_rows):
        commit_row(state, k_row, v_row)
