"""Evaluating a tree of candidate continuations in one pass.

Token t0 is already committed. A draft proposes two rival tokens for the
next position (a and b) and a follow-up c after a. All three are evaluated
together: each node only sees its own ancestors, and its convolution window
is gathered along its own root path. The result matches decoding each path
separately, and committing the accepted path yields the same state as
sequential decoding.
"""

import numpy as np

from augla import (
    AttnConfig,
    SpecTree,
    commit_path,
    decode_step,
    init_state,
    prefill,
    tree_attention_forward,
    tree_mask,
    unfold_conv_rows,
    verify_greedy,
)
from augla.specdecode import ROOT

rng = np.random.default_rng(2)
cfg = AttnConfig(d_model=4, group_size=2, conv_kernel=2)
state = init_state(cfg, rng.normal(size=(2, 4)))
prefill(state, *rng.normal(size=(3, 3, 4)))  # t0 is the last of these

a, b, c = 0, 1, 2
tree = SpecTree((ROOT, ROOT, a), tokens=(5, 7, 9))
print("visibility (row attends to column):\n", tree_mask(tree).astype(int))

Q, K, V = rng.normal(size=(3, 3, 4))
blocks = unfold_conv_rows(tree, V, state)
print("conv window of b is [t0, b]:", np.allclose(blocks[b], [state.conv_tail[-1], V[b]]))
print("conv window of c is [a, c]: ", np.allclose(blocks[c], [V[a], V[c]]))

out = tree_attention_forward(state, tree, Q, K, V)
for path in tree.root_paths():
    s = state.clone()
    seq = np.array([decode_step(s, Q[i], K[i], V[i]) for i in path])
    print(f"path {path}: max diff vs sequential {np.abs(out[path] - seq).max():.1e}")

# pretend the verifier predicts token 5 after t0 and 9 after a
res = verify_greedy(tree, verifier_argmax=[9, 3, 4], root_argmax=5)
print("accepted nodes:", res.accepted, "bonus token:", res.bonus_token)
committed, seq = state.clone(), state.clone()
commit_path(committed, K[res.accepted], V[res.accepted])
for i in res.accepted:
    decode_step(seq, Q[i], K[i], V[i])
print("committed state equals sequential state:", committed.fields_equal(seq))
