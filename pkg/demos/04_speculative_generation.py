"""Speculative generation on the toy transformer.

Greedy generation, full recomputation and tree-speculative generation all
emit the same tokens. With a random draft few candidates are accepted; with
the model drafting for itself every drafted token is accepted and each round
yields several tokens.
"""

import numpy as np

from augla import ModelConfig, generate_greedy, generate_recompute, generate_speculative, init_model
from augla.model import self_draft

model = init_model(ModelConfig(vocab_size=16, d_model=32, n_heads=2, n_layers=2, group_size=4, conv_kernel=5))
prompt = np.random.default_rng(3).integers(0, 16, size=6)

greedy = generate_greedy(model, prompt, 24)
print("greedy   :", greedy)
print("recompute matches:", generate_recompute(model, prompt, 24) == greedy)

for spec in ("4,2,2", "parents: r, r, 0, 0, 1"):
    toks, stats = generate_speculative(model, prompt, 24, tree_spec=spec)
    print(f"tree {spec!r}: same tokens {toks == greedy}, rounds {stats.rounds}, "
          f"tokens/round {stats.tokens_per_round:.2f}")

toks, stats = generate_speculative(model, prompt, 24, draft=self_draft(model, 4))
print(f"self-draft depth 4: same tokens {toks == greedy}, accepted per round {stats.accepted_lengths}")
