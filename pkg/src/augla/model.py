"""Toy decoder-only transformer built from augmented attention blocks.

Pre-norm blocks::

    x = x + MultiHeadAugmented(LN(x))
    x = x + W2 @ gelu(W1 @ LN(x))
    logits = LN(x) @ emb.T          # LM head tied to the embedding

Backward passes are written by hand so the package needs nothing beyond
numpy. Generation runs through per-layer, per-head :class:`DecodeState`
objects; speculative generation evaluates whole candidate trees at once.
"""

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .augmented import multi_head_augmented_backward, multi_head_augmented_forward
from .decode import DecodeState, decode_step, init_state, prefill
from .errors import ConfigError, InputError
from .reference import AttnConfig
from .specdecode import (
    ROOT,
    SpecTree,
    commit_path,
    draft_stub,
    tree_attention_forward,
    verify_greedy,
)

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 16
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_mult: int = 4
    max_seq: int = 256
    group_size: int = 8
    conv_kernel: int = 13
    alpha: float = 1.0
    feature_map: str = "relu"
    global_scale: str = "none"
    seed: int = 0
    unmasked_conv: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "ffn_mult", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        self.attn  # validates the attention fields

    @property
    def attn(self) -> AttnConfig:
        return AttnConfig(
            d_model=self.d_model, n_heads=self.n_heads, group_size=self.group_size,
            conv_kernel=self.conv_kernel, alpha=self.alpha, feature_map=self.feature_map,
            global_scale=self.global_scale, unmasked_conv=self.unmasked_conv,
        )


def parse_config_text(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Read flat ``key = value`` lines (``#`` comments) into a :class:`ModelConfig`.

    Keys are the :class:`ModelConfig` field names; unknown keys are errors.
    """
    base = base or ModelConfig()
    types = {f.name: f.type for f in fields(ModelConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line and ":" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.replace(":", "=", 1).split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = types[key]
        try:
            if kind in (bool, "bool"):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                updates[key] = value.lower() in ("true", "1", "yes")
            elif kind in (int, "int"):
                updates[key] = int(value)
            elif kind in (float, "float"):
                updates[key] = float(value)
            else:
                updates[key] = value
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
    return replace(base, **updates)


@dataclass
class ToyModel:
    cfg: ModelConfig
    params: dict = field(repr=False)

    @property
    def attn(self) -> AttnConfig:
        return self.cfg.attn


def init_model(cfg: ModelConfig) -> ToyModel:
    """Seeded uniform init in ``+-1/sqrt(fan_in)``; layer norms start at (1, 0)."""
    gen = np.random.default_rng(cfg.seed)
    d, h = cfg.d_model, cfg.n_heads
    dk, k, hid = d // h, cfg.conv_kernel, cfg.ffn_mult * d

    def uni(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return gen.uniform(-bound, bound, size=shape)

    p = {"emb": uni((cfg.vocab_size, d), d)}
    for i in range(cfg.n_layers):
        p[f"l{i}.ln1.g"] = np.ones(d)
        p[f"l{i}.ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"l{i}.{name}"] = uni((d, d), d)
        p[f"l{i}.wc"] = uni((h, k, dk), k)
        p[f"l{i}.ln2.g"] = np.ones(d)
        p[f"l{i}.ln2.b"] = np.zeros(d)
        p[f"l{i}.w1"] = uni((d, hid), d)
        p[f"l{i}.w2"] = uni((hid, d), hid)
    p["lnf.g"] = np.ones(d)
    p["lnf.b"] = np.zeros(d)
    return ToyModel(cfg, p)


# ------------------------------------------------------------ primitives


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_backward(cache, dy):
    xhat, rstd, g = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


def _gelu(u):
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * u * (1.0 + 0.044715 * u * u)))


def _gelu_grad(u, t=None):
    if t is None:
        t = np.tanh(_GELU_C * u * (1.0 + 0.044715 * u * u))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _flat_t(a, b):
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _check_tokens(model: ToyModel, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size and (not np.issubdtype(tokens.dtype, np.integer)):
        raise InputError("token ids must be integers")
    tokens = tokens.astype(np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.cfg.vocab_size):
        raise InputError(f"token id out of range [0, {model.cfg.vocab_size})")
    return tokens


# --------------------------------------------------------- batched forward


def forward(model: ToyModel, tokens):
    """Logits for ``tokens`` shaped ``(n,)`` or ``(batch, n)``, plus a backward cache."""
    cfg, p = model.cfg, model.params
    tokens = _check_tokens(model, tokens)
    if tokens.ndim not in (1, 2) or tokens.shape[-1] < 1:
        raise InputError("tokens must be a nonempty (n,) or (batch, n) array")
    if tokens.shape[-1] > cfg.max_seq:
        raise InputError(f"sequence length {tokens.shape[-1]} exceeds max_seq={cfg.max_seq}")
    attn = cfg.attn
    x = p["emb"][tokens]
    layers = []
    for i in range(cfg.n_layers):
        h1, ln1 = _ln(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
        a, acache = multi_head_augmented_forward(
            h1, p[f"l{i}.wq"], p[f"l{i}.wk"], p[f"l{i}.wv"], p[f"l{i}.wo"], p[f"l{i}.wc"], attn
        )
        x = x + a
        h2, ln2 = _ln(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
        u = h2 @ p[f"l{i}.w1"]
        t = np.tanh(_GELU_C * u * (1.0 + 0.044715 * u * u))
        act = 0.5 * u * (1.0 + t)
        x = x + act @ p[f"l{i}.w2"]
        layers.append((ln1, acache, ln2, h2, u, t, act))
    hf, lnf = _ln(x, p["lnf.g"], p["lnf.b"])
    logits = hf @ p["emb"].T
    return logits, {"tokens": tokens, "layers": layers, "lnf": lnf, "hf": hf}


def model_prefill(model: ToyModel, tokens) -> np.ndarray:
    """Logits ``(n, vocab)`` for a full token sequence."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise InputError("model_prefill takes a 1-D token sequence")
    return forward(model, tokens)[0]


def backward(model: ToyModel, cache, dlogits) -> dict:
    """Parameter gradients for a :func:`forward` call given ``dL/dlogits``."""
    cfg, p = model.cfg, model.params
    grads = {name: np.zeros_like(v) for name, v in p.items()}
    grads["emb"] += _flat_t(dlogits, cache["hf"])
    dx, grads["lnf.g"], grads["lnf.b"] = _ln_backward(cache["lnf"], dlogits @ p["emb"])
    for i in reversed(range(cfg.n_layers)):
        ln1, acache, ln2, h2, u, t, act = cache["layers"][i]
        grads[f"l{i}.w2"] = _flat_t(act, dx)
        du = (dx @ p[f"l{i}.w2"].T) * _gelu_grad(u, t)
        grads[f"l{i}.w1"] = _flat_t(h2, du)
        dh2, grads[f"l{i}.ln2.g"], grads[f"l{i}.ln2.b"] = _ln_backward(ln2, du @ p[f"l{i}.w1"].T)
        dx = dx + dh2
        dh1, dwq, dwk, dwv, dwo, dwc = multi_head_augmented_backward(acache, dx)
        grads[f"l{i}.wq"], grads[f"l{i}.wk"], grads[f"l{i}.wv"] = dwq, dwk, dwv
        grads[f"l{i}.wo"], grads[f"l{i}.wc"] = dwo, dwc
        dln1, grads[f"l{i}.ln1.g"], grads[f"l{i}.ln1.b"] = _ln_backward(ln1, dh1)
        dx = dx + dln1
    np.add.at(grads["emb"], cache["tokens"], dx)
    return grads


def cross_entropy(logits, targets, mask=None):
    """Mean next-token cross entropy over positions where ``mask`` is true.

    Returns ``(loss, dlogits)``.
    """
    targets = np.asarray(targets)
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    count = max(int(mask.sum()), 1)
    loss = -(picked * mask).sum() / count
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], -1) - 1.0, -1)
    dlogits *= mask[..., None] / count
    return float(loss), dlogits


# --------------------------------------------------------- stateful decode


def new_states(model: ToyModel) -> list[list[DecodeState]]:
    cfg, attn = model.cfg, model.attn
    return [
        [init_state(attn, model.params[f"l{i}.wc"][hd]) for hd in range(cfg.n_heads)]
        for i in range(cfg.n_layers)
    ]


def clone_states(states):
    return [[s.clone() for s in layer] for layer in states]


def _qkv(model, i, h1):
    p, hN = model.params, model.cfg.n_heads
    split = lambda a: np.swapaxes(a.reshape(a.shape[:-1] + (hN, -1)), 0, 1)  # noqa: E731
    return (split(h1 @ p[f"l{i}.{w}"]) for w in ("wq", "wk", "wv"))


def _ffn(model, i, x):
    p = model.params
    h2, _ = _ln(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
    return x + _gelu(h2 @ p[f"l{i}.w1"]) @ p[f"l{i}.w2"]


def _head(model, x):
    p = model.params
    return _ln(x, p["lnf.g"], p["lnf.b"])[0] @ p["emb"].T


def prefill_states(model: ToyModel, states, tokens) -> np.ndarray:
    """Push ``tokens`` through the per-head decode states; returns their logits."""
    p = model.params
    tokens = _check_tokens(model, tokens).reshape(-1)
    if tokens.size == 0:
        return np.zeros((0, model.cfg.vocab_size))
    x = p["emb"][tokens]
    for i, layer in enumerate(states):
        h1, _ = _ln(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
        Q, K, V = _qkv(model, i, h1)
        heads = [prefill(s, Q[hd], K[hd], V[hd]) for hd, s in enumerate(layer)]
        x = x + np.hstack(heads) @ p[f"l{i}.wo"]
        x = _ffn(model, i, x)
    return _head(model, x)


def _tree_forward(model: ToyModel, states, tree: SpecTree):
    """Logits for every tree node plus per-layer ``(K, V)`` per head."""
    p = model.params
    x = p["emb"][np.asarray(tree.tokens)]
    kv = []
    for i, layer in enumerate(states):
        h1, _ = _ln(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
        Q, K, V = _qkv(model, i, h1)
        heads = [tree_attention_forward(s, tree, Q[hd], K[hd], V[hd]) for hd, s in enumerate(layer)]
        kv.append((K, V))
        x = x + np.hstack(heads) @ p[f"l{i}.wo"]
        x = _ffn(model, i, x)
    return _head(model, x), kv


def _check_budget(model: ToyModel, prompt, n_new: int) -> np.ndarray:
    prompt = _check_tokens(model, prompt).reshape(-1)
    if prompt.size == 0:
        raise InputError("prompt must be nonempty")
    if n_new < 0:
        raise InputError("n_new must be >= 0")
    if prompt.size + n_new > model.cfg.max_seq:
        raise InputError(f"prompt + n_new = {prompt.size + n_new} exceeds max_seq={model.cfg.max_seq}")
    return prompt


def _greedy_continue(model: ToyModel, context, n_new: int) -> list[int]:
    if n_new == 0:
        return []
    states = new_states(model)
    tok = int(np.argmax(prefill_states(model, states, context)[-1]))
    out = [tok]
    p = model.params
    while len(out) < n_new:
        x = p["emb"][tok]
        for i, layer in enumerate(states):
            h1, _ = _ln(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
            Q, K, V = _qkv(model, i, h1[None, :])
            heads = [decode_step(s, Q[hd, 0], K[hd, 0], V[hd, 0]) for hd, s in enumerate(layer)]
            x = x + np.concatenate(heads) @ p[f"l{i}.wo"]
            x = _ffn(model, i, x)
        tok = int(np.argmax(_head(model, x)))
        out.append(tok)
    return out


def generate_greedy(model: ToyModel, prompt, n_new: int) -> list[int]:
    """Prefill ``prompt`` then take the argmax token ``n_new`` times."""
    if model.cfg.unmasked_conv:
        raise ConfigError("leaky convolution has no streaming form; use generate_recompute")
    prompt = _check_budget(model, prompt, n_new)
    return _greedy_continue(model, prompt, n_new)


def generate_recompute(model: ToyModel, prompt, n_new: int) -> list[int]:
    """Greedy generation by re-running the full sequence for every new token."""
    seq = list(_check_budget(model, prompt, n_new))
    out = []
    for _ in range(n_new):
        tok = int(np.argmax(model_prefill(model, seq)[-1]))
        out.append(tok)
        seq.append(tok)
    return out


@dataclass
class SpecStats:
    rounds: int = 0
    accepted_lengths: list = field(default_factory=list)

    @property
    def tokens_per_round(self) -> float:
        return (sum(self.accepted_lengths) + self.rounds) / max(self.rounds, 1)


def _prune(tree: SpecTree, max_depth: int) -> SpecTree | None:
    keep = [i for i, dpt in enumerate(tree.depth) if dpt <= max_depth]
    if not keep:
        return None
    remap = {old: new for new, old in enumerate(keep)}
    parents = [ROOT if tree.parents[i] == ROOT else remap[tree.parents[i]] for i in keep]
    return SpecTree(tuple(parents), tuple(tree.tokens[i] for i in keep), tree.max_depth)


def self_draft(model: ToyModel, depth: int):
    """Draft callable proposing the model's own greedy continuation as a chain."""

    def draft(context):
        toks = _greedy_continue(model, context, depth)
        return SpecTree(tuple(range(-1, depth - 1)), tuple(toks), max(depth, 1))

    return draft


def generate_speculative(model: ToyModel, prompt, n_new: int, tree_spec="2,2", draft=None,
                         seed: int = 0):
    """Greedy generation that verifies a tree of drafted tokens per round.

    Each round feeds the last unverified token (the previous bonus) together
    with the drafted subtree under it, accepts the longest matching path,
    commits those rows into the decode states and keeps the verifier's next
    token as the new bonus. Produces exactly the tokens of
    :func:`generate_greedy`.
    """
    if model.cfg.unmasked_conv:
        raise ConfigError("leaky convolution has no streaming form")
    prompt = _check_budget(model, prompt, n_new)
    stats = SpecStats()
    if n_new == 0:
        return [], stats
    if draft is None:
        vocab = model.cfg.vocab_size

        def draft(context):
            return draft_stub(context, tree_spec, vocab_size=vocab, seed=seed)

    states = new_states(model)
    prefill_states(model, states, prompt[:-1])
    pending = int(prompt[-1])
    context = [int(t) for t in prompt]
    out: list[int] = []
    while len(out) < n_new:
        budget = n_new - len(out) - 1
        sub = _prune(draft(context), budget) if budget > 0 else None
        if sub is None:
            parents, tokens, depth_cap = (ROOT,), (pending,), 1
        else:
            parents = (ROOT,) + tuple(0 if q == ROOT else q + 1 for q in sub.parents)
            tokens = (pending,) + sub.tokens
            depth_cap = sub.max_depth + 1
        tree = SpecTree(parents, tokens, depth_cap)
        logits, kv = _tree_forward(model, states, tree)
        argmax = logits.argmax(-1)
        if sub is None:
            accepted, bonus = [], int(argmax[0])
        else:
            res = verify_greedy(sub, argmax[1:], int(argmax[0]))
            accepted, bonus = res.accepted, res.bonus_token
        rows = [0] + [a + 1 for a in accepted]
        for (K, V), layer in zip(kv, states):
            for hd, s in enumerate(layer):
                commit_path(s, K[hd][rows], V[hd][rows])
        new = [int(sub.tokens[a]) for a in accepted] + [bonus]
        stats.rounds += 1
        stats.accepted_lengths.append(len(accepted))
        out.extend(new)
        context.extend(new)
        pending = bonus
    return out[:n_new], stats
