"""Synthetic next-token tasks and a plain gradient-descent training loop.

Used to contrast the causal value convolution with the leaky centred one:
the leaky model drives its training loss to zero by reading the target
token through the convolution, then fails once it has to generate without
seeing the future.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingError
from .model import (
    ModelConfig,
    ToyModel,
    backward,
    cross_entropy,
    forward,
    generate_greedy,
    generate_recompute,
)

log = logging.getLogger(__name__)

TASKS = ("copy", "induction")
SEP = 0


@dataclass
class TaskBatch:
    inputs: np.ndarray  # (B, n)
    targets: np.ndarray  # (B, n)
    mask: np.ndarray  # (B, n) positions scored by the loss
    prompts: np.ndarray  # (B, p) prefix given at evaluation time
    answers: np.ndarray  # (B, a) tokens the model must generate


def make_task(task: str, n: int, seq_len: int, vocab_size: int, seed) -> TaskBatch:
    """Draw ``n`` instances of ``task`` as length-``seq_len`` training sequences.

    copy: ``x_1..x_h SEP x_1..x_h`` with symbols from ``1..vocab-1``.
    induction: ``x_1..x_h x_1..x_h`` with distinct symbols, so each repeated
    token's successor is determined by its earlier occurrence.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    gen = np.random.default_rng(seed)
    symbols = np.arange(1, vocab_size)
    if task == "copy":
        h = seq_len // 2
        x = gen.choice(symbols, size=(n, h))
        full = np.concatenate([x, np.full((n, 1), SEP), x], axis=1)
        start = h  # input index whose target is the first copied symbol
        prompts, answers = full[:, : h + 1], full[:, h + 1 :]
    else:
        h = seq_len // 2 + 1
        if h > len(symbols):
            raise ConfigError("induction task needs seq_len/2 <= vocab_size - 1")
        x = np.stack([gen.permutation(symbols)[:h] for _ in range(n)])
        full = np.concatenate([x, x], axis=1)
        start = h  # first repeated token is predictable from the second one on
        prompts, answers = full[:, : h + 1], full[:, h + 1 :]
    full = full[:, : seq_len + 1]
    inputs, targets = full[:, :-1], full[:, 1:]
    mask = np.zeros(inputs.shape, dtype=bool)
    mask[:, start:] = True
    return TaskBatch(inputs, targets, mask, prompts, answers[:, : seq_len - start])


def leakage_config(unmasked: bool, seed: int = 0) -> ModelConfig:
    """Toy model used for the leaky-versus-causal convolution comparison.

    Groups of 8 keep the copy source out of the local window and the
    13-tap kernel reaches back far enough to copy across the separator.
    """
    return ModelConfig(vocab_size=16, d_model=64, n_heads=4, n_layers=2, ffn_mult=2,
                       group_size=8, conv_kernel=13, alpha=1.0, seed=seed,
                       unmasked_conv=unmasked)


def chance_accuracy(vocab_size: int) -> float:
    return 1.0 / (vocab_size - 1)


def evaluate(model: ToyModel, batch: TaskBatch) -> float:
    """Autoregressive accuracy: generate the answer from the prompt, token by token."""
    gen = generate_recompute if model.cfg.unmasked_conv else generate_greedy
    hits = total = 0
    for prompt, answer in zip(batch.prompts, batch.answers):
        out = gen(model, prompt, len(answer))
        hits += int(np.sum(np.asarray(out) == answer))
        total += len(answer)
    return hits / max(total, 1)


def teacher_forced_accuracy(model: ToyModel, batch: TaskBatch) -> float:
    logits, _ = forward(model, batch.inputs)
    pred = logits.argmax(-1)
    return float(((pred == batch.targets) & batch.mask).sum() / batch.mask.sum())


@dataclass
class TrainResult:
    losses: list
    eval_accuracy: float
    train_accuracy: float
    chance: float
    steps: list = field(default_factory=list)


def train_synthetic(model: ToyModel, task: str = "copy", steps: int = 1000, lr: float = 0.3,
                    seq_len: int = 24, n_train: int = 64, n_eval: int = 64, seed: int = 0,
                    log_every: int = 0) -> TrainResult:
    """Full-batch gradient descent on a fixed synthetic training set.

    Parameters are updated in place with ``p -= lr * grad``. The returned
    loss curve has one entry per step (loss before that step's update).
    """
    if steps < 0 or lr < 0:
        raise ConfigError("steps and lr must be non-negative")
    vocab = model.cfg.vocab_size
    train = make_task(task, n_train, seq_len, vocab, [seed, 0])
    held_out = make_task(task, n_eval, seq_len, vocab, [seed, 1])
    losses = []
    for step in range(steps):
        logits, cache = forward(model, train.inputs)
        loss, dlogits = cross_entropy(logits, train.targets, train.mask)
        if not np.isfinite(loss):
            raise TrainingError(
                f"loss became {loss} at step {step}",
                {"step": step, "last_losses": losses[-5:], "lr": lr},
            )
        losses.append(loss)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, loss)
        if lr == 0:
            continue
        grads = backward(model, cache, dlogits)
        for name, g in grads.items():
            model.params[name] -= lr * g
    return TrainResult(
        losses=losses,
        eval_accuracy=evaluate(model, held_out),
        train_accuracy=teacher_forced_accuracy(model, train),
        chance=chance_accuracy(vocab),
        steps=list(range(steps)),
    )
