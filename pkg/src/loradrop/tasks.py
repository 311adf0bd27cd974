"""Synthetic desk-scale tasks standing in for real finetuning datasets.

Three generators over random token sequences:

* majority_class — each sequence gets a planted majority token; the label
  is the most frequent token id (ties to the smallest id). Training
  labels are flipped to a random other class with probability
  ``label_noise``, which is what makes the task overfittable.
* noisy_parity  — label is the parity of the number of marker tokens
  (id 1) in the sequence; same label-flip noise.
* scalar_sum    — regression; label is the token sum scaled to [0, 1],
  training labels get additive Gaussian noise of std ``label_noise``.

Train and eval splits are drawn disjointly from one seeded stream; noise
touches training labels only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

TASK_KINDS = ("majority_class", "noisy_parity", "scalar_sum")
PARITY_MARKER = 1


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "majority_class"
    vocab_size: int = 32
    seq_len: int = 32
    n_train: int = 256
    n_eval: int = 2048
    label_noise: float = 0.15
    data_seed: int = 7

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ContractError(f"unknown task kind {self.kind!r}")
        if not (0.0 <= self.label_noise < 0.5):
            raise ContractError("label_noise must lie in [0, 0.5)")
        if self.vocab_size < 2 or self.seq_len < 1:
            raise ContractError("vocab_size >= 2 and seq_len >= 1 required")

    @property
    def regression(self) -> bool:
        return self.kind == "scalar_sum"

    @property
    def num_classes(self) -> int | None:
        if self.kind == "majority_class":
            return self.vocab_size
        if self.kind == "noisy_parity":
            return 2
        return None


@dataclass
class Dataset:
    train_tokens: np.ndarray
    train_targets: np.ndarray
    eval_tokens: np.ndarray
    eval_targets: np.ndarray
    num_classes: int | None


def _majority_batch(task: SyntheticTask, n: int, rng: np.random.Generator):
    v, L = task.vocab_size, task.seq_len
    low = max(1, L // 4)
    high = max(low + 1, L // 2 + 1)
    tokens = np.empty((n, L), dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        t = int(rng.integers(0, v))
        k = int(rng.integers(low, high))
        seq = rng.integers(0, v - 1, size=L)
        seq[seq >= t] += 1  # fill excludes the planted token
        pos = rng.choice(L, size=k, replace=False)
        seq[pos] = t
        tokens[i] = seq
        labels[i] = int(np.argmax(np.bincount(seq, minlength=v)))
    return tokens, labels


def _parity_batch(task: SyntheticTask, n: int, rng: np.random.Generator):
    tokens = rng.integers(0, task.vocab_size, size=(n, task.seq_len)).astype(np.int64)
    labels = (tokens == PARITY_MARKER).sum(axis=1) % 2
    return tokens, labels.astype(np.int64)


def _scalar_batch(task: SyntheticTask, n: int, rng: np.random.Generator):
    tokens = rng.integers(0, task.vocab_size, size=(n, task.seq_len)).astype(np.int64)
    denom = task.seq_len * (task.vocab_size - 1)
    labels = tokens.sum(axis=1) / denom
    return tokens, labels.astype(np.float64)


def generate(task: SyntheticTask) -> Dataset:
    """Materialize the task; deterministic in the task description."""
    rng = np.random.default_rng(np.random.SeedSequence([task.data_seed, 0xDA7A5E7]))
    maker = {
        "majority_class": _majority_batch,
        "noisy_parity": _parity_batch,
        "scalar_sum": _scalar_batch,
    }[task.kind]
    train_tokens, train_targets = maker(task, task.n_train, rng)
    eval_tokens, eval_targets = maker(task, task.n_eval, rng)

    if task.label_noise > 0.0:
        if task.regression:
            train_targets = train_targets + rng.normal(0.0, task.label_noise, size=task.n_train)
        else:
            nc = task.num_classes
            flip = rng.random(task.n_train) < task.label_noise
            shift = rng.integers(1, nc, size=task.n_train)
            train_targets = np.where(flip, (train_targets + shift) % nc, train_targets)

    return Dataset(train_tokens, train_targets, eval_tokens, eval_targets, task.num_classes)
