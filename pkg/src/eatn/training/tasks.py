"""Toy task generators.  Every dataset is a pure function of ``(spec, seed)``."""
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError

TASK_KINDS = ("copy", "reverse", "parity_classify", "synthetic_shapes_image")
SHAPES = ("horizontal", "vertical", "diagonal", "anti_diagonal")


@dataclass
class TaskSpec:
    kind: str = "copy"
    vocab: int = 16
    seq_len: int = 10
    n_classes: int = 2
    grid: tuple = (6, 6)
    sample_count: int = 0
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.grid, list):
            self.grid = tuple(self.grid)
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"must be one of {TASK_KINDS}, got {self.kind!r}", "task.kind")
        if self.vocab < 2:
            raise ConfigError("vocab must be at least 2", "task.vocab")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be positive", "task.seq_len")
        if self.kind == "synthetic_shapes_image" and not 2 <= self.n_classes <= len(SHAPES):
            raise ConfigError(f"synthetic shapes support 2..{len(SHAPES)} classes", "task.n_classes")

    @property
    def is_seq2seq(self):
        return self.kind in ("copy", "reverse")

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence(seed))


def generate(task, n, seed):
    """Return ``(inputs, targets)`` for ``n`` examples."""
    rng = _rng(seed)
    if task.kind in ("copy", "reverse"):
        src = rng.integers(0, task.vocab, size=(n, task.seq_len))
        tgt = src.copy() if task.kind == "copy" else src[:, ::-1].copy()
        return src, tgt
    if task.kind == "parity_classify":
        tokens = rng.integers(0, task.vocab, size=(n, task.seq_len))
        return tokens, tokens.sum(axis=1) % task.n_classes
    return _shapes(task, n, rng)


def _shapes(task, n, rng):
    H, W = task.grid
    labels = rng.integers(0, task.n_classes, size=n)
    images = rng.normal(0.0, task.noise, size=(n, H, W, 1))
    for k, label in enumerate(labels):
        shape = SHAPES[label]
        if shape == "horizontal":
            images[k, rng.integers(0, H), :, 0] += 1.0
        elif shape == "vertical":
            images[k, :, rng.integers(0, W), 0] += 1.0
        else:
            m = min(H, W)
            off = rng.integers(0, max(H, W) - m + 1)
            idx = np.arange(m)
            cols = idx if shape == "diagonal" else m - 1 - idx
            if H >= W:
                images[k, idx + off, cols, 0] += 1.0
            else:
                images[k, idx, cols + off, 0] += 1.0
    return images, labels


def batch_stream(task, batch_size, seed):
    """Yield training batches forever.

    With ``sample_count > 0`` a fixed dataset is drawn once and reshuffled each
    epoch; otherwise every batch is fresh.
    """
    if task.sample_count:
        if task.sample_count < batch_size:
            raise ConfigError(f"sample_count {task.sample_count} is smaller than batch size {batch_size}",
                              "task.sample_count")
        xs, ys = generate(task, task.sample_count, [seed, task.seed, 0])
        order_rng = _rng([seed, task.seed, 1])
        while True:
            perm = order_rng.permutation(task.sample_count)
            for s in range(0, task.sample_count - batch_size + 1, batch_size):
                idx = perm[s : s + batch_size]
                yield xs[idx], ys[idx]
    step = 0
    while True:
        yield generate(task, batch_size, [seed, task.seed, 2, step])
        step += 1


def eval_set(task, n, seed):
    """Held-out examples; disjoint seed stream from training batches."""
    return generate(task, n, [seed, task.seed, 3])
