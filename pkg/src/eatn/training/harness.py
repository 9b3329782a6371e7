"""Training loop, evaluation and the per-step run log."""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..errors import ConfigError, DivergenceError
from ..model import EATransformer
from .losses import cross_entropy_label_smoothed
from .optim import OptimizerState, optimizer_step
from .schedule import Schedule
from .tasks import batch_stream, eval_set


@dataclass
class TrainOptions:
    steps: int = 1000
    batch_size: int = 32
    label_smoothing: float = 0.1
    eval_size: int = 256
    eval_every: int = 0
    early_stop_patience: int = 0
    average_last: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0", "train.steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive", "train.batch_size")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)", "train.label_smoothing")


@dataclass
class TrainRun:
    """Step-indexed log plus final metrics.

    ``records`` depend only on (config, seed); wall-clock lives in ``wall_ms``
    so the deterministic log can be compared bitwise across runs.
    """

    config: dict
    records: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    model: EATransformer | None = None
    stopped_early: bool = False

    def log_lines(self):
        return [json.dumps(r, sort_keys=True) for r in self.records]

    def timing_lines(self):
        return [json.dumps({"step": r["step"], "loss": r["loss"], "wall_ms": ms}, sort_keys=True)
                for r, ms in zip(self.records, self.wall_ms)]

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "train_log.jsonl"), "w") as f:
            f.write("".join(line + "\n" for line in self.log_lines()))
        with open(os.path.join(out_dir, "timing.jsonl"), "w") as f:
            f.write("".join(line + "\n" for line in self.timing_lines()))
        with open(os.path.join(out_dir, "metrics.json"), "w") as f:
            json.dump(self.final, f, indent=2, sort_keys=True)
            f.write("\n")


def task_loss(model, batch, label_smoothing=0.0):
    x, y = batch
    return cross_entropy_label_smoothed(model.forward(x, y), y, label_smoothing)


def batch_accuracy(logits, targets):
    return float((logits.data.argmax(axis=-1) == np.asarray(targets)).mean())


def worker_count():
    try:
        return max(1, int(os.environ.get("EATN_THREADS", "1")))
    except ValueError:
        return 1


def loss_and_grads(model, batch, label_smoothing, threads=1):
    """Mean loss, accuracy and ``name -> grad`` for one batch.

    With ``threads > 1`` the batch is split into contiguous chunks evaluated on
    separate tapes; chunk gradients are summed in chunk order.
    """
    names = list(model.params)
    wrt = [model.params[n] for n in names]
    x, y = batch
    n = len(x)

    def run(sl):
        xs, ys = x[sl], y[sl]
        logits = model.forward(xs, ys)
        loss = cross_entropy_label_smoothed(logits, ys, label_smoothing)
        grads = T.gradients(loss, wrt)
        return loss.item(), batch_accuracy(logits, ys), grads, len(xs)

    if threads <= 1 or n < 2:
        loss, acc, grads, _ = run(slice(None))
        return loss, acc, dict(zip(names, grads))
    bounds = np.linspace(0, n, min(threads, n) + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=len(slices)) as pool:
        parts = list(pool.map(run, slices))
    loss = sum(p[0] * p[3] for p in parts) / n
    acc = sum(p[1] * p[3] for p in parts) / n
    grads = {}
    for i, name in enumerate(names):
        g = parts[0][2][i] * (parts[0][3] / n)
        for p in parts[1:]:
            g = g + p[2][i] * (p[3] / n)
        grads[name] = g
    return loss, acc, grads


def evaluate(model, task, n, seed, label_smoothing=0.0):
    """Metrics on a held-out seeded set: accuracy for classifiers; greedy and
    teacher-forced token accuracy plus exact match for seq2seq."""
    x, y = eval_set(task, n, seed)
    with T.no_grad():
        logits = model.forward(x, y)
        loss = cross_entropy_label_smoothed(logits, y, label_smoothing).item()
        metrics = {"eval_loss": loss}
        if model.spec.kind == "seq2seq":
            pred = model.greedy_decode(x, y.shape[-1])
            metrics["token_accuracy"] = float((pred == y).mean())
            metrics["exact_match"] = float((pred == y).all(axis=-1).mean())
            metrics["teacher_forced_accuracy"] = batch_accuracy(logits, y)
        else:
            metrics["accuracy"] = batch_accuracy(logits, y)
    return metrics


def run_training(task, model_spec, optimizer, schedule, steps, seed, options=None,
                 model=None, on_step=None):
    """Train ``model_spec`` on ``task`` for ``steps`` updates and return a :class:`TrainRun`.

    Record ``k`` holds the loss and accuracy of batch ``k`` measured before the
    ``k``-th update (record 0 is the untouched initial model).
    """
    options = options or TrainOptions(steps=steps)
    if isinstance(optimizer, dict):
        optimizer = OptimizerState(**optimizer)
    if isinstance(schedule, dict):
        schedule = Schedule(**schedule)
    model = model or EATransformer.init(model_spec, seed)
    threads = worker_count()
    run = TrainRun(config={"task": task.to_dict(), "model": model_spec.to_dict(), "seed": seed,
                           "steps": steps})
    stream = batch_stream(task, options.batch_size, seed)
    snapshots = []
    best, stale = math.inf, 0
    t0 = time.perf_counter()
    for step in range(steps + 1):
        batch = next(stream)
        lr = schedule(step) if step else 0.0
        loss, acc, grads = loss_and_grads(model, batch, options.label_smoothing, threads)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at step {step} (lr={lr:.3e})")
        run.records.append({"step": step, "loss": loss, "accuracy": acc, "lr": lr})
        if step:
            optimizer_step(model.params, grads, optimizer, lr)
        run.wall_ms.append((time.perf_counter() - t0) * 1e3)
        if on_step is not None:
            on_step(run.records[-1])
        if options.average_last and step > steps - options.average_last:
            snapshots.append({n: p.data.copy() for n, p in model.params.items()})
        if options.eval_every and step and step % options.eval_every == 0 and options.early_stop_patience:
            ev = evaluate(model, task, options.eval_size, seed)["eval_loss"]
            if ev < best - 1e-12:
                best, stale = ev, 0
            else:
                stale += 1
                if stale >= options.early_stop_patience:
                    run.stopped_early = True
                    break
    if len(snapshots) > 1:
        for name, p in model.params.items():
            p.data[...] = np.mean([s[name] for s in snapshots], axis=0)
    run.model = model
    run.final = evaluate(model, task, options.eval_size, seed)
    run.final["steps"] = run.records[-1]["step"]
    run.final["final_train_loss"] = run.records[-1]["loss"]
    return run
