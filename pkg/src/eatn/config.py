"""JSON run configuration: presets, validation and command-line overrides.

A run config has the top-level sections ``preset``, ``seed``, ``task``,
``model``, ``ea``, ``optimizer``, ``schedule``, ``train`` and ``gradcheck``.
The effective config is ``preset defaults <- file <- flag overrides``.
Unknown keys anywhere are rejected with their dotted path.
"""
from __future__ import annotations

import copy
import json
from dataclasses import fields

from .errors import ConfigError
from .evolving import KERNEL_SIZES, EvolvingAttentionConfig
from .model import ATTENTION_TYPES, ModelSpec
from .training.harness import TrainOptions
from .training.optim import OptimizerState
from .training.schedule import DESK_WARMUP_STEPS, Schedule
from .training.tasks import TaskSpec

_EA_KEYS = {"alpha", "beta", "kernel_size", "conv_enabled", "skip_enabled", "cross_future_rows"}
_MODEL_KEYS = {f.name for f in fields(ModelSpec)} - {"ea", "preset"}
_TASK_KEYS = {f.name for f in fields(TaskSpec)}
_OPT_KEYS = {f.name for f in fields(OptimizerState)} - {"step", "moments"}
_SCHED_KEYS = {f.name for f in fields(Schedule)}
_TRAIN_KEYS = {f.name for f in fields(TrainOptions)}
_GRADCHECK_KEYS = {"tolerance", "n_coords", "batch_size", "jitter"}
_TOP_KEYS = {"preset", "seed", "task", "model", "ea", "optimizer", "schedule", "train", "gradcheck"}

_GRADCHECK_DEFAULTS = {"tolerance": 1e-4, "n_coords": 32, "batch_size": 2, "jitter": 0.05}


def _ea(alpha, beta, decoder_skip=False):
    # decoder attention runs without the skip connection in the translation presets
    return {
        "encoder": {"alpha": alpha, "beta": beta, "kernel_size": 3},
        "decoder_self": {"alpha": alpha, "beta": beta, "kernel_size": 3, "skip_enabled": decoder_skip},
        "encoder_decoder": {"alpha": alpha, "beta": beta, "kernel_size": 3, "skip_enabled": decoder_skip},
    }


PRESETS = {
    # all widths equal, standing in for the 160-wide Lite translation model
    "lite": {
        "task": {"kind": "copy", "vocab": 16, "seq_len": 10},
        "model": {"kind": "seq2seq", "d_model": 32, "n_heads": 4, "d_ff": 32,
                  "n_enc_layers": 2, "n_dec_layers": 2, "positional": "absolute_sinusoidal"},
        "ea": _ea(0.1, 0.1),
        "optimizer": {"kind": "adam", "lr": 3e-3, "beta1": 0.9, "beta2": 0.98, "epsilon": 1e-8},
        "schedule": {"kind": "inverse_sqrt_warmup", "warmup_steps": DESK_WARMUP_STEPS},
        "train": {"steps": 600, "batch_size": 32, "label_smoothing": 0.1},
    },
    # 8 heads with a 4x FFN bottleneck, shrunk from the 512/2048 base model
    "base": {
        "task": {"kind": "copy", "vocab": 16, "seq_len": 10},
        "model": {"kind": "seq2seq", "d_model": 64, "n_heads": 8, "d_ff": 256,
                  "n_enc_layers": 3, "n_dec_layers": 3, "positional": "absolute_sinusoidal"},
        "ea": _ea(0.5, 0.1),
        "optimizer": {"kind": "adam", "lr": 1e-3, "beta1": 0.9, "beta2": 0.98, "epsilon": 1e-8},
        "schedule": {"kind": "inverse_sqrt_warmup", "warmup_steps": DESK_WARMUP_STEPS},
        "train": {"steps": 1000, "batch_size": 32, "label_smoothing": 0.1},
    },
}

_BLANK = {"preset": None, "seed": 0, "task": {}, "model": {}, "ea": {}, "optimizer": {},
          "schedule": {}, "train": {}, "gradcheck": {}}


def _check_keys(d, allowed, path):
    if not isinstance(d, dict):
        raise ConfigError(f"expected an object, got {type(d).__name__}", path)
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown key {k!r}", f"{path}.{k}" if path else k)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class RunConfig:
    """A validated run configuration with typed accessors for each section."""

    def __init__(self, raw):
        _check_keys(raw, _TOP_KEYS, "")
        preset = raw.get("preset")
        if preset is not None and preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}", "preset")
        merged = _merge(_BLANK, PRESETS.get(preset, {}))
        self.raw = _merge(merged, raw)
        self._validate()

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}", str(path)) from None
        return cls(raw)

    @classmethod
    def from_preset(cls, name, **sections):
        return cls({"preset": name, **sections})

    def _validate(self):
        r = self.raw
        seed = r["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
            raise ConfigError(f"must be an unsigned 64-bit integer, got {seed!r}", "seed")
        _check_keys(r["task"], _TASK_KEYS, "task")
        _check_keys(r["model"], _MODEL_KEYS, "model")
        _check_keys(r["ea"], set(ATTENTION_TYPES), "ea")
        for k, v in r["ea"].items():
            _check_keys(v, _EA_KEYS, f"ea.{k}")
        _check_keys(r["optimizer"], _OPT_KEYS, "optimizer")
        _check_keys(r["schedule"], _SCHED_KEYS, "schedule")
        _check_keys(r["train"], _TRAIN_KEYS, "train")
        _check_keys(r["gradcheck"], _GRADCHECK_KEYS, "gradcheck")
        # building every section surfaces value errors with their path
        self.task_spec()
        self.model_spec()
        self.optimizer_state()
        self.schedule()
        self.train_options()

    def apply_overrides(self, alpha=None, beta=None, kernel=None, no_conv=False, no_skip=False,
                        steps=None, seed=None):
        """Apply flag overrides to every attention type and re-validate."""
        raw = copy.deepcopy(self.raw)
        for t in ATTENTION_TYPES:
            ea = raw["ea"].setdefault(t, {})
            if alpha is not None:
                ea["alpha"] = alpha
            if beta is not None:
                ea["beta"] = beta
            if kernel is not None:
                if kernel not in KERNEL_SIZES:
                    raise ConfigError(f"must be one of {KERNEL_SIZES}, got {kernel}", "--kernel")
                ea["kernel_size"] = kernel
            if no_conv:
                ea["conv_enabled"] = False
            if no_skip:
                ea["skip_enabled"] = False
        if steps is not None:
            raw["train"]["steps"] = steps
        if seed is not None:
            raw["seed"] = seed
        return RunConfig(raw)

    @property
    def seed(self):
        return self.raw["seed"]

    def task_spec(self):
        try:
            return TaskSpec(**self.raw["task"])
        except TypeError as e:
            raise ConfigError(str(e), "task") from None

    def model_spec(self):
        task = self.task_spec()
        m = dict(self.raw["model"])
        kind = m.setdefault("kind", {"copy": "seq2seq", "reverse": "seq2seq",
                                     "parity_classify": "encoder_classifier",
                                     "synthetic_shapes_image": "image_classifier"}[task.kind])
        if kind == "image_classifier":
            m.setdefault("image_shape", [task.grid[0], task.grid[1], 1])
            m.setdefault("max_len", task.grid[0] * task.grid[1])
            m.setdefault("positional", "relative_2d")
            m.setdefault("n_classes", task.n_classes)
        else:
            m.setdefault("src_vocab", task.vocab)
            m.setdefault("max_len", task.seq_len)
            if kind == "seq2seq":
                m.setdefault("tgt_vocab", task.vocab)
            else:
                m.setdefault("n_classes", task.n_classes)
        ea = {}
        for t in ATTENTION_TYPES:
            try:
                ea[t] = EvolvingAttentionConfig(**{**self.raw["ea"].get(t, {}), "mode": t})
            except ConfigError as e:
                raise ConfigError(str(e).split(": ", 1)[-1], f"ea.{t}.{e.path.split('.')[-1]}") from None
        try:
            return ModelSpec(**m, ea=ea, preset=self.raw.get("preset"))
        except TypeError as e:
            raise ConfigError(str(e), "model") from None

    def optimizer_state(self):
        return OptimizerState(**self.raw["optimizer"])

    def schedule(self):
        s = dict(self.raw["schedule"])
        s.setdefault("peak_lr", self.raw["optimizer"].get("lr", 1e-3))
        return Schedule(**s)

    def train_options(self):
        return TrainOptions(**self.raw["train"])

    def gradcheck_options(self):
        return {**_GRADCHECK_DEFAULTS, **self.raw["gradcheck"]}

    def to_dict(self):
        return copy.deepcopy(self.raw)

    def dump(self, path):
        with open(path, "w") as f:
            json.dump(self.raw, f, indent=2, sort_keys=True)
            f.write("\n")
