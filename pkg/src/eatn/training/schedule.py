import math
from dataclasses import dataclass, field

from ..errors import ConfigError

# reference values from the full-size translation protocol; desk presets use less
FULL_SCALE_WARMUP_STEPS = 4000
FULL_SCALE_LABEL_SMOOTHING = 0.1
DESK_WARMUP_STEPS = 200


@dataclass
class Schedule:
    """Learning rate as a function of the 1-based step index."""

    kind: str = "constant"
    peak_lr: float = 1e-3
    warmup_steps: int = 0
    milestones: list = field(default_factory=list)
    factor: float = 0.1

    def __post_init__(self):
        if self.kind not in ("constant", "inverse_sqrt_warmup", "step_decay"):
            raise ConfigError(f"unknown schedule {self.kind!r}", "schedule.kind")
        if self.kind == "inverse_sqrt_warmup" and self.warmup_steps < 1:
            raise ConfigError("inverse_sqrt_warmup needs warmup_steps >= 1", "schedule.warmup_steps")

    def __call__(self, t):
        t = max(int(t), 1)
        if self.kind == "constant":
            return self.peak_lr
        if self.kind == "inverse_sqrt_warmup":
            w = self.warmup_steps
            return self.peak_lr * min(t / w, math.sqrt(w / t))
        # linear warmup, then divide by 1/factor at each milestone
        lr = self.peak_lr * (min(t / self.warmup_steps, 1.0) if self.warmup_steps else 1.0)
        for m in self.milestones:
            if t >= m:
                lr *= self.factor
        return lr
