"""Cyclic cosine annealing with warm restarts."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float = 0.01
    total_epochs: int = 500
    cycles: int = 10

    def __post_init__(self):
        if self.lr_max <= 0:
            raise ValueError(f"lr_max must be positive, got {self.lr_max}")
        if not self.total_epochs >= self.cycles >= 1:
            raise ValueError(f"need total_epochs >= cycles >= 1, got T={self.total_epochs}, C={self.cycles}")

    @property
    def cycle_len(self) -> int:
        return math.ceil(self.total_epochs / self.cycles)

    def is_snapshot_epoch(self, epoch: int) -> bool:
        """Cycle ends, plus the final epoch when T is not a multiple of the cycle length."""
        return epoch % self.cycle_len == 0 or epoch == self.total_epochs


def cosine_lr(t: int, cfg: ScheduleConfig) -> float:
    """Learning rate for 1-based epoch ``t``; equals lr_max at every cycle start."""
    if not 1 <= t <= cfg.total_epochs:
        raise ValueError(f"epoch {t} outside 1..{cfg.total_epochs}")
    n = cfg.cycle_len
    return cfg.lr_max / 2 * (math.cos(math.pi * ((t - 1) % n) / n) + 1)
