"""Easy-to-hard mask generation driven by predicted reconstruction losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EASY_TO_HARD = "easy-to-hard"
HARD_TO_EASY = "hard-to-easy"


@dataclass(frozen=True)
class MaskSchedule:
    gamma: float = 0.75
    alpha_0: float = 0.0
    alpha_T: float = 0.5
    total_epochs: int = 100
    mode: str = "argmax"  # argmax: mask highest predicted loss; argmin: lowest
    direction: str = EASY_TO_HARD

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"mask ratio gamma must lie in (0, 1), got {self.gamma}")
        for name in ("alpha_0", "alpha_T"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.mode not in ("argmax", "argmin"):
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if self.direction not in (EASY_TO_HARD, HARD_TO_EASY):
            raise ValueError(f"unknown schedule direction {self.direction!r}")


@dataclass
class PatchMask:
    visible: np.ndarray  # (N,) bool, True = visible
    n_pred: int
    n_random: int
    seed: int | None = None

    @property
    def masked(self) -> np.ndarray:
        return np.flatnonzero(~self.visible)


def schedule_direction(schedule: MaskSchedule) -> tuple[float, float]:
    if schedule.direction == HARD_TO_EASY:
        return schedule.alpha_T, schedule.alpha_0
    return schedule.alpha_0, schedule.alpha_T


def alpha_at(schedule: MaskSchedule, t: float) -> float:
    if not 0 <= t <= schedule.total_epochs:
        raise ValueError(f"epoch {t} outside [0, {schedule.total_epochs}]")
    a0, aT = schedule_direction(schedule)
    if t == schedule.total_epochs:
        return aT
    return a0 + t / schedule.total_epochs * (aT - a0)


def mask_counts(n: int, gamma: float, alpha: float) -> tuple[int, int]:
    """(total masked, masked by prediction) = (floor(gamma N), floor(alpha gamma N))."""
    return int(n * gamma), int(n * gamma * alpha)


def generate_mask(pred_loss, schedule: MaskSchedule, t: float, rng, alpha: float | None = None) -> PatchMask:
    """Mask the top predicted-loss patches, then fill the rest of the budget at random.

    ``rng`` is a numpy Generator or an integer seed. ``alpha`` overrides the
    scheduled value (used when learn-to-mask is disabled).
    """
    pred_loss = np.asarray(pred_loss).reshape(-1)
    n = pred_loss.shape[0]
    if alpha is None:
        alpha = alpha_at(schedule, t)
    k, k_pred = mask_counts(n, schedule.gamma, alpha)
    if k < 1 or n - k < 1:
        raise ValueError(f"N={n} with gamma={schedule.gamma} leaves {k} masked and {n - k} visible patches")
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.Generator(np.random.PCG64(seed))
    key = -pred_loss if schedule.mode == "argmax" else pred_loss
    order = np.argsort(key, kind="stable")
    chosen = order[:k_pred]
    remain = np.sort(order[k_pred:])
    drawn = rng.permutation(remain)[: k - k_pred]
    visible = np.ones(n, dtype=bool)
    visible[chosen] = False
    visible[drawn] = False
    return PatchMask(visible, k_pred, k - k_pred, seed)


def generate_batch_masks(pred_loss: np.ndarray, schedule: MaskSchedule, t: float, rng,
                         alpha: float | None = None) -> np.ndarray:
    """(B, N) visibility for a batch, drawing images in order from one generator."""
    pred_loss = np.asarray(pred_loss)
    return np.stack([generate_mask(row, schedule, t, rng, alpha).visible for row in pred_loss])
