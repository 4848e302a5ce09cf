"""Momentum (EMA) teacher."""

from __future__ import annotations

from dataclasses import dataclass

from .model import HpmModel


@dataclass
class EmaState:
    teacher: HpmModel
    momentum: float = 0.996
    updates: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")


def init_teacher(student: HpmModel, momentum: float = 0.996) -> EmaState:
    teacher = student.clone()
    for p in teacher.params.values():
        p.requires_grad = False
    return EmaState(teacher, momentum)


def ema_update(state: EmaState, student: HpmModel) -> None:
    """teacher <- m * teacher + (1 - m) * student, parameter by parameter."""
    tp, sp = state.teacher.params, student.params
    if list(tp) != list(sp):
        raise ValueError("teacher and student parameter names differ")
    m = state.momentum
    for name, t in tp.items():
        s = sp[name].data
        if s.shape != t.shape:
            raise ValueError(f"{name}: teacher shape {t.shape} != student shape {s.shape}")
        dtype = t.dtype.type
        t.data = dtype(m) * t.data + dtype(1.0 - m) * s
    state.updates += 1
