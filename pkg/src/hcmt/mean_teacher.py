"""EMA teacher and perturbed teacher predictions."""

from __future__ import annotations

import copy
from typing import Iterable

import torch
import torch.nn as nn

from hcmt.backbone import PredictionPyramid, forward_multiscale, same_structure
from hcmt.errors import ConfigError, StateError
from hcmt.perturb import PerturbationSpec, make_generator, perturb

__all__ = [
    "PerturbationSpec",
    "TeacherState",
    "ema_update",
    "ema_update_",
    "perturb",
    "make_generator",
    "teacher_predict",
]


def ema_update_(teacher_params: Iterable[torch.Tensor], student_params: Iterable[torch.Tensor], eta: float) -> None:
    """In place: ``teacher <- eta * teacher + (1 - eta) * student`` for every tensor pair."""
    teacher_params, student_params = list(teacher_params), list(student_params)
    if not same_structure(teacher_params, student_params):
        raise ConfigError("teacher and student parameter structures differ")
    with torch.no_grad():
        for tp, sp in zip(teacher_params, student_params):
            tp.mul_(eta).add_(sp.detach(), alpha=1 - eta)


class TeacherState:
    """Teacher network held as an exponential moving average of a student.

    The teacher starts as a copy of the student. ``eta`` stays fixed unless
    ``warmup`` is set, in which case the effective rate is
    ``min(1 - 1/(step + 1), eta)``.
    """

    def __init__(self, eta: float = 0.99, warmup: bool = False):
        if not 0.0 <= eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {eta}")
        self.eta = float(eta)
        self.warmup = warmup
        self.network: nn.Module | None = None
        self.step = 0

    @classmethod
    def from_student(cls, student: nn.Module, eta: float = 0.99, warmup: bool = False) -> "TeacherState":
        state = cls(eta, warmup)
        state.network = copy.deepcopy(student)
        for p in state.network.parameters():
            p.requires_grad_(False)
        return state

    @property
    def initialized(self) -> bool:
        return self.network is not None

    def parameters(self) -> list[torch.Tensor]:
        if self.network is None:
            raise StateError("teacher is not initialized")
        return list(self.network.parameters())

    def current_rate(self) -> float:
        if self.warmup:
            return min(1 - 1 / (self.step + 1), self.eta)
        return self.eta

    def state_dict(self) -> dict:
        return {"eta": self.eta, "warmup": self.warmup, "step": self.step,
                "network": None if self.network is None else self.network.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.eta, self.warmup, self.step = state["eta"], state["warmup"], state["step"]
        if self.network is None:
            raise StateError("teacher network must exist before loading its parameters")
        self.network.load_state_dict(state["network"])


def ema_update(teacher: TeacherState, student) -> TeacherState:
    """Blend the student parameters into the teacher and advance its step counter.

    ``student`` may be a module or a sequence of tensors. Buffers (e.g.
    batch-norm running stats) are copied straight from the student.
    """
    if not teacher.initialized:
        raise StateError("teacher is not initialized")
    student_params = list(student.parameters()) if isinstance(student, nn.Module) else list(student)
    ema_update_(teacher.parameters(), student_params, teacher.current_rate())
    if isinstance(student, nn.Module):
        with torch.no_grad():
            for tb, sb in zip(teacher.network.buffers(), student.buffers()):
                tb.copy_(sb)
    teacher.step += 1
    return teacher


def teacher_predict(
    teacher: TeacherState,
    volume_batch: torch.Tensor,
    spec: PerturbationSpec | None = None,
    generator: torch.Generator | None = None,
) -> PredictionPyramid:
    """Teacher pyramid under its own perturbation draw; no autograd graph is built."""
    if not teacher.initialized:
        raise StateError("teacher is not initialized")
    with torch.no_grad():
        return forward_multiscale(teacher.network, volume_batch, spec, generator)
