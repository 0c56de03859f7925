import numpy as np
import pytest
import torch

from hcmt.backbone import build_network, flatten_parameters, forward_multiscale
from hcmt.errors import ConfigError, StateError
from hcmt.mean_teacher import (
    PerturbationSpec,
    TeacherState,
    ema_update,
    ema_update_,
    make_generator,
    perturb,
    teacher_predict,
)


def scalar_teacher(value, eta):
    state = TeacherState(eta)
    state.network = torch.nn.Module()
    state.network.w = torch.nn.Parameter(torch.tensor([value], dtype=torch.float64), requires_grad=False)
    return state


@pytest.mark.parametrize("eta,expected", [(0.0, 0.0), (1.0, 1.0), (0.99, 0.99)])
def test_ema_scalar_rates(eta, expected):
    teacher = scalar_teacher(1.0, eta)
    student = [torch.tensor([0.0], dtype=torch.float64)]
    ema_update(teacher, student)
    assert teacher.network.w.item() == pytest.approx(expected, abs=1e-15)
    assert student[0].item() == 0.0
    assert teacher.step == 1


def test_ema_geometric_contraction():
    teacher = scalar_teacher(3.0, 0.99)
    theta = torch.tensor([1.0], dtype=torch.float64)
    gaps = [2.0]
    for _ in range(50):
        ema_update(teacher, [theta])
        gaps.append(teacher.network.w.item() - 1.0)
    for k in range(1, 51):
        assert gaps[k] == pytest.approx(0.99**k * 2.0, rel=1e-12)


def test_ema_is_elementwise_affine(rng):
    start = torch.from_numpy(rng.normal(size=6))
    a = torch.from_numpy(rng.normal(size=6))
    b = torch.from_numpy(rng.normal(size=6))

    def ema(student):
        t = [start.clone()]
        ema_update_(t, [student], 0.9)
        return t[0]

    assert torch.allclose(ema(a + b), ema(a) + ema(b) - ema(torch.zeros(6)), atol=1e-14)


def test_ema_structure_mismatch(tiny_spec):
    teacher = TeacherState.from_student(build_network(tiny_spec, 0))
    with pytest.raises(ConfigError):
        ema_update(teacher, [torch.zeros(3)])


def test_ema_requires_initialized_teacher():
    with pytest.raises(StateError):
        ema_update(TeacherState(0.99), [torch.zeros(1)])


def test_eta_range():
    with pytest.raises(ConfigError):
        TeacherState(1.5)


def test_warmup_rate():
    state = TeacherState(0.99, warmup=True)
    assert state.current_rate() == 0.0
    state.step = 9
    assert state.current_rate() == pytest.approx(0.9)
    state.step = 10_000
    assert state.current_rate() == 0.99


# ---------------------------------------------------------------- perturbation

def test_perturb_none_and_zero_sigma_are_identity():
    x = torch.randn(2, 1, 4, 4, 4)
    assert perturb(x, PerturbationSpec(noise_kind="none")) is x
    assert torch.equal(perturb(x, PerturbationSpec(sigma=0.0)), x)


def test_perturb_statistics():
    x = torch.zeros(100_000, dtype=torch.float64)
    y = perturb(x, PerturbationSpec(sigma=0.1, clip=0.2), make_generator(5))
    d = (y - x).numpy()
    assert np.abs(d).max() <= 0.2
    assert abs(d.std() - 0.1) < 0.01


def test_perturb_stream_determinism():
    x = torch.zeros(10)
    spec = PerturbationSpec(sigma=0.1, clip=0.2)
    assert torch.equal(perturb(x, spec, make_generator(1)), perturb(x, spec, make_generator(1)))
    g = make_generator(1)
    assert not torch.equal(perturb(x, spec, g), perturb(x, spec, g))


def test_perturb_validation():
    with pytest.raises(ConfigError):
        perturb(torch.zeros(2), PerturbationSpec(sigma=-1.0))
    with pytest.raises(ConfigError):
        perturb(torch.zeros(2), PerturbationSpec(sigma=0.1, clip=0.0))


# ---------------------------------------------------------------- teacher predictions

def test_fresh_teacher_matches_student(tiny_spec):
    student = build_network(tiny_spec, 0)
    teacher = TeacherState.from_student(student)
    x = torch.randn(2, 1, 8, 8, 8)
    s = forward_multiscale(student, x, PerturbationSpec.identity())
    t = teacher_predict(teacher, x, PerturbationSpec.identity())
    assert all(torch.equal(a, b) for a, b in zip(s, t))
    for p in t:
        assert not p.requires_grad
        assert torch.allclose(p.sum(1), torch.ones_like(p[:, 0]), atol=1e-5)


def test_teacher_differs_after_update(tiny_spec):
    student = build_network(tiny_spec, 0)
    teacher = TeacherState.from_student(student, eta=0.99)
    with torch.no_grad():
        for p in student.parameters():
            p.add_(torch.randn_like(p))
    ema_update(teacher, student)
    x = torch.randn(1, 1, 8, 8, 8)
    s = forward_multiscale(student, x)
    t = teacher_predict(teacher, x)
    assert not torch.allclose(s[0], t[0])
    assert not torch.equal(flatten_parameters(teacher.network), flatten_parameters(student))


def test_teacher_predict_uninitialized():
    with pytest.raises(StateError):
        teacher_predict(TeacherState(), torch.zeros(1, 1, 8, 8, 8))


def test_teacher_parameters_frozen(tiny_spec):
    teacher = TeacherState.from_student(build_network(tiny_spec, 0))
    assert not any(p.requires_grad for p in teacher.network.parameters())
