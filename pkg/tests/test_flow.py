import math

import pytest
import torch

from rfedit.errors import NonFiniteError, ShapeMismatchError
from rfedit.flow import (EulerStep, MidpointStep, TimeGrid, empirical_order,
                         fm_loss, get_solver, interpolate, invert,
                         make_schedule, sample)


class FieldModel:
    """Synthetic velocity field v(z, t) = fn(z, t)."""

    def __init__(self, fn):
        self.fn = fn

    def evaluate(self, state, t, condition, controller=None, tag=None):
        return self.fn(state, t)


CONSTANT = FieldModel(lambda z, t: torch.full_like(z, 0.75))
LINEAR = FieldModel(lambda z, t: z)  # exact solution z0 * e^t


# --- time grid ---------------------------------------------------------------

def test_make_schedule_single_step():
    assert make_schedule(1).times == (0.0, 1.0)


def test_make_schedule_quarter_points():
    assert make_schedule(4).times == (0.0, 0.25, 0.5, 0.75, 1.0)


def test_make_schedule_default_step_count():
    grid = make_schedule(15)
    assert len(grid) == 16
    assert grid[0] == 0.0 and grid[15] == 1.0


def test_make_schedule_rejects_nonpositive():
    with pytest.raises(ValueError):
        make_schedule(0)


def test_time_grid_validates():
    with pytest.raises(ValueError):
        TimeGrid((0.0,))
    with pytest.raises(ValueError):
        TimeGrid((0.0, 0.5, 0.5, 1.0))
    with pytest.raises(ValueError):
        TimeGrid((0.1, 1.0))


# --- interpolate -------------------------------------------------------------

def test_interpolate_endpoints():
    z0 = torch.randn(3, 4, 4)
    z1 = torch.randn(3, 4, 4)
    assert torch.equal(interpolate(z0, z1, 0.0), z0)
    assert torch.equal(interpolate(z0, z1, 1.0), z1)


def test_interpolate_linearity():
    z0 = torch.zeros(2, 2)
    z1 = torch.full((2, 2), 4.0)
    assert torch.equal(interpolate(z0, z1, 0.25), torch.ones(2, 2))


def test_interpolate_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        interpolate(torch.zeros(2, 2), torch.zeros(3, 3), 0.5)


# --- fm_loss -----------------------------------------------------------------

def test_fm_loss_perfect_prediction():
    z0 = torch.randn(3, 4, 4)
    z1 = torch.randn(3, 4, 4)
    oracle = FieldModel(lambda z, t: z1 - z0)
    assert fm_loss(oracle, z0, z1, 0.3, None).item() == pytest.approx(0.0)


def test_fm_loss_scalar_cases():
    z0 = torch.zeros(1)
    z1 = torch.full((1,), 2.0)
    zero_model = FieldModel(lambda z, t: torch.zeros_like(z))
    ones_model = FieldModel(lambda z, t: torch.ones_like(z))
    assert fm_loss(zero_model, z0, z1, 0.5, None).item() == pytest.approx(4.0)
    assert fm_loss(ones_model, z0, z1, 0.5, None).item() == pytest.approx(1.0)


def test_fm_loss_nonnegative_random():
    z0 = torch.randn(3, 4, 4)
    z1 = torch.randn(3, 4, 4)
    model = FieldModel(lambda z, t: torch.sin(z))
    for t in (0.0, 0.25, 0.9):
        assert fm_loss(model, z0, z1, t, None).item() >= 0.0


def test_fm_loss_rejects_nonfinite_model():
    bad = FieldModel(lambda z, t: torch.full_like(z, float("nan")))
    with pytest.raises(NonFiniteError, match="0.5"):
        fm_loss(bad, torch.zeros(2), torch.ones(2), 0.5, None)


# --- sample ------------------------------------------------------------------

def test_sample_constant_field_telescopes():
    z0 = torch.zeros(2, 3, 3)
    for n in (1, 3, 7):
        out = sample(CONSTANT, z0, make_schedule(n), None)
        assert torch.allclose(out, torch.full_like(z0, 0.75), atol=1e-7)


def test_sample_linear_field_one_step():
    out = sample(LINEAR, torch.ones(1), make_schedule(1), None)
    assert out.item() == pytest.approx(2.0)


def test_sample_linear_field_two_steps():
    # hand-run: 1 -> 1 + 0.5*1 = 1.5 -> 1.5 + 0.5*1.5 = 2.25
    out = sample(LINEAR, torch.ones(1), make_schedule(2), None)
    assert out.item() == pytest.approx(2.25)


def test_sample_rejects_nonfinite_state():
    exploding = FieldModel(lambda z, t: torch.full_like(z, float("inf")))
    with pytest.raises(NonFiniteError) as err:
        sample(exploding, torch.zeros(2), make_schedule(4), None)
    assert err.value.step_index == 0


# --- invert ------------------------------------------------------------------

def test_invert_one_step_linear_field():
    # 2 + (0 - 1) * v(2) = 2 - 2 = 0; NOT the Euler preimage 1.0
    out = invert(LINEAR, torch.full((1,), 2.0), make_schedule(1), None)
    assert out.item() == pytest.approx(0.0)


def test_constant_field_round_trip_exact():
    z0 = torch.randn(3, 4, 4, generator=torch.Generator().manual_seed(0))
    for n in (1, 4, 15):
        grid = make_schedule(n)
        back = invert(CONSTANT, sample(CONSTANT, z0, grid, None), grid, None)
        assert torch.allclose(back, z0, rtol=1e-6, atol=1e-7)


def test_round_trip_error_first_order():
    errors, ns = [], [2, 4, 8, 16, 32]
    for n in ns:
        grid = make_schedule(n)
        z0 = torch.ones(1, dtype=torch.float64)
        back = invert(LINEAR, sample(LINEAR, z0, grid, None), grid, None)
        errors.append(abs(back.item() - 1.0))
    order = empirical_order(errors, ns)
    assert 0.7 <= order <= 1.3, f"round-trip order {order}"


def test_sampling_error_first_order():
    errors, ns = [], [4, 8, 16, 32, 64]
    for n in ns:
        out = sample(LINEAR, torch.ones(1, dtype=torch.float64), make_schedule(n), None)
        errors.append(abs(out.item() - math.e))
    order = empirical_order(errors, ns)
    assert 0.7 <= order <= 1.3, f"forward order {order}"


def test_nonfinite_inversion_reports_step():
    trap = FieldModel(lambda z, t: torch.full_like(z, float("nan")) if t < 0.5 else z)
    with pytest.raises(NonFiniteError) as err:
        invert(trap, torch.ones(2), make_schedule(4), None)
    assert err.value.step_index is not None


# --- solvers -----------------------------------------------------------------

def test_get_solver_names():
    assert isinstance(get_solver("euler"), EulerStep)
    assert isinstance(get_solver("midpoint"), MidpointStep)
    with pytest.raises(ValueError):
        get_solver("rk4")


def test_midpoint_second_order_forward():
    errors, ns = [], [4, 8, 16, 32, 64]
    solver = MidpointStep()
    for n in ns:
        out = sample(LINEAR, torch.ones(1, dtype=torch.float64), make_schedule(n),
                     None, solver=solver)
        errors.append(abs(out.item() - math.e))
    order = empirical_order(errors, ns)
    assert 1.6 <= order <= 2.4, f"midpoint order {order}"


def test_midpoint_beats_euler_on_round_trip():
    grid = make_schedule(16)
    z0 = torch.ones(1, dtype=torch.float64)

    def trip(solver):
        return abs(invert(LINEAR, sample(LINEAR, z0, grid, None, solver=solver),
                          grid, None, solver=solver).item() - 1.0)

    assert trip(MidpointStep()) < trip(EulerStep()) / 4


def test_solver_rejects_zero_length_step():
    with pytest.raises(ValueError):
        EulerStep().step(LINEAR, torch.ones(1), 0.5, 0.5, None)


def test_sample_preserves_shape_and_finiteness():
    z0 = torch.randn(3, 8, 8)
    bounded = FieldModel(lambda z, t: torch.tanh(z))
    out = sample(bounded, z0, make_schedule(9), None)
    assert out.shape == z0.shape
    assert torch.isfinite(out).all()
