"""Flow-matching math: interpolation path, training loss, and discretized
forward/reverse ODE solving over a pluggable solver interface.

States are plain torch tensors. Velocity models expose
``evaluate(state, t, condition, controller=None, tag=None) -> tensor`` and the
solvers below work with anything that satisfies that signature, trained
networks and synthetic test fields alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import torch
from torch import Tensor

from .errors import NonFiniteError, ShapeMismatchError

Phase = str  # "inversion" | "sampling" | "free"


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing discretization of [0, 1]; shared by sampling and inversion."""

    times: tuple[float, ...]

    def __post_init__(self):
        if len(self.times) < 2:
            raise ValueError(f"time grid needs at least 2 points, got {len(self.times)}")
        if self.times[0] != 0.0 or self.times[-1] != 1.0:
            raise ValueError(f"time grid must span [0, 1], got [{self.times[0]}, {self.times[-1]}]")
        for a, b in zip(self.times, self.times[1:]):
            if not b > a:
                raise ValueError(f"time grid must be strictly increasing, got {a} >= {b}")

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, i: int) -> float:
        return self.times[i]

    @property
    def num_steps(self) -> int:
        return len(self.times) - 1


def make_schedule(num_steps: int, spacing: str = "uniform") -> TimeGrid:
    """Build the time grid {0, 1/N, ..., 1} with N solver steps."""
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if spacing != "uniform":
        raise ValueError(f"unknown spacing {spacing!r}; only 'uniform' is supported")
    times = tuple(i / num_steps for i in range(num_steps + 1))
    # Guard against float rounding at the endpoints.
    return TimeGrid((0.0,) + times[1:-1] + (1.0,))


@dataclass(frozen=True)
class EvalTag:
    """Position of one model evaluation inside a solver run.

    ``step_index`` is the grid index of the step's canonical evaluation time
    (its from-time): sampling step i carries index i (evaluates at t_i) and
    the inversion step from t_i carries index i as well, so a cache record and
    the sampling step that consumes it sit at the equal t value. ``canonical``
    marks the single evaluation per step that controllers use for
    caching/injection; multi-evaluation solvers mark only their first
    evaluation canonical.
    """

    phase: Phase = "free"
    step_index: int = 0
    t: float = 0.0
    canonical: bool = True


class VelocityModel(Protocol):
    def evaluate(self, state: Tensor, t: float, condition, controller=None,
                 tag: Optional[EvalTag] = None) -> Tensor: ...


class SolverStep(Protocol):
    name: str

    def step(self, model: VelocityModel, state: Tensor, t_from: float, t_to: float,
             condition, controller=None, phase: Phase = "free",
             step_index: int = 0) -> Tensor: ...


class EulerStep:
    """First-order step: state + (t_to - t_from) * v(state, t_from).

    Works in both directions; with t_to < t_from it realizes the reverse-ODE
    update used for inversion.
    """

    name = "euler"

    def step(self, model, state, t_from, t_to, condition, controller=None,
             phase="free", step_index=0):
        if t_from == t_to:
            raise ValueError(f"degenerate solver step at t={t_from}")
        tag = EvalTag(phase=phase, step_index=step_index, t=t_from, canonical=True)
        v = model.evaluate(state, t_from, condition, controller=controller, tag=tag)
        if v.shape != state.shape:
            raise ShapeMismatchError(f"velocity shape {tuple(v.shape)} != state shape {tuple(state.shape)}")
        return state + (t_to - t_from) * v


class MidpointStep:
    """Second-order explicit midpoint step; two model evaluations per step.

    The first evaluation (at t_from) is the canonical one for controllers, so
    caches recorded with this solver share keys with Euler on the same grid.
    """

    name = "midpoint"

    def step(self, model, state, t_from, t_to, condition, controller=None,
             phase="free", step_index=0):
        if t_from == t_to:
            raise ValueError(f"degenerate solver step at t={t_from}")
        dt = t_to - t_from
        tag0 = EvalTag(phase=phase, step_index=step_index, t=t_from, canonical=True)
        v0 = model.evaluate(state, t_from, condition, controller=controller, tag=tag0)
        t_mid = t_from + 0.5 * dt
        tag1 = EvalTag(phase=phase, step_index=step_index, t=t_mid, canonical=False)
        v_mid = model.evaluate(state + 0.5 * dt * v0, t_mid, condition,
                               controller=controller, tag=tag1)
        if v_mid.shape != state.shape:
            raise ShapeMismatchError(f"velocity shape {tuple(v_mid.shape)} != state shape {tuple(state.shape)}")
        return state + dt * v_mid


_SOLVERS = {"euler": EulerStep, "midpoint": MidpointStep}


def get_solver(name: str) -> SolverStep:
    try:
        return _SOLVERS[name]()
    except KeyError:
        raise ValueError(f"unknown solver {name!r}; available: {sorted(_SOLVERS)}") from None


def interpolate(z0: Tensor, z1: Tensor, t: float) -> Tensor:
    """Straight-path interpolant t*z1 + (1-t)*z0."""
    if z0.shape != z1.shape:
        raise ShapeMismatchError(f"z0 shape {tuple(z0.shape)} != z1 shape {tuple(z1.shape)}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    return t * z1 + (1.0 - t) * z0


def fm_loss(model: VelocityModel, z0: Tensor, z1: Tensor, t: float, condition) -> Tensor:
    """Squared-error flow-matching objective at a single (z0, z1, t) triple.

    Returns the mean over elements of ((z1 - z0) - v(z_t, t))^2 as a scalar
    tensor (differentiable when the model is).
    """
    z_t = interpolate(z0, z1, t)
    v = model.evaluate(z_t, t, condition)
    if not torch.isfinite(v).all():
        raise NonFiniteError(f"model produced non-finite velocity at t={t}")
    target = z1 - z0
    return ((target - v) ** 2).mean()


StepHook = Callable[[int, float, float, Tensor, Tensor], None]


def _run(model, state, grid: TimeGrid, condition, solver, controller,
         phase: Phase, indices: Sequence[int], reverse: bool,
         step_hook: Optional[StepHook] = None) -> Tensor:
    if not torch.isfinite(state).all():
        raise NonFiniteError(f"initial state is non-finite ({phase})")
    solver = solver or EulerStep()
    for i in indices:
        # step_index = grid index of the from-time, so inversion records and
        # sampling reads at the same t share a key
        t_from, t_to = (grid[i + 1], grid[i]) if reverse else (grid[i], grid[i + 1])
        step_index = i + 1 if reverse else i
        new_state = solver.step(model, state, t_from, t_to, condition,
                                controller=controller, phase=phase, step_index=step_index)
        if new_state.shape != state.shape:
            raise ShapeMismatchError(
                f"solver changed state shape {tuple(state.shape)} -> {tuple(new_state.shape)}")
        if not torch.isfinite(new_state).all():
            raise NonFiniteError(f"non-finite state after {phase} step {i} "
                                 f"(t {t_from} -> {t_to})", step_index=i)
        if step_hook is not None:
            step_hook(i, t_from, t_to, state, new_state)
        state = new_state
    return state


def sample(model: VelocityModel, z0: Tensor, grid: TimeGrid, condition,
           solver: Optional[SolverStep] = None, controller=None,
           step_hook: Optional[StepHook] = None) -> Tensor:
    """Integrate the flow ODE forward from t=0 to t=1 over the grid."""
    return _run(model, z0, grid, condition, solver, controller,
                phase="sampling", indices=range(grid.num_steps), reverse=False,
                step_hook=step_hook)


def invert(model: VelocityModel, z1: Tensor, grid: TimeGrid, condition,
           solver: Optional[SolverStep] = None, controller=None,
           step_hook: Optional[StepHook] = None) -> Tensor:
    """Integrate the flow ODE backward from t=1 to t=0 over the grid.

    Step i traverses [t_i, t_{i+1}] downward evaluating the model at the
    current state, so inversion of an Euler-sampled trajectory carries a
    first-order round-trip error except for state-independent fields.
    Attention records reach the controller through the model at every
    evaluation; step i of inversion shares its cache key with step i of
    sampling.
    """
    return _run(model, z1, grid, condition, solver, controller,
                phase="inversion", indices=range(grid.num_steps - 1, -1, -1),
                reverse=True, step_hook=step_hook)


def empirical_order(errors: Sequence[float], step_counts: Sequence[int]) -> float:
    """Log-log regression slope of error against step count (sign-flipped)."""
    if len(errors) != len(step_counts) or len(errors) < 2:
        raise ValueError("need matching error/step sequences of length >= 2")
    xs = [math.log(n) for n in step_counts]
    ys = [math.log(e) for e in errors]
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    slope = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / sum((x - mx) ** 2 for x in xs)
    return -slope
