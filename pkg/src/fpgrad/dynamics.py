"""Explicit-Euler relaxation of the free and nudged gradient dynamics.

The state follows ds/dt = -g(s) where g is either dE/ds (free phase) or
d(E + beta*C)/ds (nudged phase).  Integration is deliberately plain
explicit Euler with one shared step size: the process comparisons in the
equivalence harness need both phases and the error-derivative side
process to live on exactly the same time grid, and a higher-order
integrator would break that step-by-step alignment.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import model
from .exceptions import DivergenceError, ShapeError
from .model import Activation, Params, State


@dataclass(frozen=True)
class RelaxationConfig:
    """Euler integration settings.

    `tolerance` is a threshold on the infinity norm of the driving
    gradient; `record_every` = 0 records only the endpoints of a
    trajectory.
    """

    step_size: float = 0.1
    max_steps: int = 100_000
    tolerance: float = 1e-8
    record_every: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.tolerance <= 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.record_every < 0:
            raise ValueError(f"record_every must be >= 0, got {self.record_every}")


@dataclass
class Trajectory:
    """Recorded snapshots of one relaxation, aligned with times t_k = k*eps."""

    times: List[float]
    states: List[State]
    converged: bool
    steps_taken: int
    final_residual: float


def relax(force: Callable[[State], State], s_init: State, cfg: RelaxationConfig):
    """Iterate s <- s - eps * force(s) until the residual drops below
    tolerance or max_steps is reached.

    Returns (final state, Trajectory).  Convergence is checked before
    stepping, so a state that already satisfies the tolerance comes back
    unchanged with a single-snapshot trajectory.
    """
    eps = cfg.step_size
    s = model.copy_blocks(s_init)
    g = force(s)
    residual = model.inf_norm(g)
    times = [0.0]
    states = [model.copy_blocks(s)]
    last_recorded = 0
    k = 0
    # overflow is detected explicitly through the residual, not via warnings
    with np.errstate(over="ignore", invalid="ignore"):
        while residual > cfg.tolerance and k < cfg.max_steps:
            s = [sk - eps * gk for sk, gk in zip(s, g)]
            k += 1
            g = force(s)
            residual = model.inf_norm(g)
            # a non-finite component anywhere surfaces in the residual
            if not np.isfinite(residual):
                raise DivergenceError(f"non-finite state at step {k}", step=k)
            if cfg.record_every > 0 and k % cfg.record_every == 0:
                times.append(k * eps)
                states.append(model.copy_blocks(s))
                last_recorded = k
    if k > last_recorded:
        times.append(k * eps)
        states.append(model.copy_blocks(s))
    return s, Trajectory(
        times=times,
        states=states,
        converged=residual <= cfg.tolerance,
        steps_taken=k,
        final_residual=residual,
    )


def _free_force(theta: Params, x, s_init: State, act: Activation):
    # validate once and pin the input rates; the returned closure is the
    # per-step work
    model._check_network(theta, x, s_init)
    rho_x = act.f(np.asarray(x, dtype=float))
    return lambda s: model._grad_s_energy_given(theta, rho_x, s, act)


def _nudged_force(theta: Params, x, y, beta: float, s_init: State, act: Activation):
    model._check_network(theta, x, s_init)
    y = np.asarray(y, dtype=float)
    if np.shape(y) != np.shape(s_init[0]):
        raise ShapeError(
            f"target has shape {np.shape(y)}, output layer has {np.shape(s_init[0])}"
        )
    rho_x = act.f(np.asarray(x, dtype=float))

    def force(s):
        g = model._grad_s_energy_given(theta, rho_x, s, act)
        g[0] = g[0] + beta * (s[0] - y)
        return g

    return force


def relax_free(theta: Params, x, s_init: State, act: Activation, cfg: RelaxationConfig):
    """Relax under the energy gradient alone, towards a free fixed point."""
    return relax(_free_force(theta, x, s_init, act), s_init, cfg)


def relax_nudged(
    theta: Params,
    x,
    y,
    beta: float,
    s_init: State,
    act: Activation,
    cfg: RelaxationConfig,
):
    """Relax under the augmented gradient d(E + beta*C)/ds, beta >= 0.

    Warns when the tolerance is loose relative to beta: downstream
    consumers divide residual-sized quantities by beta, so the free
    fixed point feeding this phase should be located to well below
    beta * 1e-3.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if beta > 0 and cfg.tolerance > beta * 1e-3:
        warnings.warn(
            f"relaxation tolerance {cfg.tolerance:g} is loose relative to "
            f"beta {beta:g}; rescaled-velocity readouts divide by beta and "
            "will inherit the residual noise",
            stacklevel=2,
        )
    return relax(_nudged_force(theta, x, y, beta, s_init, act), s_init, cfg)


def path(force: Callable[[State], State], s_init: State, step_size: float, n_steps: int):
    """Run exactly n_steps Euler updates, recording every state.

    Returns a list of n_steps + 1 states including the initial one.  No
    convergence check: fixed-horizon flows are wanted as-is.
    """
    if step_size <= 0:
        raise ValueError(f"step_size must be positive, got {step_size}")
    if n_steps < 0:
        raise ValueError(f"n_steps must be >= 0, got {n_steps}")
    s = model.copy_blocks(s_init)
    out = [model.copy_blocks(s)]
    for k in range(1, n_steps + 1):
        g = force(s)
        s = [sk - step_size * gk for sk, gk in zip(s, g)]
        if not model.all_finite(s):
            raise DivergenceError(f"non-finite state at step {k}", step=k)
        out.append(model.copy_blocks(s))
    return out


def free_path(theta: Params, x, s_init: State, act: Activation, step_size: float, n_steps: int):
    return path(_free_force(theta, x, s_init, act), s_init, step_size, n_steps)


def nudged_path(
    theta: Params,
    x,
    y,
    beta: float,
    s_init: State,
    act: Activation,
    step_size: float,
    n_steps: int,
):
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return path(_nudged_force(theta, x, y, beta, s_init, act), s_init, step_size, n_steps)


def free_endpoint(theta: Params, x, s_init: State, act: Activation, step_size: float, n_steps: int) -> State:
    """Final state of a fixed-horizon free flow, without recording."""
    if step_size <= 0:
        raise ValueError(f"step_size must be positive, got {step_size}")
    force = _free_force(theta, x, s_init, act)
    s = model.copy_blocks(s_init)
    for _ in range(n_steps):
        g = force(s)
        s = [sk - step_size * gk for sk, gk in zip(s, g)]
    if not model.all_finite(s):
        raise DivergenceError("non-finite state during fixed-horizon flow")
    return s


def write_trajectory_csv(traj: Trajectory, path_or_file) -> None:
    """One row per recorded state component: t,layer,index,value."""
    close = False
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        f = open(path_or_file, "w")
        close = True
    else:
        f = path_or_file
    try:
        f.write("t,layer,index,value\n")
        for t, s in zip(traj.times, traj.states):
            for k, layer in enumerate(s):
                for i, val in enumerate(layer):
                    f.write(f"{t!r},{k},{i},{float(val)!r}\n")
    finally:
        if close:
            f.close()
