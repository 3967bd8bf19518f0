"""Equilibrium propagation: two-phase gradient estimation.

The free phase relaxes to a fixed point s0 of the energy; the nudged
phase then relaxes under E + beta*C towards a nearby fixed point with
lower cost.  The objective gradient is estimated from the two endpoint
measurements

    (1/beta) * ( dE^beta/dW (s_nudged) - dE/dW (s_free) ),

which converges to the true gradient as beta -> 0.  Halting the nudged
phase after K steps instead of at convergence gives a truncated
estimate, and recording the rescaled state velocity along the way gives
the temporal-derivative process that the equivalence harness compares
against the error-derivative side process.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from . import dynamics, model
from .dynamics import RelaxationConfig
from .exceptions import ConvergenceError
from .model import Activation, Params, State

METHODS = ("rbp", "eqprop", "eqprop-truncated", "fd-oracle")


@dataclass(frozen=True)
class GradientEstimate:
    """A weight-shaped gradient plus provenance metadata."""

    grad: Params
    method: str
    step: float
    beta: Optional[float] = None
    horizon_t: Optional[float] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}'; expected one of {METHODS}")
        if not model.all_finite(self.grad):
            raise ValueError("gradient estimate contains non-finite entries")
        if self.method in ("eqprop", "eqprop-truncated"):
            if self.beta is None or self.beta <= 0:
                raise ValueError(f"method '{self.method}' requires beta > 0")
        elif self.beta is not None:
            raise ValueError(f"method '{self.method}' carries no beta")
        if self.method != "fd-oracle" and self.horizon_t is None:
            raise ValueError(f"method '{self.method}' requires horizon_t")


@dataclass
class TemporalProcessRecord:
    """Rescaled velocity and two-point readouts along a nudged trajectory."""

    times: List[float]
    s_tilde: List[State]
    theta_tilde: List[Params]
    beta: float


def tightened(cfg: RelaxationConfig, beta: float) -> RelaxationConfig:
    """Cap the tolerance at beta * 1e-3 so residuals survive the 1/beta
    rescaling of the second phase.  Also drops snapshot recording: none
    of the estimators read trajectories, only endpoints."""
    return replace(cfg, tolerance=min(cfg.tolerance, beta * 1e-3), record_every=0)


def _two_point_gradient(theta, x, y, beta, s_free, s_nudged, act) -> Params:
    """(1/beta) * (dE^beta/dW at the nudged state - dE/dW at the free state).

    The cost's weight derivative is zero for the quadratic cost but is
    included so the formula stays exact for costs that do touch the
    weights.
    """
    g_free = model.grad_theta_energy(theta, x, s_free, act)
    g_nudged = model.grad_theta_energy(theta, x, s_nudged, act)
    g_cost = model.grad_theta_cost(theta, y, s_nudged)
    return [
        (gn + beta * gc - gf) / beta
        for gn, gc, gf in zip(g_nudged, g_cost, g_free)
    ]


def _free_fixed_point(theta, x, act, cfg) -> State:
    s0, traj = dynamics.relax_free(theta, x, model.zero_state_like(theta), act, cfg)
    if not traj.converged:
        raise ConvergenceError(
            f"free phase did not converge within {cfg.max_steps} steps "
            f"(residual {traj.final_residual:.3e} > tolerance {cfg.tolerance:g})"
        )
    return s0


def eqprop_gradient(
    theta: Params,
    x,
    y,
    beta: float,
    act: Activation,
    cfg: RelaxationConfig,
    s_free: Optional[State] = None,
) -> GradientEstimate:
    """Two-fixed-point gradient estimate at influence beta > 0.

    Pass `s_free` to reuse an already-converged free fixed point; by
    default the free phase is run here, from the zero state, with the
    tolerance tightened to beta * 1e-3.
    """
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    cfg = tightened(cfg, beta)
    if s_free is None:
        s_free = _free_fixed_point(theta, x, act, cfg)
    s_nudged, traj = dynamics.relax_nudged(theta, x, y, beta, s_free, act, cfg)
    if not traj.converged:
        raise ConvergenceError(
            f"nudged phase did not converge within {cfg.max_steps} steps "
            f"(residual {traj.final_residual:.3e} > tolerance {cfg.tolerance:g})"
        )
    grad = _two_point_gradient(theta, x, y, beta, s_free, s_nudged, act)
    return GradientEstimate(
        grad=grad,
        method="eqprop",
        step=cfg.step_size,
        beta=beta,
        horizon_t=traj.steps_taken * cfg.step_size,
    )


def truncated_eqprop_gradient(
    theta: Params,
    x,
    y,
    beta: float,
    num_steps: int,
    act: Activation,
    cfg: RelaxationConfig,
    s_free: Optional[State] = None,
) -> GradientEstimate:
    """Same two-point formula, but the nudged phase is halted after
    exactly `num_steps` Euler updates."""
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if num_steps < 0:
        raise ValueError(f"num_steps must be >= 0, got {num_steps}")
    cfg = tightened(cfg, beta)
    if s_free is None:
        s_free = _free_fixed_point(theta, x, act, cfg)
    states = dynamics.nudged_path(theta, x, y, beta, s_free, act, cfg.step_size, num_steps)
    grad = _two_point_gradient(theta, x, y, beta, s_free, states[-1], act)
    return GradientEstimate(
        grad=grad,
        method="eqprop-truncated",
        step=cfg.step_size,
        beta=beta,
        horizon_t=num_steps * cfg.step_size,
    )


def temporal_derivative_process(
    theta: Params,
    x,
    y,
    beta: float,
    num_steps: int,
    act: Activation,
    cfg: RelaxationConfig,
    s_free: Optional[State] = None,
) -> TemporalProcessRecord:
    """Record, along a K-step nudged trajectory from the free fixed point,

      s_tilde_k  = (1/beta) * d(E + beta*C)/ds at the k-th state, i.e. the
                   exact instantaneous -(1/beta) * ds/dt of the phase, and
      theta_tilde_k = the two-point gradient readout at the k-th state.

    Under explicit Euler the analytic velocity equals the forward state
    difference (s_{k+1} - s_k)/eps exactly, so no finite differencing of
    the trajectory is needed.
    """
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if num_steps < 0:
        raise ValueError(f"num_steps must be >= 0, got {num_steps}")
    cfg = tightened(cfg, beta)
    if s_free is None:
        s_free = _free_fixed_point(theta, x, act, cfg)
    states = dynamics.nudged_path(theta, x, y, beta, s_free, act, cfg.step_size, num_steps)
    times = []
    s_tilde = []
    theta_tilde = []
    for k, sk in enumerate(states):
        g = model.grad_s_augmented(theta, x, y, sk, beta, act)
        s_tilde.append([gb / beta for gb in g])
        theta_tilde.append(_two_point_gradient(theta, x, y, beta, s_free, sk, act))
        times.append(k * cfg.step_size)
    return TemporalProcessRecord(times=times, s_tilde=s_tilde, theta_tilde=theta_tilde, beta=beta)


def write_temporal_csv(record: TemporalProcessRecord, path_or_file) -> None:
    """Rows t,kind,layer_or_block,index,value with kind in {s_tilde, theta_tilde}.

    Matrix entries are flattened row-major within their block.
    """
    close = False
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        f = open(path_or_file, "w")
        close = True
    else:
        f = path_or_file
    try:
        f.write("t,kind,layer_or_block,index,value\n")
        for t, sv, tv in zip(record.times, record.s_tilde, record.theta_tilde):
            for k, layer in enumerate(sv):
                for i, val in enumerate(layer):
                    f.write(f"{t!r},s_tilde,{k},{i},{float(val)!r}\n")
            for k, block in enumerate(tv):
                for i, val in enumerate(np.ravel(block)):
                    f.write(f"{t!r},theta_tilde,{k},{i},{float(val)!r}\n")
    finally:
        if close:
            f.close()
