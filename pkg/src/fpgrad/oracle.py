"""Independent numerical oracles for everything the analytic code claims.

These functions never call the analytic derivative being checked: the
objective gradient is probed by re-relaxing the network under perturbed
weights, Hessian-vector products by differencing first derivatives, and
the two structural identities (the backward equation of the projected
cost, and the envelope derivative of the relaxed augmented energy) by
direct evaluation.  Keeping this module self-contained is the point; do
not "optimise" it by routing through the closed forms it exists to
audit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import dynamics, model
from .dynamics import RelaxationConfig
from .eqprop import GradientEstimate
from .exceptions import BasinJumpError, ConvergenceError
from .model import Activation, Params, State

# perturbed relaxations that land farther than this from the reference
# fixed point (infinity norm) are assumed to have left its basin
BASIN_JUMP_THRESHOLD = 0.5

# hysteresis-suppression tolerance for oracle relaxations
_ORACLE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class FDConfig:
    """Finite-difference settings: central scheme only.

    `warm_start` reuses the unperturbed fixed point as the initial state
    of every perturbed relaxation, keeping all evaluations in one basin.
    """

    delta: float = 1e-4
    scheme: str = "central"
    warm_start: bool = True

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.scheme != "central":
            raise ValueError(f"unsupported scheme '{self.scheme}'")


def _steps_for(t: float, step_size: float) -> int:
    if t < 0:
        raise ValueError(f"duration must be >= 0, got {t}")
    n = t / step_size
    n_round = round(n)
    if abs(n - n_round) > 1e-9 * max(1.0, abs(n)):
        raise ValueError(
            f"duration {t!r} is not an integer multiple of step size {step_size!r}"
        )
    return int(n_round)


def projected_cost(
    theta: Params,
    x,
    y,
    s_init: State,
    t: float,
    act: Activation,
    cfg: RelaxationConfig,
) -> float:
    """Cost of the state reached by relaxing freely from s_init for
    duration t (exactly t/eps Euler steps, no early stopping)."""
    n = _steps_for(t, cfg.step_size)
    s_end = dynamics.free_endpoint(theta, x, s_init, act, cfg.step_size, n)
    return model.cost(y, s_end)


def _relaxed_fixed_point(force, s_init, cfg):
    s, traj = dynamics.relax(force, s_init, cfg)
    if not traj.converged:
        raise ConvergenceError(
            f"oracle relaxation did not converge within {cfg.max_steps} steps "
            f"(residual {traj.final_residual:.3e})"
        )
    return s


def fd_objective_gradient(
    theta: Params,
    x,
    y,
    act: Activation,
    cfg: RelaxationConfig,
    fd: FDConfig = None,
) -> GradientEstimate:
    """Central difference of the objective J = cost at the free fixed point,
    one full relaxation per perturbed weight entry.

    All relaxations use a tolerance tightened to 1e-12 and, with
    warm_start, begin at the unperturbed fixed point; a perturbed fixed
    point landing farther than BASIN_JUMP_THRESHOLD from it aborts the
    probe, since the objective is only differentiable within one basin.
    """
    fd = fd or FDConfig()
    tight = replace(
        cfg, tolerance=min(cfg.tolerance, _ORACLE_TOLERANCE), record_every=0
    )
    zero = model.zero_state_like(theta)
    s0 = _relaxed_fixed_point(
        lambda s: model.grad_s_energy(theta, x, s, act), zero, tight
    )
    start = s0 if fd.warm_start else zero

    def objective_at(perturbed):
        sp = _relaxed_fixed_point(
            lambda s: model.grad_s_energy(perturbed, x, s, act), start, tight
        )
        drift = model.inf_norm([a - b for a, b in zip(sp, s0)])
        if drift > BASIN_JUMP_THRESHOLD:
            raise BasinJumpError(
                f"perturbed relaxation settled {drift:.3f} away from the "
                "reference fixed point; finite difference would straddle basins"
            )
        return model.cost(y, sp)

    grad = []
    for k, w in enumerate(theta):
        g = np.zeros_like(w)
        for idx in np.ndindex(*w.shape):
            perturbed = model.copy_blocks(theta)
            perturbed[k][idx] = w[idx] + fd.delta
            j_plus = objective_at(perturbed)
            perturbed[k][idx] = w[idx] - fd.delta
            j_minus = objective_at(perturbed)
            g[idx] = (j_plus - j_minus) / (2.0 * fd.delta)
        grad.append(g)
    return GradientEstimate(grad=grad, method="fd-oracle", step=cfg.step_size)


def fd_hvp_ss(theta: Params, x, s: State, v: State, act: Activation, fd: FDConfig = None) -> State:
    """Directional central difference of dE/ds along v."""
    fd = fd or FDConfig(delta=1e-5)
    scale = np.sqrt(sum(float(np.dot(vk, vk)) for vk in v))
    if scale == 0.0:
        return [np.zeros_like(sk) for sk in s]
    unit = [vk / scale for vk in v]
    h = fd.delta
    g_plus = model.grad_s_energy(theta, x, model.add_scaled(s, h, unit), act)
    g_minus = model.grad_s_energy(theta, x, model.add_scaled(s, -h, unit), act)
    return [(gp - gm) * (scale / (2.0 * h)) for gp, gm in zip(g_plus, g_minus)]


def fd_hvp_theta_s(theta: Params, x, s: State, v: State, act: Activation, fd: FDConfig = None) -> Params:
    """Directional central difference of dE/dW along a state direction v."""
    fd = fd or FDConfig(delta=1e-5)
    scale = np.sqrt(sum(float(np.dot(vk, vk)) for vk in v))
    if scale == 0.0:
        return model.zero_params_like(theta)
    unit = [vk / scale for vk in v]
    h = fd.delta
    g_plus = model.grad_theta_energy(theta, x, model.add_scaled(s, h, unit), act)
    g_minus = model.grad_theta_energy(theta, x, model.add_scaled(s, -h, unit), act)
    return [(gp - gm) * (scale / (2.0 * h)) for gp, gm in zip(g_plus, g_minus)]


def check_backward_identity(
    theta: Params,
    x,
    y,
    s: State,
    t: float,
    act: Activation,
    cfg: RelaxationConfig,
    fd: FDConfig = None,
) -> float:
    """Residual of dL/dt + <dL/ds, dE/ds> at (s, t), where L(s, t) is the
    projected cost.  Along the free flow the projected cost is constant,
    which is exactly this identity; a small residual certifies the
    projected-cost machinery numerically.

    dL/dt is a central difference over one integration step (forward at
    t = 0); dL/ds is a central difference per state component.
    """
    fd = fd or FDConfig()
    eps = cfg.step_size
    n = _steps_for(t, eps)
    if n == 0:
        l0 = projected_cost(theta, x, y, s, 0.0, act, cfg)
        l1 = projected_cost(theta, x, y, s, eps, act, cfg)
        dl_dt = (l1 - l0) / eps
    else:
        l_plus = projected_cost(theta, x, y, s, (n + 1) * eps, act, cfg)
        l_minus = projected_cost(theta, x, y, s, (n - 1) * eps, act, cfg)
        dl_dt = (l_plus - l_minus) / (2.0 * eps)
    g = model.grad_s_energy(theta, x, s, act)
    dot = 0.0
    for k in range(len(s)):
        for i in range(s[k].shape[0]):
            sp = model.copy_blocks(s)
            sp[k][i] += fd.delta
            l_plus = projected_cost(theta, x, y, sp, n * eps, act, cfg)
            sp[k][i] -= 2.0 * fd.delta
            l_minus = projected_cost(theta, x, y, sp, n * eps, act, cfg)
            dot += (l_plus - l_minus) / (2.0 * fd.delta) * g[k][i]
    return abs(dl_dt + dot)


def check_dbeta_energy_identity(
    theta: Params,
    x,
    y,
    beta: float,
    act: Activation,
    cfg: RelaxationConfig,
    fd: FDConfig = None,
) -> float:
    """Residual of d/db [E + b*C](s at the b-fixed-point) = C at the
    b-fixed-point, evaluated at b = beta by central difference.

    This envelope identity is what makes the two-point estimator work:
    the state's own sensitivity drops out at a fixed point.  The probe
    relaxes under E + b*C for b = beta +/- delta directly (b may pass
    slightly below zero when beta = 0; the blended energy still has a
    nearby minimum for |b| small).
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    fd = fd or FDConfig()
    tight = replace(
        cfg, tolerance=min(cfg.tolerance, _ORACLE_TOLERANCE), record_every=0
    )
    zero = model.zero_state_like(theta)
    s0 = _relaxed_fixed_point(
        lambda s: model.grad_s_energy(theta, x, s, act), zero, tight
    )

    def blended_force(b):
        def force(s):
            ge = model.grad_s_energy(theta, x, s, act)
            gc = model.grad_s_cost(y, s)
            return [a + b * c for a, c in zip(ge, gc)]

        return force

    def relaxed_value(b):
        sb = _relaxed_fixed_point(blended_force(b), s0, tight)
        return model.energy(theta, x, sb, act) + b * model.cost(y, sb), sb

    f_plus, _ = relaxed_value(beta + fd.delta)
    f_minus, _ = relaxed_value(beta - fd.delta)
    _, s_beta = relaxed_value(beta)
    return abs((f_plus - f_minus) / (2.0 * fd.delta) - model.cost(y, s_beta))


def gradient_report(estimate: Params, reference: Params, tol: float, floor: float) -> dict:
    """Per-block comparison of two weight-shaped gradients.

    An entry passes when |est - ref| <= max(tol * |ref|, floor); the
    reported relative error is |est - ref| / max(|ref|, floor / tol), so
    the block passes iff max_rel_error <= tol.
    """
    blocks = []
    overall_max = 0.0
    for k, (est, ref) in enumerate(zip(estimate, reference)):
        err = np.abs(np.asarray(est) - np.asarray(ref))
        denom = np.maximum(np.abs(ref), floor / tol)
        rel = err / denom
        worst = int(np.argmax(rel))
        blocks.append(
            {
                "block": k,
                "max_rel_error": float(np.max(rel)),
                "mean_rel_error": float(np.mean(rel)),
                "worst_index": [int(i) for i in np.unravel_index(worst, np.shape(ref))],
            }
        )
        overall_max = max(overall_max, float(np.max(rel)))
    return {
        "tolerance": tol,
        "floor": floor,
        "max_rel_error": overall_max,
        "passed": overall_max <= tol,
        "blocks": blocks,
    }
