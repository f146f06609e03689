"""One FedCPSL client round.

A participating client refreshes its pseudo labels at the broadcast model,
runs ``Q`` momentum SGD steps with variance-reduced gradients on its copy of
the global model and, in lockstep, momentum SGD on its localized model, then
updates its control variate and reports the normalized local progress.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .data import ClientData, full_batch, sample_batch
from .nn import ModelSpec, forward
from .objective import (
    SemiSupHyper,
    grad_F_thetalc,
    grad_f_nu,
    grad_f_theta,
    gd_pseudo_label_step,
    solve_pseudo_labels,
)

DIVERGENCE_LIMIT = 1e8


class DivergenceError(FloatingPointError):
    def __init__(self, message, round_index=None, step=None, client_id=None):
        super().__init__(message)
        self.round_index = round_index
        self.step = step
        self.client_id = client_id


@dataclass(frozen=True)
class LocalPlan:
    q_steps: int
    gamma: float
    eta: float
    eta_c: float
    eta_v: float = 0.1

    def __post_init__(self):
        if self.q_steps < 1:
            raise ValueError(f"q_steps must be >= 1, got {self.q_steps}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.eta < 0 or self.eta_c < 0 or self.eta_v <= 0:
            raise ValueError("step sizes must be nonnegative (eta_v positive)")


@dataclass(frozen=True)
class ClientState:
    client_id: int
    theta_lc: np.ndarray
    c_i: np.ndarray
    nu: np.ndarray
    omega: float
    beta: float
    data: ClientData


@dataclass(frozen=True)
class ClientReport:
    delta: np.ndarray
    q_eff: float


@dataclass(frozen=True)
class RoundSettings:
    """Round-invariant knobs of local training shared by every client."""

    spec: ModelSpec
    hyper: SemiSupHyper
    s_l: int = 32
    s_u: int = 32
    full_batch: bool = False
    pseudo_label_mode: str = "closed_form"  # or "gd"
    use_unlabeled: bool = True


def momentum_weights(q: int, gamma: float) -> np.ndarray:
    """Weight of the gradient taken at local step ``t`` in the round's total displacement."""
    if q < 1:
        raise ValueError("q must be >= 1")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    t = np.arange(q)
    return (1.0 - gamma ** (q - t)) / (1.0 - gamma)


def effective_steps(q: int, gamma: float) -> float:
    if q < 1:
        raise ValueError("q must be >= 1")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    return q / (1.0 - gamma) - gamma * (1.0 - gamma ** q) / (1.0 - gamma) ** 2


def plan_local_steps(rng: np.random.Generator, epoch_range: tuple[int, int], steps_per_epoch: int) -> int:
    e_min, e_max = epoch_range
    if not 1 <= e_min <= e_max:
        raise ValueError(f"epoch range must satisfy 1 <= e_min <= e_max, got {epoch_range}")
    if steps_per_epoch < 1:
        raise ValueError("steps_per_epoch must be positive")
    return int(rng.integers(e_min, e_max + 1)) * steps_per_epoch


def steps_per_epoch(data: ClientData, s_l: int, s_u: int, use_unlabeled: bool = True) -> int:
    """Steps needed for one pass over the larger of the two training pools."""
    passes = [int(np.ceil(len(data.labeled) / s_l))] if s_l > 0 and len(data.labeled) else []
    if use_unlabeled and s_u > 0 and len(data.unlabeled):
        passes.append(int(np.ceil(len(data.unlabeled) / s_u)))
    return max(passes + [1])


def normalized_progress(delta: np.ndarray, eta: float, q_eff: float) -> np.ndarray:
    """``delta / (eta * q_eff)``, taken as zero when the step size is zero."""
    if eta == 0:
        return np.zeros_like(delta)
    return delta / (eta * q_eff)


def check_finite(vec: np.ndarray, what: str, **context) -> None:
    if not np.all(np.isfinite(vec)) or np.max(np.abs(vec)) > DIVERGENCE_LIMIT:
        where = ", ".join(f"{k}={v}" for k, v in context.items() if v is not None)
        raise DivergenceError(f"{what} diverged ({where})", context.get("round_index"),
                              context.get("step"), context.get("client_id"))


def update_pseudo_labels(state: ClientState, theta: np.ndarray, settings: RoundSettings,
                         eta_v: float) -> np.ndarray:
    """Pseudo labels for the full unlabeled set evaluated at the broadcast model."""
    if len(state.data.unlabeled) == 0:
        return state.nu
    h_u = forward(settings.spec, theta, state.data.unlabeled.inputs)
    if settings.pseudo_label_mode == "closed_form":
        return solve_pseudo_labels(h_u, settings.hyper)
    if settings.pseudo_label_mode == "gd":
        return gd_pseudo_label_step(state.nu, grad_f_nu(h_u, state.nu, settings.hyper), eta_v)
    raise ValueError(f"unknown pseudo_label_mode {settings.pseudo_label_mode!r}")


def draw_batch(data: ClientData, settings: RoundSettings, rng: np.random.Generator):
    if settings.full_batch:
        return full_batch(data.labeled, data.unlabeled, settings.use_unlabeled)
    s_u = settings.s_u if settings.use_unlabeled and len(data.unlabeled) else 0
    s_l = settings.s_l if len(data.labeled) else 0
    return sample_batch(data.labeled, data.unlabeled, s_l, s_u, rng)


StepHook = Callable[[int, dict], None]


def client_round(state: ClientState, theta_global: np.ndarray, c_global: np.ndarray, plan: LocalPlan,
                 rng: np.random.Generator, settings: RoundSettings, round_index: Optional[int] = None,
                 hook: Optional[StepHook] = None) -> tuple[ClientReport, ClientState]:
    """Run one round on a participating client and return its report and new state.

    ``hook(t, info)`` is called before each local step with the current
    iterates, momentum buffers and the gradients used at that step.
    """
    nu = update_pseudo_labels(state, theta_global, settings, plan.eta_v)

    theta_i = np.array(theta_global, dtype=np.float64)
    theta_lc = np.array(state.theta_lc, dtype=np.float64)
    mom = np.zeros_like(theta_i)
    mom_lc = np.zeros_like(theta_lc)
    correction = c_global - state.c_i
    spec, hyper = settings.spec, settings.hyper

    for t in range(plan.q_steps):
        batch = draw_batch(state.data, settings, rng)
        g = grad_f_theta(spec, theta_i, nu, batch, hyper)
        g_lc = grad_F_thetalc(spec, theta_lc, theta_i, nu, batch, hyper, state.beta)
        if hook is not None:
            hook(t, {"theta_i": theta_i.copy(), "theta_lc": theta_lc.copy(), "momentum": mom.copy(),
                     "momentum_lc": mom_lc.copy(), "grad": g, "grad_lc": g_lc})
        mom = plan.gamma * mom + g + correction
        theta_i = theta_i - plan.eta * mom
        mom_lc = plan.gamma * mom_lc + g_lc
        theta_lc = theta_lc - plan.eta_c * mom_lc
        check_finite(theta_i, "local model", round_index=round_index, step=t, client_id=state.client_id)
        check_finite(theta_lc, "localized model", round_index=round_index, step=t, client_id=state.client_id)

    q_eff = effective_steps(plan.q_steps, plan.gamma)
    delta = theta_i - theta_global
    c_new = state.c_i - (c_global + normalized_progress(delta, plan.eta, q_eff))
    return ClientReport(delta, q_eff), replace(state, theta_lc=theta_lc, c_i=c_new, nu=nu)
