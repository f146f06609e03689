"""Comparison algorithms on the same objective, data and trace format.

* ``fedavg_ss``: plain local SGD on the semi-supervised cost, parameter averaging.
* ``fedshvrp``: SCAFFOLD-style control variates under partial participation,
  global model only, server step 1 on the mean participant update.
* ``apfl``: labeled data only, local SGD on the global copy and on the
  localized model of the output mixture, parameter averaging.
* ``apsfl``: ``apfl`` on the full semi-supervised cost.

Each client round returns ``(ClientReport, new ClientState)`` with
``q_eff`` set to the raw number of local steps.
"""

from __future__ import annotations

from dataclasses import replace
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .client import (
    ClientReport,
    ClientState,
    LocalPlan,
    RoundSettings,
    check_finite,
    draw_batch,
    update_pseudo_labels,
)
from .objective import SemiSupHyper, grad_F_thetalc, grad_f_theta


class AlgorithmKind(str, Enum):
    FEDCPSL = "fedcpsl"
    FEDAVG_SS = "fedavg_ss"
    FEDSHVRP = "fedshvrp"
    APFL = "apfl"
    APSFL = "apsfl"

    @property
    def has_localized_model(self) -> bool:
        return self in (AlgorithmKind.FEDCPSL, AlgorithmKind.APFL, AlgorithmKind.APSFL)

    @property
    def uses_unlabeled(self) -> bool:
        return self is not AlgorithmKind.APFL

    @property
    def uses_control_variates(self) -> bool:
        return self in (AlgorithmKind.FEDCPSL, AlgorithmKind.FEDSHVRP)


def labeled_only(settings: RoundSettings) -> RoundSettings:
    """Settings for APFL: unlabeled data and its cost terms switched off."""
    return replace(settings, hyper=SemiSupHyper(0.0, 0.0), use_unlabeled=False)


def _guard(vec, what, state, round_index, t):
    check_finite(vec, what, round_index=round_index, step=t, client_id=state.client_id)


def fedavg_ss_round(state: ClientState, theta: np.ndarray, plan: LocalPlan, rng: np.random.Generator,
                    settings: RoundSettings, round_index=None):
    nu = update_pseudo_labels(state, theta, settings, plan.eta_v)
    theta_i = np.array(theta, dtype=np.float64)
    for t in range(plan.q_steps):
        batch = draw_batch(state.data, settings, rng)
        theta_i = theta_i - plan.eta * grad_f_theta(settings.spec, theta_i, nu, batch, settings.hyper)
        _guard(theta_i, "local model", state, round_index, t)
    return ClientReport(theta_i - theta, float(plan.q_steps)), replace(state, nu=nu)


def fedshvrp_round(state: ClientState, theta: np.ndarray, c: np.ndarray, plan: LocalPlan,
                   rng: np.random.Generator, settings: RoundSettings, round_index=None):
    """SCAFFOLD local phase; the new client control is ``c_i - c + (theta - y) / (Q eta)``."""
    nu = update_pseudo_labels(state, theta, settings, plan.eta_v)
    y = np.array(theta, dtype=np.float64)
    for t in range(plan.q_steps):
        batch = draw_batch(state.data, settings, rng)
        g = grad_f_theta(settings.spec, y, nu, batch, settings.hyper)
        y = y - plan.eta * (g - state.c_i + c)
        _guard(y, "local model", state, round_index, t)
    if plan.eta > 0:
        c_new = state.c_i - c + (theta - y) / (plan.q_steps * plan.eta)
    else:
        c_new = state.c_i - c
    return ClientReport(y - theta, float(plan.q_steps)), replace(state, c_i=c_new, nu=nu)


def apsfl_round(state: ClientState, theta: np.ndarray, plan: LocalPlan, rng: np.random.Generator,
                settings: RoundSettings, round_index=None):
    """Plain local SGD on the global copy and the localized model, no momentum or control."""
    if settings.use_unlabeled:
        nu = update_pseudo_labels(state, theta, settings, plan.eta_v)
    else:
        nu = state.nu
    theta_i = np.array(theta, dtype=np.float64)
    theta_lc = np.array(state.theta_lc, dtype=np.float64)
    for t in range(plan.q_steps):
        batch = draw_batch(state.data, settings, rng)
        g = grad_f_theta(settings.spec, theta_i, nu, batch, settings.hyper)
        g_lc = grad_F_thetalc(settings.spec, theta_lc, theta_i, nu, batch, settings.hyper, state.beta)
        theta_i = theta_i - plan.eta * g
        theta_lc = theta_lc - plan.eta_c * g_lc
        _guard(theta_i, "local model", state, round_index, t)
        _guard(theta_lc, "localized model", state, round_index, t)
    return ClientReport(theta_i - theta, float(plan.q_steps)), replace(state, theta_lc=theta_lc, nu=nu)


def apfl_round(state: ClientState, theta: np.ndarray, plan: LocalPlan, rng: np.random.Generator,
               settings: RoundSettings, round_index=None):
    return apsfl_round(state, theta, plan, rng, labeled_only(settings), round_index)


def average_models(theta: np.ndarray, reports: Mapping[int, ClientReport], weights: Sequence[float]) -> np.ndarray:
    """Weighted average of the returned client models, weights renormalized over the participants."""
    ids = sorted(reports)
    w = np.array([weights[i] for i in ids], dtype=np.float64)
    w = w / w.sum()
    out = np.zeros_like(theta, dtype=np.float64)
    for wi, cid in zip(w, ids):
        out += wi * (theta + reports[cid].delta)
    return out


def scaffold_server_control(c: np.ndarray, old_states: Mapping[int, ClientState],
                            new_states: Mapping[int, ClientState], weights: Sequence[float]) -> np.ndarray:
    """``c + sum_i w_i (c_i_new - c_i_old)`` over the participants."""
    out = np.array(c, dtype=np.float64)
    for cid in sorted(new_states):
        out += weights[cid] * (new_states[cid].c_i - old_states[cid].c_i)
    return out
